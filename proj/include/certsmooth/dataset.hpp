#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "certsmooth/error.hpp"
#include "certsmooth/random.hpp"
#include "certsmooth/tensor.hpp"

namespace certsmooth {

enum class Mode { NR, FR };

inline std::string mode_name(Mode m) { return m == Mode::NR ? "NR" : "FR"; }

inline Mode parse_mode(const std::string& s) {
  if (s == "NR" || s == "nr") return Mode::NR;
  if (s == "FR" || s == "fr") return Mode::FR;
  throw InvalidInput("unknown mode '" + s + "' (expected NR or FR)");
}

enum class Distortion { none, noise, blur };

// NR: `image` only. FR: `reference` holds the clean image, `image` the distorted one.
struct InputRecord {
  std::string id;
  Tensor image;
  std::optional<Tensor> reference;
  double mos = 0.0;
  double severity = -1.0;  // synthetic only; -1 when unknown
  Distortion distortion = Distortion::none;
};

struct QualityDataset {
  std::string name;
  std::uint64_t seed = 0;
  Mode mode = Mode::NR;
  std::vector<InputRecord> records;
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;

  Shape image_shape() const {
    detail::require(!records.empty(), "dataset is empty");
    return records.front().image.shape();
  }
};

// Seeded permutation split; the first round(fraction * n) indices train.
inline void assign_split(QualityDataset& ds, double train_fraction = 0.8) {
  detail::require(train_fraction > 0.0 && train_fraction < 1.0, "split: train fraction must lie in (0, 1)");
  const std::size_t n = ds.records.size();
  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;
  CounterRng rng(derive_seed(ds.seed, 0x5117), 0);
  for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
  const auto cut = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(n)));
  ds.train.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(cut));
  ds.test.assign(perm.begin() + static_cast<std::ptrdiff_t>(cut), perm.end());
  std::sort(ds.train.begin(), ds.train.end());
  std::sort(ds.test.begin(), ds.test.end());
}

namespace detail {

inline void fnv_bytes(std::uint64_t& h, const void* p, std::size_t n) {
  const auto* b = static_cast<const unsigned char*>(p);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= b[i];
    h *= 0x100000001b3ULL;
  }
}

inline void fnv_tensor(std::uint64_t& h, const Tensor& t) {
  for (std::size_t e : t.shape()) {
    const auto v = static_cast<std::uint64_t>(e);
    fnv_bytes(h, &v, sizeof v);
  }
  for (double v : t.values()) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    fnv_bytes(h, &bits, sizeof bits);
  }
}

inline double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

// Sinusoid plus checkerboard texture, values clamped to [0, 1].
inline Tensor base_texture(const Shape& shape, CounterRng& rng) {
  const std::size_t c = shape[0], h = shape[1], w = shape[2];
  const double fx = rng.uniform(0.5, 2.5), fy = rng.uniform(0.5, 2.5);
  const double amp = rng.uniform(0.2, 0.25), checker = rng.uniform(0.05, 0.1);
  const double mean = rng.uniform(0.45, 0.55);
  const std::size_t period = std::size_t{1} << rng.below(3);
  Tensor t(shape);
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const double wave = std::sin(2.0 * std::numbers::pi * (fx * x / w + fy * y / h) + phase);
        const double sq = ((y / period + x / period) % 2 == 0) ? 0.5 : -0.5;
        t[(ch * h + y) * w + x] = clamp01(mean + amp * wave + checker * sq);
      }
  }
  return t;
}

// 3x3 box filter with edge replication, per channel.
inline Tensor box_blur(const Tensor& img) {
  const std::size_t c = img.shape()[0], h = img.shape()[1], w = img.shape()[2];
  Tensor out(img.shape());
  const auto at = [&](std::size_t ch, long y, long x) {
    y = std::clamp(y, 0L, static_cast<long>(h) - 1);
    x = std::clamp(x, 0L, static_cast<long>(w) - 1);
    return img[(ch * h + static_cast<std::size_t>(y)) * w + static_cast<std::size_t>(x)];
  };
  for (std::size_t ch = 0; ch < c; ++ch)
    for (long y = 0; y < static_cast<long>(h); ++y)
      for (long x = 0; x < static_cast<long>(w); ++x) {
        double s = 0.0;
        for (long dy = -1; dy <= 1; ++dy)
          for (long dx = -1; dx <= 1; ++dx) s += at(ch, y + dy, x + dx);
        out[(ch * h + static_cast<std::size_t>(y)) * w + static_cast<std::size_t>(x)] = s / 9.0;
      }
  return out;
}

}  // namespace detail

constexpr double kSynthNoiseStd = 0.5;  // additive noise std at severity 1
constexpr int kSynthBlurPasses = 3;     // box-blur passes blended in at severity 1
constexpr double kSynthJitter = 0.02;

// Applies a synthetic distortion of severity s in [0, 1].
inline Tensor distort(const Tensor& clean, Distortion kind, double s, CounterRng& rng) {
  detail::require(s >= 0.0 && s <= 1.0, "distort: severity must lie in [0, 1]");
  Tensor out = clean;
  if (kind == Distortion::noise) {
    for (double& v : out.values()) v = detail::clamp01(v + kSynthNoiseStd * s * rng.normal());
  } else if (kind == Distortion::blur) {
    Tensor blurred = clean;
    for (int p = 0; p < kSynthBlurPasses; ++p) blurred = detail::box_blur(blurred);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = (1.0 - s) * clean[i] + s * blurred[i];
  }
  return out;
}

// One synthetic item; pure function of (seed, index, severity, kind).
inline InputRecord synth_item(std::uint64_t seed, std::size_t index, double severity, Distortion kind, Mode mode,
                              const Shape& shape = {3, 8, 8}) {
  detail::require(shape.size() == 3, "synth: image shape must be CxHxW");
  CounterRng rng(derive_seed(seed, 0x5EED), index);
  InputRecord r;
  r.id = "item" + std::to_string(index);
  const Tensor clean = detail::base_texture(shape, rng);
  r.image = distort(clean, kind, severity, rng);
  if (mode == Mode::FR) r.reference = clean;
  r.severity = severity;
  r.distortion = kind;
  r.mos = detail::clamp01(1.0 - severity + rng.uniform(-kSynthJitter, kSynthJitter));
  return r;
}

// Procedural textures with graded noise or blur; MOS = 1 - severity plus jitter.
inline QualityDataset synth_dataset(std::uint64_t seed, std::size_t n_items, Mode mode, const Shape& shape = {3, 8, 8}) {
  detail::require(n_items >= 10, "synth_dataset: need at least 10 items");
  QualityDataset ds;
  ds.name = "synth-" + mode_name(mode) + "-" + std::to_string(seed);
  ds.seed = seed;
  ds.mode = mode;
  CounterRng rng(derive_seed(seed, 0xD157), 0);
  ds.records.reserve(n_items);
  for (std::size_t i = 0; i < n_items; ++i) {
    const double s = rng.uniform();
    const Distortion kind = rng.below(2) == 0 ? Distortion::noise : Distortion::blur;
    ds.records.push_back(synth_item(seed, i, s, kind, mode, shape));
  }
  assign_split(ds);
  return ds;
}

// Stable hash of mode, shapes, pixel data and MOS, as 16 hex digits.
inline std::string fingerprint(const QualityDataset& ds) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  const int mode = ds.mode == Mode::NR ? 0 : 1;
  detail::fnv_bytes(h, &mode, sizeof mode);
  for (const auto& r : ds.records) {
    if (r.reference) detail::fnv_tensor(h, *r.reference);
    detail::fnv_tensor(h, r.image);
    const auto bits = std::bit_cast<std::uint64_t>(r.mos);
    detail::fnv_bytes(h, &bits, sizeof bits);
  }
  std::ostringstream out;
  out << std::hex;
  out.width(16);
  out.fill('0');
  out << h;
  return out.str();
}

// ---- raw tensor files: "QTNS", u32 rank, 4 x u16 extents, then little-endian doubles.

inline void write_qtns(const Tensor& t, const std::filesystem::path& path) {
  static_assert(std::endian::native == std::endian::little, "QTNS writer assumes a little-endian host");
  const auto& shape = t.shape();
  detail::require(!shape.empty() && shape.size() <= 4, "qtns: rank must be 1..4");
  std::array<std::uint16_t, 4> extents{};
  for (std::size_t i = 0; i < shape.size(); ++i) {
    detail::require(shape[i] <= 0xFFFF, "qtns: extent exceeds 65535");
    extents[i] = static_cast<std::uint16_t>(shape[i]);
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  const auto rank = static_cast<std::uint32_t>(shape.size());
  out.write("QTNS", 4);
  out.write(reinterpret_cast<const char*>(&rank), sizeof rank);
  out.write(reinterpret_cast<const char*>(extents.data()), sizeof extents);
  out.write(reinterpret_cast<const char*>(t.data().data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
  if (!out) throw IoError("failed writing " + path.string());
}

inline Tensor read_qtns(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  char magic[4];
  std::uint32_t rank = 0;
  std::array<std::uint16_t, 4> extents{};
  in.read(magic, 4);
  in.read(reinterpret_cast<char*>(&rank), sizeof rank);
  in.read(reinterpret_cast<char*>(extents.data()), sizeof extents);
  if (!in || std::memcmp(magic, "QTNS", 4) != 0) throw IoError(path.string() + ": not a QTNS tensor file");
  if (rank == 0 || rank > 4) throw IoError(path.string() + ": bad rank " + std::to_string(rank));
  Shape shape(extents.begin(), extents.begin() + rank);
  for (std::size_t e : shape)
    if (e == 0) throw IoError(path.string() + ": zero extent");
  std::vector<double> data(shape_size(shape));
  in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(double)));
  if (!in) throw IoError(path.string() + ": truncated payload");
  if (in.peek() != std::char_traits<char>::eof()) throw IoError(path.string() + ": trailing bytes after payload");
  Tensor t(std::move(shape), std::move(data));
  if (!t.all_finite()) throw IoError(path.string() + ": non-finite pixel values");
  return t;
}

// ---- CSV ingestion

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) {
    const auto b = cell.find_first_not_of(" \t\r");
    const auto e = cell.find_last_not_of(" \t\r");
    cells.push_back(b == std::string::npos ? "" : cell.substr(b, e - b + 1));
  }
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

inline std::optional<double> parse_real(const std::string& s) {
  if (s.empty()) return std::nullopt;
  std::size_t used = 0;
  try {
    const double v = std::stod(s, &used);
    if (used != s.size() || !std::isfinite(v)) return std::nullopt;
    return v;
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

}  // namespace detail

// Rescales MOS to [0, 1]: kept as-is when already inside, otherwise min-max.
inline void normalize_mos(std::vector<InputRecord>& records) {
  if (records.empty()) return;
  double lo = records[0].mos, hi = records[0].mos;
  for (const auto& r : records) {
    lo = std::min(lo, r.mos);
    hi = std::max(hi, r.mos);
  }
  if (lo >= 0.0 && hi <= 1.0) return;
  if (hi == lo) throw InvalidInput("mos: constant out-of-range scores cannot be rescaled");
  for (auto& r : records) r.mos = (r.mos - lo) / (hi - lo);
}

// Reads `path,mos` (NR) or `ref_path,dist_path,mos` (FR); image paths are
// relative to the CSV. All problems are collected and reported together.
inline QualityDataset load_dataset(const std::filesystem::path& csv, std::uint64_t seed = 0,
                                   double train_fraction = 0.8) {
  std::ifstream in(csv);
  if (!in) throw IoError("cannot open dataset " + csv.string());
  std::string line;
  if (!std::getline(in, line)) throw IoError(csv.string() + ": empty file");
  const auto header = detail::split_csv_line(line);
  QualityDataset ds;
  if (header == std::vector<std::string>{"path", "mos"}) {
    ds.mode = Mode::NR;
  } else if (header == std::vector<std::string>{"ref_path", "dist_path", "mos"}) {
    ds.mode = Mode::FR;
  } else {
    throw IoError(csv.string() + ": header must be 'path,mos' or 'ref_path,dist_path,mos'");
  }
  const std::size_t columns = header.size();
  const auto root = csv.parent_path();
  std::vector<std::string> problems;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto cells = detail::split_csv_line(line);
    const std::string where = "row " + std::to_string(row) + ": ";
    if (cells.size() != columns) {
      problems.push_back(where + "expected " + std::to_string(columns) + " fields, got " + std::to_string(cells.size()));
      continue;
    }
    const auto mos = detail::parse_real(cells.back());
    if (!mos) {
      problems.push_back(where + "mos '" + cells.back() + "' is not a finite number");
      continue;
    }
    InputRecord r;
    r.id = cells[columns - 2];
    r.mos = *mos;
    try {
      r.image = read_qtns(root / cells[columns - 2]);
      if (ds.mode == Mode::FR) {
        r.reference = read_qtns(root / cells[0]);
        if (r.reference->shape() != r.image.shape()) throw IoError("reference and distorted shapes differ");
      }
    } catch (const Error& e) {
      problems.push_back(where + e.what());
      continue;
    }
    if (!ds.records.empty() && r.image.shape() != ds.records.front().image.shape()) {
      problems.push_back(where + "image shape " + to_string(r.image.shape()) + " differs from " +
                         to_string(ds.records.front().image.shape()));
      continue;
    }
    ds.records.push_back(std::move(r));
  }
  if (!problems.empty()) {
    std::string msg = csv.string() + ": " + std::to_string(problems.size()) + " ingestion error(s)";
    for (const auto& p : problems) msg += "\n  " + p;
    throw IoError(msg);
  }
  if (ds.records.size() < 2) throw IoError(csv.string() + ": need at least 2 records");
  normalize_mos(ds.records);
  ds.name = csv.stem().string();
  ds.seed = seed;
  assign_split(ds, train_fraction);
  return ds;
}

// Writes images as QTNS files next to a CSV that load_dataset reads back.
inline void save_dataset(const QualityDataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "images");
  std::ofstream csv(dir / "dataset.csv");
  if (!csv) throw IoError("cannot write " + (dir / "dataset.csv").string());
  csv << (ds.mode == Mode::NR ? "path,mos\n" : "ref_path,dist_path,mos\n");
  csv.precision(17);
  for (std::size_t i = 0; i < ds.records.size(); ++i) {
    const auto& r = ds.records[i];
    const std::string stem = "images/" + std::to_string(i);
    if (ds.mode == Mode::FR) {
      detail::require(r.reference.has_value(), "save_dataset: FR record without reference");
      write_qtns(*r.reference, dir / (stem + "_ref.qtns"));
      csv << stem << "_ref.qtns,";
    }
    write_qtns(r.image, dir / (stem + ".qtns"));
    csv << stem << ".qtns," << r.mos << '\n';
  }
  if (!csv) throw IoError("failed writing dataset csv");
}

}  // namespace certsmooth
