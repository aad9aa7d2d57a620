#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "certsmooth/checkpoint.hpp"
#include "certsmooth/dataset.hpp"
#include "certsmooth/ive.hpp"
#include "certsmooth/map.hpp"
#include "certsmooth/metrics.hpp"
#include "certsmooth/smoothing.hpp"

namespace certsmooth {

enum class Architecture { toy, linear };

inline std::string architecture_name(Architecture a) { return a == Architecture::toy ? "toy" : "linear"; }

inline Architecture parse_architecture(const std::string& s) {
  if (s == "toy") return Architecture::toy;
  if (s == "linear") return Architecture::linear;
  throw InvalidInput("unknown architecture '" + s + "' (expected toy or linear)");
}

struct ModelSpec {
  Mode mode = Mode::NR;
  Architecture architecture = Architecture::toy;
  Shape image_shape{3, 8, 8};
  std::size_t backbone_features = 64;
  std::size_t conv_channels = 8;
  std::size_t feature_dim = 64;  // k
  std::vector<std::size_t> hidden{64, 32};
  std::uint64_t seed = 0;
};

// backbone (frozen) -> FTN -> noise -> scorer. In FR mode the FTN reads the
// concatenated [b(ref); b(dist)] features produced by `adapter`.
struct FsIqaModel {
  Mode mode = Mode::NR;
  Architecture architecture = Architecture::toy;
  MapPtr backbone;
  std::shared_ptr<PairAdapter> adapter;
  MapPtr ftn;
  MapPtr scorer;
  std::uint64_t seed = 0;

  std::size_t feature_dim() const { return ftn->output_size(); }

  const DifferentiableMap& feature_map() const {
    return mode == Mode::FR ? static_cast<const DifferentiableMap&>(*adapter) : *backbone;
  }

  Tensor model_input(const InputRecord& r) const {
    if (mode == Mode::NR) return r.image;
    detail::require(r.reference.has_value(), "FR model: record '" + r.id + "' has no reference image");
    return PairAdapter::stack(*r.reference, r.image);
  }

  // f_init; exactly one call of the feature map.
  Tensor features(const InputRecord& r) const { return feature_map().forward(model_input(r)); }

  // FTN o backbone as a function of the (distorted) image alone.
  MapPtr certified_map(const InputRecord& r) const {
    if (mode == Mode::NR) return compose(ftn, backbone);
    detail::require(r.reference.has_value(), "FR model: record '" + r.id + "' has no reference image");
    return compose(ftn, adapter->distorted_branch(*r.reference));
  }

  // Unsmoothed scorer o FTN o backbone on the (distorted) image.
  MapPtr plain_map(const InputRecord& r) const { return compose(scorer, certified_map(r)); }

  std::uint64_t backbone_checksum() const { return parameter_checksum(backbone->parameters()); }
};

inline FsIqaModel make_model(const ModelSpec& spec) {
  detail::require(spec.feature_dim > 0 && spec.backbone_features > 0, "model: dimensions must be positive");
  FsIqaModel m;
  m.mode = spec.mode;
  m.architecture = spec.architecture;
  m.seed = spec.seed;
  const std::uint64_t bseed = derive_seed(spec.seed, 1), fseed = derive_seed(spec.seed, 2),
                      sseed = derive_seed(spec.seed, 3);
  const std::size_t width = spec.mode == Mode::FR ? 2 * spec.backbone_features : spec.backbone_features;
  if (spec.architecture == Architecture::toy) {
    m.backbone = std::make_shared<ToyBackbone>(spec.image_shape, bseed, spec.conv_channels, spec.backbone_features);
    m.ftn = std::make_shared<AffineSigmoidMap>(width, spec.feature_dim, fseed);
    m.scorer = std::make_shared<MlpScorer>(spec.feature_dim, spec.hidden, sseed);
  } else {
    m.backbone = std::make_shared<LinearMap>(spec.image_shape, Shape{spec.backbone_features}, bseed);
    m.ftn = std::make_shared<LinearMap>(Shape{width}, Shape{spec.feature_dim}, fseed);
    m.scorer = std::make_shared<MlpScorer>(spec.feature_dim, std::vector<std::size_t>{}, sseed);
  }
  if (spec.mode == Mode::FR) m.adapter = make_fr_adapter(m.backbone);
  return m;
}

inline Tensor ftn_forward(const FsIqaModel& m, const Tensor& f_init) { return m.ftn->forward(f_init); }

inline double plain_score(const FsIqaModel& m, const InputRecord& r) {
  return m.scorer->forward(ftn_forward(m, m.features(r)))[0];
}

// Smoothed score without certification: one backbone pass, N scorer passes.
inline double predict(const FsIqaModel& m, const InputRecord& r, const SmoothingConfig& cfg,
                      const NoiseBank* bank = nullptr) {
  const Tensor f_norm = ftn_forward(m, m.features(r));
  if (bank)
    detail::require(bank->seed() == cfg.seed && bank->count() == cfg.n_samples && bank->dim() == f_norm.size(),
                    "predict: noise bank does not match the smoothing config");
  return detail::median_of_unsorted(detail::noised_score_values(*m.scorer, f_norm, cfg, bank));
}

struct CertificationOutput {
  std::string id;
  std::optional<double> score;
  std::optional<double> epsilon_x;  // empty means abstain
  CertifiedBounds bounds;
  SpectralEstimate spectral;
  std::size_t n_samples = 0;
  double sigma_f = 0.0;
  double alpha = 0.0;
  double tau = 0.0;
  std::uint64_t seed = 0;

  bool abstained() const noexcept { return !epsilon_x.has_value(); }
  double width() const { return bounds.s_upper - bounds.s_lower; }
};

// Quality prediction with certification: features, FTN, Jacobian spectral
// norm, abstain check, N noised scorer samples, median and percentile bounds.
inline CertificationOutput certify(const FsIqaModel& m, const InputRecord& r, const SmoothingConfig& cfg,
                                   const NoiseBank* bank = nullptr, SpectralOptions opts = {}) {
  cfg.validate();
  CertificationOutput out;
  out.id = r.id;
  out.n_samples = cfg.n_samples;
  out.sigma_f = cfg.sigma_f;
  out.alpha = cfg.alpha;
  out.tau = cfg.tau;
  out.seed = cfg.seed;

  const Tensor f_norm = ftn_forward(m, m.features(r));
  opts.seed = cfg.seed;
  const auto ive = input_variation(*m.certified_map(r), r.image, cfg.sigma_f, cfg.tau, opts);
  out.spectral = ive.spectral;
  if (ive.abstained()) return out;
  out.epsilon_x = ive.epsilon_x;

  const auto samples = bank ? sample_noised_scores(*m.scorer, f_norm, cfg, *bank)
                            : sample_noised_scores(*m.scorer, f_norm, cfg);
  out.score = median_smooth(samples);
  // Feature-space radius is sigma_f by construction of eps_x.
  const auto [q_lo, q_hi] = percentile_pair(cfg.sigma_f, cfg.sigma_f);
  out.bounds = order_statistic_bounds(samples, q_lo, q_hi, cfg.alpha);
  return out;
}

// ---- training

struct TrainConfig {
  std::size_t epochs = 400;
  std::size_t batch_size = 16;
  double learning_rate = 3e-2;
  std::uint64_t seed = 0;
  double train_fraction = 0.8;
  double validation_fraction = 0.2;
  double sigma_f = 0.25;          // training-time feature noise; 0 trains the undefended model
  std::size_t n_train = 16;       // noised samples per item and step
  std::size_t val_samples = 200;  // N used for the validation SRCC
  bool ftn_data_init = true;      // rescale the FTN from training features before epoch 0
  double ftn_spread = 2.0;        // target std of each FTN pre-activation under that init
  double variance_weight = 1.0;   // lambda in (mean_j s_j - mos)^2 + lambda * var_j s_j; 1 = per-sample MSE

  void validate() const {
    if (epochs == 0 || batch_size == 0 || n_train == 0 || val_samples < 2)
      throw ConfigError("train: epochs, batch_size, n_train must be positive and val_samples >= 2");
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("train: learning_rate must be positive");
    if (!(sigma_f >= 0.0)) throw ConfigError("train: sigma_f must be non-negative");
    if (!(variance_weight >= 0.0 && variance_weight <= 1.0)) throw ConfigError("train: variance_weight must lie in [0, 1]");
    if (!(train_fraction > 0.0 && validation_fraction > 0.0) ||
        std::abs(train_fraction + validation_fraction - 1.0) > 1e-12)
      throw ConfigError("train: split fractions must be positive and sum to 1");
  }
};

struct TrainReport {
  std::vector<double> epoch_loss;
  std::size_t start_epoch = 0;
  double train_mse = 0.0;   // plain (noise-free) MSE on the training split after the last epoch
  double val_srcc = 0.0;
  std::uint64_t backbone_checksum_before = 0;
  std::uint64_t backbone_checksum_after = 0;
};

class TrainingDiverged : public NumericError {
 public:
  TrainingDiverged(const std::string& msg, TrainReport report) : NumericError(msg), report_(std::move(report)) {}
  const TrainReport& report() const noexcept { return report_; }

 private:
  TrainReport report_;
};

// Data-dependent FTN start: each row becomes a random direction in
// standardized feature space, shifted and scaled so its pre-activation has
// zero mean and standard deviation `spread` over the given features.
inline void initialize_ftn(FsIqaModel& m, const std::vector<Tensor>& f_init, std::uint64_t seed, double spread) {
  detail::require(f_init.size() >= 2, "initialize_ftn: need at least two feature vectors");
  const std::size_t in = m.ftn->input_size(), out = m.ftn->output_size();
  const auto count = static_cast<double>(f_init.size());
  std::vector<double> mean(in, 0.0), sd(in, 0.0);
  for (const auto& f : f_init)
    for (std::size_t j = 0; j < in; ++j) mean[j] += f[j] / count;
  for (const auto& f : f_init)
    for (std::size_t j = 0; j < in; ++j) sd[j] += (f[j] - mean[j]) * (f[j] - mean[j]) / count;
  for (double& v : sd) v = std::sqrt(v);

  CounterRng rng(derive_seed(seed, 0xF7A), 0);
  auto params = m.ftn->mutable_parameters();
  std::vector<double> row(in), pre(f_init.size());
  for (std::size_t i = 0; i < out; ++i) {
    for (std::size_t j = 0; j < in; ++j) row[j] = sd[j] > 0.0 ? rng.normal() / sd[j] : 0.0;
    double pm = 0.0, pv = 0.0;
    for (std::size_t n = 0; n < f_init.size(); ++n) pm += (pre[n] = dot(row, f_init[n].values())) / count;
    for (double v : pre) pv += (v - pm) * (v - pm) / count;
    const double scale = pv > 0.0 ? spread / std::sqrt(pv) : 0.0;
    for (std::size_t j = 0; j < in; ++j) params[i * in + j] = row[j] * scale;
    params[out * in + i] = -pm * scale;
  }
}

// Scores a split: smoothed median when sigma_f > 0, plain forward otherwise.
inline std::vector<double> score_split(const FsIqaModel& m, const QualityDataset& ds,
                                       const std::vector<std::size_t>& idx, double sigma_f, std::size_t n,
                                       std::uint64_t seed) {
  std::vector<double> out;
  out.reserve(idx.size());
  if (sigma_f > 0.0) {
    SmoothingConfig cfg;
    cfg.sigma_f = sigma_f;
    cfg.n_samples = n;
    cfg.seed = seed;
    const NoiseBank bank(seed, n, m.feature_dim());
    for (std::size_t i : idx) out.push_back(predict(m, ds.records[i], cfg, &bank));
  } else {
    for (std::size_t i : idx) out.push_back(plain_score(m, ds.records[i]));
  }
  return out;
}

// SGD on FTN and scorer. Per item, with s_j = scorer(FTN(f) + e_j) over n_train
// draws: loss = (mean_j s_j - mos)^2 + variance_weight * var_j s_j. Epoch e
// draws its shuffle and noise from a stream keyed by e, so resuming at
// start_epoch continues the same trajectory.
inline TrainReport train(FsIqaModel& m, const QualityDataset& ds, const TrainConfig& cfg, std::size_t start_epoch = 0) {
  cfg.validate();
  detail::require(!ds.train.empty(), "train: empty training split");
  TrainReport report;
  report.start_epoch = start_epoch;
  report.backbone_checksum_before = m.backbone_checksum();

  std::vector<Tensor> f_init;
  f_init.reserve(ds.train.size());
  for (std::size_t i : ds.train) f_init.push_back(m.features(ds.records[i]));

  if (start_epoch == 0 && cfg.ftn_data_init) initialize_ftn(m, f_init, cfg.seed, cfg.ftn_spread);

  const std::size_t k = m.feature_dim();
  const std::size_t samples = cfg.sigma_f > 0.0 ? cfg.n_train : 1;
  std::vector<double> g_ftn(m.ftn->parameters().size()), g_scorer(m.scorer->parameters().size());
  std::vector<std::size_t> order(ds.train.size());
  std::vector<Tensor> batch_noised(samples, Tensor(Shape{k}));
  std::vector<double> batch_scores(samples), noise(k);

  for (std::size_t epoch = start_epoch; epoch < start_epoch + cfg.epochs; ++epoch) {
    CounterRng rng(derive_seed(cfg.seed, 0x7EA1), epoch);
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);

    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      std::fill(g_ftn.begin(), g_ftn.end(), 0.0);
      std::fill(g_scorer.begin(), g_scorer.end(), 0.0);
      for (std::size_t b = start; b < stop; ++b) {
        const std::size_t item = order[b];
        const double mos = ds.records[ds.train[item]].mos;
        const Tensor f_norm = m.ftn->forward(f_init[item]);
        Tensor g_norm(Shape{k});
        for (std::size_t j = 0; j < samples; ++j) {
          rng.fill_normal(noise, cfg.sigma_f);
          for (std::size_t d = 0; d < k; ++d) batch_noised[j][d] = f_norm[d] + noise[d];
          batch_scores[j] = m.scorer->forward(batch_noised[j])[0];
        }
        double mean_score = 0.0, var = 0.0;
        for (double s : batch_scores) mean_score += s / static_cast<double>(samples);
        for (double s : batch_scores) var += (s - mean_score) * (s - mean_score) / static_cast<double>(samples);
        const double resid = mean_score - mos;
        epoch_loss += resid * resid + cfg.variance_weight * var;
        for (std::size_t j = 0; j < samples; ++j) {
          const double d = 2.0 * (resid + cfg.variance_weight * (batch_scores[j] - mean_score)) /
                           static_cast<double>(samples);
          const Tensor cot = Tensor::vector({d});
          axpy(g_scorer, 1.0, m.scorer->parameter_vjp(batch_noised[j], cot));
          axpy(g_norm.values(), 1.0, m.scorer->vjp(batch_noised[j], cot).values());
        }
        axpy(g_ftn, 1.0, m.ftn->parameter_vjp(f_init[item], g_norm));
      }
      const double step = cfg.learning_rate / static_cast<double>(stop - start);
      axpy(m.ftn->mutable_parameters(), -step, g_ftn);
      axpy(m.scorer->mutable_parameters(), -step, g_scorer);
    }
    epoch_loss /= static_cast<double>(order.size());
    report.epoch_loss.push_back(epoch_loss);
    if (!std::isfinite(epoch_loss)) {
      report.backbone_checksum_after = m.backbone_checksum();
      throw TrainingDiverged("training diverged at epoch " + std::to_string(epoch) + " (loss " +
                                 std::to_string(epoch_loss) + ")",
                             report);
    }
  }

  double mse = 0.0;
  for (std::size_t i = 0; i < f_init.size(); ++i) {
    const double r = m.scorer->forward(m.ftn->forward(f_init[i]))[0] - ds.records[ds.train[i]].mos;
    mse += r * r;
  }
  report.train_mse = mse / static_cast<double>(f_init.size());
  if (ds.test.size() >= 3) {
    std::vector<double> mos;
    for (std::size_t i : ds.test) mos.push_back(ds.records[i].mos);
    report.val_srcc = srcc(score_split(m, ds, ds.test, cfg.sigma_f, cfg.val_samples, cfg.seed), mos);
  }
  report.backbone_checksum_after = m.backbone_checksum();
  return report;
}

// ---- bundles: backbone.json, ftn.json, scorer.json, manifest.json

inline void save_bundle(const FsIqaModel& m, const std::filesystem::path& dir, nlohmann::json manifest = {}) {
  std::filesystem::create_directories(dir);
  save_checkpoint(*m.backbone, dir / "backbone.json");
  save_checkpoint(*m.ftn, dir / "ftn.json");
  save_checkpoint(*m.scorer, dir / "scorer.json");
  if (manifest.is_null()) manifest = nlohmann::json::object();
  manifest["mode"] = mode_name(m.mode);
  manifest["architecture"] = architecture_name(m.architecture);
  manifest["k"] = m.feature_dim();
  manifest["seed"] = m.seed;
  manifest["backbone_checksum"] = m.backbone_checksum();
  std::ofstream out(dir / "manifest.json");
  if (!out) throw IoError("cannot write " + (dir / "manifest.json").string());
  out << manifest.dump(1) << '\n';
  if (!out) throw IoError("failed writing bundle manifest");
}

inline nlohmann::json read_bundle_manifest(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw IoError("cannot open " + (dir / "manifest.json").string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("bad bundle manifest: " + std::string(e.what()));
  }
}

inline FsIqaModel load_bundle(const std::filesystem::path& dir) {
  const auto manifest = read_bundle_manifest(dir);
  FsIqaModel m;
  try {
    m.mode = parse_mode(manifest.at("mode").get<std::string>());
    m.architecture = parse_architecture(manifest.at("architecture").get<std::string>());
    m.seed = manifest.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError("bad bundle manifest: " + std::string(e.what()));
  }
  m.backbone = load_checkpoint(dir / "backbone.json");
  m.ftn = load_checkpoint(dir / "ftn.json");
  m.scorer = load_checkpoint(dir / "scorer.json");
  if (m.mode == Mode::FR) m.adapter = make_fr_adapter(m.backbone);
  const std::size_t width = m.mode == Mode::FR ? 2 * m.backbone->output_size() : m.backbone->output_size();
  if (m.ftn->input_size() != width || m.scorer->input_size() != m.ftn->output_size() || m.scorer->output_size() != 1)
    throw IoError("bundle components have inconsistent shapes");
  if (manifest.contains("backbone_checksum") &&
      manifest["backbone_checksum"].get<std::uint64_t>() != m.backbone_checksum())
    throw IoError("bundle backbone checksum mismatch");
  return m;
}

}  // namespace certsmooth
