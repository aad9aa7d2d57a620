#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include <unistd.h>

#include "certsmooth/pipeline.hpp"
#include "oracles.hpp"

using namespace certsmooth;
using certsmooth::testing::random_tensor;

namespace {

FsIqaModel toy_model(Mode mode = Mode::NR, std::uint64_t seed = 3) {
  ModelSpec spec;
  spec.mode = mode;
  spec.seed = seed;
  return make_model(spec);
}

InputRecord record_of(const Tensor& image, double mos = 0.5) {
  InputRecord r;
  r.id = "r";
  r.image = image;
  r.mos = mos;
  return r;
}

SmoothingConfig small_cfg(double sigma = 0.25, std::size_t n = 500, std::uint64_t seed = 1) {
  SmoothingConfig c;
  c.sigma_f = sigma;
  c.n_samples = n;
  c.seed = seed;
  return c;
}

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("certsmooth_" + name + "_" + std::to_string(::getpid()));
  std::filesystem::remove_all(p);
  return p;
}

// Teacher-student dataset for the linear architecture: MOS is the teacher's
// plain score, squeezed into [0, 1] by a fixed affine map.
QualityDataset realizable_dataset(const FsIqaModel& teacher, const Shape& shape, std::size_t n, std::uint64_t seed) {
  QualityDataset ds;
  ds.seed = seed;
  std::vector<double> raw;
  for (std::size_t i = 0; i < n; ++i) {
    auto r = record_of(random_tensor(shape, seed * 1000 + i));
    raw.push_back(plain_score(teacher, r));
    ds.records.push_back(std::move(r));
  }
  const auto [lo, hi] = std::minmax_element(raw.begin(), raw.end());
  for (std::size_t i = 0; i < n; ++i) ds.records[i].mos = (raw[i] - *lo) / (*hi - *lo);
  assign_split(ds);
  return ds;
}

}  // namespace

TEST(Ftn, ZeroWeightsGiveOneHalf) {
  auto m = toy_model();
  std::vector<double> zeros(m.ftn->parameters().size(), 0.0);
  m.ftn->set_parameters(zeros);
  const Tensor out = ftn_forward(m, random_tensor({64}, 1, -5, 5));
  ASSERT_EQ(out.size(), m.feature_dim());
  for (double v : out.values()) EXPECT_EQ(v, 0.5);
}

TEST(Ftn, OutputsStayInsideOpenUnitInterval) {
  auto m = toy_model();
  for (std::uint64_t t = 0; t < 1000; ++t) {
    const Tensor out = ftn_forward(m, random_tensor({64}, t, -1e3, 1e3));
    for (double v : out.values()) ASSERT_TRUE(v > 0.0 && v < 1.0) << v;
  }
  EXPECT_THROW(ftn_forward(m, Tensor({63})), InvalidInput);
}

TEST(Predict, TinySigmaMatchesPlainScore) {
  auto m = toy_model();
  for (std::uint64_t t = 0; t < 5; ++t) {
    const auto r = record_of(random_tensor({3, 8, 8}, t));
    EXPECT_NEAR(predict(m, r, small_cfg(1e-12, 101)), plain_score(m, r), 1e-6);
  }
}

TEST(Predict, OneBackboneCall) {
  auto m = toy_model();
  const auto r = record_of(random_tensor({3, 8, 8}, 4));
  m.backbone->reset_counts();
  m.scorer->reset_counts();
  predict(m, r, small_cfg(0.25, 2000));
  EXPECT_EQ(m.backbone->counts().forward, 1u);
  EXPECT_EQ(m.scorer->counts().forward, 2000u);
}

TEST(Certify, OnlyJacobianProductsBeyondOneForward) {
  auto m = toy_model();
  const auto r = record_of(random_tensor({3, 8, 8}, 5));
  m.backbone->reset_counts();
  const auto cert = certify(m, r, small_cfg());
  const auto c = m.backbone->counts();
  EXPECT_EQ(c.forward, 1u);
  EXPECT_GT(c.jvp, 0u);
  EXPECT_LE(c.jvp + c.vjp, 2 * (SpectralOptions{}.max_iter + 1) * (SpectralOptions{}.max_restarts + 1));
  EXPECT_FALSE(cert.abstained());
}

TEST(Certify, ScoreMatchesPredictAndIsBracketed) {
  auto m = toy_model();
  for (std::uint64_t t = 0; t < 10; ++t) {
    const auto r = record_of(random_tensor({3, 8, 8}, 10 + t));
    const auto cfg = small_cfg(0.1 + 0.04 * static_cast<double>(t), 2000, t);
    const auto cert = certify(m, r, cfg);
    ASSERT_FALSE(cert.abstained());
    EXPECT_EQ(*cert.score, predict(m, r, cfg));
    EXPECT_LE(cert.bounds.s_lower, *cert.score);
    EXPECT_GE(cert.bounds.s_upper, *cert.score);
    EXPECT_TRUE(cert.bounds.finite());
    EXPECT_EQ(*cert.epsilon_x, cfg.sigma_f / cert.spectral.value);
  }
}

TEST(Certify, ConstantScorerCollapsesBounds) {
  auto m = toy_model();
  m.scorer = make_constant({m.feature_dim()}, Tensor::vector({0.7}));
  const auto cert = certify(m, record_of(random_tensor({3, 8, 8}, 2)), small_cfg(0.5, 2000));
  ASSERT_FALSE(cert.abstained());
  EXPECT_EQ(*cert.score, 0.7);
  EXPECT_EQ(cert.bounds.s_lower, 0.7);
  EXPECT_EQ(cert.bounds.s_upper, 0.7);
}

TEST(Certify, AbstainsOnFlatFeatures) {
  ModelSpec spec;
  spec.architecture = Architecture::linear;
  auto m = make_model(spec);
  std::vector<double> zeros(m.backbone->parameters().size(), 0.0);
  m.backbone->set_parameters(zeros);
  const auto cert = certify(m, record_of(random_tensor({3, 8, 8}, 1)), small_cfg());
  EXPECT_TRUE(cert.abstained());
  EXPECT_FALSE(cert.score.has_value());
  EXPECT_LT(cert.spectral.value, cert.tau);
}

// One feature, identity FTN, scorer s = w f + b: the bounds are order
// statistics of w * sigma * e_i shifted by the clean score.
TEST(Certify, LinearOneDimensionalMatchesAnalyticQuantiles) {
  FsIqaModel m;
  m.architecture = Architecture::linear;
  m.backbone = std::make_shared<LinearMap>(Shape{3, 2, 2}, Shape{1}, 7);
  m.ftn = make_identity({1});
  const std::vector<double> w{1.7}, b{0.2};
  m.scorer = std::make_shared<LinearMap>(Shape{1}, Shape{1}, w, b);
  const auto r = record_of(random_tensor({3, 2, 2}, 3));
  const auto cfg = small_cfg(0.3, 2000, 11);
  const auto cert = certify(m, r, cfg);
  ASSERT_FALSE(cert.abstained());

  const double clean = plain_score(m, r);
  std::vector<double> e(cfg.n_samples);
  for (std::size_t i = 0; i < cfg.n_samples; ++i) {
    std::vector<double> row(1);
    NoiseBank::fill_row(cfg.seed, i, row);
    e[i] = row[0];
  }
  std::sort(e.begin(), e.end());
  EXPECT_EQ(cert.bounds.k_lower, 265u);
  EXPECT_EQ(cert.bounds.k_upper, 1736u);
  EXPECT_NEAR(cert.bounds.s_lower, clean + 1.7 * 0.3 * e[264], 1e-12);
  EXPECT_NEAR(cert.bounds.s_upper, clean + 1.7 * 0.3 * e[1735], 1e-12);
  // Population quantiles at the chosen ranks, to sampling accuracy.
  EXPECT_NEAR(cert.bounds.s_lower, clean + 1.7 * 0.3 * gaussian_quantile(265.0 / 2001.0), 0.05);
  EXPECT_NEAR(cert.bounds.s_upper, clean + 1.7 * 0.3 * gaussian_quantile(1736.0 / 2001.0), 0.05);
  EXPECT_NEAR(*cert.epsilon_x * cert.spectral.value, 0.3, 1e-12);
}

TEST(FullReference, ReferenceBranchIsInert) {
  const auto adapter = make_fr_adapter(std::make_shared<ToyBackbone>(Shape{3, 8, 8}, 5));
  const auto branch = adapter->distorted_branch(random_tensor({3, 8, 8}, 1));
  const Tensor x = random_tensor({3, 8, 8}, 2);
  const Tensor u = random_tensor({3, 8, 8}, 3, -1, 1);
  const Tensor ju = branch->jvp(x, u);
  ASSERT_EQ(ju.size(), 128u);
  double moved = 0.0;
  for (std::size_t i = 0; i < 64; ++i) EXPECT_EQ(ju[i], 0.0);
  for (std::size_t i = 64; i < 128; ++i) moved += std::abs(ju[i]);
  EXPECT_GT(moved, 0.0);
  // Pair adapter keeps the two halves separate.
  const Tensor pair = PairAdapter::stack(random_tensor({3, 8, 8}, 1), x);
  const Tensor f = adapter->forward(pair);
  const Tensor fb = adapter->backbone()->forward(x);
  for (std::size_t i = 0; i < 64; ++i) EXPECT_EQ(f[64 + i], fb[i]);
}

TEST(FullReference, ReducesToNoReferenceWhenReferenceWeightsVanish) {
  auto fr = toy_model(Mode::FR, 9);
  const std::size_t k = fr.feature_dim();
  auto params = fr.ftn->mutable_parameters();
  for (std::size_t o = 0; o < k; ++o)
    for (std::size_t j = 0; j < 64; ++j) params[o * 128 + j] = 0.0;

  auto nr_ftn = std::make_shared<AffineSigmoidMap>(64, k, 0);
  std::vector<double> nr_params;
  for (std::size_t o = 0; o < k; ++o)
    for (std::size_t j = 64; j < 128; ++j) nr_params.push_back(params[o * 128 + j]);
  for (std::size_t o = 0; o < k; ++o) nr_params.push_back(params[k * 128 + o]);
  nr_ftn->set_parameters(nr_params);
  FsIqaModel nr = fr;
  nr.mode = Mode::NR;
  nr.adapter.reset();
  nr.ftn = nr_ftn;

  InputRecord r = record_of(random_tensor({3, 8, 8}, 4));
  r.reference = random_tensor({3, 8, 8}, 5);
  const auto cfg = small_cfg(0.25, 500, 3);
  const auto a = certify(fr, r, cfg), b = certify(nr, r, cfg);
  EXPECT_NEAR(*a.epsilon_x / *b.epsilon_x, 1.0, 1e-9);
  EXPECT_NEAR(*a.score, *b.score, 1e-12);
}

TEST(FullReference, CertifiesSyntheticPairs) {
  const auto ds = synth_dataset(2, 20, Mode::FR);
  const auto m = toy_model(Mode::FR);
  for (const auto& r : ds.records) {
    const auto cert = certify(m, r, small_cfg(0.25, 500));
    ASSERT_FALSE(cert.abstained());
    EXPECT_LE(cert.bounds.s_lower, *cert.score);
    EXPECT_GE(cert.bounds.s_upper, *cert.score);
  }
  InputRecord missing = ds.records[0];
  missing.reference.reset();
  EXPECT_THROW(certify(m, missing, small_cfg()), InvalidInput);
}

TEST(Train, RealizableLinearTeacherIsLearned) {
  ModelSpec spec;
  spec.architecture = Architecture::linear;
  spec.image_shape = {1, 2, 2};
  spec.backbone_features = 4;
  spec.feature_dim = 2;
  spec.seed = 1;
  auto teacher = make_model(spec);
  spec.seed = 2;
  auto student = make_model(spec);
  student.backbone->set_parameters(teacher.backbone->parameters());
  const auto ds = realizable_dataset(teacher, spec.image_shape, 200, 4);

  TrainConfig tc;
  tc.sigma_f = 0.0;
  tc.epochs = 2000;
  tc.learning_rate = 0.1;
  const auto checksum = student.backbone_checksum();
  const auto rep = train(student, ds, tc);
  EXPECT_EQ(rep.epoch_loss.size(), 2000u);
  EXPECT_LT(rep.train_mse, 1e-3);
  EXPECT_GT(rep.val_srcc, 0.95);
  EXPECT_EQ(rep.backbone_checksum_before, checksum);
  EXPECT_EQ(rep.backbone_checksum_after, checksum);
  EXPECT_LT(rep.epoch_loss.back(), rep.epoch_loss.front());
}

TEST(Train, ToyBackboneStaysFrozen) {
  auto m = toy_model();
  const auto ds = synth_dataset(3, 60, Mode::NR);
  const std::vector<double> before(m.backbone->parameters().begin(), m.backbone->parameters().end());
  TrainConfig tc;
  tc.epochs = 3;
  const auto rep = train(m, ds, tc);
  EXPECT_EQ(rep.backbone_checksum_before, rep.backbone_checksum_after);
  EXPECT_TRUE(std::equal(before.begin(), before.end(), m.backbone->parameters().begin()));
  EXPECT_EQ(to_checkpoint(*m.backbone)["parameters"], nlohmann::json(before));
}

TEST(Train, ResumeContinuesTheSameTrajectory) {
  const auto ds = synth_dataset(3, 40, Mode::NR);
  TrainConfig tc;
  tc.epochs = 4;
  auto once = toy_model();
  train(once, ds, tc);
  auto twice = toy_model();
  tc.epochs = 2;
  train(twice, ds, tc, 0);
  train(twice, ds, tc, 2);
  EXPECT_EQ(parameter_checksum(once.ftn->parameters()), parameter_checksum(twice.ftn->parameters()));
  EXPECT_EQ(parameter_checksum(once.scorer->parameters()), parameter_checksum(twice.scorer->parameters()));
}

TEST(Train, DivergenceIsReported) {
  auto m = toy_model();
  const auto ds = synth_dataset(3, 40, Mode::NR);
  TrainConfig tc;
  tc.epochs = 50;
  tc.learning_rate = 1e6;
  try {
    train(m, ds, tc);
    FAIL() << "expected divergence";
  } catch (const TrainingDiverged& e) {
    EXPECT_FALSE(e.report().epoch_loss.empty());
    EXPECT_FALSE(std::isfinite(e.report().epoch_loss.back()));
  }
}

TEST(Train, RejectsBadConfig) {
  auto m = toy_model();
  const auto ds = synth_dataset(3, 40, Mode::NR);
  TrainConfig tc;
  tc.train_fraction = 0.7;
  EXPECT_THROW(train(m, ds, tc), ConfigError);
  tc = TrainConfig{};
  tc.learning_rate = 0.0;
  EXPECT_THROW(train(m, ds, tc), ConfigError);
}

TEST(Bundle, RoundTripPreservesPredictions) {
  for (Mode mode : {Mode::NR, Mode::FR}) {
    const auto m = toy_model(mode, 21);
    const auto dir = temp_dir("bundle");
    save_bundle(m, dir, {{"dataset_fingerprint", "abc"}});
    const auto loaded = load_bundle(dir);
    EXPECT_EQ(loaded.mode, mode);
    EXPECT_EQ(read_bundle_manifest(dir)["dataset_fingerprint"], "abc");
    InputRecord r = record_of(random_tensor({3, 8, 8}, 6));
    if (mode == Mode::FR) r.reference = random_tensor({3, 8, 8}, 7);
    EXPECT_EQ(predict(m, r, small_cfg()), predict(loaded, r, small_cfg()));
    std::filesystem::remove_all(dir);
  }
}

TEST(Bundle, DetectsTamperedBackbone) {
  const auto m = toy_model();
  const auto dir = temp_dir("tamper");
  save_bundle(m, dir);
  auto doc = to_checkpoint(*m.backbone);
  doc["parameters"][0] = doc["parameters"][0].get<double>() + 1e-9;
  std::ofstream(dir / "backbone.json") << doc.dump();
  EXPECT_THROW(load_bundle(dir), IoError);
  EXPECT_THROW(load_bundle(dir / "missing"), IoError);
  std::filesystem::remove_all(dir);
}
