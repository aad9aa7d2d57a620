#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include <unistd.h>

#include "certsmooth/bench.hpp"
#include "oracles.hpp"

using namespace certsmooth;
using certsmooth::testing::random_tensor;

namespace {

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("certsmooth_" + name + "_" + std::to_string(::getpid()));
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

// Quadratic-time ranks: count of smaller values plus the mean position among ties.
std::vector<double> brute_ranks(const std::vector<double>& v) {
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    double less = 0, equal = 0;
    for (double w : v) {
      less += w < v[i];
      equal += w == v[i];
    }
    r[i] = less + (equal + 1.0) / 2.0;
  }
  return r;
}

FsIqaModel toy_model(std::uint64_t seed = 3) {
  ModelSpec spec;
  spec.seed = seed;
  return make_model(spec);
}

CertificationOutput fake_cert(double eps, double lo, double hi) {
  CertificationOutput c;
  c.epsilon_x = eps;
  c.score = 0.5 * (lo + hi);
  c.bounds.s_lower = lo;
  c.bounds.s_upper = hi;
  return c;
}

}  // namespace

TEST(Metrics, KnownValues) {
  const std::vector<double> a{1, 2, 3, 4, 5}, b{5, 6, 7, 8, 7}, c{2, 4, 5, 4, 5};
  EXPECT_NEAR(srcc(a, b), 0.8207826816681233, 1e-15);
  EXPECT_NEAR(plcc(a, c), 6.0 / std::sqrt(60.0), 1e-15);
  const std::vector<double> rev{5, 4, 3, 2, 1};
  EXPECT_EQ(srcc(a, rev), -1.0);
  EXPECT_EQ(plcc(a, a), 1.0);
}

TEST(Metrics, TiedRanksMatchBruteForce) {
  CounterRng rng(5, 0);
  for (int t = 0; t < 50; ++t) {
    std::vector<double> v(37);
    for (double& x : v) x = static_cast<double>(rng.below(6));
    const auto fast = average_ranks(v);
    const auto slow = brute_ranks(v);
    for (std::size_t i = 0; i < v.size(); ++i) ASSERT_EQ(fast[i], slow[i]);
  }
}

TEST(Metrics, SymmetricAndMonotoneInvariant) {
  const Tensor x = random_tensor({100}, 1), y = random_tensor({100}, 2);
  const std::vector<double> a(x.data()), b(y.data());
  EXPECT_EQ(srcc(a, b), srcc(b, a));
  EXPECT_EQ(plcc(a, b), plcc(b, a));
  std::vector<double> ea(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) ea[i] = std::exp(5.0 * a[i]);
  EXPECT_NEAR(srcc(ea, b), srcc(a, b), 1e-15);
}

TEST(Metrics, RejectsDegenerateInput) {
  const std::vector<double> a{1, 2, 3}, flat{2, 2, 2}, two{1, 2};
  EXPECT_THROW(plcc(a, flat), NumericError);
  EXPECT_THROW(srcc(two, two), InvalidInput);
  const std::vector<double> bad{1, NAN, 3};
  EXPECT_THROW(plcc(a, bad), NumericError);
}

TEST(Synth, ZeroSeverityLeavesImageClean) {
  for (Distortion kind : {Distortion::noise, Distortion::blur}) {
    const auto r = synth_item(4, 7, 0.0, kind, Mode::FR);
    ASSERT_TRUE(r.reference.has_value());
    EXPECT_EQ(r.image.data(), r.reference->data());
    EXPECT_GE(r.mos, 1.0 - kSynthJitter);
  }
}

TEST(Synth, SeverityLowersMosAndPixelsStayInRange) {
  const auto ds = synth_dataset(9, 200, Mode::NR);
  EXPECT_EQ(ds.train.size(), 160u);
  EXPECT_EQ(ds.test.size(), 40u);
  std::vector<double> sev, mos;
  for (const auto& r : ds.records) {
    for (double v : r.image.values()) ASSERT_TRUE(v >= 0.0 && v <= 1.0);
    sev.push_back(r.severity);
    mos.push_back(r.mos);
  }
  EXPECT_LT(srcc(sev, mos), -0.99);
}

TEST(Synth, FingerprintIsStableAndSeedSensitive) {
  const auto a = synth_dataset(1, 30, Mode::NR), b = synth_dataset(1, 30, Mode::NR), c = synth_dataset(2, 30, Mode::NR);
  EXPECT_EQ(fingerprint(a), fingerprint(b));
  EXPECT_NE(fingerprint(a), fingerprint(c));
  EXPECT_EQ(fingerprint(a).size(), 16u);
  EXPECT_NE(fingerprint(a), fingerprint(synth_dataset(1, 30, Mode::FR)));
}

TEST(Dataset, SaveLoadRoundTrip) {
  for (Mode mode : {Mode::NR, Mode::FR}) {
    const auto ds = synth_dataset(3, 25, mode);
    const auto dir = temp_dir("ds");
    save_dataset(ds, dir);
    const auto back = load_dataset(dir / "dataset.csv", ds.seed);
    EXPECT_EQ(back.mode, mode);
    EXPECT_EQ(fingerprint(back), fingerprint(ds));
    EXPECT_EQ(back.train, ds.train);
    std::filesystem::remove_all(dir);
  }
}

TEST(Dataset, QtnsRejectsCorruptFiles) {
  const auto dir = temp_dir("qtns");
  const Tensor t = random_tensor({2, 3, 4}, 1);
  write_qtns(t, dir / "a.qtns");
  EXPECT_EQ(read_qtns(dir / "a.qtns").data(), t.data());
  std::ofstream(dir / "a.qtns", std::ios::app | std::ios::binary) << 'x';
  EXPECT_THROW(read_qtns(dir / "a.qtns"), IoError);
  std::ofstream(dir / "b.qtns", std::ios::binary) << "NOPE";
  EXPECT_THROW(read_qtns(dir / "b.qtns"), IoError);
  EXPECT_THROW(read_qtns(dir / "missing.qtns"), IoError);
  std::filesystem::remove_all(dir);
}

TEST(Dataset, MalformedRowsAreAllReported) {
  const auto dir = temp_dir("bad");
  write_qtns(random_tensor({3, 8, 8}, 1), dir / "ok.qtns");
  std::ofstream(dir / "d.csv") << "path,mos\nok.qtns,0.5\nok.qtns\nok.qtns,abc\nnope.qtns,0.2\nok.qtns,0.1\n";
  try {
    load_dataset(dir / "d.csv");
    FAIL() << "expected IoError";
  } catch (const IoError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("3 ingestion error(s)"), std::string::npos) << msg;
    EXPECT_NE(msg.find("row 3"), std::string::npos);
    EXPECT_NE(msg.find("row 4"), std::string::npos);
    EXPECT_NE(msg.find("row 5"), std::string::npos);
  }
  std::ofstream(dir / "h.csv") << "image,score\n";
  EXPECT_THROW(load_dataset(dir / "h.csv"), IoError);
  std::filesystem::remove_all(dir);
}

TEST(Dataset, OutOfRangeMosIsRescaled) {
  const auto dir = temp_dir("mos");
  write_qtns(random_tensor({3, 8, 8}, 1), dir / "a.qtns");
  std::ofstream(dir / "d.csv") << "path,mos\na.qtns,1\na.qtns,3\na.qtns,5\n";
  const auto ds = load_dataset(dir / "d.csv");
  ASSERT_EQ(ds.records.size(), 3u);
  EXPECT_EQ(ds.records[0].mos, 0.0);
  EXPECT_EQ(ds.records[1].mos, 0.5);
  EXPECT_EQ(ds.records[2].mos, 1.0);
  std::filesystem::remove_all(dir);
}

TEST(InputSpace, ZeroSigmaIsPlainScore) {
  const auto m = toy_model();
  InputRecord r;
  r.image = random_tensor({3, 8, 8}, 2);
  const auto plain = m.plain_map(r);
  for (Reduction red : {Reduction::mean, Reduction::trimmed, Reduction::median})
    EXPECT_NEAR(input_space_smooth(*plain, r.image, 0.0, 25, red, 1), plain_score(m, r), 1e-15);
}

TEST(InputSpace, OneBackbonePassPerSample) {
  const auto m = toy_model();
  InputRecord r;
  r.image = random_tensor({3, 8, 8}, 2);
  const auto plain = m.plain_map(r);
  m.backbone->reset_counts();
  input_space_smooth(*plain, r.image, 0.1, 2000, Reduction::median, 4);
  EXPECT_EQ(m.backbone->counts().forward, 2000u);
  m.backbone->reset_counts();
  predict(m, r, SmoothingConfig{});
  EXPECT_EQ(m.backbone->counts().forward, 1u);
}

TEST(Attack, ZeroBudgetReturnsInput) {
  const auto m = toy_model();
  InputRecord r;
  r.image = random_tensor({3, 8, 8}, 3);
  const auto adv = ifgsm_attack(undefended_model(m, r), r.image, 0.0, 10);
  EXPECT_EQ(adv.data(), r.image.data());
  EXPECT_THROW(ifgsm_attack(ScoreModel{}, r.image, 0.1, 10), InvalidInput);
}

// Linear score w.x: the L-inf attack lands on x + eps sign(w); the L2 attack
// on x + eps w / |w|.
TEST(Attack, LinearScoreReachesAnalyticOptimum) {
  const Tensor w = random_tensor({20}, 4, -1, 1), x = random_tensor({20}, 5);
  const ScoreModel model{[w](const Tensor& z) { return dot(w.values(), z.values()); },
                         [w](const Tensor&) { return w; }};
  const double eps = 0.1;
  const Tensor a = ifgsm_attack(model, x, eps, 10, AttackNorm::linf);
  double l1 = 0.0;
  for (double v : w.values()) l1 += std::abs(v);
  for (std::size_t i = 0; i < 20; ++i) EXPECT_LE(std::abs(a[i] - x[i]), eps + 1e-15);
  EXPECT_NEAR(model.score(a) - model.score(x), eps * l1, 1e-12);
  const Tensor b = ifgsm_attack(model, x, eps, 10, AttackNorm::l2);
  EXPECT_NEAR(model.score(b) - model.score(x), eps * norm2(w.values()), 1e-12);
  EXPECT_LE(norm2((b - x).values()), eps + 1e-12);
}

TEST(Curve, BinsMatchHandComputedMeans) {
  std::vector<CertificationOutput> certs;
  // Inserted out of order; 20 certificates, 10 bins of 2.
  for (int i = 19; i >= 0; --i) certs.push_back(fake_cert(0.01 * (i + 1), 0.0, 0.1 * i));
  certs.push_back(CertificationOutput{});  // abstain, ignored
  const auto curve = bound_width_curve(certs);
  ASSERT_EQ(curve.size(), 10u);
  for (std::size_t b = 0; b < 10; ++b) {
    EXPECT_EQ(curve[b].count, 2u);
    EXPECT_NEAR(curve[b].mean_epsilon, 0.01 * (2 * b + 1.5), 1e-15);
    EXPECT_NEAR(curve[b].mean_width, 0.1 * (2 * b + 0.5), 1e-14);
  }
  certs.resize(5);
  EXPECT_THROW(bound_width_curve(certs), InvalidInput);
}

TEST(Verify, ZeroTrialsAndAbstain) {
  const auto m = toy_model();
  InputRecord r;
  r.image = random_tensor({3, 8, 8}, 6);
  SmoothingConfig cfg;
  cfg.n_samples = 500;
  const auto cert = certify(m, r, cfg);
  const auto rep = verify_certificate(m, r, cert, 0, 1);
  EXPECT_EQ(rep.trials, 0u);
  EXPECT_EQ(rep.violations, 0u);
  EXPECT_THROW(verify_certificate(m, r, CertificationOutput{}, 5, 1), InvalidInput);
  const auto some = verify_certificate(m, r, cert, 20, 1);
  EXPECT_EQ(some.trials, 20u);
}

TEST(Stability, FixedSeedHasNoSpread) {
  const auto m = toy_model();
  InputRecord r;
  r.image = random_tensor({3, 8, 8}, 7);
  SmoothingConfig cfg;
  cfg.n_samples = 200;
  const auto fixed = stability_report(m, r, cfg, 10, 3, true);
  EXPECT_LT(fixed.max_relative_deviation, 1e-15);
  for (double v : fixed.scores) EXPECT_EQ(v, fixed.scores[0]);
  const auto varied = stability_report(m, r, cfg, 10, 3, false);
  EXPECT_GT(varied.max_relative_deviation, 1e-6);
  EXPECT_THROW(stability_report(m, r, cfg, 9, 3), InvalidInput);
}

TEST(Timing, CountsAreExact) {
  const auto m = toy_model();
  const auto ds = synth_dataset(1, 10, Mode::NR);
  SmoothingConfig cfg;
  const auto rep = timing_report(m, ds, {0, 1, 2}, cfg, 1);
  EXPECT_EQ(rep.predict_backbone_calls, 1.0);
  EXPECT_EQ(rep.certify_backbone_calls, 1.0);
  EXPECT_EQ(rep.baseline_backbone_calls, 2000.0);
  EXPECT_EQ(rep.count_ratio, 2000.0);
}

TEST(Evaluate, ReportsBothCorrelationsAndOneCallPerPrediction) {
  const auto m = toy_model();
  const auto ds = synth_dataset(1, 20, Mode::NR);
  SmoothingConfig cfg;
  cfg.n_samples = 200;
  const auto rep = evaluate(m, ds, ds.test, cfg);
  EXPECT_EQ(rep.records, 4u);
  EXPECT_EQ(rep.certificates.size(), 4u);
  EXPECT_EQ(rep.backbone_calls, 8u);  // one for predict, one for certify
  EXPECT_TRUE(std::isfinite(rep.srcc_nocert));
}
