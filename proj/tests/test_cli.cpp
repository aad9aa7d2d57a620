#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>

#include "certsmooth/cli.hpp"

using namespace certsmooth;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("certsmooth_cli_" + std::to_string(::getpid())) / name;
  fs::remove_all(p);
  return p;
}

int run(std::vector<std::string> args) {
  args.insert(args.begin(), "certsmooth");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  return cli::run(static_cast<int>(argv.size()), argv.data());
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

std::vector<std::string> lines(const fs::path& p) {
  std::istringstream in(slurp(p));
  std::vector<std::string> out;
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

// Small, fast run shared by most tests.
const std::vector<std::string> kSmall{"--synth_items", "40", "--seed", "3", "--n_train", "4", "--val_samples", "20"};

std::vector<std::string> with(std::vector<std::string> head, const std::vector<std::string>& tail = kSmall) {
  head.insert(head.end(), tail.begin(), tail.end());
  return head;
}

const fs::path& small_model() {
  static const fs::path dir = [] {
    const auto d = scratch("small");
    EXPECT_EQ(run(with({"train", "--out_dir", d.string(), "--epochs", "3"})), 0);
    return d;
  }();
  return dir;
}

struct EnvSeed {
  explicit EnvSeed(const char* v) { ::setenv("CERTSMOOTH_SEED", v, 1); }
  ~EnvSeed() { ::unsetenv("CERTSMOOTH_SEED"); }
};

}  // namespace

// Noise-free objective; with sigma_f = 0.25 and 400 epochs the same run stops near 0.02.
TEST(CliTrain, Synthetic200ItemRunConverges) {
  const auto d = scratch("converge");
  ASSERT_EQ(run({"train", "--synth_items", "200", "--seed", "1", "--sigma_f", "0", "--epochs", "1600", "--out_dir",
                 d.string()}),
            0);
  const auto report = nlohmann::json::parse(slurp(d / "train_report.json"));
  EXPECT_LT(report.at("train_mse").get<double>(), 1e-2);
  EXPECT_EQ(lines(d / "loss.csv").size(), 1 + report.at("epochs").get<std::size_t>());
}

TEST(CliTrain, BundleManifestEchoesFrozenBackboneChecksum) {
  const auto d = small_model();
  const auto manifest = read_bundle_manifest(d / "model");
  const auto report = nlohmann::json::parse(slurp(d / "train_report.json"));
  EXPECT_EQ(manifest.at("backbone_checksum"), report.at("backbone_checksum_after"));
  EXPECT_EQ(report.at("backbone_checksum_before"), report.at("backbone_checksum_after"));
}

TEST(CliTrain, ResumeContinuesTheSameTrajectory) {
  const auto whole = scratch("whole"), part = scratch("part"), rest = scratch("rest");
  ASSERT_EQ(run(with({"train", "--out_dir", whole.string(), "--epochs", "4"})), 0);
  ASSERT_EQ(run(with({"train", "--out_dir", part.string(), "--epochs", "2"})), 0);
  ASSERT_EQ(run(with({"train", "--out_dir", rest.string(), "--epochs", "2", "--resume", "--model",
                      (part / "model").string()})),
            0);
  for (const char* f : {"ftn.json", "scorer.json", "manifest.json"})
    EXPECT_EQ(slurp(whole / "model" / f), slurp(rest / "model" / f)) << f;
  const auto tail = lines(rest / "loss.csv"), full = lines(whole / "loss.csv");
  ASSERT_EQ(tail.size(), 3u);
  EXPECT_EQ(tail[1], full[3]);
  EXPECT_EQ(tail[2], full[4]);
}

TEST(CliTrain, DivergenceExitsThree) {
  const auto d = scratch("diverge");
  EXPECT_EQ(run(with({"train", "--out_dir", d.string(), "--epochs", "50", "--learning_rate", "1e6"})), 3);
  EXPECT_TRUE(fs::exists(d / "loss.csv"));
}

TEST(CliCertify, OneLinePerTestRecordAndByteIdenticalReruns) {
  const auto a = scratch("cert_a"), b = scratch("cert_b");
  const auto model = (small_model() / "model").string();
  ASSERT_EQ(run(with({"certify", "--model", model, "--out_dir", a.string(), "--n_samples", "300"})), 0);
  ASSERT_EQ(run(with({"certify", "--model", model, "--out_dir", b.string(), "--n_samples", "300"})), 0);
  const auto ds = synth_dataset(3, 40, Mode::NR);
  const auto first = lines(a / "certificates.jsonl");
  EXPECT_EQ(first.size(), ds.test.size());
  EXPECT_EQ(slurp(a / "certificates.jsonl"), slurp(b / "certificates.jsonl"));
  for (const auto& l : first) {
    const auto j = nlohmann::json::parse(l);
    for (const char* key : {"id", "S", "eps_x", "S_l", "S_u", "spectral_value", "seed"}) EXPECT_TRUE(j.contains(key));
  }
}

TEST(CliCertify, AbstainLinesCarryNoBounds) {
  const auto d = scratch("abstain");
  ASSERT_EQ(run(with({"certify", "--model", (small_model() / "model").string(), "--out_dir", d.string(),
                      "--n_samples", "100", "--tau", "1e12"})),
            0);
  for (const auto& l : lines(d / "certificates.jsonl")) {
    const auto j = nlohmann::json::parse(l);
    EXPECT_EQ(j.at("eps_x"), "abstain");
    EXPECT_FALSE(j.contains("S_l"));
    EXPECT_FALSE(j.contains("S_u"));
  }
}

TEST(CliCertify, ManifestReplayReproducesOutput) {
  const auto a = scratch("replay_a"), b = scratch("replay_b");
  ASSERT_EQ(run(with({"certify", "--model", (small_model() / "model").string(), "--out_dir", a.string(),
                      "--n_samples", "200", "--alpha", "0.99"})),
            0);
  ASSERT_EQ(run({"--config", (a / "manifest_certify.cfg").string(), "--out_dir", b.string()}), 0);
  EXPECT_EQ(slurp(a / "certificates.jsonl"), slurp(b / "certificates.jsonl"));
}

TEST(CliCertify, EnvironmentSeedOverridesFlag) {
  const auto d = scratch("envseed");
  const EnvSeed env("11");
  ASSERT_EQ(run(with({"certify", "--model", (small_model() / "model").string(), "--out_dir", d.string(),
                      "--n_samples", "100"})),
            0);
  EXPECT_NE(slurp(d / "manifest_certify.cfg").find("\nseed=11\n"), std::string::npos);
  EXPECT_EQ(nlohmann::json::parse(lines(d / "certificates.jsonl").front()).at("seed"), 11);
}

TEST(CliEvaluate, ReportsBothModesForEachSigma) {
  const auto d = scratch("evaluate");
  ASSERT_EQ(run(with({"evaluate", "--model", (small_model() / "model").string(), "--out_dir", d.string(),
                      "--n_samples", "100", "--timing_runs", "1"})),
            0);
  const auto report = nlohmann::json::parse(slurp(d / "evaluation.json"));
  ASSERT_EQ(report.size(), 3u);
  for (const auto& row : report) {
    EXPECT_TRUE(row.contains("with_cert"));
    EXPECT_TRUE(row.contains("no_cert"));
    EXPECT_TRUE(row.contains("abstain_rate"));
    EXPECT_EQ(row.at("backbone_calls").at("predict"), 1.0);
  }
  EXPECT_EQ(lines(d / "evaluation.csv").size(), 4u);
}

TEST(CliCurves, TenBinsPerSigma) {
  const auto d = scratch("curves");
  ASSERT_EQ(run(with({"curves", "--model", (small_model() / "model").string(), "--out_dir", d.string(),
                      "--n_samples", "100", "--split", "all"})),
            0);
  EXPECT_EQ(lines(d / "curves.csv").size(), 1 + 3 * 10u);
}

TEST(CliVerify, LinearTestbedHasNoViolations) {
  const auto d = scratch("verify");
  ASSERT_EQ(run(with({"train", "--architecture", "linear", "--out_dir", d.string(), "--epochs", "2"})), 0);
  ASSERT_EQ(run(with({"verify", "--model", (d / "model").string(), "--out_dir", d.string(), "--n_samples", "2000",
                      "--trials", "200"})),
            0);
  const auto rows = lines(d / "verify.csv");
  ASSERT_GT(rows.size(), 1u);
  for (std::size_t i = 1; i < rows.size(); ++i) {
    std::vector<std::string> cells;
    std::stringstream row(rows[i]);
    for (std::string c; std::getline(row, c, ',');) cells.push_back(c);
    ASSERT_EQ(cells.size(), 5u);
    EXPECT_NE(cells[1], "abstain");
    EXPECT_EQ(cells[3], "0") << rows[i];
  }
}

TEST(CliAttack, RequiresBaseline) {
  const auto d = scratch("attack");
  EXPECT_EQ(run(with({"attack", "--model", (small_model() / "model").string(), "--out_dir", d.string()})), 2);
}

TEST(CliExitCodes, ConfigErrorsExitTwo) {
  const auto d = scratch("exit2").string();
  EXPECT_EQ(run({"certify", "--out_dir", d, "--no_such_flag", "1"}), 2);
  EXPECT_EQ(run({"bogus", "--out_dir", d}), 2);
  EXPECT_EQ(run({"train", "--out_dir", d, "--variance_weight", "2"}), 2);
  EXPECT_EQ(run({"certify", "--out_dir", d}), 2);  // no --model
  {
    const EnvSeed env("not-a-number");
    EXPECT_EQ(run({"synth", "--out_dir", d}), 2);
  }
}

TEST(CliExitCodes, MissingFilesExitFour) {
  const auto d = scratch("exit4").string();
  EXPECT_EQ(run({"certify", "--out_dir", d, "--model", "/nonexistent/bundle"}), 4);
  EXPECT_EQ(run({"train", "--out_dir", d, "--dataset", "/nonexistent/data.csv"}), 4);
}

TEST(CliSynth, WritesLoadableDataset) {
  const auto d = scratch("synth");
  ASSERT_EQ(run({"synth", "--out_dir", d.string(), "--synth_items", "20", "--seed", "4"}), 0);
  const auto loaded = load_dataset(d / "dataset" / "dataset.csv", 4, 0.8);
  const auto direct = synth_dataset(4, 20, Mode::NR);
  ASSERT_EQ(loaded.records.size(), 20u);
  for (std::size_t i = 0; i < 20; ++i) EXPECT_EQ(loaded.records[i].mos, direct.records[i].mos);
}
