#pragma once

// Command-line workflows over the library. Every option lives on the top-level
// app so that a flat key=value file (--config) and the emitted run manifest
// can both be read back verbatim.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "certsmooth/bench.hpp"

namespace certsmooth::cli {

struct RunConfig {
  std::string command;
  std::string model;     // bundle directory
  std::string baseline;  // undefended bundle for `attack`
  std::string dataset;   // CSV; empty means the synthetic testbed
  std::size_t synth_items = 625;
  std::string mode = "NR";
  std::string architecture = "toy";
  std::string split = "test";
  std::string out_dir = "out";
  std::uint64_t seed = 0;

  // smoothing
  double sigma_f = 0.25;
  std::size_t n_samples = 2000;
  double alpha = 0.999;
  double tau = 1e-3;
  std::vector<double> sigmas{0.1, 0.25, 0.5};

  // training
  std::size_t epochs = 400;
  std::size_t batch_size = 16;
  double learning_rate = 3e-2;
  double train_fraction = 0.8;
  std::size_t n_train = 16;
  std::size_t val_samples = 200;
  double ftn_spread = 2.0;
  double variance_weight = 1.0;
  bool resume = false;

  // attack / verify / curves
  std::size_t iterations = 10;
  std::vector<double> epsilons{0.02, 0.05, 0.1, 0.15, 0.20, 0.25};
  std::string norm = "linf";
  std::size_t surrogate_samples = 32;
  std::size_t max_records = 0;  // 0 = whole split
  std::size_t trials = 100;
  std::size_t bins = 10;
  std::size_t timing_runs = 10;

  SmoothingConfig smoothing() const {
    SmoothingConfig c;
    c.sigma_f = sigma_f;
    c.n_samples = n_samples;
    c.alpha = alpha;
    c.tau = tau;
    c.seed = seed;
    return c;
  }

  TrainConfig training() const {
    TrainConfig t;
    t.epochs = epochs;
    t.batch_size = batch_size;
    t.learning_rate = learning_rate;
    t.seed = seed;
    t.train_fraction = train_fraction;
    t.validation_fraction = 1.0 - train_fraction;
    t.sigma_f = sigma_f;
    t.n_train = n_train;
    t.val_samples = val_samples;
    t.ftn_spread = ftn_spread;
    t.variance_weight = variance_weight;
    return t;
  }

  AttackConfig attack() const {
    AttackConfig a;
    a.iterations = iterations;
    a.epsilons = epsilons;
    a.norm = parse_attack_norm(norm);
    a.surrogate_samples = surrogate_samples;
    a.seed = seed;
    return a;
  }
};

inline const std::vector<std::string>& commands() {
  static const std::vector<std::string> names{"synth", "train", "certify", "evaluate", "attack", "verify", "curves"};
  return names;
}

inline void bind(CLI::App& app, RunConfig& c) {
  app.option_defaults()->always_capture_default();
  app.set_config("--config", "", "flat key=value file; command-line flags win");
  app.allow_config_extras(CLI::config_extras_mode::error);
  app.add_option("command", c.command, "synth | train | certify | evaluate | attack | verify | curves")
      ->required()
      ->check(CLI::IsMember(commands()));
  app.add_option("--model", c.model, "model bundle directory");
  app.add_option("--baseline", c.baseline, "undefended model bundle (attack)");
  app.add_option("--dataset", c.dataset, "dataset CSV (path,mos or ref_path,dist_path,mos)");
  app.add_option("--synth_items", c.synth_items, "synthetic testbed size when no dataset is given");
  app.add_option("--mode", c.mode, "NR or FR (synthetic testbed)")->check(CLI::IsMember({"NR", "FR"}));
  app.add_option("--architecture", c.architecture, "toy or linear")->check(CLI::IsMember({"toy", "linear"}));
  app.add_option("--split", c.split, "records to process")->check(CLI::IsMember({"test", "train", "all"}));
  app.add_option("--out_dir,--out-dir", c.out_dir, "artifact directory");
  app.add_option("--seed", c.seed, "global seed (CERTSMOOTH_SEED overrides)");

  app.add_option("--sigma_f", c.sigma_f, "feature noise std (training and certification)");
  app.add_option("--n_samples", c.n_samples, "Monte-Carlo samples N");
  app.add_option("--alpha", c.alpha, "confidence of the percentile bounds");
  app.add_option("--tau", c.tau, "Jacobian-norm abstain threshold");
  app.add_option("--sigmas", c.sigmas, "sigma_f sweep for evaluate and curves")->delimiter(',');

  app.add_option("--epochs", c.epochs);
  app.add_option("--batch_size", c.batch_size);
  app.add_option("--learning_rate", c.learning_rate);
  app.add_option("--train_fraction", c.train_fraction);
  app.add_option("--n_train", c.n_train, "noise draws per item and step");
  app.add_option("--val_samples", c.val_samples);
  app.add_option("--ftn_spread", c.ftn_spread);
  app.add_option("--variance_weight", c.variance_weight, "weight of the noise-variance term in the training loss")
      ->check(CLI::Range(0.0, 1.0));
  app.add_flag("--resume", c.resume, "continue training the bundle given by --model");

  app.add_option("--iterations", c.iterations, "I-FGSM iterations");
  app.add_option("--epsilons", c.epsilons, "attack budgets")->delimiter(',');
  app.add_option("--norm", c.norm)->check(CLI::IsMember({"linf", "l2"}));
  app.add_option("--surrogate_samples", c.surrogate_samples);
  app.add_option("--max_records", c.max_records, "cap on processed records, 0 = all");
  app.add_option("--trials", c.trials, "perturbations per record (verify)");
  app.add_option("--bins", c.bins);
  app.add_option("--timing_runs", c.timing_runs);
}

namespace detail {

inline std::string num(double v) {
  std::ostringstream s;
  s.precision(17);
  s << v;
  return s.str();
}

inline std::ofstream open_out(const std::filesystem::path& p) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw IoError("cannot write " + p.string());
  return out;
}

inline QualityDataset resolve_dataset(const RunConfig& c) {
  if (!c.dataset.empty()) return load_dataset(c.dataset, c.seed, c.train_fraction);
  auto ds = synth_dataset(c.seed, c.synth_items, parse_mode(c.mode));
  assign_split(ds, c.train_fraction);
  return ds;
}

inline std::vector<std::size_t> resolve_split(const RunConfig& c, const QualityDataset& ds) {
  std::vector<std::size_t> idx;
  if (c.split == "test") {
    idx = ds.test;
  } else if (c.split == "train") {
    idx = ds.train;
  } else {
    for (std::size_t i = 0; i < ds.records.size(); ++i) idx.push_back(i);
  }
  if (c.max_records && idx.size() > c.max_records) idx.resize(c.max_records);
  return idx;
}

inline FsIqaModel load_model(const std::string& dir, const QualityDataset& ds) {
  if (dir.empty()) throw ConfigError("--model is required");
  auto m = load_bundle(dir);
  if (m.mode != ds.mode)
    throw ConfigError("model is " + mode_name(m.mode) + " but dataset is " + mode_name(ds.mode));
  return m;
}

inline nlohmann::ordered_json certificate_line(const CertificationOutput& c) {
  const auto bound = [](double v) -> nlohmann::ordered_json {
    if (std::isinf(v)) return v < 0 ? "-inf" : "+inf";
    return v;
  };
  nlohmann::ordered_json j;
  j["id"] = c.id;
  if (c.abstained()) {
    j["eps_x"] = "abstain";
  } else {
    j["S"] = *c.score;
    j["eps_x"] = *c.epsilon_x;
    j["S_l"] = bound(c.bounds.s_lower);
    j["S_u"] = bound(c.bounds.s_upper);
  }
  j["spectral_value"] = c.spectral.value;
  j["seed"] = c.seed;
  return j;
}

}  // namespace detail

inline void write_manifest(const CLI::App& app, const RunConfig& c) {
  auto out = detail::open_out(std::filesystem::path(c.out_dir) / ("manifest_" + c.command + ".cfg"));
  out << "# resolved run configuration; replay with --config\n";
  std::istringstream lines(app.config_to_str(true, false));
  for (std::string line; std::getline(lines, line);)
    if (line.rfind("seed=", 0) != 0) out << line << '\n';
  out << "seed=" << c.seed << '\n';  // resolved, possibly from the environment
}

inline int cmd_synth(const RunConfig& c) {
  const auto ds = synth_dataset(c.seed, c.synth_items, parse_mode(c.mode));
  save_dataset(ds, std::filesystem::path(c.out_dir) / "dataset");
  std::cout << "wrote " << ds.records.size() << " records, fingerprint " << fingerprint(ds) << '\n';
  return 0;
}

inline int cmd_train(const RunConfig& c) {
  const auto ds = detail::resolve_dataset(c);
  const auto tc = c.training();
  FsIqaModel m;
  std::size_t start = 0;
  if (c.resume) {
    m = detail::load_model(c.model, ds);
    start = read_bundle_manifest(c.model).value("epochs_completed", std::size_t{0});
  } else {
    ModelSpec spec;
    spec.mode = ds.mode;
    spec.architecture = parse_architecture(c.architecture);
    spec.image_shape = ds.image_shape();
    spec.seed = c.seed;
    m = make_model(spec);
  }
  const std::filesystem::path out(c.out_dir);
  const auto write_loss = [&](const TrainReport& rep) {
    auto csv = detail::open_out(out / "loss.csv");
    csv << "epoch,loss\n";
    for (std::size_t e = 0; e < rep.epoch_loss.size(); ++e)
      csv << rep.start_epoch + e << ',' << detail::num(rep.epoch_loss[e]) << '\n';
  };
  TrainReport rep;
  try {
    rep = train(m, ds, tc, start);
  } catch (const TrainingDiverged& e) {
    write_loss(e.report());
    throw;
  }
  write_loss(rep);
  save_bundle(m, out / "model",
              {{"epochs_completed", start + tc.epochs},
               {"train_sigma_f", tc.sigma_f},
               {"variance_weight", tc.variance_weight},
               {"dataset_fingerprint", fingerprint(ds)}});
  nlohmann::ordered_json report;
  report["start_epoch"] = rep.start_epoch;
  report["epochs"] = rep.epoch_loss.size();
  report["final_loss"] = rep.epoch_loss.back();
  report["train_mse"] = rep.train_mse;
  report["val_srcc"] = rep.val_srcc;
  report["backbone_checksum_before"] = rep.backbone_checksum_before;
  report["backbone_checksum_after"] = rep.backbone_checksum_after;
  detail::open_out(out / "train_report.json") << report.dump(1) << '\n';
  std::cout << "trained " << rep.epoch_loss.size() << " epochs: train MSE " << rep.train_mse << ", validation SRCC "
            << rep.val_srcc << '\n';
  return 0;
}

inline int cmd_certify(const RunConfig& c) {
  const auto ds = detail::resolve_dataset(c);
  const auto m = detail::load_model(c.model, ds);
  const auto cfg = c.smoothing();
  cfg.validate();
  const NoiseBank bank(cfg.seed, cfg.n_samples, m.feature_dim());
  auto out = detail::open_out(std::filesystem::path(c.out_dir) / "certificates.jsonl");
  std::size_t abstains = 0, errors = 0, n = 0;
  for (std::size_t i : detail::resolve_split(c, ds)) {
    const auto& r = ds.records[i];
    ++n;
    try {
      const auto cert = certify(m, r, cfg, &bank);
      abstains += cert.abstained();
      out << detail::certificate_line(cert).dump() << '\n';
    } catch (const Error& e) {
      ++errors;
      nlohmann::ordered_json j;
      j["id"] = r.id;
      j["error"] = e.what();
      out << j.dump() << '\n';
    }
  }
  if (!out) throw IoError("failed writing certificates.jsonl");
  std::cout << "certified " << n << " records (" << abstains << " abstain, " << errors << " errors)\n";
  return 0;
}

inline int cmd_evaluate(const RunConfig& c) {
  const auto ds = detail::resolve_dataset(c);
  const auto m = detail::load_model(c.model, ds);
  const auto idx = detail::resolve_split(c, ds);
  const std::filesystem::path out(c.out_dir);
  auto csv = detail::open_out(out / "evaluation.csv");
  csv << "sigma_f,records,abstains,abstain_rate,srcc_cert,plcc_cert,srcc_nocert,plcc_nocert,mean_width,"
         "predict_backbone_calls,certify_backbone_calls,baseline_backbone_calls,count_ratio\n";
  nlohmann::ordered_json all = nlohmann::ordered_json::array();
  for (double sigma : c.sigmas) {
    auto cfg = c.smoothing();
    cfg.sigma_f = sigma;
    const auto rep = evaluate(m, ds, idx, cfg);
    const auto t = timing_report(m, ds, idx, cfg, c.timing_runs);
    csv << detail::num(sigma) << ',' << rep.records << ',' << rep.abstains << ',' << detail::num(rep.abstain_rate) << ','
        << detail::num(rep.srcc_cert) << ',' << detail::num(rep.plcc_cert) << ',' << detail::num(rep.srcc_nocert)
        << ',' << detail::num(rep.plcc_nocert) << ',' << detail::num(rep.mean_width) << ','
        << detail::num(t.predict_backbone_calls) << ',' << detail::num(t.certify_backbone_calls) << ','
        << detail::num(t.baseline_backbone_calls) << ',' << detail::num(t.count_ratio) << '\n';
    nlohmann::ordered_json j;
    j["sigma_f"] = sigma;
    j["records"] = rep.records;
    j["abstains"] = rep.abstains;
    j["abstain_rate"] = rep.abstain_rate;
    j["with_cert"] = {{"srcc", rep.srcc_cert}, {"plcc", rep.plcc_cert}};
    j["no_cert"] = {{"srcc", rep.srcc_nocert}, {"plcc", rep.plcc_nocert}};
    j["mean_width"] = rep.mean_width;
    j["backbone_calls"] = {{"predict", t.predict_backbone_calls},
                           {"certify", t.certify_backbone_calls},
                           {"certify_jvp", t.certify_jvp_calls},
                           {"certify_vjp", t.certify_vjp_calls},
                           {"input_space_median", t.baseline_backbone_calls}};
    all.push_back(j);
    // Wall clock is reported on the console only, so artifacts stay reproducible.
    std::cout << "sigma_f " << sigma << ": SRCC " << rep.srcc_cert << " (no cert " << rep.srcc_nocert
              << "), abstain " << rep.abstain_rate << ", ms/image predict " << t.predict_ms << " certify "
              << t.certify_ms << " input-space " << t.baseline_ms << '\n';
  }
  detail::open_out(out / "evaluation.json") << all.dump(1) << '\n';
  return 0;
}

inline int cmd_attack(const RunConfig& c) {
  const auto ds = detail::resolve_dataset(c);
  const auto defended = detail::load_model(c.model, ds);
  if (c.baseline.empty()) throw ConfigError("--baseline (undefended bundle) is required for attack");
  const auto undefended = detail::load_model(c.baseline, ds);
  const auto cfg = c.smoothing();
  cfg.validate();
  const auto curve = attack_gain_curve(defended, cfg, undefended, ds, detail::resolve_split(c, ds), c.attack());
  auto csv = detail::open_out(std::filesystem::path(c.out_dir) / "attack.csv");
  csv << "epsilon,defended_gain,undefended_gain\n";
  for (const auto& p : curve) {
    csv << detail::num(p.epsilon) << ',' << detail::num(p.defended_gain) << ',' << detail::num(p.undefended_gain)
        << '\n';
    std::cout << "eps " << p.epsilon << ": defended " << p.defended_gain << ", undefended " << p.undefended_gain << '\n';
  }
  return 0;
}

inline int cmd_verify(const RunConfig& c) {
  const auto ds = detail::resolve_dataset(c);
  const auto m = detail::load_model(c.model, ds);
  const auto cfg = c.smoothing();
  cfg.validate();
  const NoiseBank bank(cfg.seed, cfg.n_samples, m.feature_dim());
  auto csv = detail::open_out(std::filesystem::path(c.out_dir) / "verify.csv");
  csv << "id,eps_x,trials,violations,max_excess\n";
  std::size_t trials = 0, violations = 0, certified = 0;
  for (std::size_t i : detail::resolve_split(c, ds)) {
    const auto& r = ds.records[i];
    const auto cert = certify(m, r, cfg, &bank);
    if (cert.abstained()) {
      csv << r.id << ",abstain,0,0,0\n";
      continue;
    }
    ++certified;
    const auto rep = verify_certificate(m, r, cert, c.trials, derive_seed(c.seed, i));
    trials += rep.trials;
    violations += rep.violations;
    csv << r.id << ',' << detail::num(*cert.epsilon_x) << ',' << rep.trials << ',' << rep.violations << ','
        << detail::num(rep.max_excess) << '\n';
  }
  std::cout << "verified " << certified << " certificates: " << violations << " violations in " << trials
            << " perturbations\n";
  return 0;
}

inline int cmd_curves(const RunConfig& c) {
  const auto ds = detail::resolve_dataset(c);
  const auto m = detail::load_model(c.model, ds);
  const auto idx = detail::resolve_split(c, ds);
  auto csv = detail::open_out(std::filesystem::path(c.out_dir) / "curves.csv");
  csv << "sigma_f,bin,mean_epsilon,mean_width,count\n";
  for (double sigma : c.sigmas) {
    auto cfg = c.smoothing();
    cfg.sigma_f = sigma;
    const NoiseBank bank(cfg.seed, cfg.n_samples, m.feature_dim());
    std::vector<CertificationOutput> certs;
    for (std::size_t i : idx) certs.push_back(certify(m, ds.records[i], cfg, &bank));
    const auto curve = bound_width_curve(certs, c.bins);
    for (std::size_t b = 0; b < curve.size(); ++b)
      csv << detail::num(sigma) << ',' << b << ',' << detail::num(curve[b].mean_epsilon) << ','
          << detail::num(curve[b].mean_width) << ',' << curve[b].count << '\n';
  }
  return 0;
}

inline int dispatch(const RunConfig& c) {
  if (c.command == "synth") return cmd_synth(c);
  if (c.command == "train") return cmd_train(c);
  if (c.command == "certify") return cmd_certify(c);
  if (c.command == "evaluate") return cmd_evaluate(c);
  if (c.command == "attack") return cmd_attack(c);
  if (c.command == "verify") return cmd_verify(c);
  return cmd_curves(c);
}

// Exit codes: 0 ok, 2 configuration, 3 numeric or training failure, 4 I/O.
inline int run(int argc, const char* const* argv) {
  CLI::App app{"Certified feature-space smoothing for image quality models"};
  RunConfig c;
  bind(app, c);
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  try {
    if (const char* env = std::getenv("CERTSMOOTH_SEED")) {
      try {
        std::size_t used = 0;
        c.seed = std::stoull(env, &used);
        if (used != std::string(env).size()) throw std::invalid_argument(env);
      } catch (const std::exception&) {
        throw ConfigError(std::string("CERTSMOOTH_SEED is not an unsigned integer: '") + env + "'");
      }
    }
    std::filesystem::create_directories(c.out_dir);
    write_manifest(app, c);
    return dispatch(c);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const InvalidInput& e) {
    std::cerr << "invalid input: " << e.what() << '\n';
    return 2;
  } catch (const IoError& e) {
    std::cerr << "I/O error: " << e.what() << '\n';
    return 4;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "I/O error: " << e.what() << '\n';
    return 4;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  }
}

}  // namespace certsmooth::cli
