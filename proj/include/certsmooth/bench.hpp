#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "certsmooth/metrics.hpp"
#include "certsmooth/pipeline.hpp"

namespace certsmooth {

// ---- input-space smoothing baselines

enum class Reduction { mean, trimmed, median };

inline Reduction parse_reduction(const std::string& s) {
  if (s == "mean") return Reduction::mean;
  if (s == "trimmed") return Reduction::trimmed;
  if (s == "median") return Reduction::median;
  throw InvalidInput("unknown reduction '" + s + "'");
}

// N full-model passes on x + sigma_in * e_j, reduced. Noise row j is a pure
// function of (seed, j).
inline double input_space_smooth(const DifferentiableMap& plain, const Tensor& x, double sigma_in, std::size_t n,
                                 Reduction reduction, std::uint64_t seed, double alpha_trim = 0.1) {
  detail::require(sigma_in >= 0.0 && n >= 1, "input_space_smooth: need sigma_in >= 0 and n >= 1");
  detail::require(plain.output_size() == 1, "input_space_smooth: model must be scalar-valued");
  std::vector<double> values(n);
  Tensor noised(x.shape());
  std::vector<double> noise(x.size());
  for (std::size_t j = 0; j < n; ++j) {
    NoiseBank::fill_row(seed, j, noise);
    for (std::size_t i = 0; i < x.size(); ++i) noised[i] = x[i] + sigma_in * noise[i];
    values[j] = plain.forward(noised)[0];
    if (!std::isfinite(values[j])) throw NumericError("input_space_smooth: non-finite model output");
  }
  const auto samples = ScoreSamples::from_unsorted(std::move(values), seed);
  switch (reduction) {
    case Reduction::mean: return mean_smooth(samples);
    case Reduction::trimmed: return trimmed_smooth(samples, alpha_trim);
    case Reduction::median: break;
  }
  return median_smooth(samples);
}

// ---- I-FGSM

enum class AttackNorm { linf, l2 };

inline AttackNorm parse_attack_norm(const std::string& s) {
  if (s == "linf" || s == "l_inf") return AttackNorm::linf;
  if (s == "l2") return AttackNorm::l2;
  throw InvalidInput("unknown attack norm '" + s + "' (expected linf or l2)");
}

struct AttackConfig {
  std::size_t iterations = 10;
  std::vector<double> epsilons{0.02, 0.05, 0.1, 0.15, 0.20, 0.25};
  AttackNorm norm = AttackNorm::linf;
  std::size_t surrogate_samples = 32;  // fixed noise draws behind the defended gradient
  std::uint64_t seed = 0;

  void validate() const {
    if (iterations == 0) throw ConfigError("attack: iterations must be positive");
    if (epsilons.empty()) throw ConfigError("attack: need at least one epsilon");
    for (std::size_t i = 0; i < epsilons.size(); ++i) {
      if (!(epsilons[i] > 0.0)) throw ConfigError("attack: epsilons must be positive");
      if (i > 0 && !(epsilons[i] > epsilons[i - 1])) throw ConfigError("attack: epsilons must be ascending");
    }
    if (surrogate_samples == 0) throw ConfigError("attack: surrogate_samples must be positive");
  }
};

// A scalar score of one image, with the gradient the attacker follows.
struct ScoreModel {
  std::function<double(const Tensor&)> score;
  std::function<Tensor(const Tensor&)> gradient;
};

inline ScoreModel undefended_model(const FsIqaModel& plain, const InputRecord& r) {
  MapPtr map = plain.plain_map(r);
  return {[map](const Tensor& x) { return map->forward(x)[0]; },
          [map](const Tensor& x) { return map->vjp(x, Tensor::vector({1.0})); }};
}

// Scores with the smoothed median under `eval_seed`; gradients come from the
// mean of scorer outputs over surrogate_samples fixed noise draws.
inline ScoreModel defended_model(const FsIqaModel& m, const InputRecord& r, const SmoothingConfig& cfg,
                                 std::uint64_t eval_seed, std::size_t surrogate_samples, std::uint64_t surrogate_seed) {
  MapPtr features = m.certified_map(r);
  MapPtr scorer = m.scorer;
  SmoothingConfig eval_cfg = cfg;
  eval_cfg.seed = eval_seed;
  auto bank = std::make_shared<const NoiseBank>(surrogate_seed, surrogate_samples, m.feature_dim());
  const double sigma = cfg.sigma_f;
  return {[features, scorer, eval_cfg](const Tensor& x) {
            return median_smooth(sample_noised_scores(*scorer, features->forward(x), eval_cfg));
          },
          [features, scorer, bank, sigma](const Tensor& x) {
            const Tensor f = features->forward(x);
            Tensor g(f.shape()), z(f.shape());
            for (std::size_t j = 0; j < bank->count(); ++j) {
              const auto e = bank->row(j);
              for (std::size_t d = 0; d < f.size(); ++d) z[d] = f[d] + sigma * e[d];
              axpy(g.values(), 1.0 / static_cast<double>(bank->count()), scorer->vjp(z, Tensor::vector({1.0})).values());
            }
            return features->vjp(x, g);
          }};
}

// Sign-gradient ascent on the score, step eps/iterations, projected onto the
// eps-ball around x after every step.
inline Tensor ifgsm_attack(const ScoreModel& model, const Tensor& x, double eps, std::size_t iterations,
                           AttackNorm norm = AttackNorm::linf) {
  if (!model.gradient) throw InvalidInput("ifgsm: model exposes no gradient");
  detail::require(eps >= 0.0 && iterations > 0, "ifgsm: need eps >= 0 and iterations > 0");
  Tensor adv = x;
  if (eps == 0.0) return adv;
  const double step = eps / static_cast<double>(iterations);
  for (std::size_t t = 0; t < iterations; ++t) {
    const Tensor g = model.gradient(adv);
    if (!g.all_finite()) throw NumericError("ifgsm: non-finite gradient");
    if (norm == AttackNorm::linf) {
      for (std::size_t i = 0; i < adv.size(); ++i) {
        const double s = g[i] > 0.0 ? 1.0 : (g[i] < 0.0 ? -1.0 : 0.0);
        adv[i] = std::clamp(adv[i] + step * s, x[i] - eps, x[i] + eps);
      }
    } else {
      const double gn = norm2(g.values());
      if (gn == 0.0) break;
      axpy(adv.values(), step / gn, g.values());
      Tensor delta = adv - x;
      const double dn = norm2(delta.values());
      if (dn > eps) {
        scale_in_place(delta.values(), eps / dn);
        adv = x + delta;
      }
    }
  }
  return adv;
}

struct GainPoint {
  double epsilon = 0.0;
  double defended_gain = 0.0;    // relative change of the mean score
  double undefended_gain = 0.0;
};

// Relative score gain (mean S_adv - mean S_clean) / mean |S_clean| per epsilon
// for the smoothed model and an undefended counterpart, over the given records.
inline std::vector<GainPoint> attack_gain_curve(const FsIqaModel& defended, const SmoothingConfig& cfg,
                                                const FsIqaModel& undefended, const QualityDataset& ds,
                                                const std::vector<std::size_t>& idx, const AttackConfig& attack) {
  attack.validate();
  detail::require(!idx.empty(), "attack: no records");
  std::vector<GainPoint> curve;
  for (double eps : attack.epsilons) curve.push_back({eps, 0.0, 0.0});
  const auto relative = [](double adv_sum, double clean_sum, double clean_abs_sum) {
    return clean_abs_sum > 0.0 ? (adv_sum - clean_sum) / clean_abs_sum : 0.0;
  };
  std::vector<double> def_adv(curve.size(), 0.0), und_adv(curve.size(), 0.0);
  double def_clean = 0.0, def_abs = 0.0, und_clean = 0.0, und_abs = 0.0;
  for (std::size_t n = 0; n < idx.size(); ++n) {
    const auto& r = ds.records[idx[n]];
    // Evaluation noise is independent of the surrogate noise the attacker sees.
    const std::uint64_t eval_seed = derive_seed(attack.seed, 2 * n + 1);
    const std::uint64_t surrogate_seed = derive_seed(attack.seed, 2 * n);
    const ScoreModel d = defended_model(defended, r, cfg, eval_seed, attack.surrogate_samples, surrogate_seed);
    const ScoreModel u = undefended_model(undefended, r);
    const double dc = d.score(r.image), uc = u.score(r.image);
    def_clean += dc;
    def_abs += std::abs(dc);
    und_clean += uc;
    und_abs += std::abs(uc);
    for (std::size_t e = 0; e < curve.size(); ++e) {
      def_adv[e] += d.score(ifgsm_attack(d, r.image, curve[e].epsilon, attack.iterations, attack.norm));
      und_adv[e] += u.score(ifgsm_attack(u, r.image, curve[e].epsilon, attack.iterations, attack.norm));
    }
  }
  for (std::size_t e = 0; e < curve.size(); ++e) {
    curve[e].defended_gain = relative(def_adv[e], def_clean, def_abs);
    curve[e].undefended_gain = relative(und_adv[e], und_clean, und_abs);
  }
  return curve;
}

// ---- empirical certificate verification

struct ViolationReport {
  std::size_t trials = 0;
  std::size_t violations = 0;
  double max_excess = 0.0;  // largest distance of an observed score outside [S_l, S_u]
  double fraction() const { return trials ? static_cast<double>(violations) / static_cast<double>(trials) : 0.0; }
};

// Re-scores perturbed copies x + dx, ||dx||_2 <= eps_x, and counts scores
// outside [S_l, S_u]. With trials >= 2 the first two probes are +/- the top
// singular direction at full radius; the rest alternate between the sphere
// and the ball interior. fresh_seed re-draws the smoothing noise per probe.
inline ViolationReport verify_certificate(const FsIqaModel& m, const InputRecord& r, const CertificationOutput& cert,
                                          std::size_t trials, std::uint64_t seed, bool fresh_seed = false) {
  detail::require(!cert.abstained(), "verify_certificate: certificate abstained");
  ViolationReport report;
  if (trials == 0) return report;
  SmoothingConfig cfg;
  cfg.sigma_f = cert.sigma_f;
  cfg.n_samples = cert.n_samples;
  cfg.alpha = cert.alpha;
  cfg.tau = cert.tau;
  cfg.seed = cert.seed;
  const NoiseBank bank(cert.seed, cert.n_samples, m.feature_dim());
  const double eps = *cert.epsilon_x;
  const std::size_t dim = r.image.size();
  InputRecord probe = r;
  CounterRng rng(derive_seed(seed, 0x7E51F), 0);

  for (std::size_t t = 0; t < trials; ++t) {
    Tensor dir;
    double radius = eps;
    if (t < 2 && cert.spectral.direction.size() == dim) {
      dir = (t == 0 ? 1.0 : -1.0) * cert.spectral.direction.reshaped(r.image.shape());
    } else {
      dir = Tensor(r.image.shape());
      rng.fill_normal(dir.values());
      scale_in_place(dir.values(), 1.0 / norm2(dir.values()));
      if (t % 2 == 1) radius = eps * std::pow(rng.uniform(), 1.0 / static_cast<double>(dim));
    }
    probe.image = r.image + radius * dir;
    double s;
    if (fresh_seed) {
      SmoothingConfig fresh = cfg;
      fresh.seed = derive_seed(seed, t + 1);
      s = predict(m, probe, fresh);
    } else {
      s = predict(m, probe, cfg, &bank);
    }
    ++report.trials;
    const double excess = std::max(cert.bounds.s_lower - s, s - cert.bounds.s_upper);
    if (excess > 0.0) {
      ++report.violations;
      report.max_excess = std::max(report.max_excess, excess);
    }
  }
  return report;
}

// ---- bound width vs radius (10 quantile bins on eps_x)

struct CurvePoint {
  double mean_epsilon = 0.0;
  double mean_width = 0.0;
  std::size_t count = 0;
};

inline std::vector<CurvePoint> bound_width_curve(const std::vector<CertificationOutput>& certs, std::size_t bins = 10) {
  std::vector<const CertificationOutput*> ok;
  for (const auto& c : certs)
    if (!c.abstained()) ok.push_back(&c);
  if (ok.size() < bins)
    throw InvalidInput("bound_width_curve: need at least " + std::to_string(bins) + " certified records, got " +
                       std::to_string(ok.size()));
  std::stable_sort(ok.begin(), ok.end(), [](auto* a, auto* b) { return *a->epsilon_x < *b->epsilon_x; });
  std::vector<CurvePoint> curve(bins);
  const std::size_t n = ok.size();
  for (std::size_t b = 0; b < bins; ++b) {
    const std::size_t lo = b * n / bins, hi = (b + 1) * n / bins;
    for (std::size_t i = lo; i < hi; ++i) {
      curve[b].mean_epsilon += *ok[i]->epsilon_x;
      curve[b].mean_width += ok[i]->width();
    }
    curve[b].count = hi - lo;
    curve[b].mean_epsilon /= static_cast<double>(hi - lo);
    curve[b].mean_width /= static_cast<double>(hi - lo);
  }
  return curve;
}

// ---- invocation counts and wall clock

struct TimingReport {
  std::size_t runs = 0;
  double predict_backbone_calls = 0.0;  // per image
  double certify_backbone_calls = 0.0;
  double certify_jvp_calls = 0.0;
  double certify_vjp_calls = 0.0;
  double baseline_backbone_calls = 0.0;
  double count_ratio = 0.0;             // baseline / predict backbone calls
  double predict_ms = 0.0;              // wall-clock medians, informational
  double certify_ms = 0.0;
  double baseline_ms = 0.0;
};

namespace detail {

inline double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

template <class F>
double time_ms(F&& f) {
  const auto t0 = std::chrono::steady_clock::now();
  f();
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace detail

// Per-image backbone calls of predict, certify and the input-space median
// baseline (same N), averaged over `runs` images cycling through idx.
inline TimingReport timing_report(const FsIqaModel& m, const QualityDataset& ds, const std::vector<std::size_t>& idx,
                                  const SmoothingConfig& cfg, std::size_t runs = 100) {
  detail::require(!idx.empty() && runs > 0, "timing_report: need records and runs > 0");
  TimingReport rep;
  rep.runs = runs;
  const NoiseBank bank(cfg.seed, cfg.n_samples, m.feature_dim());
  const DifferentiableMap& features = m.feature_map();  // the pair adapter in FR mode
  const DifferentiableMap& backbone = *m.backbone;
  const auto reset = [&] {
    features.reset_counts();
    backbone.reset_counts();
  };
  std::vector<double> tp, tc, tb;
  for (std::size_t t = 0; t < runs; ++t) {
    const auto& r = ds.records[idx[t % idx.size()]];
    reset();
    tp.push_back(detail::time_ms([&] { predict(m, r, cfg, &bank); }));
    rep.predict_backbone_calls += static_cast<double>(features.counts().forward);

    reset();
    tc.push_back(detail::time_ms([&] { certify(m, r, cfg, &bank); }));
    rep.certify_backbone_calls += static_cast<double>(features.counts().forward);
    rep.certify_jvp_calls += static_cast<double>(backbone.counts().jvp);
    rep.certify_vjp_calls += static_cast<double>(backbone.counts().vjp);

    const MapPtr plain = m.plain_map(r);
    reset();
    tb.push_back(detail::time_ms(
        [&] { input_space_smooth(*plain, r.image, cfg.sigma_f, cfg.n_samples, Reduction::median, cfg.seed); }));
    rep.baseline_backbone_calls += static_cast<double>(backbone.counts().forward);
  }
  reset();
  const auto per = [&](double& v) { v /= static_cast<double>(runs); };
  per(rep.predict_backbone_calls);
  per(rep.certify_backbone_calls);
  per(rep.certify_jvp_calls);
  per(rep.certify_vjp_calls);
  per(rep.baseline_backbone_calls);
  rep.count_ratio = rep.baseline_backbone_calls / rep.predict_backbone_calls;
  rep.predict_ms = detail::median_of(tp);
  rep.certify_ms = detail::median_of(tc);
  rep.baseline_ms = detail::median_of(tb);
  return rep;
}

// ---- output stability

struct StabilityReport {
  std::size_t runs = 0;
  double mean = 0.0;
  double max_relative_deviation = 0.0;  // max_r |S_r - mean| / |mean|
  std::vector<double> scores;
};

// predict repeated under seeds derive_seed(base_seed, r), or base_seed every
// time when fixed_seed is set.
inline StabilityReport stability_report(const FsIqaModel& m, const InputRecord& r, SmoothingConfig cfg,
                                        std::size_t runs, std::uint64_t base_seed, bool fixed_seed = false) {
  detail::require(runs >= 10, "stability_report: need at least 10 runs");
  StabilityReport rep;
  rep.runs = runs;
  for (std::size_t i = 0; i < runs; ++i) {
    cfg.seed = fixed_seed ? base_seed : derive_seed(base_seed, i);
    rep.scores.push_back(predict(m, r, cfg));
  }
  for (double s : rep.scores) rep.mean += s / static_cast<double>(runs);
  if (rep.mean == 0.0) throw NumericError("stability_report: mean score is zero, relative deviation undefined");
  for (double s : rep.scores)
    rep.max_relative_deviation = std::max(rep.max_relative_deviation, std::abs(s - rep.mean) / std::abs(rep.mean));
  return rep;
}

// ---- evaluation

struct EvalReport {
  std::size_t records = 0;
  std::size_t abstains = 0;
  double abstain_rate = 0.0;
  double srcc_cert = std::numeric_limits<double>::quiet_NaN();  // certified records only
  double plcc_cert = std::numeric_limits<double>::quiet_NaN();
  double srcc_nocert = 0.0;                                      // predict on every record
  double plcc_nocert = 0.0;
  double mean_width = std::numeric_limits<double>::quiet_NaN();  // over finite bounds
  std::size_t backbone_calls = 0;
  std::vector<CertificationOutput> certificates;
  std::vector<double> predictions;
};

inline EvalReport evaluate(const FsIqaModel& m, const QualityDataset& ds, const std::vector<std::size_t>& idx,
                           const SmoothingConfig& cfg) {
  detail::require(idx.size() >= 3, "evaluate: need at least 3 records");
  EvalReport rep;
  rep.records = idx.size();
  const NoiseBank bank(cfg.seed, cfg.n_samples, m.feature_dim());
  m.feature_map().reset_counts();
  std::vector<double> mos, cert_scores, cert_mos;
  double width_sum = 0.0;
  std::size_t width_count = 0;
  for (std::size_t i : idx) {
    const auto& r = ds.records[i];
    mos.push_back(r.mos);
    rep.predictions.push_back(predict(m, r, cfg, &bank));
    rep.certificates.push_back(certify(m, r, cfg, &bank));
    const auto& c = rep.certificates.back();
    if (c.abstained()) {
      ++rep.abstains;
      continue;
    }
    cert_scores.push_back(*c.score);
    cert_mos.push_back(r.mos);
    if (c.bounds.finite()) {
      width_sum += c.width();
      ++width_count;
    }
  }
  rep.backbone_calls = m.feature_map().counts().forward;
  rep.abstain_rate = static_cast<double>(rep.abstains) / static_cast<double>(rep.records);
  rep.srcc_nocert = srcc(rep.predictions, mos);
  rep.plcc_nocert = plcc(rep.predictions, mos);
  if (cert_scores.size() >= 3) {
    rep.srcc_cert = srcc(cert_scores, cert_mos);
    rep.plcc_cert = plcc(cert_scores, cert_mos);
  }
  if (width_count) rep.mean_width = width_sum / static_cast<double>(width_count);
  return rep;
}

}  // namespace certsmooth
