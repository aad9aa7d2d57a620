#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "certsmooth/distributions.hpp"
#include "certsmooth/map.hpp"
#include "certsmooth/random.hpp"

namespace certsmooth {

struct SmoothingConfig {
  double sigma_f = 0.25;         // feature-noise standard deviation
  std::size_t n_samples = 2000;  // N
  double alpha = 0.999;          // joint confidence of the two percentile bounds
  double tau = 1e-3;             // Jacobian-norm abstain threshold
  std::uint64_t seed = 0;

  void validate() const {
    if (!(sigma_f > 0.0) || !std::isfinite(sigma_f)) throw InvalidInput("smoothing: sigma_f must be finite and positive");
    if (n_samples < 2) throw InvalidInput("smoothing: n_samples must be at least 2");
    if (!(alpha > 0.5 && alpha < 1.0)) throw InvalidInput("smoothing: alpha must lie in (0.5, 1)");
    if (!(tau > 0.0)) throw InvalidInput("smoothing: tau must be positive");
  }
};

// Scorer outputs on noised features, always sorted ascending.
struct ScoreSamples {
  std::vector<double> values;
  std::uint64_t source_seed = 0;

  static ScoreSamples from_unsorted(std::vector<double> values, std::uint64_t seed = 0) {
    std::sort(values.begin(), values.end());
    return {std::move(values), seed};
  }

  std::size_t size() const noexcept { return values.size(); }
};

// Standard-normal noise rows e_i, i = 0..N-1, each a pure function of (seed, i).
// Precomputing them lets repeated evaluations under one seed skip regeneration.
class NoiseBank {
 public:
  NoiseBank(std::uint64_t seed, std::size_t count, std::size_t dim) : seed_(seed), count_(count), dim_(dim) {
    data_.resize(count * dim);
    for (std::size_t i = 0; i < count; ++i) fill_row(seed, i, std::span(data_).subspan(i * dim, dim));
  }

  static void fill_row(std::uint64_t seed, std::size_t index, std::span<double> out) {
    CounterRng rng(seed, index);
    rng.fill_normal(out);
  }

  std::span<const double> row(std::size_t i) const { return std::span(data_).subspan(i * dim_, dim_); }
  std::uint64_t seed() const noexcept { return seed_; }
  std::size_t count() const noexcept { return count_; }
  std::size_t dim() const noexcept { return dim_; }

 private:
  std::uint64_t seed_;
  std::size_t count_;
  std::size_t dim_;
  std::vector<double> data_;
};

namespace detail {

// Unsorted scorer outputs, one per noise row.
inline std::vector<double> noised_score_values(const DifferentiableMap& scorer, const Tensor& f_norm,
                                               const SmoothingConfig& cfg, const NoiseBank* bank) {
  cfg.validate();
  if (f_norm.shape() != scorer.input_shape()) {
    throw InvalidInput("sample_noised_scores: feature shape " + to_string(f_norm.shape()) + " != scorer input " +
                       to_string(scorer.input_shape()));
  }
  detail::require(scorer.output_size() == 1, "sample_noised_scores: scorer must be scalar-valued");
  const std::size_t dim = f_norm.size();
  std::vector<double> values(cfg.n_samples);
  std::vector<double> noise(dim);
  Tensor noised(f_norm.shape());
  const auto score_with = [&](std::span<const double> e) {
    for (std::size_t j = 0; j < dim; ++j) noised[j] = f_norm[j] + cfg.sigma_f * e[j];
    return scorer.forward(noised)[0];
  };
  for (std::size_t i = 0; i < cfg.n_samples; ++i) {
    double s;
    if (bank) {
      s = score_with(bank->row(i));
    } else {
      NoiseBank::fill_row(cfg.seed, i, noise);
      s = score_with(noise);
    }
    if (!std::isfinite(s)) {
      // One regeneration from an independent stream, then give up.
      NoiseBank::fill_row(derive_seed(cfg.seed, 0xBAD5EED), i, noise);
      s = score_with(noise);
      if (!std::isfinite(s)) {
        throw NumericError("sample_noised_scores: scorer returned non-finite output twice for sample " +
                           std::to_string(i));
      }
    }
    values[i] = s;
  }
  return values;
}

inline ScoreSamples sample_scores_impl(const DifferentiableMap& scorer, const Tensor& f_norm,
                                       const SmoothingConfig& cfg, const NoiseBank* bank) {
  return ScoreSamples::from_unsorted(noised_score_values(scorer, f_norm, cfg, bank), cfg.seed);
}

// Same value as median_smooth on the sorted samples, by selection.
inline double median_of_unsorted(std::vector<double> v) {
  const std::size_t n = v.size();
  require(n > 0, "median: no samples");
  const auto mid = v.begin() + static_cast<std::ptrdiff_t>(n / 2);
  std::nth_element(v.begin(), mid, v.end());
  if (n % 2 == 1) return *mid;
  return 0.5 * (*std::max_element(v.begin(), mid) + *mid);
}

}  // namespace detail

// v = sorted {Scorer(f_norm + e_i) : e_i ~ N(0, sigma_f^2 I), i = 1..N}.
inline ScoreSamples sample_noised_scores(const DifferentiableMap& scorer, const Tensor& f_norm,
                                         const SmoothingConfig& cfg) {
  return detail::sample_scores_impl(scorer, f_norm, cfg, nullptr);
}

// Same samples as above, reading noise from a bank generated under cfg.seed.
inline ScoreSamples sample_noised_scores(const DifferentiableMap& scorer, const Tensor& f_norm,
                                         const SmoothingConfig& cfg, const NoiseBank& bank) {
  detail::require(bank.seed() == cfg.seed && bank.count() == cfg.n_samples && bank.dim() == f_norm.size(),
                  "sample_noised_scores: noise bank does not match the smoothing config");
  return detail::sample_scores_impl(scorer, f_norm, cfg, &bank);
}

inline double mean_smooth(const ScoreSamples& samples) {
  detail::require(samples.size() > 0, "mean_smooth: no samples");
  return std::accumulate(samples.values.begin(), samples.values.end(), 0.0) / static_cast<double>(samples.size());
}

// Drops floor(alpha_trim * N) values from each end and averages the rest.
inline double trimmed_smooth(const ScoreSamples& samples, double alpha_trim) {
  detail::require(alpha_trim >= 0.0 && alpha_trim < 0.5, "trimmed_smooth: alpha_trim must lie in [0, 0.5)");
  const std::size_t n = samples.size();
  detail::require(n > 0, "trimmed_smooth: no samples");
  // The small offset absorbs representation error in alpha_trim * N (e.g. (N-1)/(2N) * N).
  const auto cut = static_cast<std::size_t>(std::floor(alpha_trim * static_cast<double>(n) + 1e-9));
  const auto first = samples.values.begin() + static_cast<std::ptrdiff_t>(cut);
  const auto last = samples.values.end() - static_cast<std::ptrdiff_t>(cut);
  return std::accumulate(first, last, 0.0) / static_cast<double>(n - 2 * cut);
}

inline double median_smooth(const ScoreSamples& samples) {
  const std::size_t n = samples.size();
  detail::require(n > 0, "median_smooth: no samples");
  if (n % 2 == 1) return samples.values[n / 2];
  return 0.5 * (samples.values[n / 2 - 1] + samples.values[n / 2]);
}

// (Phi(-eps_f / sigma_f), Phi(eps_f / sigma_f)).
inline std::pair<double, double> percentile_pair(double sigma_f, double eps_f) {
  detail::require(sigma_f > 0.0, "percentile_pair: sigma_f must be positive");
  detail::require(eps_f >= 0.0, "percentile_pair: eps_f must be non-negative");
  const double z = eps_f / sigma_f;
  return {gaussian_cdf(-z), gaussian_cdf(z)};
}

struct CertifiedBounds {
  double s_lower = -std::numeric_limits<double>::infinity();
  double s_upper = std::numeric_limits<double>::infinity();
  double q_lower = 0.0;
  double q_upper = 0.0;
  std::size_t k_lower = 0;  // 1-based; 0 means no certifiable lower order statistic
  std::size_t k_upper = 0;  // 1-based; N+1 means no certifiable upper order statistic
  double confidence = 0.0;

  bool finite() const noexcept { return std::isfinite(s_lower) && std::isfinite(s_upper); }
};

// Order-statistic percentile bounds. With probability >= alpha over the sample
// draw, values[k_lower] <= the true q_lower-quantile and values[k_upper] >= the
// true q_upper-quantile; the failure budget (1 - alpha) is split evenly between
// the two sides. A side that N samples cannot certify gets an infinite sentinel.
inline CertifiedBounds order_statistic_bounds(const ScoreSamples& samples, double q_lower, double q_upper,
                                              double alpha) {
  const std::size_t n = samples.size();
  detail::require(n > 0, "order_statistic_bounds: no samples");
  detail::require(q_lower > 0.0 && q_lower <= q_upper && q_upper < 1.0,
                  "order_statistic_bounds: need 0 < q_lower <= q_upper < 1");
  detail::require(alpha > 0.0 && alpha < 1.0, "order_statistic_bounds: alpha must lie in (0, 1)");
  const double per_side = 0.5 * (1.0 - alpha);

  CertifiedBounds out;
  out.q_lower = q_lower;
  out.q_upper = q_upper;
  out.confidence = alpha;

  // P[X_(k) > xi_q] = P[Bin(N, q) <= k - 1]; take the largest k keeping it <= per_side.
  const auto lower_cdf = binomial_cdf_table(n, q_lower);
  out.k_lower = 0;
  for (std::size_t k = 1; k <= n; ++k) {
    if (lower_cdf[k - 1] <= per_side) out.k_lower = k;
    else break;
  }
  // P[X_(k) < xi_q] <= 1 - P[Bin(N, q) <= k - 1]; take the smallest k keeping it <= per_side.
  const auto upper_cdf = q_upper == q_lower ? lower_cdf : binomial_cdf_table(n, q_upper);
  out.k_upper = n + 1;
  for (std::size_t k = 1; k <= n; ++k) {
    if (upper_cdf[k - 1] >= 1.0 - per_side) {
      out.k_upper = k;
      break;
    }
  }
  if (out.k_lower >= 1) out.s_lower = samples.values[out.k_lower - 1];
  if (out.k_upper <= n) out.s_upper = samples.values[out.k_upper - 1];
  return out;
}

// Certified l2 radius of a smoothed classifier: sigma/2 (Phi^-1(pA) - Phi^-1(pB)).
inline double rs_classification_radius(double p_a, double p_b, double sigma) {
  detail::require(p_b > 0.0 && p_b <= p_a && p_a < 1.0, "rs_classification_radius: need 0 < pB <= pA < 1");
  detail::require(sigma > 0.0, "rs_classification_radius: sigma must be positive");
  return 0.5 * sigma * (gaussian_quantile(p_a) - gaussian_quantile(p_b));
}

}  // namespace certsmooth
