#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>

#include "certsmooth/map.hpp"
#include "certsmooth/random.hpp"

namespace certsmooth {

struct SpectralOptions {
  double tol = 1e-9;
  std::size_t max_iter = 500;
  std::uint64_t seed = 0;
  std::size_t max_restarts = 3;
};

struct SpectralEstimate {
  double value = 0.0;       // estimate of ||J(x)||_2
  std::size_t iterations = 0;
  double residual = 0.0;    // relative change between the last two estimates
  bool converged = false;
  Tensor direction;         // final unit iterate, approximately the top right singular vector
};

inline Tensor random_unit(const Shape& shape, std::uint64_t seed, std::uint64_t stream) {
  Tensor u(shape);
  CounterRng rng(seed, stream);
  rng.fill_normal(u.values());
  const double n = norm2(u.values());
  scale_in_place(u.values(), 1.0 / n);
  return u;
}

// Largest singular value of J(x) by power iteration on J^T J, matrix-free
// through jvp/vjp. value = sqrt(u^T J^T J u) = ||J u|| for the unit iterate u.
inline SpectralEstimate spectral_norm(const DifferentiableMap& map, const Tensor& x, const SpectralOptions& opts = {}) {
  detail::require(opts.tol > 0.0, "spectral_norm: tol must be positive");
  detail::require(opts.max_iter > 0, "spectral_norm: max_iter must be positive");
  const auto check_finite = [](const Tensor& t, const char* what) {
    if (!t.all_finite()) throw NumericError(std::string("spectral_norm: non-finite ") + what);
  };

  SpectralEstimate est;
  for (std::size_t attempt = 0; attempt <= opts.max_restarts; ++attempt) {
    Tensor u = random_unit(map.input_shape(), opts.seed, attempt);
    Tensor w = map.jvp(x, u);
    check_finite(w, "jacobian-vector product");
    double previous = norm2(w.values());
    est.direction = u;
    if (previous == 0.0) continue;

    for (std::size_t it = 1; it <= opts.max_iter; ++it) {
      Tensor z = map.vjp(x, w);
      check_finite(z, "vector-jacobian product");
      const double zn = norm2(z.values());
      scale_in_place(z.values(), 1.0 / zn);
      w = map.jvp(x, z);
      check_finite(w, "jacobian-vector product");
      const double value = norm2(w.values());
      const double residual = std::abs(value - previous) / value;
      const double step = norm2((z - u).values());
      est.iterations = it;
      est.residual = residual;
      est.direction = z;
      if (residual <= opts.tol) {
        // A stagnant value with a still-moving iterate means the top singular
        // value is (nearly) repeated; the value is well defined, the vector is not.
        est.value = step > std::sqrt(opts.tol) ? 0.5 * (value + previous) : value;
        est.converged = true;
        return est;
      }
      u = std::move(z);
      previous = value;
    }
    est.value = previous;
    est.converged = false;
    return est;
  }
  // J(x) annihilated every starting vector: treat as the zero operator.
  est.value = 0.0;
  est.residual = 0.0;
  est.converged = true;
  return est;
}

struct IveResult {
  std::optional<double> epsilon_x;  // empty means abstain
  SpectralEstimate spectral;
  double sigma_f = 0.0;
  double tau = 0.0;

  bool abstained() const noexcept { return !epsilon_x.has_value(); }
};

// Converts a feature-space noise level into an input-space l2 radius:
// eps_x = sigma_f / ||J(x)||_2, abstaining when ||J(x)||_2 < tau.
inline IveResult input_variation(const DifferentiableMap& map, const Tensor& x, double sigma_f, double tau,
                                 const SpectralOptions& opts = {}) {
  detail::require(sigma_f > 0.0, "input_variation: sigma_f must be positive");
  detail::require(tau > 0.0, "input_variation: tau must be positive");
  IveResult result;
  result.sigma_f = sigma_f;
  result.tau = tau;
  result.spectral = spectral_norm(map, x, opts);
  if (result.spectral.value >= tau) result.epsilon_x = sigma_f / result.spectral.value;
  return result;
}

struct DeviationReport {
  double max_deviation = 0.0;  // max ||B(x+u) - B(x)||_2 over probes
  double ratio = 0.0;          // max_deviation / sigma_f
  std::size_t probes = 0;
};

// Empirical check of the feature-deviation bound: probes random points on the
// radius-eps sphere plus both signs of the top singular direction.
inline DeviationReport feature_deviation_check(const DifferentiableMap& map, const Tensor& x, double epsilon_x,
                                               double sigma_f, std::size_t trials, std::uint64_t seed,
                                               const SpectralOptions& opts = {}) {
  detail::require(epsilon_x >= 0.0 && sigma_f > 0.0, "feature_deviation_check: invalid radius or sigma");
  const Tensor base = map.forward(x);
  DeviationReport report;
  const auto probe = [&](const Tensor& unit) {
    const Tensor moved = map.forward(x + epsilon_x * unit);
    report.max_deviation = std::max(report.max_deviation, norm2((moved - base).values()));
    ++report.probes;
  };

  SpectralOptions top_opts = opts;
  top_opts.seed = seed;
  const Tensor top = spectral_norm(map, x, top_opts).direction;
  probe(top);
  probe(-1.0 * top);
  for (std::size_t t = 0; t < trials; ++t) probe(random_unit(map.input_shape(), seed, 1000 + t));
  report.ratio = report.max_deviation / sigma_f;
  return report;
}

}  // namespace certsmooth
