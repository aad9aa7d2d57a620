#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <vector>

#include "certsmooth/error.hpp"

namespace certsmooth {

inline double gaussian_cdf(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }

inline double gaussian_pdf(double z) { return std::exp(-0.5 * z * z) / std::sqrt(2.0 * std::numbers::pi); }

// Inverse standard normal CDF. Rational initial guess (Acklam) polished by two
// Halley steps against the erfc-based CDF.
inline double gaussian_quantile(double p) {
  if (!(p > 0.0 && p < 1.0)) throw InvalidInput("gaussian_quantile: p must lie in (0, 1)");
  static constexpr std::array<double, 6> a{-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
                                           1.383577518672690e+02,  -3.066479806614716e+01, 2.506628277459239e+00};
  static constexpr std::array<double, 5> b{-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
                                           6.680131188771972e+01, -1.328068155288572e+01};
  static constexpr std::array<double, 6> c{-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
                                           -2.549732539343734e+00, 4.374664141464968e+00,  2.938163982698783e+00};
  static constexpr std::array<double, 4> d{7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
                                           3.754408661907416e+00};
  constexpr double p_low = 0.02425;
  double x;
  if (p < p_low) {
    const double q = std::sqrt(-2.0 * std::log(p));
    x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  } else if (p <= 1.0 - p_low) {
    const double q = p - 0.5;
    const double r = q * q;
    x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
        (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
  } else {
    const double q = std::sqrt(-2.0 * std::log1p(-p));
    x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  }
  for (int i = 0; i < 2; ++i) {
    const double e = gaussian_cdf(x) - p;
    const double u = e * std::sqrt(2.0 * std::numbers::pi) * std::exp(0.5 * x * x);
    x -= u / (1.0 + 0.5 * x * u);
  }
  return x;
}

namespace detail {

// log(i!) for i = 0..n, accumulated term by term in extended precision with
// compensated summation.
inline std::vector<long double> log_factorials(std::size_t n) {
  std::vector<long double> lf(n + 1, 0.0L);
  long double sum = 0.0L, compensation = 0.0L;
  for (std::size_t i = 2; i <= n; ++i) {
    const long double term = std::log(static_cast<long double>(i));
    const long double t = sum + term;
    compensation += std::abs(sum) >= std::abs(term) ? (sum - t) + term : (term - t) + sum;
    sum = t;
    lf[i] = sum + compensation;
  }
  return lf;
}

}  // namespace detail

// P[Binomial(n, p) <= k] for every k = 0..n. Each entry is taken from
// whichever tail sum is smaller so values near 1 keep full absolute accuracy.
inline std::vector<double> binomial_cdf_table(std::size_t n, double p) {
  if (!(p >= 0.0 && p <= 1.0)) throw InvalidInput("binomial_cdf: p must lie in [0, 1]");
  std::vector<double> cdf(n + 1, 1.0);
  if (p == 0.0) return cdf;
  if (p == 1.0) {
    std::fill(cdf.begin(), cdf.end() - 1, 0.0);
    return cdf;
  }
  const auto lf = detail::log_factorials(n);
  const long double log_p = std::log(static_cast<long double>(p));
  const long double log_q = std::log1p(-static_cast<long double>(p));
  std::vector<long double> pmf(n + 1);
  for (std::size_t j = 0; j <= n; ++j) {
    const long double log_pmf = lf[n] - lf[j] - lf[n - j] + static_cast<long double>(j) * log_p +
                                static_cast<long double>(n - j) * log_q;
    pmf[j] = std::exp(log_pmf);
  }
  std::vector<long double> upper(n + 1, 0.0L);  // upper[k] = P[X > k]
  for (std::size_t k = n; k-- > 0;) upper[k] = upper[k + 1] + pmf[k + 1];
  long double lower = 0.0L;
  for (std::size_t k = 0; k <= n; ++k) {
    lower += pmf[k];
    const long double value = lower <= upper[k] ? lower : 1.0L - upper[k];
    cdf[k] = static_cast<double>(std::clamp(value, 0.0L, 1.0L));
  }
  return cdf;
}

inline double binomial_cdf(std::size_t k, std::size_t n, double p) {
  if (k > n) throw InvalidInput("binomial_cdf: k must not exceed n");
  return binomial_cdf_table(n, p)[k];
}

// Regularized incomplete beta I_x(a, b) by Lentz's continued fraction.
inline double regularized_incomplete_beta(double a, double b, double x) {
  if (!(a > 0.0 && b > 0.0)) throw InvalidInput("incomplete beta: a and b must be positive");
  if (!(x >= 0.0 && x <= 1.0)) throw InvalidInput("incomplete beta: x must lie in [0, 1]");
  if (x == 0.0) return 0.0;
  if (x == 1.0) return 1.0;

  const auto continued_fraction = [](long double aa, long double bb, long double xx) {
    constexpr long double tiny = 1e-4000L;
    constexpr long double eps = 1e-19L;
    const long double qab = aa + bb, qap = aa + 1.0L, qam = aa - 1.0L;
    long double c = 1.0L;
    long double d = 1.0L - qab * xx / qap;
    if (std::abs(d) < tiny) d = tiny;
    d = 1.0L / d;
    long double h = d;
    for (int m = 1; m <= 100000; ++m) {
      const long double m2 = 2.0L * m;
      long double num = m * (bb - m) * xx / ((qam + m2) * (aa + m2));
      d = 1.0L + num * d;
      if (std::abs(d) < tiny) d = tiny;
      c = 1.0L + num / c;
      if (std::abs(c) < tiny) c = tiny;
      d = 1.0L / d;
      h *= d * c;
      num = -(aa + m) * (qab + m) * xx / ((aa + m2) * (qap + m2));
      d = 1.0L + num * d;
      if (std::abs(d) < tiny) d = tiny;
      c = 1.0L + num / c;
      if (std::abs(c) < tiny) c = tiny;
      d = 1.0L / d;
      const long double delta = d * c;
      h *= delta;
      if (std::abs(delta - 1.0L) < eps) return h;
    }
    throw NumericError("incomplete beta: continued fraction did not converge");
  };

  const long double la = a, lb = b, lx = x;
  const long double log_front = std::lgamma(la + lb) - std::lgamma(la) - std::lgamma(lb) + la * std::log(lx) +
                                lb * std::log1p(-lx);
  const long double front = std::exp(log_front);
  if (lx < (la + 1.0L) / (la + lb + 2.0L)) {
    return static_cast<double>(front * continued_fraction(la, lb, lx) / la);
  }
  return static_cast<double>(1.0L - front * continued_fraction(lb, la, 1.0L - lx) / lb);
}

// Second route to the binomial CDF: P[X <= k] = I_{1-p}(n - k, k + 1).
inline double binomial_cdf_beta(std::size_t k, std::size_t n, double p) {
  if (k > n) throw InvalidInput("binomial_cdf: k must not exceed n");
  if (!(p >= 0.0 && p <= 1.0)) throw InvalidInput("binomial_cdf: p must lie in [0, 1]");
  if (k == n || p == 0.0) return 1.0;
  if (p == 1.0) return 0.0;
  return regularized_incomplete_beta(static_cast<double>(n - k), static_cast<double>(k + 1), 1.0 - p);
}

}  // namespace certsmooth
