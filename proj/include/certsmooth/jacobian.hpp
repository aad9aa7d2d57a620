#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "certsmooth/map.hpp"

namespace certsmooth {

// Dense row-major m x n matrix.
struct JacobianMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> entries;

  JacobianMatrix() = default;
  JacobianMatrix(std::size_t m, std::size_t n) : rows(m), cols(n), entries(m * n, 0.0) {}

  double& operator()(std::size_t i, std::size_t j) { return entries[i * cols + j]; }
  double operator()(std::size_t i, std::size_t j) const { return entries[i * cols + j]; }

  double max_abs_difference(const JacobianMatrix& other) const {
    detail::require(rows == other.rows && cols == other.cols, "jacobian comparison: dimension mismatch");
    double worst = 0.0;
    for (std::size_t i = 0; i < entries.size(); ++i) worst = std::max(worst, std::abs(entries[i] - other.entries[i]));
    return worst;
  }
};

inline constexpr std::size_t kDefaultJacobianBudget = std::size_t{1} << 22;

// Exact Jacobian, one reverse pass per output row.
inline JacobianMatrix dense_jacobian(const DifferentiableMap& map, const Tensor& x,
                                     std::size_t budget = kDefaultJacobianBudget) {
  const std::size_t m = map.output_size();
  const std::size_t n = map.input_size();
  if (m * n > budget) {
    throw OversizeError("dense jacobian of " + std::to_string(m) + "x" + std::to_string(n) +
                        " exceeds budget of " + std::to_string(budget) + " entries; use the matrix-free path");
  }
  JacobianMatrix jac(m, n);
  Tensor basis(map.output_shape());
  for (std::size_t i = 0; i < m; ++i) {
    basis[i] = 1.0;
    const Tensor row = map.vjp(x, basis);
    basis[i] = 0.0;
    std::copy(row.data().begin(), row.data().end(), jac.entries.begin() + static_cast<std::ptrdiff_t>(i * n));
  }
  return jac;
}

inline constexpr double kDefaultFiniteDifferenceStep = 1e-4;

// Central differences: column j = (f(x + h e_j) - f(x - h e_j)) / 2h.
inline JacobianMatrix finite_diff_jacobian(const DifferentiableMap& map, const Tensor& x,
                                           double step = kDefaultFiniteDifferenceStep) {
  detail::require(step > 0.0, "finite difference step must be positive");
  const std::size_t m = map.output_size();
  const std::size_t n = map.input_size();
  JacobianMatrix jac(m, n);
  Tensor probe = x;
  for (std::size_t j = 0; j < n; ++j) {
    probe[j] = x[j] + step;
    const Tensor plus = map.forward(probe);
    probe[j] = x[j] - step;
    const Tensor minus = map.forward(probe);
    probe[j] = x[j];
    for (std::size_t i = 0; i < m; ++i) jac(i, j) = (plus[i] - minus[i]) / (2.0 * step);
  }
  return jac;
}

}  // namespace certsmooth
