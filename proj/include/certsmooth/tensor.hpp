#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "certsmooth/error.hpp"

namespace certsmooth {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) out << (i ? "x" : "") << shape[i];
  out << ']';
  return out.str();
}

// Dense row-major block of doubles with an explicit shape.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape) : shape_(std::move(shape)), data_(shape_size(shape_), 0.0) {
    validate_shape();
  }

  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape();
    if (data_.size() != shape_size(shape_)) {
      throw InvalidInput("tensor data length " + std::to_string(data_.size()) +
                         " does not match shape " + to_string(shape_));
    }
  }

  static Tensor vector(std::vector<double> data) {
    Shape shape{data.size()};
    return Tensor(std::move(shape), std::move(data));
  }

  static Tensor filled(Shape shape, double value) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), value);
    return t;
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }
  const std::vector<double>& data() const noexcept { return data_; }
  std::vector<double> take_data() && { return std::move(data_); }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  bool all_finite() const {
    for (double v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  Tensor reshaped(Shape shape) const {
    if (shape_size(shape) != data_.size()) {
      throw InvalidInput("cannot reshape " + to_string(shape_) + " to " + to_string(shape));
    }
    return Tensor(std::move(shape), data_);
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void validate_shape() const {
    for (std::size_t extent : shape_) {
      if (extent == 0) throw InvalidInput("tensor extents must be positive, got " + to_string(shape_));
    }
  }

  Shape shape_;
  std::vector<double> data_;
};

// Small vector helpers shared across modules.

inline double dot(std::span<const double> a, std::span<const double> b) {
  detail::require(a.size() == b.size(), "dot: length mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

inline double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

inline void scale_in_place(std::span<double> a, double factor) {
  for (double& v : a) v *= factor;
}

// a += factor * b
inline void axpy(std::span<double> a, double factor, std::span<const double> b) {
  detail::require(a.size() == b.size(), "axpy: length mismatch");
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += factor * b[i];
}

inline Tensor operator+(const Tensor& a, const Tensor& b) {
  detail::require(a.shape() == b.shape(), "tensor add: shape mismatch");
  Tensor out = a;
  axpy(out.values(), 1.0, b.values());
  return out;
}

inline Tensor operator-(const Tensor& a, const Tensor& b) {
  detail::require(a.shape() == b.shape(), "tensor sub: shape mismatch");
  Tensor out = a;
  axpy(out.values(), -1.0, b.values());
  return out;
}

inline Tensor operator*(double factor, const Tensor& a) {
  Tensor out = a;
  scale_in_place(out.values(), factor);
  return out;
}

}  // namespace certsmooth
