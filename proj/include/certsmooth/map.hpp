#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "certsmooth/error.hpp"
#include "certsmooth/random.hpp"
#include "certsmooth/tensor.hpp"

namespace certsmooth {

enum class MapKind { linear, affine_sigmoid, toy_backbone, mlp_scorer, composition, pair_adapter };

inline std::string_view kind_name(MapKind kind) {
  switch (kind) {
    case MapKind::linear: return "linear";
    case MapKind::affine_sigmoid: return "affine_sigmoid";
    case MapKind::toy_backbone: return "toy_backbone";
    case MapKind::mlp_scorer: return "mlp_scorer";
    case MapKind::composition: return "composition";
    case MapKind::pair_adapter: return "pair_adapter";
  }
  return "unknown";
}

inline MapKind parse_kind(std::string_view name) {
  for (MapKind k : {MapKind::linear, MapKind::affine_sigmoid, MapKind::toy_backbone, MapKind::mlp_scorer,
                    MapKind::composition, MapKind::pair_adapter}) {
    if (kind_name(k) == name) return k;
  }
  throw InvalidInput("unknown map kind '" + std::string(name) + "'");
}

struct CallCounts {
  std::uint64_t forward = 0;
  std::uint64_t jvp = 0;
  std::uint64_t vjp = 0;
};

// A map R^n -> R^m with exact forward- and reverse-mode linearization.
//
// The public entry points validate shapes and bump per-map call counters;
// implementations override the protected kernels, which work on flat spans.
// Nested maps call each other through the *_of helpers so that only genuine
// forward evaluations are counted as forward calls (re-evaluations needed to
// linearize a composition are not).
class DifferentiableMap {
 public:
  using Vec = std::vector<double>;

  virtual ~DifferentiableMap() = default;
  DifferentiableMap(const DifferentiableMap&) = delete;
  DifferentiableMap& operator=(const DifferentiableMap&) = delete;

  MapKind kind() const noexcept { return kind_; }
  const Shape& input_shape() const noexcept { return input_shape_; }
  const Shape& output_shape() const noexcept { return output_shape_; }
  std::size_t input_size() const noexcept { return input_size_; }
  std::size_t output_size() const noexcept { return output_size_; }
  std::uint64_t seed() const noexcept { return seed_; }

  std::span<const double> parameters() const noexcept { return params_; }
  // Mutation requires exclusive access to the map.
  std::span<double> mutable_parameters() noexcept { return params_; }

  void set_parameters(std::span<const double> values) {
    if (values.size() != params_.size()) {
      throw InvalidInput(std::string(kind_name(kind_)) + ": expected " + std::to_string(params_.size()) +
                         " parameters, got " + std::to_string(values.size()));
    }
    params_.assign(values.begin(), values.end());
  }

  Tensor forward(const Tensor& x) const {
    check_input(x, "forward");
    forward_calls_.fetch_add(1, std::memory_order_relaxed);
    return Tensor(output_shape_, evaluate(x.values(), true));
  }

  // J(x) u
  Tensor jvp(const Tensor& x, const Tensor& u) const {
    check_input(x, "jvp");
    check_input(u, "jvp direction");
    jvp_calls_.fetch_add(1, std::memory_order_relaxed);
    return Tensor(output_shape_, push_forward(x.values(), u.values()));
  }

  // J(x)^T v
  Tensor vjp(const Tensor& x, const Tensor& v) const {
    check_input(x, "vjp");
    if (v.shape() != output_shape_) {
      throw InvalidInput(std::string(kind_name(kind_)) + " vjp: cotangent shape " + to_string(v.shape()) +
                         " != output shape " + to_string(output_shape_));
    }
    vjp_calls_.fetch_add(1, std::memory_order_relaxed);
    return Tensor(input_shape_, pull_back(x.values(), v.values()));
  }

  // Gradient of <v, f(x; theta)> with respect to theta, laid out like parameters().
  Vec parameter_vjp(const Tensor& x, const Tensor& v) const {
    check_input(x, "parameter_vjp");
    detail::require(v.shape() == output_shape_, "parameter_vjp: cotangent shape mismatch");
    return pull_back_parameters(x.values(), v.values());
  }

  CallCounts counts() const noexcept {
    return {forward_calls_.load(std::memory_order_relaxed), jvp_calls_.load(std::memory_order_relaxed),
            vjp_calls_.load(std::memory_order_relaxed)};
  }

  void reset_counts() const noexcept {
    forward_calls_ = 0;
    jvp_calls_ = 0;
    vjp_calls_ = 0;
  }

 protected:
  DifferentiableMap(MapKind kind, Shape input_shape, Shape output_shape, std::uint64_t seed,
                    std::size_t parameter_count)
      : params_(parameter_count, 0.0),
        kind_(kind),
        input_shape_(std::move(input_shape)),
        output_shape_(std::move(output_shape)),
        input_size_(shape_size(input_shape_)),
        output_size_(shape_size(output_shape_)),
        seed_(seed) {
    for (std::size_t e : input_shape_) detail::require(e > 0, "map input extents must be positive");
    for (std::size_t e : output_shape_) detail::require(e > 0, "map output extents must be positive");
  }

  virtual Vec evaluate(std::span<const double> x, bool counted) const = 0;
  virtual Vec push_forward(std::span<const double> x, std::span<const double> u) const = 0;
  virtual Vec pull_back(std::span<const double> x, std::span<const double> v) const = 0;

  virtual Vec pull_back_parameters(std::span<const double>, std::span<const double>) const {
    throw InvalidInput(std::string(kind_name(kind_)) + " has no trainable parameters");
  }

  static Vec evaluate_of(const DifferentiableMap& map, std::span<const double> x, bool counted) {
    if (counted) map.forward_calls_.fetch_add(1, std::memory_order_relaxed);
    return map.evaluate(x, counted);
  }
  static Vec push_forward_of(const DifferentiableMap& map, std::span<const double> x,
                             std::span<const double> u) {
    map.jvp_calls_.fetch_add(1, std::memory_order_relaxed);
    return map.push_forward(x, u);
  }
  static Vec pull_back_of(const DifferentiableMap& map, std::span<const double> x, std::span<const double> v) {
    map.vjp_calls_.fetch_add(1, std::memory_order_relaxed);
    return map.pull_back(x, v);
  }

  std::vector<double> params_;

 private:
  void check_input(const Tensor& x, const char* what) const {
    if (x.shape() != input_shape_) {
      throw InvalidInput(std::string(kind_name(kind_)) + " " + what + ": input shape " + to_string(x.shape()) +
                         " != expected " + to_string(input_shape_));
    }
  }

  MapKind kind_;
  Shape input_shape_;
  Shape output_shape_;
  std::size_t input_size_;
  std::size_t output_size_;
  std::uint64_t seed_;
  mutable std::atomic<std::uint64_t> forward_calls_{0};
  mutable std::atomic<std::uint64_t> jvp_calls_{0};
  mutable std::atomic<std::uint64_t> vjp_calls_{0};
};

using MapPtr = std::shared_ptr<DifferentiableMap>;

namespace detail {

// out = W x (+ b), W is rows x cols row-major.
inline void gemv(std::span<const double> w, std::span<const double> x, std::span<double> out, std::size_t rows,
                 std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = w.data() + r * cols;
    double acc = 0.0;
    for (std::size_t c = 0; c < cols; ++c) acc += row[c] * x[c];
    out[r] = acc;
  }
}

// out = W^T v
inline void gemv_t(std::span<const double> w, std::span<const double> v, std::span<double> out, std::size_t rows,
                   std::size_t cols) {
  std::fill(out.begin(), out.end(), 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = w.data() + r * cols;
    const double vr = v[r];
    if (vr == 0.0) continue;
    for (std::size_t c = 0; c < cols; ++c) out[c] += row[c] * vr;
  }
}

// grad += v x^T
inline void outer_add(std::span<double> grad, std::span<const double> v, std::span<const double> x) {
  const std::size_t cols = x.size();
  for (std::size_t r = 0; r < v.size(); ++r) {
    double* row = grad.data() + r * cols;
    for (std::size_t c = 0; c < cols; ++c) row[c] += v[r] * x[c];
  }
}

inline void init_uniform(std::span<double> out, std::size_t fan_in, CounterRng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (double& v : out) v = rng.uniform(-bound, bound);
}

// Logistic function held one ulp inside (0, 1) so saturated inputs never hit the endpoints.
inline double squash(double z) {
  const double y = z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
  return std::clamp(y, std::numeric_limits<double>::denorm_min(), 1.0 - 0x1.0p-53);
}

}  // namespace detail

// y = A x + b. Shapes are free; A is product(out) x product(in).
class LinearMap final : public DifferentiableMap {
 public:
  LinearMap(Shape input_shape, Shape output_shape, std::uint64_t seed)
      : DifferentiableMap(MapKind::linear, std::move(input_shape), std::move(output_shape), seed, 0) {
    params_.assign(output_size() * input_size() + output_size(), 0.0);
    CounterRng rng(seed, 0);
    detail::init_uniform(params_, input_size(), rng);
  }

  LinearMap(Shape input_shape, Shape output_shape, std::span<const double> matrix, std::span<const double> bias = {})
      : DifferentiableMap(MapKind::linear, std::move(input_shape), std::move(output_shape), 0, 0) {
    detail::require(matrix.size() == output_size() * input_size(), "linear map: matrix size mismatch");
    detail::require(bias.empty() || bias.size() == output_size(), "linear map: bias size mismatch");
    params_.assign(matrix.begin(), matrix.end());
    params_.resize(matrix.size() + output_size(), 0.0);
    std::copy(bias.begin(), bias.end(), params_.begin() + static_cast<std::ptrdiff_t>(matrix.size()));
  }

  std::span<const double> matrix() const { return std::span(params_).first(output_size() * input_size()); }
  std::span<const double> bias() const { return std::span(params_).subspan(output_size() * input_size()); }

 protected:
  Vec evaluate(std::span<const double> x, bool) const override {
    Vec y(output_size());
    detail::gemv(matrix(), x, y, output_size(), input_size());
    const auto b = bias();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += b[i];
    return y;
  }
  Vec push_forward(std::span<const double>, std::span<const double> u) const override {
    Vec y(output_size());
    detail::gemv(matrix(), u, y, output_size(), input_size());
    return y;
  }
  Vec pull_back(std::span<const double>, std::span<const double> v) const override {
    Vec g(input_size());
    detail::gemv_t(matrix(), v, g, output_size(), input_size());
    return g;
  }
  Vec pull_back_parameters(std::span<const double> x, std::span<const double> v) const override {
    Vec grad(params_.size(), 0.0);
    detail::outer_add(std::span(grad).first(output_size() * input_size()), v, x);
    std::copy(v.begin(), v.end(), grad.begin() + static_cast<std::ptrdiff_t>(output_size() * input_size()));
    return grad;
  }
};

inline std::shared_ptr<LinearMap> make_identity(Shape shape) {
  const std::size_t n = shape_size(shape);
  std::vector<double> eye(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) eye[i * n + i] = 1.0;
  return std::make_shared<LinearMap>(shape, shape, eye);
}

inline std::shared_ptr<LinearMap> make_diagonal(std::span<const double> diagonal) {
  const std::size_t n = diagonal.size();
  std::vector<double> a(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) a[i * n + i] = diagonal[i];
  return std::make_shared<LinearMap>(Shape{n}, Shape{n}, a);
}

// Zero Jacobian everywhere; outputs `value`.
inline std::shared_ptr<LinearMap> make_constant(Shape input_shape, const Tensor& value) {
  const std::vector<double> zeros(shape_size(input_shape) * value.size(), 0.0);
  return std::make_shared<LinearMap>(std::move(input_shape), value.shape(), zeros, value.values());
}

// y = sigmoid(W x + b); the feature transform-normalize layer.
class AffineSigmoidMap final : public DifferentiableMap {
 public:
  AffineSigmoidMap(std::size_t input_dim, std::size_t output_dim, std::uint64_t seed)
      : DifferentiableMap(MapKind::affine_sigmoid, Shape{input_dim}, Shape{output_dim}, seed,
                          output_dim * input_dim + output_dim) {
    CounterRng rng(seed, 0);
    detail::init_uniform(params_, input_dim, rng);
  }

  std::span<const double> weights() const { return std::span(params_).first(output_size() * input_size()); }
  std::span<const double> bias() const { return std::span(params_).subspan(output_size() * input_size()); }

 protected:
  Vec evaluate(std::span<const double> x, bool) const override {
    Vec y(output_size());
    detail::gemv(weights(), x, y, output_size(), input_size());
    const auto b = bias();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = detail::squash(y[i] + b[i]);
    return y;
  }
  Vec push_forward(std::span<const double> x, std::span<const double> u) const override {
    const Vec y = evaluate(x, false);
    Vec dy(output_size());
    detail::gemv(weights(), u, dy, output_size(), input_size());
    for (std::size_t i = 0; i < dy.size(); ++i) dy[i] *= y[i] * (1.0 - y[i]);
    return dy;
  }
  Vec pull_back(std::span<const double> x, std::span<const double> v) const override {
    const Vec dz = pre_activation_cotangent(x, v);
    Vec g(input_size());
    detail::gemv_t(weights(), dz, g, output_size(), input_size());
    return g;
  }
  Vec pull_back_parameters(std::span<const double> x, std::span<const double> v) const override {
    const Vec dz = pre_activation_cotangent(x, v);
    Vec grad(params_.size(), 0.0);
    detail::outer_add(std::span(grad).first(output_size() * input_size()), dz, x);
    std::copy(dz.begin(), dz.end(), grad.begin() + static_cast<std::ptrdiff_t>(output_size() * input_size()));
    return grad;
  }

 private:
  Vec pre_activation_cotangent(std::span<const double> x, std::span<const double> v) const {
    Vec dz = evaluate(x, false);
    for (std::size_t i = 0; i < dz.size(); ++i) dz[i] = v[i] * dz[i] * (1.0 - dz[i]);
    return dz;
  }
};

// Frozen feature extractor standing in for a pretrained IQA backbone:
// 3x3 same-padded convolution -> tanh -> 2x2 average pool -> flatten -> affine.
class ToyBackbone final : public DifferentiableMap {
 public:
  static constexpr std::size_t kDefaultConvChannels = 8;
  static constexpr std::size_t kDefaultFeatureDim = 64;

  ToyBackbone(Shape image_shape, std::uint64_t seed, std::size_t conv_channels = kDefaultConvChannels,
              std::size_t feature_dim = kDefaultFeatureDim)
      : DifferentiableMap(MapKind::toy_backbone, validated(image_shape), Shape{feature_dim}, seed, 0),
        in_channels_(image_shape[0]),
        height_(image_shape[1]),
        width_(image_shape[2]),
        conv_channels_(conv_channels) {
    detail::require(conv_channels > 0 && feature_dim > 0, "toy backbone: channel counts must be positive");
    pooled_size_ = conv_channels_ * (height_ / 2) * (width_ / 2);
    params_.assign(conv_weight_count() + conv_channels_ + feature_dim * pooled_size_ + feature_dim, 0.0);
    init_weights(seed);
  }

  std::size_t conv_channels() const noexcept { return conv_channels_; }

 protected:
  Vec evaluate(std::span<const double> x, bool) const override {
    const Vec act = activations(x);
    return dense(pool(act));
  }

  Vec push_forward(std::span<const double> x, std::span<const double> u) const override {
    const Vec act = activations(x);
    Vec d = convolve(u, /*with_bias=*/false);
    for (std::size_t i = 0; i < d.size(); ++i) d[i] *= 1.0 - act[i] * act[i];
    const Vec pooled = pool(d);
    Vec out(output_size());
    detail::gemv(dense_weights(), pooled, out, output_size(), pooled_size_);
    return out;
  }

  Vec pull_back(std::span<const double> x, std::span<const double> v) const override {
    const Vec act = activations(x);
    Vec g_pool(pooled_size_);
    detail::gemv_t(dense_weights(), v, g_pool, output_size(), pooled_size_);
    // Un-pool: every pixel in a 2x2 window receives a quarter of the window's cotangent.
    Vec g_pre(act.size());
    const std::size_t ph = height_ / 2, pw = width_ / 2;
    for (std::size_t c = 0; c < conv_channels_; ++c)
      for (std::size_t y = 0; y < 2 * ph; ++y)
        for (std::size_t xx = 0; xx < 2 * pw; ++xx) {
          const std::size_t i = (c * height_ + y) * width_ + xx;
          g_pre[i] = 0.25 * g_pool[(c * ph + y / 2) * pw + xx / 2] * (1.0 - act[i] * act[i]);
        }
    return convolve_transpose(g_pre);
  }

 private:
  static Shape validated(const Shape& s) {
    detail::require(s.size() == 3, "toy backbone expects a CxHxW image shape, got " + to_string(s));
    detail::require(s[1] >= 2 && s[2] >= 2 && s[1] % 2 == 0 && s[2] % 2 == 0,
                    "toy backbone needs even spatial extents, got " + to_string(s));
    return s;
  }

  // Seeded weights shaped like a quality-aware feature extractor: zero-mean
  // (high-pass) 3x3 filters, biases away from zero so tanh curvature turns
  // local contrast into a mean shift, and a dense layer dominated by
  // per-channel spatial averaging.
  void init_weights(std::uint64_t seed) {
    CounterRng rng(seed, 0);
    const double conv_scale = kConvGain / std::sqrt(static_cast<double>(in_channels_ * 9));
    auto conv = std::span(params_).first(conv_weight_count());
    for (std::size_t f = 0; f < conv_channels_ * in_channels_; ++f) {
      auto taps = conv.subspan(f * 9, 9);
      double mean = 0.0;
      for (double& w : taps) mean += (w = rng.uniform(-1.0, 1.0)) / 9.0;
      for (double& w : taps) w = (w - mean) * conv_scale;
    }
    for (std::size_t c = 0; c < conv_channels_; ++c) {
      const double magnitude = rng.uniform(0.5, 1.0);
      params_[conv_weight_count() + c] = rng.uniform() < 0.5 ? -magnitude : magnitude;
    }
    const std::size_t positions = pooled_size_ / conv_channels_;
    const double shared_scale = 1.0 / (std::sqrt(static_cast<double>(conv_channels_)) * static_cast<double>(positions));
    const double local_scale = kDenseJitter / (std::sqrt(static_cast<double>(pooled_size_)) * static_cast<double>(positions));
    const std::size_t dense_offset = conv_weight_count() + conv_channels_;
    for (std::size_t o = 0; o < output_size(); ++o)
      for (std::size_t c = 0; c < conv_channels_; ++c) {
        const double shared = shared_scale * rng.uniform(-1.0, 1.0);
        for (std::size_t p = 0; p < positions; ++p)
          params_[dense_offset + o * pooled_size_ + c * positions + p] = shared + local_scale * rng.uniform(-1.0, 1.0);
      }
    detail::init_uniform(std::span(params_).subspan(dense_offset + output_size() * pooled_size_), pooled_size_, rng);
  }

  static constexpr double kConvGain = 8.0;
  static constexpr double kDenseJitter = 0.3;

  std::size_t conv_weight_count() const { return conv_channels_ * in_channels_ * 9; }
  std::span<const double> conv_weights() const { return std::span(params_).first(conv_weight_count()); }
  std::span<const double> conv_bias() const { return std::span(params_).subspan(conv_weight_count(), conv_channels_); }
  std::span<const double> dense_weights() const {
    return std::span(params_).subspan(conv_weight_count() + conv_channels_, output_size() * pooled_size_);
  }
  std::span<const double> dense_bias() const {
    return std::span(params_).subspan(conv_weight_count() + conv_channels_ + output_size() * pooled_size_);
  }

  Vec convolve(std::span<const double> x, bool with_bias) const {
    const auto w = conv_weights();
    const auto b = conv_bias();
    Vec out(conv_channels_ * height_ * width_);
    for (std::size_t co = 0; co < conv_channels_; ++co)
      for (std::size_t y = 0; y < height_; ++y)
        for (std::size_t xx = 0; xx < width_; ++xx) {
          double acc = with_bias ? b[co] : 0.0;
          for (std::size_t ci = 0; ci < in_channels_; ++ci)
            for (std::size_t ky = 0; ky < 3; ++ky) {
              const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y + ky) - 1;
              if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(height_)) continue;
              for (std::size_t kx = 0; kx < 3; ++kx) {
                const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(xx + kx) - 1;
                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(width_)) continue;
                acc += w[((co * in_channels_ + ci) * 3 + ky) * 3 + kx] *
                       x[(ci * height_ + static_cast<std::size_t>(iy)) * width_ + static_cast<std::size_t>(ix)];
              }
            }
          out[(co * height_ + y) * width_ + xx] = acc;
        }
    return out;
  }

  Vec convolve_transpose(std::span<const double> g) const {
    const auto w = conv_weights();
    Vec out(input_size(), 0.0);
    for (std::size_t co = 0; co < conv_channels_; ++co)
      for (std::size_t y = 0; y < height_; ++y)
        for (std::size_t xx = 0; xx < width_; ++xx) {
          const double gv = g[(co * height_ + y) * width_ + xx];
          if (gv == 0.0) continue;
          for (std::size_t ci = 0; ci < in_channels_; ++ci)
            for (std::size_t ky = 0; ky < 3; ++ky) {
              const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y + ky) - 1;
              if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(height_)) continue;
              for (std::size_t kx = 0; kx < 3; ++kx) {
                const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(xx + kx) - 1;
                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(width_)) continue;
                out[(ci * height_ + static_cast<std::size_t>(iy)) * width_ + static_cast<std::size_t>(ix)] +=
                    w[((co * in_channels_ + ci) * 3 + ky) * 3 + kx] * gv;
              }
            }
        }
    return out;
  }

  Vec activations(std::span<const double> x) const {
    Vec act = convolve(x, /*with_bias=*/true);
    for (double& a : act) a = std::tanh(a);
    return act;
  }

  Vec pool(std::span<const double> a) const {
    const std::size_t ph = height_ / 2, pw = width_ / 2;
    Vec out(pooled_size_);
    for (std::size_t c = 0; c < conv_channels_; ++c)
      for (std::size_t y = 0; y < ph; ++y)
        for (std::size_t xx = 0; xx < pw; ++xx) {
          const std::size_t base = (c * height_ + 2 * y) * width_ + 2 * xx;
          out[(c * ph + y) * pw + xx] = 0.25 * (a[base] + a[base + 1] + a[base + width_] + a[base + width_ + 1]);
        }
    return out;
  }

  Vec dense(std::span<const double> pooled) const {
    Vec out(output_size());
    detail::gemv(dense_weights(), pooled, out, output_size(), pooled_size_);
    const auto b = dense_bias();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
    return out;
  }

  std::size_t in_channels_;
  std::size_t height_;
  std::size_t width_;
  std::size_t conv_channels_;
  std::size_t pooled_size_ = 0;
};

// Scalar regressor: dense layers with tanh on hidden units and a linear output.
// With no hidden layers it is a plain affine functional.
class MlpScorer final : public DifferentiableMap {
 public:
  MlpScorer(std::size_t input_dim, std::vector<std::size_t> hidden, std::uint64_t seed)
      : DifferentiableMap(MapKind::mlp_scorer, Shape{input_dim}, Shape{1}, seed, 0), hidden_(std::move(hidden)) {
    widths_.push_back(input_dim);
    for (std::size_t h : hidden_) {
      detail::require(h > 0, "mlp scorer: hidden widths must be positive");
      widths_.push_back(h);
    }
    widths_.push_back(1);
    std::size_t total = 0;
    for (std::size_t l = 0; l + 1 < widths_.size(); ++l) {
      offsets_.push_back(total);
      total += widths_[l + 1] * widths_[l] + widths_[l + 1];
    }
    params_.assign(total, 0.0);
    CounterRng rng(seed, 0);
    for (std::size_t l = 0; l < layer_count(); ++l) {
      detail::init_uniform(std::span(params_).subspan(offsets_[l], widths_[l + 1] * widths_[l] + widths_[l + 1]),
                           widths_[l], rng);
    }
  }

  const std::vector<std::size_t>& hidden() const noexcept { return hidden_; }

 protected:
  Vec evaluate(std::span<const double> x, bool) const override {
    Vec cur(x.begin(), x.end()), next;
    for (std::size_t l = 0; l < layer_count(); ++l) {
      next.assign(widths_[l + 1], 0.0);
      detail::gemv(weights(l), cur, next, widths_[l + 1], widths_[l]);
      const auto b = bias(l);
      const bool hidden_layer = l + 1 < layer_count();
      for (std::size_t i = 0; i < next.size(); ++i) {
        next[i] += b[i];
        if (hidden_layer) next[i] = std::tanh(next[i]);
      }
      cur.swap(next);
    }
    return cur;
  }

  Vec push_forward(std::span<const double> x, std::span<const double> u) const override {
    const auto acts = run(x);
    Vec du(u.begin(), u.end());
    for (std::size_t l = 0; l < layer_count(); ++l) {
      Vec dz(widths_[l + 1]);
      detail::gemv(weights(l), du, dz, widths_[l + 1], widths_[l]);
      if (l + 1 < layer_count()) {
        for (std::size_t i = 0; i < dz.size(); ++i) dz[i] *= 1.0 - acts[l + 1][i] * acts[l + 1][i];
      }
      du = std::move(dz);
    }
    return du;
  }

  Vec pull_back(std::span<const double> x, std::span<const double> v) const override {
    return backprop(x, v, nullptr);
  }

  Vec pull_back_parameters(std::span<const double> x, std::span<const double> v) const override {
    Vec grad(params_.size(), 0.0);
    backprop(x, v, &grad);
    return grad;
  }

 private:
  std::size_t layer_count() const { return widths_.size() - 1; }
  std::span<const double> weights(std::size_t l) const {
    return std::span(params_).subspan(offsets_[l], widths_[l + 1] * widths_[l]);
  }
  std::span<const double> bias(std::size_t l) const {
    return std::span(params_).subspan(offsets_[l] + widths_[l + 1] * widths_[l], widths_[l + 1]);
  }

  // acts[0] = x, acts[l] = output of layer l (post-activation).
  std::vector<Vec> run(std::span<const double> x) const {
    std::vector<Vec> acts;
    acts.emplace_back(x.begin(), x.end());
    for (std::size_t l = 0; l < layer_count(); ++l) {
      Vec z(widths_[l + 1]);
      detail::gemv(weights(l), acts.back(), z, widths_[l + 1], widths_[l]);
      const auto b = bias(l);
      const bool hidden_layer = l + 1 < layer_count();
      for (std::size_t i = 0; i < z.size(); ++i) {
        z[i] += b[i];
        if (hidden_layer) z[i] = std::tanh(z[i]);
      }
      acts.push_back(std::move(z));
    }
    return acts;
  }

  Vec backprop(std::span<const double> x, std::span<const double> v, Vec* grad) const {
    const auto acts = run(x);
    Vec g(v.begin(), v.end());
    for (std::size_t l = layer_count(); l-- > 0;) {
      if (l + 1 < layer_count()) {
        for (std::size_t i = 0; i < g.size(); ++i) g[i] *= 1.0 - acts[l + 1][i] * acts[l + 1][i];
      }
      if (grad) {
        auto layer_grad = std::span(*grad).subspan(offsets_[l], widths_[l + 1] * widths_[l] + widths_[l + 1]);
        detail::outer_add(layer_grad.first(widths_[l + 1] * widths_[l]), g, acts[l]);
        auto bias_grad = layer_grad.subspan(widths_[l + 1] * widths_[l]);
        for (std::size_t i = 0; i < g.size(); ++i) bias_grad[i] += g[i];
      }
      Vec prev(widths_[l]);
      detail::gemv_t(weights(l), g, prev, widths_[l + 1], widths_[l]);
      g = std::move(prev);
    }
    return g;
  }

  std::vector<std::size_t> hidden_;
  std::vector<std::size_t> widths_;
  std::vector<std::size_t> offsets_;
};

// outer ∘ inner. Holds no parameters of its own.
class Composition final : public DifferentiableMap {
 public:
  Composition(MapPtr outer, MapPtr inner)
      : DifferentiableMap(MapKind::composition, checked(outer, inner)->input_shape(), outer->output_shape(), 0, 0),
        outer_(std::move(outer)),
        inner_(std::move(inner)) {}

  const MapPtr& outer() const noexcept { return outer_; }
  const MapPtr& inner() const noexcept { return inner_; }

 protected:
  Vec evaluate(std::span<const double> x, bool counted) const override {
    const Vec mid = evaluate_of(*inner_, x, counted);
    return evaluate_of(*outer_, mid, counted);
  }
  Vec push_forward(std::span<const double> x, std::span<const double> u) const override {
    const Vec mid = evaluate_of(*inner_, x, false);
    const Vec du = push_forward_of(*inner_, x, u);
    return push_forward_of(*outer_, mid, du);
  }
  Vec pull_back(std::span<const double> x, std::span<const double> v) const override {
    const Vec mid = evaluate_of(*inner_, x, false);
    const Vec g = pull_back_of(*outer_, mid, v);
    return pull_back_of(*inner_, x, g);
  }

 private:
  static const MapPtr& checked(const MapPtr& outer, const MapPtr& inner) {
    detail::require(outer && inner, "compose: null map");
    if (inner->output_shape() != outer->input_shape()) {
      throw InvalidInput("compose: inner output " + to_string(inner->output_shape()) + " != outer input " +
                         to_string(outer->input_shape()));
    }
    return inner;
  }

  MapPtr outer_;
  MapPtr inner_;
};

inline MapPtr compose(MapPtr outer, MapPtr inner) {
  return std::make_shared<Composition>(std::move(outer), std::move(inner));
}

// Feature map of a distorted image with the reference image held fixed:
// x -> [b(ref); b(x)]. Only the distorted half responds to perturbations.
class DistortedBranch final : public DifferentiableMap {
 public:
  DistortedBranch(MapPtr backbone, const Tensor& reference)
      : DifferentiableMap(MapKind::pair_adapter, backbone->input_shape(), Shape{2 * backbone->output_size()},
                          backbone->seed(), 0),
        backbone_(std::move(backbone)),
        reference_features_(backbone_->forward(reference).take_data()) {}

 protected:
  Vec evaluate(std::span<const double> x, bool counted) const override {
    Vec out = reference_features_;
    const Vec dist = evaluate_of(*backbone_, x, counted);
    out.insert(out.end(), dist.begin(), dist.end());
    return out;
  }
  Vec push_forward(std::span<const double> x, std::span<const double> u) const override {
    Vec out(reference_features_.size(), 0.0);
    const Vec d = push_forward_of(*backbone_, x, u);
    out.insert(out.end(), d.begin(), d.end());
    return out;
  }
  Vec pull_back(std::span<const double> x, std::span<const double> v) const override {
    return pull_back_of(*backbone_, x, v.subspan(reference_features_.size()));
  }

 private:
  MapPtr backbone_;
  Vec reference_features_;
};

// Full-reference adapter: input is a stacked (reference, distorted) pair of
// shape 2xCxHxW, output is [b(ref); b(dist)].
class PairAdapter final : public DifferentiableMap {
 public:
  explicit PairAdapter(MapPtr backbone)
      : DifferentiableMap(MapKind::pair_adapter, pair_shape(backbone), Shape{2 * backbone->output_size()},
                          backbone->seed(), 0),
        backbone_(std::move(backbone)) {}

  const MapPtr& backbone() const noexcept { return backbone_; }

  // The map whose Jacobian certification uses: distorted image only.
  MapPtr distorted_branch(const Tensor& reference) const {
    return std::make_shared<DistortedBranch>(backbone_, reference);
  }

  static Tensor stack(const Tensor& reference, const Tensor& distorted) {
    if (reference.shape() != distorted.shape()) {
      throw InvalidInput("pair adapter: reference " + to_string(reference.shape()) + " and distorted " +
                         to_string(distorted.shape()) + " shapes differ");
    }
    Shape shape{2};
    shape.insert(shape.end(), reference.shape().begin(), reference.shape().end());
    std::vector<double> data(reference.data());
    data.insert(data.end(), distorted.data().begin(), distorted.data().end());
    return Tensor(std::move(shape), std::move(data));
  }

 protected:
  Vec evaluate(std::span<const double> x, bool counted) const override {
    const std::size_t half = backbone_->input_size();
    Vec out = evaluate_of(*backbone_, x.first(half), counted);
    const Vec dist = evaluate_of(*backbone_, x.subspan(half), counted);
    out.insert(out.end(), dist.begin(), dist.end());
    return out;
  }
  Vec push_forward(std::span<const double> x, std::span<const double> u) const override {
    const std::size_t half = backbone_->input_size();
    Vec out = push_forward_of(*backbone_, x.first(half), u.first(half));
    const Vec d = push_forward_of(*backbone_, x.subspan(half), u.subspan(half));
    out.insert(out.end(), d.begin(), d.end());
    return out;
  }
  Vec pull_back(std::span<const double> x, std::span<const double> v) const override {
    const std::size_t half = backbone_->input_size();
    const std::size_t features = backbone_->output_size();
    Vec g = pull_back_of(*backbone_, x.first(half), v.first(features));
    const Vec d = pull_back_of(*backbone_, x.subspan(half), v.subspan(features));
    g.insert(g.end(), d.begin(), d.end());
    return g;
  }

 private:
  static Shape pair_shape(const MapPtr& backbone) {
    detail::require(backbone != nullptr, "pair adapter: null backbone");
    Shape shape{2};
    shape.insert(shape.end(), backbone->input_shape().begin(), backbone->input_shape().end());
    return shape;
  }

  MapPtr backbone_;
};

inline std::shared_ptr<PairAdapter> make_fr_adapter(MapPtr backbone) {
  return std::make_shared<PairAdapter>(std::move(backbone));
}

}  // namespace certsmooth
