#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>

namespace certsmooth {

inline constexpr std::uint64_t splitmix64(std::uint64_t z) noexcept {
  z += 0x9E3779B97F4A7C15ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

// Derives an independent child seed; used to give sub-components their own streams.
inline constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag) noexcept {
  return splitmix64(splitmix64(seed) ^ splitmix64(tag + 0x632BE59BD9B4E019ULL));
}

// Counter-based generator: the i-th draw of stream s under seed k is a pure
// function of (k, s, i). Sample j of a Monte-Carlo loop therefore gets the same
// noise regardless of evaluation order or parallel partitioning.
class CounterRng {
 public:
  constexpr CounterRng(std::uint64_t seed, std::uint64_t stream) noexcept
      : key_(derive_seed(seed, stream)) {}

  constexpr std::uint64_t next_u64() noexcept { return splitmix64(key_ ^ splitmix64(counter_++)); }

  // Uniform on the open interval (0, 1).
  double uniform() noexcept {
    return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

  // Box-Muller; the second variate of each pair is kept for the next call.
  double normal() noexcept {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double radius = std::sqrt(-2.0 * std::log(uniform()));
    const double angle = 2.0 * std::numbers::pi * uniform();
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
  }

  void fill_normal(std::span<double> out, double stddev = 1.0) noexcept {
    for (double& v : out) v = stddev * normal();
  }

  std::uint64_t below(std::uint64_t bound) noexcept { return bound ? next_u64() % bound : 0; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace certsmooth
