#pragma once

#include <cmath>
#include <cstdint>

#include "ldet/error.hpp"

namespace ldet {

// splitmix64 step; used both to expand seeds into xoshiro state and to
// derive independent child seeds for parallel work.
inline std::uint64_t splitmix64_next(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Deterministic cross-platform generator: xoshiro256++ seeded by splitmix64
// expansion of a single 64-bit seed. Single-owner mutable state; never share
// one instance across concurrent tasks, derive child seeds instead.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) {
    std::uint64_t sm = seed;
    for (auto& word : state_) word = splitmix64_next(sm);
    has_cached_gaussian_ = false;
    cached_gaussian_ = 0.0;
  }

  std::uint64_t next_u64() {
    const std::uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  // Uniform in [0, 1) with 53 bits of precision.
  double next_double() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  // Uniform in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  // Uniform integer in [0, n).
  std::uint64_t next_below(std::uint64_t n) {
    if (n == 0) throw ArgumentError("Rng::next_below: n must be positive");
    // rejection sampling to avoid modulo bias
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t v;
    do {
      v = next_u64();
    } while (v >= limit);
    return v % n;
  }

  // Standard normal via Box-Muller; caches the second deviate.
  double gaussian() {
    if (has_cached_gaussian_) {
      has_cached_gaussian_ = false;
      return cached_gaussian_;
    }
    double u1 = next_double();
    while (u1 <= 0.0) u1 = next_double();
    const double u2 = next_double();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * 3.14159265358979323846 * u2;
    cached_gaussian_ = radius * std::sin(angle);
    has_cached_gaussian_ = true;
    return radius * std::cos(angle);
  }

  double gaussian(double stddev) { return stddev * gaussian(); }

  // Independent child seed for a named purpose; the same (seed, tag) pair
  // always yields the same child stream.
  static std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag) {
    std::uint64_t sm = seed ^ (0xa5a5a5a5a5a5a5a5ULL + tag * 0x9e3779b97f4a7c15ULL);
    return splitmix64_next(sm);
  }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) {
    return (x << k) | (x >> (64 - k));
  }

  std::uint64_t state_[4];
  bool has_cached_gaussian_;
  double cached_gaussian_;
};

}  // namespace ldet
