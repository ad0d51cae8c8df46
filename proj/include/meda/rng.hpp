#pragma once

#include <cmath>
#include <numbers>

#include "meda/common.hpp"

namespace meda {

// splitmix64 avalanche step.
inline u64 mix64(u64 z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

// Order-free key derivation: combine words into one well-mixed 64-bit key.
inline u64 derive_key(u64 a, u64 b) {
  return mix64(a + 0x9E3779B97F4A7C15ull * (b + 1));
}

inline u64 derive_key(u64 a, u64 b, u64 c) { return derive_key(derive_key(a, b), c); }

inline u64 derive_key(u64 a, u64 b, u64 c, u64 d) {
  return derive_key(derive_key(a, b, c), d);
}

// Deterministic counter-based generator. Same seed gives the same stream on
// every platform; no hidden global state, cheap to fork via derive_key.
class SplitMix64 {
 public:
  explicit SplitMix64(u64 seed) : state_(seed) {}

  u64 next() {
    state_ += 0x9E3779B97F4A7C15ull;
    return mix64(state_);
  }

  // Uniform in [0, 1) with 53 random bits.
  double uniform01() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  // Unbiased-enough bounded draw via 128-bit multiply; deterministic.
  u64 below(u64 n) {
    return static_cast<u64>((static_cast<unsigned __int128>(next()) * n) >> 64);
  }

  // Box-Muller with cached spare.
  double gaussian() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = uniform01();
    const double u2 = uniform01();
    const double radius = std::sqrt(-2.0 * std::log(1.0 - u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
  }

  template <class Vec>
  void shuffle(Vec& v) {
    for (size_t i = v.size(); i > 1; --i) {
      const size_t j = static_cast<size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  u64 state_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace meda
