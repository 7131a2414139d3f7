#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace stmoge {

// Deterministic splitmix64 stream. All randomness in the project flows from a
// single root seed, split per consumer with split(); the same (seed, tag)
// pair always yields the same stream regardless of platform or standard
// library, which the reproducibility guarantees depend on.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ULL;
    uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1) with 53 bits of mantissa.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller, one draw per call (no cached second value).
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
  }

  // Uniform integer in [0, n).
  uint64_t uniform_int(uint64_t n) { return n == 0 ? 0 : next_u64() % n; }

  // Knuth's product method, chunked so large rates stay exact in distribution.
  int64_t poisson(double rate) {
    if (rate <= 0.0) return 0;
    int64_t total = 0;
    while (rate > 30.0) {
      total += poisson_small(30.0);
      rate -= 30.0;
    }
    return total + poisson_small(rate);
  }

  // Derive an independent substream for a named consumer.
  Rng split(std::string_view tag) const {
    uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
    for (char c : tag) {
      h ^= static_cast<uint8_t>(c);
      h *= 0x100000001b3ULL;
    }
    return Rng(mix(state_, h));
  }

  Rng split(uint64_t salt) const { return Rng(mix(state_, salt)); }

 private:
  int64_t poisson_small(double rate) {
    const double limit = std::exp(-rate);
    int64_t k = 0;
    double p = 1.0;
    do {
      ++k;
      p *= uniform();
    } while (p > limit);
    return k - 1;
  }

  static uint64_t mix(uint64_t a, uint64_t b) {
    uint64_t z = a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2));
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    return z ^ (z >> 31);
  }

  uint64_t state_;
};

}  // namespace stmoge
