#pragma once

#include <cstdint>
#include <random>

namespace camfool {

// Deterministic PRNG used everywhere randomness is needed. std::mt19937 is
// bit-stable across implementations; the float/int derivations below are
// fixed here instead of relying on std distributions, whose output is not
// standardized.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(static_cast<std::uint32_t>(seed ^ (seed >> 32))) {}

  std::uint32_t next_u32() { return gen_(); }

  // Uniform in [0,1) with 24 bits of resolution.
  double uniform() { return static_cast<double>(next_u32() >> 8) * (1.0 / 16777216.0); }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). Rejection keeps it unbiased and deterministic.
  int uniform_int(int n) {
    const std::uint32_t bound = static_cast<std::uint32_t>(n);
    const std::uint32_t limit = UINT32_MAX - UINT32_MAX % bound;
    std::uint32_t x = next_u32();
    while (x >= limit) x = next_u32();
    return static_cast<int>(x % bound);
  }

  // Derives an independent stream, e.g. one per image index.
  static std::uint64_t derive(std::uint64_t seed, std::uint64_t salt) {
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (salt + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

 private:
  std::mt19937 gen_;
};

}  // namespace camfool
