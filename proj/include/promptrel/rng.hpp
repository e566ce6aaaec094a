#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace promptrel {

// PCG32 (XSH-RR 64/32), O'Neill's reference seeding. Every random draw in the
// toolkit goes through this generator so results are reproducible across
// platforms and standard libraries.
class Pcg32 {
 public:
  static constexpr const char* kName = "pcg32-xsh-rr";

  explicit Pcg32(std::uint64_t seed, std::uint64_t stream = 0) {
    state_ = 0;
    inc_ = (stream << 1u) | 1u;
    next_u32();
    state_ += seed;
    next_u32();
  }

  std::uint32_t next_u32() {
    const std::uint64_t old = state_;
    state_ = old * 6364136223846793005ULL + inc_;
    const auto xorshifted = static_cast<std::uint32_t>(((old >> 18u) ^ old) >> 27u);
    const auto rot = static_cast<std::uint32_t>(old >> 59u);
    return (xorshifted >> rot) | (xorshifted << ((-rot) & 31u));
  }

  // Unbiased draw in [0, bound), bound >= 1 (rejection on the low threshold).
  std::uint32_t bounded(std::uint32_t bound) {
    const std::uint32_t threshold = (-bound) % bound;
    for (;;) {
      const std::uint32_t r = next_u32();
      if (r >= threshold) return r % bound;
    }
  }

  // 53-bit uniform double in [0, 1).
  double uniform() {
    const std::uint64_t hi = next_u32() >> 5u;
    const std::uint64_t lo = next_u32() >> 6u;
    return static_cast<double>(hi * 67108864ULL + lo) * (1.0 / 9007199254740992.0);
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller; one normal per call (the sine branch is discarded so the
  // draw count per variate is fixed).
  double normal(double mean = 0.0, double stddev = 1.0) {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    return mean + stddev * r * std::cos(2.0 * std::numbers::pi * u2);
  }

  bool bernoulli(double p) { return uniform() < p; }

 private:
  std::uint64_t state_;
  std::uint64_t inc_;
};

}  // namespace promptrel
