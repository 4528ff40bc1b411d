#pragma once

#include <cmath>
#include <cstdint>

namespace hdt {

// Counter-based deterministic generator. The state is fully described by
// (seed, counter), so streams can be reconstructed from checkpoint cursors
// and the same draws are produced on every platform.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0x9e3779b97f4a7c15ULL) : seed_(seed), counter_(0) {}

  // Derives an independent stream keyed by (seed, a, b, c).
  static Rng derive(uint64_t seed, uint64_t a, uint64_t b = 0, uint64_t c = 0) {
    uint64_t s = mix(seed);
    s = mix(s ^ mix(a + 0x517cc1b727220a95ULL));
    s = mix(s ^ mix(b + 0x2545f4914f6cdd1dULL));
    s = mix(s ^ mix(c + 0x6a09e667f3bcc909ULL));
    return Rng(s);
  }

  uint64_t next_u64() { return mix(seed_ + (++counter_) * 0x9e3779b97f4a7c15ULL); }

  // Uniform in [0, 1).
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * (1.0 / 9007199254740992.0);
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Integer in [0, n).
  int64_t below(int64_t n) {
    return static_cast<int64_t>(next_u64() % static_cast<uint64_t>(n));
  }

  // Standard normal via Box-Muller, one value per call (the partner draw is
  // discarded to keep the counter advance independent of call parity).
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  bool coin() { return (next_u64() & 1ULL) != 0; }

  uint64_t seed() const { return seed_; }
  uint64_t counter() const { return counter_; }
  void restore(uint64_t seed, uint64_t counter) { seed_ = seed; counter_ = counter; }

 private:
  static uint64_t mix(uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  uint64_t seed_;
  uint64_t counter_;
};

}  // namespace hdt
