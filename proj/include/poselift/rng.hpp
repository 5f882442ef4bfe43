#pragma once

#include <cmath>
#include <cstdint>

namespace poselift {

// Counter-based splitmix64 stream. No global state: every consumer owns its
// own stream, seeded explicitly, so runs are reproducible bit for bit.
class SplitMix64 {
 public:
  explicit SplitMix64(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ull;
    uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1), 53-bit resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller; draws two uniforms per call, nothing cached.
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    // Guard against log(0).
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    double r = std::sqrt(-2.0 * std::log(u1));
    return r * std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  // Derive an independent stream for a named purpose (init, dropout, ...).
  SplitMix64 fork(uint64_t stream_id) const {
    SplitMix64 mixer(state_ ^ (0xd1342543de82ef95ull * (stream_id + 1)));
    return SplitMix64(mixer.next_u64());
  }

 private:
  uint64_t state_;
};

}  // namespace poselift
