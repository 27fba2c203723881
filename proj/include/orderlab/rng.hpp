#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace orderlab {

// Deterministic RNG used everywhere in the project. Distribution functions
// are hand-rolled on top of mt19937_64 so that sequences are reproducible
// across standard libraries, not just across runs.
class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0)
      : engine_(derive(seed, stream)) {}

  // splitmix64 mix of (seed, stream); used to derive independent streams.
  static std::uint64_t derive(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform01() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  // Uniform integer in [0, n), rejection sampling (no modulo bias).
  int uniform_int(int n) {
    const std::uint64_t un = static_cast<std::uint64_t>(n);
    const std::uint64_t bound = UINT64_MAX - UINT64_MAX % un;
    std::uint64_t x = next_u64();
    while (x >= bound) x = next_u64();
    return static_cast<int>(x % un);
  }

  // Box-Muller with cached spare.
  double normal(double mean, double stddev) {
    if (has_spare_) {
      has_spare_ = false;
      return mean + stddev * spare_;
    }
    double u1 = uniform01();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    const double u2 = uniform01();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * 3.14159265358979323846 * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return mean + stddev * radius * std::cos(angle);
  }

 private:
  std::mt19937_64 engine_;
  double spare_{0.0};
  bool has_spare_{false};
};

}  // namespace orderlab
