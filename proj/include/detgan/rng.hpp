#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>

namespace detgan {

// Seeded generator with platform-independent draws. std::mt19937_64 output is
// fully specified by the standard; the <random> distributions are not, so the
// conversions below are done by hand.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(mix(seed)) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [lo, hi].
  int uniform_int(int lo, int hi) {
    const auto span = static_cast<std::uint64_t>(hi - lo) + 1;
    return lo + static_cast<int>(bounded(span));
  }

  /// Uniform index in [0, n).
  std::size_t index(std::size_t n) { return static_cast<std::size_t>(bounded(n)); }

  double normal() {
    // Box-Muller; u1 kept away from zero.
    const double u1 = 1.0 - uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  bool bernoulli(double p) { return uniform() < p; }

  /// Independent stream derived from this generator's seed lineage.
  Rng fork(std::uint64_t stream) { return Rng(next_u64() ^ mix(stream + 0x9e3779b97f4a7c15ULL)); }

  static std::uint64_t mix(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
  }

 private:
  std::uint64_t bounded(std::uint64_t n) {
    // Rejection sampling for an unbiased draw.
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t x = engine_();
    while (x >= limit) x = engine_();
    return x % n;
  }

  std::mt19937_64 engine_;
};

}  // namespace detgan
