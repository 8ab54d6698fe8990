#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <vector>

namespace mtlstm {

/// Seeded random source with a fully pinned stream. The engine is
/// std::mt19937_64 (bit-exact per the standard); the distributions are
/// defined here because std::uniform_* distributions are not portable
/// across standard libraries.
class Rng {
public:
  explicit Rng(std::uint64_t seed) : seed_(seed), gen_(seed) {}

  std::uint64_t seed() const { return seed_; }

  std::uint64_t next_u64() { return gen_(); }

  /// Uniform double in [0, 1).
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform index in [0, n). Rejection sampling avoids modulo bias.
  std::size_t uniform_index(std::size_t n) {
    if (n == 0) return 0;
    const std::uint64_t bound =
        std::numeric_limits<std::uint64_t>::max() -
        std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t r = next_u64();
    while (r >= bound) r = next_u64();
    return static_cast<std::size_t>(r % n);
  }

  /// Uniform integer in [lo, hi], inclusive.
  long uniform_int(long lo, long hi) {
    return lo +
           static_cast<long>(uniform_index(static_cast<std::size_t>(hi - lo + 1)));
  }

  /// Standard normal via Box-Muller (first component only).
  double normal(double mean = 0.0, double stddev = 1.0) {
    double u1 = static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;  // (0,1]
    double u2 = uniform();
    double z = std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    return mean + stddev * z;
  }

  /// Normal resampled until within max_sigmas standard deviations.
  double truncated_normal(double mean, double stddev, double max_sigmas = 2.0) {
    double z = normal();
    while (std::abs(z) > max_sigmas) z = normal();
    return mean + stddev * z;
  }

  /// Fisher-Yates shuffle driven by this stream.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = uniform_index(i);
      std::swap(v[i - 1], v[j]);
    }
  }

  /// Independent child stream for a named purpose. Children derived with
  /// distinct tags never share state with the parent or each other.
  Rng derive(std::uint64_t tag) const {
    return Rng(splitmix(seed_ ^ (0x9E3779B97F4A7C15ULL * (tag + 1))));
  }

private:
  static std::uint64_t splitmix(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
  }

  std::uint64_t seed_;
  std::mt19937_64 gen_;
};

}  // namespace mtlstm
