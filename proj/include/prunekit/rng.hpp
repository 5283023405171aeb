#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <utility>

namespace prunekit {

// Deterministic random source. std::mt19937 is bit-exact across platforms;
// the distributions are hand-rolled because the standard library's are not.
class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(static_cast<uint32_t>(mix(seed, 0))) {}
  Rng(uint64_t seed, uint64_t stream) : gen_(static_cast<uint32_t>(mix(seed, stream))) {}

  // SplitMix64 finalizer; derives independent streams from one seed.
  static uint64_t mix(uint64_t seed, uint64_t stream) {
    uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  uint32_t next_u32() { return gen_(); }

  // Uniform in [0, 1) with 24 bits of precision.
  double uniform() { return static_cast<double>(next_u32() >> 8) * (1.0 / 16777216.0); }

  // Uniform in (0, 1); safe for log/logit transforms.
  double uniform_open() {
    return (static_cast<double>(next_u32() >> 8) + 0.5) * (1.0 / 16777216.0);
  }

  // Inclusive bounds, Lemire-style range reduction (no modulo bias to speak of).
  int uniform_int(int lo, int hi) {
    uint64_t range = static_cast<uint64_t>(hi - lo) + 1;
    return lo + static_cast<int>((static_cast<uint64_t>(next_u32()) * range) >> 32);
  }

  bool bernoulli(double p) { return uniform() < p; }

  // Box-Muller with the usual cached second draw.
  double normal(double mean = 0.0, double stddev = 1.0) {
    if (has_cached_) {
      has_cached_ = false;
      return mean + stddev * cached_;
    }
    double u1 = uniform_open();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 2.0 * 3.14159265358979323846 * u2;
    cached_ = r * std::sin(theta);
    has_cached_ = true;
    return mean + stddev * (r * std::cos(theta));
  }

  // Fisher-Yates; std::shuffle is implementation-defined, this is not.
  template <typename It>
  void shuffle(It first, It last) {
    auto n = last - first;
    for (auto i = n - 1; i > 0; --i) {
      auto j = uniform_int(0, static_cast<int>(i));
      std::swap(*(first + i), *(first + j));
    }
  }

 private:
  std::mt19937 gen_;
  bool has_cached_ = false;
  double cached_ = 0.0;
};

}  // namespace prunekit
