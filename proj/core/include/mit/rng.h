#pragma once

// SplitMix64 generator. Every random draw in the project (weights, data,
// shuffles, grad-check subsamples) comes from this generator so results are
// reproducible bit-for-bit across platforms and standard libraries.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <vector>

#include "mit/tensor.h"

namespace mit {

class SplitMix64 {
 public:
  explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) { return n == 0 ? 0 : next() % n; }

  // Box-Muller; one draw per call (the pair's second value is discarded).
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }
  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[below(i)]);
  }

 private:
  std::uint64_t state_;
};

// Derives an independent stream seed, e.g. per sample: seed_i = mix_seed(seed, i).
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index) {
  SplitMix64 g(seed ^ (0xD1B54A32D192ED03ULL * (index + 1)));
  g.next();
  return g.next();
}

inline Tensor random_normal(const Shape& shape, double stddev, SplitMix64& rng, bool requires_grad = false) {
  std::vector<double> data(shape_numel(shape));
  for (double& v : data) v = rng.normal(0.0, stddev);
  return Tensor::from(shape, std::move(data), requires_grad);
}

inline Tensor random_uniform(const Shape& shape, double lo, double hi, SplitMix64& rng, bool requires_grad = false) {
  std::vector<double> data(shape_numel(shape));
  for (double& v : data) v = rng.uniform(lo, hi);
  return Tensor::from(shape, std::move(data), requires_grad);
}

}  // namespace mit
