#pragma once

#include <cstdint>
#include <random>

namespace hsinet {

/// Seeded 64-bit Mersenne twister with the handful of draws the library
/// needs. Every stochastic step (initialization, shuffling, dropout, data
/// synthesis) takes one of these explicitly.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(engine_); }
  double normal(double mean = 0.0, double stddev = 1.0) {
    return std::normal_distribution<double>(mean, stddev)(engine_);
  }
  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace hsinet
