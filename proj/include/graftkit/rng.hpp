#pragma once

#include <cstdint>
#include <random>

#include "graftkit/tensor.hpp"

namespace graftkit {

// Seeded generator with platform-independent uniform/normal draws
// (std::normal_distribution is implementation-defined).
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  double normal();
  std::uint64_t next() { return engine_(); }

  // Independent child stream derived from this generator's seed space.
  Rng fork(std::uint64_t stream) const;

  Tensor normal_tensor(const Shape& shape, double stddev = 1.0, DType dtype = DType::kF32);

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

// splitmix64 finaliser; used to derive seeds from (seed, index) pairs.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index);

}  // namespace graftkit
