// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <optional>

namespace mpq {

std::uint64_t splitmix64(std::uint64_t& state) noexcept;

// xoshiro256** seeded by four splitmix64 draws from the seed. The stream is
// fully determined by the seed on every platform.
//
// normal() uses the Box-Muller transform on two uniform draws:
//   r = sqrt(-2 ln(1 - u1)), z0 = r cos(2 pi u2), z1 = r sin(2 pi u2)
// z0 is returned and z1 cached for the next call.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) noexcept;

  std::uint64_t next_u64() noexcept;
  // Uniform in [0, 1) with 53 random bits.
  double uniform() noexcept;
  // Uniform integer in [0, n). n must be > 0.
  std::uint64_t below(std::uint64_t n) noexcept;
  double normal() noexcept;
  // Marsaglia-Tsang; shape < 1 handled by the U^(1/shape) boost.
  double gamma(double shape) noexcept;

 private:
  std::uint64_t s_[4];
  std::optional<double> cached_normal_;
};

// Child seed for a worker or layer: master XOR splitmix64-mixed index.
std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index) noexcept;

}  // namespace mpq
