#pragma once

#include <array>
#include <cstdint>

namespace priveri::numerics {

/// xoshiro256** seeded through splitmix64. The output stream depends only on
/// the 64-bit seed, so every randomized operation is reproducible anywhere.
class Prng {
 public:
  explicit Prng(std::uint64_t seed);

  std::uint64_t seed() const noexcept { return seed_; }

  std::uint64_t next_u64() noexcept;

  /// Uniform double in [0, 1) with 53 random bits.
  double uniform01() noexcept;

  /// Uniform integer in [0, n). Rejection sampling, no modulo bias. n must be > 0.
  std::uint64_t uniform_below(std::uint64_t n);

  /// Standard normal via Box–Muller (one value per call, no cached spare).
  double normal() noexcept;

  /// Independent generator seeded from this stream's next output.
  Prng fork() noexcept { return Prng(next_u64()); }

 private:
  std::uint64_t seed_;
  std::array<std::uint64_t, 4> state_{};
};

std::uint64_t splitmix64(std::uint64_t& state) noexcept;

}  // namespace priveri::numerics
