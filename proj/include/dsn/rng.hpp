#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <vector>

namespace dsn {

/// Portable seeded generator: xoshiro256** (Blackman & Vigna) with the
/// 256-bit state filled by four successive SplitMix64 outputs of the seed.
///
/// Derived draws:
///  - uniform():  (next() >> 11) * 2^-53, in [0, 1)
///  - normal():   Marsaglia polar method on 2*uniform()-1 pairs; the second
///                value of each pair is cached
///  - below(n):   next() % n, redrawn while next() falls in the top partial
///                block (no modulo bias)
/// Identical seeds give identical integer streams on every platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  /// Independent generator for a named sub-purpose of one experiment seed.
  static Rng stream(std::uint64_t seed, std::uint64_t stream_id);

  std::uint64_t next() noexcept;
  double uniform() noexcept;
  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }
  double normal() noexcept;
  std::uint64_t below(std::uint64_t n) noexcept;

  /// Fisher-Yates permutation of 0..n-1.
  std::vector<std::size_t> permutation(std::size_t n);

  std::uint64_t seed() const noexcept { return seed_; }

 private:
  std::uint64_t seed_;
  std::array<std::uint64_t, 4> state_{};
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// One SplitMix64 step; advances `state` and returns the mixed output.
std::uint64_t splitmix64(std::uint64_t& state) noexcept;

}  // namespace dsn
