#pragma once

#include <cstdint>
#include <vector>

#include "mtadapt/matrix.hpp"

namespace mtadapt {

/// Deterministic seeded generator: SplitMix64 over a 64-bit counter, with
/// standard normals produced by the Box-Muller transform (pair-cached).
///
/// The algorithm is fixed. Every seeded artifact in the toolkit (model init,
/// data generation, dropout masks, shuffles) depends on this exact sequence;
/// changing it silently would invalidate all recorded runs.
class Rng {
 public:
  explicit Rng(std::uint64_t seed)
      : seed_(seed), state_(seed), cached_(0.0), has_cached_(false) {}

  std::uint64_t seed() const { return seed_; }

  std::uint64_t next_u64();

  /// Uniform in [0, 1), 53-bit resolution.
  double uniform();

  /// Standard normal via Box-Muller.
  double normal();

  /// Uniform integer in [0, n). n must be positive.
  std::uint64_t below(std::uint64_t n);

  /// Independent child stream derived from the original seed and a stream id.
  /// Derivation ignores how far this generator has advanced, so streams can
  /// be split up front: 0 = model init, 1 = data gen, 2 = dropout, 3 = shuffle.
  Rng derive(std::uint64_t stream) const;

 private:
  std::uint64_t seed_;
  std::uint64_t state_;
  double cached_;
  bool has_cached_;
};

// Well-known stream ids used across the toolkit.
namespace streams {
inline constexpr std::uint64_t kModelInit = 0;
inline constexpr std::uint64_t kDataGen = 1;
inline constexpr std::uint64_t kDropout = 2;
inline constexpr std::uint64_t kShuffle = 3;
inline constexpr std::uint64_t kAdapterInit = 4;
}  // namespace streams

/// rows x cols matrix of i.i.d. N(0, stddev^2) draws. stddev must be positive.
Matrix gaussian(Rng& rng, std::size_t rows, std::size_t cols, double stddev);

/// Fisher-Yates shuffle driven by the given Rng.
template <typename T>
void shuffle(std::vector<T>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng.below(i));
    std::swap(v[i - 1], v[j]);
  }
}

}  // namespace mtadapt
