#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <utility>

namespace guie {

/// Reference generator for every random decision in the library.
///
/// State advance and output mix are the SplitMix64 recipe:
///   state += 0x9E3779B97F4A7C15
///   z = state
///   z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
///   z = (z ^ (z >> 27)) * 0x94D049BB133111EB
///   return z ^ (z >> 31)
/// Derived draws (bounded integers, doubles, normals) are defined below so
/// that another implementation can reproduce sampling decisions bit for bit.
class SplitMix64 {
public:
  explicit SplitMix64(std::uint64_t seed = 0) noexcept : state_(seed) {}

  std::uint64_t next() noexcept {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  /// Uniform integer in [0, bound) by rejection: draws r until
  /// r >= (2^64 - bound) mod bound, then returns r mod bound.
  std::uint64_t below(std::uint64_t bound) noexcept {
    if (bound <= 1) return 0;
    const std::uint64_t threshold = (0 - bound) % bound;
    for (;;) {
      const std::uint64_t r = next();
      if (r >= threshold) return r % bound;
    }
  }

  /// Uniform double in [0, 1) from the top 53 bits.
  double uniform() noexcept { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  /// Standard normal via Box-Muller; consumes two draws, uses the cosine branch.
  double normal() noexcept {
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  std::uint64_t state() const noexcept { return state_; }

private:
  std::uint64_t state_;
};

/// Forward Fisher-Yates: for i = 0..n-2 swap v[i] with v[i + below(n - i)].
/// Stopping after `prefix` positions yields a uniform sample of that size in
/// v[0, prefix).
template <class T>
void partial_shuffle(std::span<T> v, std::size_t prefix, SplitMix64& rng) {
  const std::size_t n = v.size();
  if (prefix > n) prefix = n;
  for (std::size_t i = 0; i + 1 < n && i < prefix; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(n - i));
    using std::swap;
    swap(v[i], v[j]);
  }
}

template <class T>
void shuffle(std::span<T> v, SplitMix64& rng) {
  partial_shuffle(v, v.size(), rng);
}

}  // namespace guie
