#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>

#include "milkit/error.hpp"

namespace milkit {

/// SplitMix64, used only to expand a 64-bit seed into generator state.
class SplitMix64 {
 public:
  explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

 private:
  std::uint64_t state_;
};

/// xoshiro256** seeded through SplitMix64. Every stochastic routine in the
/// library takes one of these explicitly; nothing reads a global generator.
///
/// Derived draws (the order matters for cross-implementation agreement):
///   uniform()      one raw draw, top 53 bits scaled by 2^-53, in [0,1)
///   uniform_int()  one uniform() draw, floor(u * span) + lo
///   normal()       two uniform() draws u1, u2; sqrt(-2 ln(1-u1)) cos(2 pi u2)
class RandomStream {
 public:
  explicit RandomStream(std::uint64_t seed) : seed_(seed) {
    SplitMix64 sm(seed);
    for (auto& word : state_) word = sm.next();
  }

  std::uint64_t seed() const { return seed_; }

  std::uint64_t next() {
    const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) {
    require(lo < hi, "uniform: require lo < hi");
    return lo + (hi - lo) * uniform();
  }

  /// Integer in the closed range [lo, hi].
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    require(lo <= hi, "uniform_int: require lo <= hi");
    const double span = static_cast<double>(hi - lo) + 1.0;
    auto offset = static_cast<std::int64_t>(std::floor(uniform() * span));
    if (offset > hi - lo) offset = hi - lo;
    return lo + offset;
  }

  double normal() {
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  double normal(double mean, double sigma) { return mean + sigma * normal(); }

  bool operator==(const RandomStream&) const = default;

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  std::uint64_t seed_;
  std::array<std::uint64_t, 4> state_{};
};

/// In-place Fisher-Yates shuffle driven by the stream (high index first).
template <typename Container>
void shuffle(Container& items, RandomStream& stream) {
  if (items.size() < 2) return;
  for (std::size_t i = items.size() - 1; i > 0; --i) {
    const auto j = static_cast<std::size_t>(stream.uniform_int(0, static_cast<std::int64_t>(i)));
    using std::swap;
    swap(items[i], items[j]);
  }
}

}  // namespace milkit
