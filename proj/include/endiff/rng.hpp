#pragma once

// Counter-based random numbers.
//
// A RandomSource is a (key, counter) pair. The n-th 64-bit draw is
// splitmix64_mix(key + n * 0x9E3779B97F4A7C15), i.e. the SplitMix64 output
// function applied to a Weyl sequence offset by the key. Streams are derived
// with split(tag): key' = mix(key ^ mix(tag + 0xD1B54A32D192ED03)), counter
// reset to zero. Uniform doubles take the top 53 bits; normals use the
// Box-Muller transform with both outputs consumed in order. Everything is
// integer arithmetic except the final log/sqrt/cos/sin of Box-Muller.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>

namespace endiff {

namespace detail {

constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

constexpr std::uint64_t splitmix64_mix(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

constexpr std::uint64_t hash_tag(std::string_view tag) {
  std::uint64_t h = 0xCBF29CE484222325ULL;  // FNV-1a
  for (char c : tag) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001B3ULL;
  }
  return h;
}

}  // namespace detail

/// Roles used for stream splitting throughout the library.
namespace streams {
inline constexpr std::uint64_t kNoise = 1;
inline constexpr std::uint64_t kTime = 2;
inline constexpr std::uint64_t kRotation = 3;
inline constexpr std::uint64_t kInit = 4;
inline constexpr std::uint64_t kData = 5;
inline constexpr std::uint64_t kSize = 6;
}  // namespace streams

class RandomSource {
 public:
  explicit RandomSource(std::uint64_t seed = 0)
      : key_(detail::splitmix64_mix(seed ^ 0x6A09E667F3BCC909ULL)) {}

  std::uint64_t next_u64() {
    ++counter_;
    return detail::splitmix64_mix(key_ + counter_ * detail::kGolden);
  }

  /// Uniform on [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform on [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer on [0, n). Uses rejection to avoid modulo bias.
  std::uint64_t uniform_index(std::uint64_t n) {
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t v = next_u64();
    while (v >= limit) v = next_u64();
    return v % n;
  }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    // 1 - u lies in (0, 1], keeping log finite.
    const double u1 = 1.0 - uniform();
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
  }

  /// Independent child stream; does not advance this stream.
  RandomSource split(std::uint64_t tag) const {
    RandomSource child;
    child.key_ = detail::splitmix64_mix(
        key_ ^ detail::splitmix64_mix(tag + 0xD1B54A32D192ED03ULL));
    return child;
  }

  RandomSource split(std::string_view tag) const { return split(detail::hash_tag(tag)); }

  std::uint64_t counter() const { return counter_; }

 private:
  std::uint64_t key_ = 0;
  std::uint64_t counter_ = 0;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace endiff
