#pragma once

// Seeded random streams. Counter-based draws (value depends only on
// seed, stream id and index) are used wherever results must not depend on
// iteration order; sequential draws use std::mt19937_64.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <span>
#include <vector>

namespace clusterfit {

inline constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline constexpr std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) noexcept {
  return splitmix64(seed ^ splitmix64(salt + 0x632be59bd9b4e019ULL));
}

inline constexpr std::uint64_t counter_bits(std::uint64_t seed, std::uint64_t stream, std::uint64_t index) noexcept {
  return splitmix64(mix_seed(seed, stream) ^ splitmix64(index));
}

/// Uniform in [0, 1) with 53 random bits.
inline constexpr double counter_uniform(std::uint64_t seed, std::uint64_t stream, std::uint64_t index) noexcept {
  return double(counter_bits(seed, stream, index) >> 11) * 0x1.0p-53;
}

/// Uniform integer in [0, bound), bound >= 1.
inline constexpr std::uint64_t counter_below(std::uint64_t seed, std::uint64_t stream, std::uint64_t index,
                                             std::uint64_t bound) noexcept {
  return static_cast<std::uint64_t>((static_cast<unsigned __int128>(counter_bits(seed, stream, index)) * bound) >> 64);
}

/// Sequential generator with portable uniform / normal draws (the std
/// distributions are implementation-defined, the engine is not).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }

  double uniform() { return double(engine_() >> 11) * 0x1.0p-53; }

  std::uint64_t below(std::uint64_t bound) {
    return static_cast<std::uint64_t>((static_cast<unsigned __int128>(engine_()) * bound) >> 64);
  }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    spare_ = r * std::sin(2.0 * std::numbers::pi * u2);
    has_spare_ = true;
    return r * std::cos(2.0 * std::numbers::pi * u2);
  }

  template <typename T>
  void shuffle(std::span<T> items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::swap(items[i - 1], items[below(i)]);
    }
  }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace clusterfit
