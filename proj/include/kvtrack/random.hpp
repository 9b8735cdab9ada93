#pragma once

#include <cstdint>
#include <random>
#include <string_view>

#include "kvtrack/matrix.hpp"

namespace kvtrack {

// SplitMix64 finalizer, used only to derive well-separated stream seeds.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t fnv1a(std::string_view s) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Deterministic stream keyed by (seed, layer, role). The engine is
/// std::mt19937_64, whose output sequence is fixed by the standard; the
/// float mapping is done here rather than through std::uniform_real_distribution
/// (which is implementation-defined).
class KeyedRng {
 public:
  KeyedRng(std::uint64_t seed, std::uint64_t layer, std::string_view role)
      : engine_(mix64(mix64(seed) ^ mix64(layer + 0x51ed27ULL) ^ fnv1a(role))) {}

  /// Uniform in [0, 1) with 24 bits of mantissa.
  float unit() { return static_cast<float>(engine_() >> 40) * 0x1.0p-24f; }

  /// Uniform in [-bound, +bound).
  float symmetric(float bound) { return bound * (2.0f * unit() - 1.0f); }

  double unit_double() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  std::uint64_t next() { return engine_(); }

 private:
  std::mt19937_64 engine_;
};

inline Matrix seeded_uniform(std::size_t rows, std::size_t cols, float bound,
                             std::uint64_t seed, std::uint64_t layer,
                             std::string_view role) {
  KeyedRng rng(seed, layer, role);
  Matrix m(rows, cols);
  for (auto& v : m.data()) v = rng.symmetric(bound);
  return m;
}

}  // namespace kvtrack
