#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string_view>

namespace unlearn {

using Rng = std::mt19937_64;

// FNV-1a, 64-bit. Used for content hashes of artifacts and for naming seed streams.
inline std::uint64_t fnv1a64(std::span<const unsigned char> bytes,
                             std::uint64_t h = 0xcbf29ce484222325ULL) noexcept {
  for (unsigned char b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t fnv1a64(std::string_view s) noexcept {
  return fnv1a64({reinterpret_cast<const unsigned char*>(s.data()), s.size()});
}

inline std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Seed of the named stream derived from a root seed, e.g. derive_seed(7, "victim").
inline std::uint64_t derive_seed(std::uint64_t root, std::string_view stream) noexcept {
  return splitmix64(root ^ splitmix64(fnv1a64(stream)));
}

template <typename T>
T uniform(Rng& rng, T lo, T hi) {
  return std::uniform_real_distribution<T>(lo, hi)(rng);
}

template <typename T>
T standard_normal(Rng& rng) {
  return std::normal_distribution<T>(T(0), T(1))(rng);
}

}  // namespace unlearn
