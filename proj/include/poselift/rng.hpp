#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace poselift {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

// FNV-1a; stable across platforms unlike std::hash.
inline std::uint64_t tag_hash(std::string_view tag) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : tag) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

// One master seed, independent streams per (purpose, index). Adding a new
// consumer never shifts the draws of an existing one.
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view purpose,
                                 std::uint64_t index = 0) {
  return splitmix64(splitmix64(seed ^ tag_hash(purpose)) + index);
}

using Rng = std::mt19937_64;

inline Rng make_rng(std::uint64_t seed, std::string_view purpose,
                    std::uint64_t index = 0) {
  return Rng(derive_seed(seed, purpose, index));
}

}  // namespace poselift
