#pragma once

// Seeded random streams. Every component draws from a named substream of a
// single root seed, so stages can be re-run independently yet reproducibly.

#include "cotd/hash.hpp"

#include <cstdint>
#include <random>
#include <string_view>

namespace cotd {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Seed for substream `name` (and optional index) of `root`.
inline std::uint64_t substream_seed(std::uint64_t root, std::string_view name, std::uint64_t index = 0) {
  return splitmix64(splitmix64(root ^ hash_string(name)) + index);
}

inline Rng make_rng(std::uint64_t root, std::string_view name, std::uint64_t index = 0) {
  return Rng(substream_seed(root, name, index));
}

inline double uniform(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

inline double normal(Rng& rng, double mean = 0.0, double stddev = 1.0) {
  return std::normal_distribution<double>(mean, stddev)(rng);
}

}  // namespace cotd
