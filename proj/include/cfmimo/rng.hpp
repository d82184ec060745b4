#pragma once

#include <cstdint>
#include <random>
#include <string_view>

#include "cfmimo/common.hpp"

namespace cfmimo {

// Deterministic substream derivation. Every random decision in the pipeline
// draws from a stream named by (master seed, purpose tag, integer ids), so
// regenerating any single artifact never depends on call order elsewhere.

inline std::uint64_t splitmix64(std::uint64_t& state) {
  state += 0x9e3779b97f4a7c15ull;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

inline std::uint64_t hash_tag(std::string_view tag) {
  std::uint64_t h = 0xcbf29ce484222325ull;  // FNV-1a
  for (unsigned char c : tag) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

class RngStream {
 public:
  template <typename... Ids>
  RngStream(std::uint64_t master_seed, std::string_view tag, Ids... ids) {
    std::uint64_t state = master_seed ^ hash_tag(tag);
    std::uint64_t seed = splitmix64(state);
    ((state ^= static_cast<std::uint64_t>(ids) + 0x9e3779b97f4a7c15ull,
      seed = splitmix64(state)),
     ...);
    engine_.seed(seed);
  }

  std::mt19937_64& engine() { return engine_; }

  double uniform(double lo, double hi) {
    std::uniform_real_distribution<double> d(lo, hi);
    return d(engine_);
  }

  std::uint64_t uniform_index(std::uint64_t n) {
    std::uniform_int_distribution<std::uint64_t> d(0, n - 1);
    return d(engine_);
  }

  double normal(double mean = 0.0, double stddev = 1.0) {
    std::normal_distribution<double> d(mean, stddev);
    return d(engine_);
  }

  // CN(0, variance): real and imaginary parts each N(0, variance/2).
  cx normal_complex(double variance) {
    double s = std::sqrt(variance / 2.0);
    return {normal(0.0, s), normal(0.0, s)};
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace cfmimo
