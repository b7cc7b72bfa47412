#pragma once

#include <cstdint>
#include <random>

namespace bmrs {

using Rng = std::mt19937_64;

/// Uniform on the open interval (0, 1); built from the top 53 bits so the
/// stream is identical across standard libraries.
inline double open_uniform(Rng& rng) {
  const std::uint64_t k = rng() >> 11;
  return (static_cast<double>(k) + 0.5) * 0x1.0p-53;
}

inline double uniform(Rng& rng, double lo, double hi) { return lo + (hi - lo) * open_uniform(rng); }

/// Derives an independent stream seed (splitmix64 finaliser).
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace bmrs
