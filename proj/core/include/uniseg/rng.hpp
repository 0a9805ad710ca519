#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>

namespace uniseg {

/// All randomness in the library flows through this engine. The engine itself
/// is fully specified by the standard; the draws below are written out by hand
/// because std:: distributions are implementation-defined and would break
/// bit-exact reproducibility across standard libraries.
using Rng = std::mt19937_64;

/// Uniform double in [0, 1) with 53 random bits.
inline double uniform01(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline double uniform(Rng& rng, double lo, double hi) {
  return lo + (hi - lo) * uniform01(rng);
}

/// Uniform integer in [0, n). Rejection sampling keeps it unbiased.
inline std::uint64_t uniform_index(Rng& rng, std::uint64_t n) {
  if (n <= 1) {
    rng();
    return 0;
  }
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t x = rng();
  while (x >= limit) x = rng();
  return x % n;
}

/// Standard normal via Box-Muller; consumes exactly two engine draws.
inline double normal01(Rng& rng) {
  double u1 = uniform01(rng);
  const double u2 = uniform01(rng);
  if (u1 < 1e-300) u1 = 1e-300;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
}

/// Derives an independent child seed (splitmix64 finalizer) so that workers
/// seeded from (root, id) do not share streams.
inline std::uint64_t derive_seed(std::uint64_t root, std::uint64_t id) {
  std::uint64_t z = root + 0x9E3779B97F4A7C15ULL * (id + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

std::string serialize_rng(const Rng& rng);
Rng deserialize_rng(const std::string& text);

}  // namespace uniseg
