#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

namespace vebhmm {

using Rng = std::mt19937_64;

// SplitMix64 finalizer; decorrelates (seed, stream) pairs.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

// Independent generator for one unit of work (trace, restart, fold, ...).
inline Rng make_rng(std::uint64_t seed, std::uint64_t stream) { return Rng(mix_seed(seed, stream)); }

inline double sample_gamma(Rng& rng, double shape, double rate) {
  return std::gamma_distribution<double>(shape, 1.0 / rate)(rng);
}

inline std::vector<double> sample_dirichlet(Rng& rng, std::span<const double> alpha) {
  std::vector<double> out(alpha.size());
  double total = 0.0;
  for (std::size_t l = 0; l < alpha.size(); ++l) total += out[l] = sample_gamma(rng, alpha[l], 1.0);
  for (double& v : out) v /= total;
  return out;
}

inline std::size_t sample_discrete(Rng& rng, std::span<const double> p) {
  double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  for (std::size_t k = 0; k + 1 < p.size(); ++k) {
    if (u < p[k]) return k;
    u -= p[k];
  }
  return p.size() - 1;
}

}  // namespace vebhmm
