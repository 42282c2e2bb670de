#pragma once

// Independent reference computations used by the unit and acceptance tests.
// Nothing here calls the library's inference code.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <random>
#include <vector>

#include "vebhmm/matrix.hpp"

namespace oracle {

struct PathSums {
  vebhmm::Matrix gamma;
  std::vector<vebhmm::Matrix> xi_pair;
  double log_Z = 0.0;
};

// Visits every path z in [0, K)^T.
template <typename Fn>
void for_each_path(std::size_t T, std::size_t K, Fn&& fn) {
  std::vector<int> z(T, 0);
  for (;;) {
    fn(z);
    std::size_t t = 0;
    while (t < T && ++z[t] == static_cast<int>(K)) z[t++] = 0;
    if (t == T) return;
  }
}

inline double path_log_weight(const std::vector<int>& z, const vebhmm::Matrix& log_em,
                              const vebhmm::Matrix& log_A, const std::vector<double>& log_pi) {
  double w = log_pi[static_cast<std::size_t>(z[0])] + log_em(0, static_cast<std::size_t>(z[0]));
  for (std::size_t t = 1; t < z.size(); ++t)
    w += log_A(static_cast<std::size_t>(z[t - 1]), static_cast<std::size_t>(z[t])) +
         log_em(t, static_cast<std::size_t>(z[t]));
  return w;
}

// Marginals and normalizer by summing the weight of every path. Weights are
// accumulated in long double relative to the largest path weight.
inline PathSums enumerate(const vebhmm::Matrix& log_em, const vebhmm::Matrix& log_A,
                          const std::vector<double>& log_pi) {
  const std::size_t T = log_em.rows();
  const std::size_t K = log_em.cols();
  double top = -std::numeric_limits<double>::infinity();
  for_each_path(T, K, [&](const std::vector<int>& z) {
    top = std::max(top, path_log_weight(z, log_em, log_A, log_pi));
  });
  std::vector<long double> g(T * K, 0.0L), xi((T - 1) * K * K, 0.0L);
  long double Z = 0.0L;
  for_each_path(T, K, [&](const std::vector<int>& z) {
    const long double w = std::exp(static_cast<long double>(path_log_weight(z, log_em, log_A, log_pi) - top));
    Z += w;
    for (std::size_t t = 0; t < T; ++t) g[t * K + static_cast<std::size_t>(z[t])] += w;
    for (std::size_t t = 0; t + 1 < T; ++t)
      xi[(t * K + static_cast<std::size_t>(z[t])) * K + static_cast<std::size_t>(z[t + 1])] += w;
  });
  PathSums out;
  out.log_Z = top + static_cast<double>(std::log(Z));
  out.gamma = vebhmm::Matrix(T, K);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t k = 0; k < K; ++k) out.gamma(t, k) = static_cast<double>(g[t * K + k] / Z);
  for (std::size_t t = 0; t + 1 < T; ++t) {
    vebhmm::Matrix s(K, K);
    for (std::size_t i = 0; i < K; ++i)
      for (std::size_t j = 0; j < K; ++j) s(i, j) = static_cast<double>(xi[(t * K + i) * K + j] / Z);
    out.xi_pair.push_back(s);
  }
  return out;
}

// Highest-weight path, lowest lexicographic index among ties.
inline std::vector<int> argmax_path(const vebhmm::Matrix& log_em, const vebhmm::Matrix& log_A,
                                    const std::vector<double>& log_pi) {
  std::vector<int> best;
  double top = -std::numeric_limits<double>::infinity();
  for_each_path(log_em.rows(), log_em.cols(), [&](const std::vector<int>& z) {
    const double w = path_log_weight(z, log_em, log_A, log_pi);
    if (w > top) {
      top = w;
      best = z;
    }
  });
  return best;
}

// Log evidence of observations x under a single Normal-Gamma(m, beta, a, b)
// component, from the conjugate marginal.
inline double normal_gamma_log_evidence(const std::vector<double>& x, double m, double beta,
                                        double a, double b) {
  const double n = static_cast<double>(x.size());
  if (x.empty()) return 0.0;
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= n;
  double S = 0.0;
  for (double v : x) S += (v - mean) * (v - mean);
  const double beta_n = beta + n;
  const double a_n = a + 0.5 * n;
  const double b_n = b + 0.5 * (S + beta * n * (mean - m) * (mean - m) / beta_n);
  return std::lgamma(a_n) - std::lgamma(a) + a * std::log(b) - a_n * std::log(b_n) +
         0.5 * std::log(beta / beta_n) - 0.5 * n * std::log(2.0 * M_PI);
}

// log of the Dirichlet-multinomial probability of an ordered count vector.
inline double dirichlet_sequence_log_prob(const std::vector<double>& alpha,
                                          const std::vector<double>& counts) {
  double sa = 0.0, sn = 0.0, out = 0.0;
  for (std::size_t l = 0; l < alpha.size(); ++l) {
    sa += alpha[l];
    sn += counts[l];
    out += std::lgamma(alpha[l] + counts[l]) - std::lgamma(alpha[l]);
  }
  return out + std::lgamma(sa) - std::lgamma(sa + sn);
}

// Marsaglia-Tsang gamma sampler with its own uniform/normal draws, kept
// separate from std::gamma_distribution.
class IndependentGamma {
 public:
  explicit IndependentGamma(std::uint32_t seed) : rng_(seed) {}

  double operator()(double shape) {
    if (shape < 1.0) {
      const double u = uniform();
      return (*this)(shape + 1.0) * std::pow(u, 1.0 / shape);
    }
    const double d = shape - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
      double x, v;
      do {
        x = normal();
        v = 1.0 + c * x;
      } while (v <= 0.0);
      v = v * v * v;
      const double u = uniform();
      if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
      if (std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
    }
  }

  // 53 random bits from two 32-bit draws, never 0.
  double uniform() {
    const std::uint64_t hi = rng_() >> 5, lo = rng_() >> 6;
    return (static_cast<double>((hi << 26) | lo) + 0.5) * 0x1.0p-53;
  }

  // Box-Muller.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = uniform(), u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    spare_ = r * std::sin(2.0 * M_PI * u2);
    has_spare_ = true;
    return r * std::cos(2.0 * M_PI * u2);
  }

 private:
  std::mt19937 rng_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace oracle
