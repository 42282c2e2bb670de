#pragma once

#include <cmath>
#include <cstdint>
#include <iomanip>
#include <random>
#include <sstream>
#include <string>

#include "vebhmm/empirical_bayes.hpp"
#include "vebhmm/errors.hpp"
#include "vebhmm/random.hpp"
#include "vebhmm/trace_data.hpp"

namespace vebhmm {

// Gamma shape of the simulated precisions. Fixed so that the per-trace noise
// level varies by roughly 16% around its mean.
inline constexpr double kSimNoiseShape = 10.0;

struct SimScenario {
  std::size_t K = 3;
  std::size_t N = 100;
  double mean_length = 100.0;  // expected T
  double delta_mu = 0.2;       // spacing of consensus state means
  double sigma_rel = 0.5;      // noise sd relative to delta_mu
  double mu_var_ratio = 0.4;   // Var_psi[mu] / Var[x | state]
  double alpha_self = 10.0;    // extra Dirichlet weight on self-transitions
  std::uint64_t seed = 0;
  bool fixed_length = false;   // T_n = mean_length for every trace

  void validate() const {
    auto fail = [](const char* why) { throw DomainError(std::string("SimScenario: ") + why); };
    if (K < 1) fail("K must be >= 1");
    if (N < 1) fail("N must be >= 1");
    if (!(mean_length >= 2.0)) fail("mean_length must be >= 2");
    if (!std::isfinite(delta_mu)) fail("delta_mu must be finite");
    if (!(sigma_rel > 0.0)) fail("sigma_rel must be > 0");
    if (!(mu_var_ratio >= 0.0)) fail("mu_var_ratio must be >= 0");
    if (!(alpha_self >= 0.0)) fail("alpha_self must be >= 0");
  }
};

struct SimOutput {
  Ensemble ensemble;
  GroundTruth truth;
  Hyperparameters psi_true;
};

// Maps a scenario onto generating hyperparameters:
//   m_k   = k * delta_mu
//   a     = kSimNoiseShape
//   b     = (sigma_rel * delta_mu * Gamma(a) / Gamma(a - 1/2))^2, which makes
//           E[lambda^{-1/2}] = sigma_rel * delta_mu exactly
//   beta  = 1 / mu_var_ratio. Under the prior Var[mu] = E[1/(beta lambda)]
//           and Var[x | state] = E[1/lambda], so their ratio is 1/beta.
//           A zero ratio maps to kBetaCap.
//   alpha = 1 + alpha_self * I, rho = 1.
inline Hyperparameters scenario_to_psi(const SimScenario& s) {
  s.validate();
  Hyperparameters psi(s.K);
  const double a = kSimNoiseShape;
  const double ratio = std::exp(std::lgamma(a) - std::lgamma(a - 0.5));
  const double sd = s.sigma_rel * s.delta_mu * ratio;
  for (std::size_t k = 0; k < s.K; ++k) {
    psi.m[k] = static_cast<double>(k) * s.delta_mu;
    psi.a[k] = a;
    psi.b[k] = sd * sd;
    psi.beta[k] = s.mu_var_ratio > 0.0 ? std::min(1.0 / s.mu_var_ratio, kBetaCap) : kBetaCap;
    psi.rho[k] = 1.0;
    for (std::size_t l = 0; l < s.K; ++l) psi.alpha(k, l) = 1.0 + (k == l ? s.alpha_self : 0.0);
  }
  return psi;
}

inline std::string trace_name(std::size_t n) {
  std::ostringstream os;
  os << "trace" << std::setw(5) << std::setfill('0') << n;
  return os.str();
}

// Geometric length with the given mean, truncated to [2, 10 * mean] by rejection.
inline std::size_t sample_length(Rng& rng, double mean_length) {
  std::geometric_distribution<std::size_t> geo(1.0 / mean_length);
  const double upper = 10.0 * mean_length;
  for (;;) {
    const std::size_t T = 1 + geo(rng);
    if (T >= kMinTraceLength && static_cast<double>(T) <= upper) return T;
  }
}

// Draws one trace's parameters, path and observations from psi.
inline void sample_trace(Rng& rng, const Hyperparameters& psi, std::size_t T, Trace& trace,
                         TraceParameters& theta, std::vector<int>& z, Matrix& xi0) {
  const std::size_t K = psi.K;
  theta.mu.resize(K);
  theta.lambda.resize(K);
  theta.A = Matrix(K, K);
  for (std::size_t k = 0; k < K; ++k) {
    theta.lambda[k] = sample_gamma(rng, psi.a[k], psi.b[k]);
    const double sd = 1.0 / std::sqrt(psi.beta[k] * theta.lambda[k]);
    theta.mu[k] = std::normal_distribution<double>(psi.m[k], sd)(rng);
  }
  for (std::size_t k = 0; k < K; ++k) {
    const auto row = sample_dirichlet(rng, psi.alpha.row(k));
    std::copy(row.begin(), row.end(), theta.A.row(k).begin());
  }
  theta.pi = sample_dirichlet(rng, psi.rho);

  z.resize(T);
  trace.x.resize(T);
  xi0 = Matrix(K, K);
  std::normal_distribution<double> unit(0.0, 1.0);
  for (std::size_t t = 0; t < T; ++t) {
    z[t] = static_cast<int>(t == 0 ? sample_discrete(rng, theta.pi)
                                   : sample_discrete(rng, theta.A.row(static_cast<std::size_t>(z[t - 1]))));
    if (t > 0) xi0(static_cast<std::size_t>(z[t - 1]), static_cast<std::size_t>(z[t])) += 1.0;
    const auto k = static_cast<std::size_t>(z[t]);
    trace.x[t] = theta.mu[k] + unit(rng) / std::sqrt(theta.lambda[k]);
  }
}

// Samples an ensemble from the hierarchical model. Trace n uses its own
// generator stream, so results do not depend on evaluation order.
inline SimOutput sample_ensemble(const SimScenario& s) {
  SimOutput out;
  out.psi_true = scenario_to_psi(s);
  out.ensemble.traces.resize(s.N);
  out.truth.z.resize(s.N);
  out.truth.theta.resize(s.N);
  out.truth.xi0.resize(s.N);
  for (std::size_t n = 0; n < s.N; ++n) {
    auto rng = make_rng(s.seed, n);
    const std::size_t T = s.fixed_length ? static_cast<std::size_t>(std::llround(s.mean_length))
                                         : sample_length(rng, s.mean_length);
    out.ensemble.traces[n].id = trace_name(n);
    sample_trace(rng, out.psi_true, T, out.ensemble.traces[n], out.truth.theta[n], out.truth.z[n],
                 out.truth.xi0[n]);
  }
  return out;
}

}  // namespace vebhmm
