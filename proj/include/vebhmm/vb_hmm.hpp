#pragma once

// Variational Bayes for a single trace: a hidden Markov model with Normal
// emissions under conjugate Normal-Gamma / Dirichlet priors. The E-step runs
// scaled forward-backward on expected log-parameters, the M-step is the
// closed-form conjugate update, and the evidence lower bound is the log
// normalizer of q(z) minus the KL divergences of q(theta) from the prior.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <span>
#include <sstream>
#include <vector>

#include "vebhmm/errors.hpp"
#include "vebhmm/matrix.hpp"
#include "vebhmm/special_functions.hpp"
#include "vebhmm/trace_data.hpp"

namespace vebhmm {

inline constexpr double kLog2Pi = 1.8378770664093454835606594728112;

struct FitConfig {
  double elbo_rel_tolerance = 1e-8;
  int max_vb_iterations = 100;

  void validate() const {
    if (!(elbo_rel_tolerance > 0.0)) throw DomainError("FitConfig: elbo_rel_tolerance must be > 0");
    if (max_vb_iterations < 1) throw DomainError("FitConfig: max_vb_iterations must be >= 1");
  }
};

// E_q[log Normal(x_t | mu_k, lambda_k)] for every t, k.
inline Matrix expected_log_emission(const PosteriorParameters& q, std::span<const double> x) {
  const std::size_t K = q.K;
  std::vector<double> base(K), e_lambda(K);
  for (std::size_t k = 0; k < K; ++k) {
    e_lambda[k] = q.a[k] / q.b[k];
    base[k] = digamma(q.a[k]) - std::log(q.b[k]) - kLog2Pi - 1.0 / q.beta[k];
  }
  Matrix out(x.size(), K);
  for (std::size_t t = 0; t < x.size(); ++t) {
    for (std::size_t k = 0; k < K; ++k) {
      const double d = x[t] - q.m[k];
      out(t, k) = 0.5 * (base[k] - e_lambda[k] * d * d);
    }
  }
  return out;
}

// E_q[log A_kl] = psi(alpha_kl) - psi(sum_m alpha_km).
inline Matrix expected_log_transition(const PosteriorParameters& q) {
  Matrix out(q.K, q.K);
  for (std::size_t k = 0; k < q.K; ++k) {
    double total = 0.0;
    for (std::size_t l = 0; l < q.K; ++l) total += q.alpha(k, l);
    const double psi_total = digamma(total);
    for (std::size_t l = 0; l < q.K; ++l) out(k, l) = digamma(q.alpha(k, l)) - psi_total;
  }
  return out;
}

inline std::vector<double> expected_log_initial(const PosteriorParameters& q) {
  double total = 0.0;
  for (double r : q.rho) total += r;
  const double psi_total = digamma(total);
  std::vector<double> out(q.K);
  for (std::size_t k = 0; k < q.K; ++k) out[k] = digamma(q.rho[k]) - psi_total;
  return out;
}

struct ForwardBackwardResult {
  Matrix gamma;
  std::vector<Matrix> xi_pair;
  double log_Z = 0.0;
};

// Scaled forward-backward. Inputs are log weights that need not normalize;
// log_Z is the log of the summed path weight. Emission rows are shifted by
// their maximum and the forward messages renormalized at every step, so
// log_Z = sum_t (log c_t + shift_t).
inline ForwardBackwardResult forward_backward(const Matrix& log_em, const Matrix& log_A_star,
                                              std::span<const double> log_pi_star) {
  const std::size_t T = log_em.rows();
  const std::size_t K = log_em.cols();
  if (T == 0 || K == 0) throw DomainError("forward_backward: empty emission matrix");
  if (log_A_star.rows() != K || log_A_star.cols() != K || log_pi_star.size() != K)
    throw DomainError("forward_backward: inconsistent shapes");

  Matrix A(K, K);
  for (std::size_t i = 0; i < K; ++i)
    for (std::size_t j = 0; j < K; ++j) A(i, j) = std::exp(log_A_star(i, j));

  Matrix em(T, K);
  double log_Z = 0.0;
  for (std::size_t t = 0; t < T; ++t) {
    const auto row = log_em.row(t);
    const double shift = *std::max_element(row.begin(), row.end());
    if (!std::isfinite(shift)) {
      std::ostringstream os;
      os << "forward_backward: emission row " << t << " has no finite entry";
      throw NumericError(os.str());
    }
    log_Z += shift;
    for (std::size_t k = 0; k < K; ++k) em(t, k) = std::exp(row[k] - shift);
  }

  Matrix fwd(T, K);
  std::vector<double> scale(T);
  auto normalize = [&](std::size_t t) {
    double c = 0.0;
    for (std::size_t k = 0; k < K; ++k) c += fwd(t, k);
    if (!(c > 0.0) || !std::isfinite(c)) {
      std::ostringstream os;
      os << "forward_backward: forward messages vanished at t = " << t;
      throw NumericError(os.str());
    }
    for (std::size_t k = 0; k < K; ++k) fwd(t, k) /= c;
    scale[t] = c;
    log_Z += std::log(c);
  };
  for (std::size_t k = 0; k < K; ++k) fwd(0, k) = std::exp(log_pi_star[k]) * em(0, k);
  normalize(0);
  for (std::size_t t = 1; t < T; ++t) {
    for (std::size_t j = 0; j < K; ++j) {
      double s = 0.0;
      for (std::size_t i = 0; i < K; ++i) s += fwd(t - 1, i) * A(i, j);
      fwd(t, j) = s * em(t, j);
    }
    normalize(t);
  }

  Matrix bwd(T, K, 1.0);
  std::vector<double> tmp(K);
  for (std::size_t t = T - 1; t-- > 0;) {
    for (std::size_t j = 0; j < K; ++j) tmp[j] = em(t + 1, j) * bwd(t + 1, j);
    for (std::size_t i = 0; i < K; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < K; ++j) s += A(i, j) * tmp[j];
      bwd(t, i) = s / scale[t + 1];
    }
  }

  ForwardBackwardResult out;
  out.log_Z = log_Z;
  out.gamma = Matrix(T, K);
  for (std::size_t t = 0; t < T; ++t) {
    double s = 0.0;
    for (std::size_t k = 0; k < K; ++k) s += out.gamma(t, k) = fwd(t, k) * bwd(t, k);
    for (std::size_t k = 0; k < K; ++k) out.gamma(t, k) /= s;
  }
  out.xi_pair.reserve(T > 0 ? T - 1 : 0);
  for (std::size_t t = 0; t + 1 < T; ++t) {
    Matrix slice(K, K);
    double s = 0.0;
    for (std::size_t j = 0; j < K; ++j) tmp[j] = em(t + 1, j) * bwd(t + 1, j);
    for (std::size_t i = 0; i < K; ++i)
      for (std::size_t j = 0; j < K; ++j) s += slice(i, j) = fwd(t, i) * A(i, j) * tmp[j];
    for (double& v : slice.values()) v /= s;
    out.xi_pair.push_back(std::move(slice));
  }
  return out;
}

// Max-product path; ties resolve toward the lower state index.
inline std::vector<int> viterbi_path(const Matrix& log_em, const Matrix& log_A_star,
                                     std::span<const double> log_pi_star) {
  const std::size_t T = log_em.rows();
  const std::size_t K = log_em.cols();
  std::vector<int> path(T, 0);
  if (T == 0) return path;
  Matrix score(T, K);
  std::vector<std::vector<int>> back(T, std::vector<int>(K, 0));
  for (std::size_t k = 0; k < K; ++k) score(0, k) = log_pi_star[k] + log_em(0, k);
  for (std::size_t t = 1; t < T; ++t) {
    for (std::size_t j = 0; j < K; ++j) {
      double best = -std::numeric_limits<double>::infinity();
      int arg = 0;
      for (std::size_t i = 0; i < K; ++i) {
        const double v = score(t - 1, i) + log_A_star(i, j);
        if (v > best) {
          best = v;
          arg = static_cast<int>(i);
        }
      }
      score(t, j) = best + log_em(t, j);
      back[t][j] = arg;
    }
  }
  double best = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < K; ++k) {
    if (score(T - 1, k) > best) {
      best = score(T - 1, k);
      path[T - 1] = static_cast<int>(k);
    }
  }
  for (std::size_t t = T - 1; t > 0; --t) path[t - 1] = back[t][path[t]];
  return path;
}

struct SufficientStats {
  std::vector<double> Nk;    // sum_t gamma_tk
  std::vector<double> xbar;  // occupancy-weighted mean of x
  std::vector<double> S;     // weighted sum of squared deviations from xbar
  Matrix C;                  // sum_t xi_pair[t]
  std::vector<double> g0;    // gamma at t = 0
};

// Empty states (Nk == 0) get xbar = S = 0.
inline SufficientStats collect_stats(const Matrix& gamma, const std::vector<Matrix>& xi_pair,
                                     std::span<const double> x) {
  const std::size_t T = gamma.rows();
  const std::size_t K = gamma.cols();
  if (x.size() != T || (T > 0 && xi_pair.size() != T - 1))
    throw DomainError("collect_stats: inconsistent shapes");
  SufficientStats s;
  s.Nk.assign(K, 0.0);
  s.xbar.assign(K, 0.0);
  s.S.assign(K, 0.0);
  s.C = Matrix(K, K);
  s.g0.assign(K, 0.0);
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t k = 0; k < K; ++k) {
      s.Nk[k] += gamma(t, k);
      s.xbar[k] += gamma(t, k) * x[t];
    }
  }
  for (std::size_t k = 0; k < K; ++k) s.xbar[k] = s.Nk[k] > 0.0 ? s.xbar[k] / s.Nk[k] : 0.0;
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t k = 0; k < K; ++k) {
      if (s.Nk[k] > 0.0) {
        const double d = x[t] - s.xbar[k];
        s.S[k] += gamma(t, k) * d * d;
      }
    }
  }
  for (const auto& slice : xi_pair) s.C += slice;
  if (T > 0)
    for (std::size_t k = 0; k < K; ++k) s.g0[k] = gamma(0, k);
  return s;
}

// Conjugate update of q(theta) given expected sufficient statistics.
inline PosteriorParameters vb_mstep(const SufficientStats& stats, const Hyperparameters& psi) {
  const std::size_t K = psi.K;
  PosteriorParameters q = psi;
  for (std::size_t k = 0; k < K; ++k) {
    const double n = stats.Nk[k];
    q.beta[k] = psi.beta[k] + n;
    q.m[k] = (psi.beta[k] * psi.m[k] + n * stats.xbar[k]) / q.beta[k];
    q.a[k] = psi.a[k] + 0.5 * n;
    const double d = stats.xbar[k] - psi.m[k];
    q.b[k] = psi.b[k] + 0.5 * (stats.S[k] + psi.beta[k] * n * d * d / q.beta[k]);
    q.rho[k] = psi.rho[k] + stats.g0[k];
    for (std::size_t l = 0; l < K; ++l) q.alpha(k, l) = psi.alpha(k, l) + stats.C(k, l);
  }
  return q;
}

// KL(NG(m_hat, beta_hat, a_hat, b_hat) || NG(m, beta, a, b)) for state k.
inline double kl_normal_gamma(const PosteriorParameters& q, const Hyperparameters& p,
                              std::size_t k) {
  const double aq = q.a[k], bq = q.b[k], ap = p.a[k], bp = p.b[k];
  const double gamma_kl = (aq - ap) * digamma(aq) - std::lgamma(aq) + std::lgamma(ap) +
                          ap * (std::log(bq) - std::log(bp)) + aq * (bp - bq) / bq;
  const double dm = q.m[k] - p.m[k];
  const double normal_kl = 0.5 * (std::log(q.beta[k] / p.beta[k]) + p.beta[k] / q.beta[k] - 1.0 +
                                  p.beta[k] * (aq / bq) * dm * dm);
  return gamma_kl + normal_kl;
}

// KL(Dir(q) || Dir(p)).
inline double kl_dirichlet(std::span<const double> q, std::span<const double> p) {
  double sq = 0.0, sp = 0.0, out = 0.0;
  for (std::size_t l = 0; l < q.size(); ++l) {
    sq += q[l];
    sp += p[l];
    out += std::lgamma(p[l]) - std::lgamma(q[l]);
  }
  out += std::lgamma(sq) - std::lgamma(sp);
  const double psi_sq = digamma(sq);
  for (std::size_t l = 0; l < q.size(); ++l) out += (q[l] - p[l]) * (digamma(q[l]) - psi_sq);
  return out;
}

// Lower bound from a trajectory term and the closed-form divergences of q(theta).
inline ElboTerms elbo_terms(double trajectory, const PosteriorParameters& q, const Hyperparameters& psi) {
  ElboTerms terms;
  terms.trajectory = trajectory;
  for (std::size_t k = 0; k < psi.K; ++k) {
    terms.kl_normal_gamma += kl_normal_gamma(q, psi, k);
    terms.kl_transitions += kl_dirichlet(q.alpha.row(k), psi.alpha.row(k));
  }
  terms.kl_initial = kl_dirichlet(q.rho, psi.rho);
  return terms;
}

// Evaluates the lower bound of trace x at q(theta) = q, with q(z) optimal for q.
inline ElboTerms elbo(std::span<const double> x, const PosteriorParameters& q,
                      const Hyperparameters& psi) {
  const auto fb = forward_backward(expected_log_emission(q, x), expected_log_transition(q),
                                   expected_log_initial(q));
  return elbo_terms(fb.log_Z, q, psi);
}

struct StateMarginals {
  Matrix gamma;
  std::vector<Matrix> xi_pair;
};

// Pairwise marginals of independent time slices, used to seed the first M-step.
inline std::vector<Matrix> independent_pairs(const Matrix& gamma) {
  const std::size_t T = gamma.rows();
  const std::size_t K = gamma.cols();
  std::vector<Matrix> xi;
  xi.reserve(T > 0 ? T - 1 : 0);
  for (std::size_t t = 0; t + 1 < T; ++t) {
    Matrix slice(K, K);
    for (std::size_t i = 0; i < K; ++i)
      for (std::size_t j = 0; j < K; ++j) slice(i, j) = gamma(t, i) * gamma(t + 1, j);
    xi.push_back(std::move(slice));
  }
  return xi;
}

// Normalized exp of each row of a log-weight matrix.
inline Matrix row_softmax(const Matrix& log_w) {
  Matrix out(log_w.rows(), log_w.cols());
  for (std::size_t t = 0; t < log_w.rows(); ++t) {
    const auto row = log_w.row(t);
    const double mx = *std::max_element(row.begin(), row.end());
    double s = 0.0;
    for (std::size_t k = 0; k < row.size(); ++k) s += out(t, k) = std::exp(row[k] - mx);
    for (std::size_t k = 0; k < row.size(); ++k) out(t, k) /= s;
  }
  return out;
}

// Emission responsibilities under the prior itself.
inline StateMarginals prior_marginals(std::span<const double> x, const Hyperparameters& psi) {
  StateMarginals init;
  init.gamma = row_softmax(expected_log_emission(psi, x));
  init.xi_pair = independent_pairs(init.gamma);
  return init;
}

// Trajectory part of the bound for an arbitrary chain q(z) given by its
// marginals: E_q[log weights] + H[q(z)]. Equals the log normalizer of the
// forward-backward pass when q(z) is that pass's output.
inline double trajectory_bound(const Matrix& log_em, const Matrix& log_A_star,
                               std::span<const double> log_pi_star, const Matrix& gamma,
                               const std::vector<Matrix>& xi_pair) {
  const std::size_t T = gamma.rows();
  const std::size_t K = gamma.cols();
  auto xlogx = [](double v) { return v > 0.0 ? v * std::log(v) : 0.0; };
  double s = 0.0;
  for (std::size_t k = 0; k < K; ++k)
    if (gamma(0, k) > 0.0) s += gamma(0, k) * log_pi_star[k];
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t k = 0; k < K; ++k)
      if (gamma(t, k) > 0.0) s += gamma(t, k) * log_em(t, k);
  for (const auto& slice : xi_pair)
    for (std::size_t i = 0; i < K; ++i)
      for (std::size_t j = 0; j < K; ++j) {
        const double v = slice(i, j);
        if (v > 0.0) s += v * log_A_star(i, j) - xlogx(v);
      }
  if (T == 1) {
    for (std::size_t k = 0; k < K; ++k) s -= xlogx(gamma(0, k));
  } else {
    for (std::size_t t = 1; t + 1 < T; ++t)
      for (std::size_t k = 0; k < K; ++k) s += xlogx(gamma(t, k));
  }
  return s;
}

// Alternates conjugate M-steps and forward-backward E-steps from the given
// initial marginals until the relative change of the lower bound drops below
// cfg.elbo_rel_tolerance. The last step is an M-step, so params are the
// conjugate update of the returned marginals and elbo is exact for the pair.
inline TracePosterior fit_trace(std::span<const double> x, const Hyperparameters& psi,
                                const FitConfig& cfg, StateMarginals init) {
  cfg.validate();
  if (init.gamma.rows() != x.size() || init.gamma.cols() != psi.K)
    throw DomainError("fit_trace: initial marginals do not match the trace");
  TracePosterior post;
  post.gamma = std::move(init.gamma);
  post.xi_pair = std::move(init.xi_pair);
  double previous = -std::numeric_limits<double>::infinity();
  for (int it = 1;; ++it) {
    post.params = vb_mstep(collect_stats(post.gamma, post.xi_pair, x), psi);
    const Matrix log_em = expected_log_emission(post.params, x);
    const Matrix log_A = expected_log_transition(post.params);
    const std::vector<double> log_pi = expected_log_initial(post.params);
    post.terms = elbo_terms(trajectory_bound(log_em, log_A, log_pi, post.gamma, post.xi_pair),
                            post.params, psi);
    post.elbo = post.terms.total();
    post.elbo_history.push_back(post.elbo);
    post.iterations = it;
    if (!std::isfinite(post.elbo)) throw NumericError("fit_trace: lower bound is not finite");
    if (std::abs(post.elbo - previous) <= cfg.elbo_rel_tolerance * std::abs(post.elbo)) break;
    if (it == cfg.max_vb_iterations) break;
    previous = post.elbo;
    auto fb = forward_backward(log_em, log_A, log_pi);
    post.gamma = std::move(fb.gamma);
    post.xi_pair = std::move(fb.xi_pair);
  }
  return post;
}

inline TracePosterior fit_trace(std::span<const double> x, const Hyperparameters& psi,
                                const FitConfig& cfg = {}) {
  return fit_trace(x, psi, cfg, prior_marginals(x, psi));
}

inline TracePosterior fit_trace(const Trace& trace, const Hyperparameters& psi,
                                const FitConfig& cfg = {}) {
  return fit_trace(std::span<const double>(trace.x), psi, cfg);
}

// Most probable path under the expected log-parameters of a fitted posterior.
inline std::vector<int> viterbi_path(std::span<const double> x, const PosteriorParameters& q) {
  return viterbi_path(expected_log_emission(q, x), expected_log_transition(q),
                      expected_log_initial(q));
}

}  // namespace vebhmm
