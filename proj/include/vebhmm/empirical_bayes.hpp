#pragma once

// Variational empirical Bayes: every outer iteration runs variational Bayes
// on each trace against a fixed hyperparameter snapshot, then moves the
// hyperparameters to the stationary point of the summed lower bound. For
// the conjugate priors used here that stationary point matches prior
// expectations to ensemble averages of posterior expectations.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <sstream>
#include <vector>

#include "vebhmm/errors.hpp"
#include "vebhmm/parallel.hpp"
#include "vebhmm/random.hpp"
#include "vebhmm/special_functions.hpp"
#include "vebhmm/trace_data.hpp"
#include "vebhmm/vb_hmm.hpp"

namespace vebhmm {

inline constexpr double kBetaFloor = 1e-6;
inline constexpr double kBetaCap = 1e9;
// States whose ensemble occupancy falls below this fraction of all time
// points keep their hyperparameters for that M-step.
inline constexpr double kMinOccupancyFraction = 1e-3;

namespace detail {

template <typename Get>
EnsembleMoments ensemble_moments_impl(std::size_t n, Get&& get) {
  if (n == 0) throw DomainError("ensemble_moments: need at least one posterior");
  const std::size_t K = get(0).K;
  EnsembleMoments mom;
  mom.E_lambda.assign(K, 0.0);
  mom.E_log_lambda.assign(K, 0.0);
  mom.E_mu_lambda.assign(K, 0.0);
  mom.E_mu2_lambda.assign(K, 0.0);
  mom.E_log_A = Matrix(K, K);
  mom.E_log_pi.assign(K, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const PosteriorParameters& q = get(i);
    if (q.K != K) throw DomainError("ensemble_moments: posteriors disagree on K");
    for (std::size_t k = 0; k < K; ++k) {
      const double e = q.a[k] / q.b[k];
      mom.E_lambda[k] += e;
      mom.E_log_lambda[k] += digamma(q.a[k]) - std::log(q.b[k]);
      mom.E_mu_lambda[k] += q.m[k] * e;
      mom.E_mu2_lambda[k] += 1.0 / q.beta[k] + q.m[k] * q.m[k] * e;
    }
    mom.E_log_A += expected_log_transition(q);
    const auto log_pi = expected_log_initial(q);
    for (std::size_t k = 0; k < K; ++k) mom.E_log_pi[k] += log_pi[k];
  }
  const double inv = 1.0 / static_cast<double>(n);
  for (std::size_t k = 0; k < K; ++k) {
    mom.E_lambda[k] *= inv;
    mom.E_log_lambda[k] *= inv;
    mom.E_mu_lambda[k] *= inv;
    mom.E_mu2_lambda[k] *= inv;
    mom.E_log_pi[k] *= inv;
  }
  for (double& v : mom.E_log_A.values()) v *= inv;

  // E[mu^2 lambda] - E[mu lambda]^2 / E[lambda] cancels badly when the
  // ensemble is tight; the centred sum is the same quantity.
  mom.E_lambda_dev2.assign(K, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const PosteriorParameters& q = get(i);
    for (std::size_t k = 0; k < K; ++k) {
      const double d = q.m[k] - mom.E_mu_lambda[k] / mom.E_lambda[k];
      mom.E_lambda_dev2[k] += 1.0 / q.beta[k] + (q.a[k] / q.b[k]) * d * d;
    }
  }
  for (double& v : mom.E_lambda_dev2) v *= inv;
  return mom;
}

}  // namespace detail

inline EnsembleMoments ensemble_moments(std::span<const TracePosterior> posteriors) {
  return detail::ensemble_moments_impl(
      posteriors.size(), [&](std::size_t i) -> const PosteriorParameters& { return posteriors[i].params; });
}

inline EnsembleMoments ensemble_moments(std::span<const PosteriorParameters> params) {
  return detail::ensemble_moments_impl(
      params.size(), [&](std::size_t i) -> const PosteriorParameters& { return params[i]; });
}

enum class StateStatus {
  updated,       // all four Normal-Gamma relations matched
  beta_clamped,  // updated, but beta hit kBetaFloor or kBetaCap
  unpopulated,   // occupancy below threshold, hyperparameters kept
  collapsed,     // degenerate moments, hyperparameters kept
};

inline const char* to_string(StateStatus s) {
  switch (s) {
    case StateStatus::updated: return "updated";
    case StateStatus::beta_clamped: return "beta_clamped";
    case StateStatus::unpopulated: return "unpopulated";
    case StateStatus::collapsed: return "collapsed";
  }
  return "unknown";
}

struct NormalGammaUpdate {
  std::vector<double> m, beta, a, b;
  std::vector<StateStatus> status;
};

// Ensemble estimate of E[lambda (mu - m)^2] at the matched m.
inline double ensemble_precision_spread(const EnsembleMoments& mom, std::size_t k) {
  if (mom.E_lambda_dev2.size() == mom.K()) return mom.E_lambda_dev2[k];
  return mom.E_mu2_lambda[k] - mom.E_mu_lambda[k] * mom.E_mu_lambda[k] / mom.E_lambda[k];
}

// Hyperparameters of state k from the four moment relations
//   m = E[mu lambda] / E[lambda]
//   1/beta = E[mu^2 lambda] - E[mu lambda]^2 / E[lambda]
//   psi(a) - log(a) = E[log lambda] - log E[lambda]
//   b = a / E[lambda]
// Returns nullopt when the moments are degenerate (no positive spread or no
// Jensen gap).
struct NormalGammaState {
  double m, beta, a, b;
  StateStatus status;
};

inline std::optional<NormalGammaState> update_normal_gamma_state(const EnsembleMoments& mom,
                                                                 std::size_t k,
                                                                 const SolverConfig& solver = {}) {
  const double e_lambda = mom.E_lambda[k];
  const double gap = mom.E_log_lambda[k] - std::log(e_lambda);
  const double spread = ensemble_precision_spread(mom, k);
  if (!(e_lambda > 0.0) || !(gap < 0.0) || !(spread > 0.0) || !std::isfinite(spread))
    return std::nullopt;
  NormalGammaState s;
  s.status = StateStatus::updated;
  s.m = mom.E_mu_lambda[k] / e_lambda;
  s.beta = 1.0 / spread;
  if (s.beta > kBetaCap || s.beta < kBetaFloor) {
    s.beta = std::clamp(s.beta, kBetaFloor, kBetaCap);
    s.status = StateStatus::beta_clamped;
  }
  s.a = solve_gamma_shape(gap, solver);
  s.b = s.a / e_lambda;
  return s;
}

// Applies update_normal_gamma_state to every state; throws
// DegenerateMomentsError naming the offending states if any is degenerate.
inline NormalGammaUpdate update_normal_gamma(const EnsembleMoments& mom,
                                             const SolverConfig& solver = {}) {
  const std::size_t K = mom.K();
  NormalGammaUpdate out;
  std::ostringstream bad;
  for (std::size_t k = 0; k < K; ++k) {
    const auto s = update_normal_gamma_state(mom, k, solver);
    if (!s) {
      bad << (bad.tellp() > 0 ? ", " : "") << k;
      continue;
    }
    out.m.push_back(s->m);
    out.beta.push_back(s->beta);
    out.a.push_back(s->a);
    out.b.push_back(s->b);
    out.status.push_back(s->status);
  }
  if (bad.tellp() > 0)
    throw DegenerateMomentsError("update_normal_gamma: degenerate moments for state(s) " + bad.str());
  return out;
}

struct DirichletUpdate {
  Matrix alpha;
  std::vector<double> rho;
};

// Solves psi(sum_m alpha_km) - psi(alpha_kl) = -E[log A_kl] row by row,
// warm-started from alpha_init, and the same for rho against E[log pi].
// Rows listed in `keep` are copied from alpha_init. For K = 1 the
// log-expectations carry no information and the inputs are returned.
inline DirichletUpdate update_dirichlet_rows(const EnsembleMoments& mom, const Matrix& alpha_init,
                                             std::span<const double> rho_init,
                                             const SolverConfig& solver = {},
                                             const std::vector<bool>& keep = {}) {
  const std::size_t K = mom.K();
  DirichletUpdate out{alpha_init, std::vector<double>(rho_init.begin(), rho_init.end())};
  if (K < 2) return out;
  std::vector<double> targets(K);
  for (std::size_t k = 0; k < K; ++k) {
    if (!keep.empty() && keep[k]) continue;
    for (std::size_t l = 0; l < K; ++l) targets[l] = -mom.E_log_A(k, l);
    const auto row = match_dirichlet(targets, solver, alpha_init.row(k));
    std::copy(row.begin(), row.end(), out.alpha.row(k).begin());
  }
  for (std::size_t l = 0; l < K; ++l) targets[l] = -mom.E_log_pi[l];
  out.rho = match_dirichlet(targets, solver, rho_init);
  return out;
}

struct MStepRecord {
  int restart = 0;
  int iteration = 0;
  EnsembleMoments moments;
  Hyperparameters psi_before;
  Hyperparameters psi_after;
  std::vector<StateStatus> status;
};

// How restarts are seeded when no initial_psi is given.
//   quantile: `restarts` starts from initial_hyperparameters, all but the
//             first with jittered means.
//   grow:     the quantile starts at every k = 1..K, plus one start grown
//             from the best (k-1)-state solution by adding a state where the
//             pooled data are worst covered. The best lower bound at each k
//             seeds the next.
enum class InitStrategy { quantile, grow };

inline const char* to_string(InitStrategy s) { return s == InitStrategy::grow ? "grow" : "quantile"; }

struct VebConfig {
  std::size_t K = 2;
  double outer_rel_tolerance = 1e-6;
  int max_outer_iterations = 100;
  int restarts = 5;
  std::uint64_t seed = 0;
  FitConfig fit;
  SolverConfig solver;
  unsigned threads = 1;
  // Replaces the data-driven initialization of the first restart.
  std::optional<Hyperparameters> initial_psi;
  InitStrategy init = InitStrategy::grow;
  // With false, the hyperparameters stay at their initial values and a
  // single E-step is run.
  bool update_hyperparameters = true;
  std::function<void(const MStepRecord&)> on_mstep;

  void validate() const {
    if (K < 1) throw DomainError("VebConfig: K must be >= 1");
    if (!(outer_rel_tolerance > 0.0)) throw DomainError("VebConfig: outer_rel_tolerance must be > 0");
    if (max_outer_iterations < 1) throw DomainError("VebConfig: max_outer_iterations must be >= 1");
    if (restarts < 1) throw DomainError("VebConfig: restarts must be >= 1");
    fit.validate();
    solver.validate();
    if (initial_psi) {
      initial_psi->validate();
      if (initial_psi->K != K) throw DomainError("VebConfig: initial_psi has the wrong K");
    }
  }
};

struct VebResult {
  Hyperparameters psi_star;
  std::vector<TracePosterior> posteriors;
  std::vector<double> elbo_history;  // sum_n L_vb after each E-step
  int best_restart = 0;               // == restarts for the grown start
  std::vector<double> restart_elbos;  // at the final K, grown start last
  std::vector<StateStatus> last_status;

  double elbo() const { return elbo_history.empty() ? -std::numeric_limits<double>::infinity()
                                                    : elbo_history.back(); }
};

// Linear-interpolated quantile of sorted data.
inline double sorted_quantile(std::span<const double> sorted, double p) {
  if (sorted.empty()) throw DomainError("sorted_quantile: empty input");
  const double pos = p * static_cast<double>(sorted.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

inline std::vector<double> sorted_pooled(const Ensemble& ensemble) {
  std::vector<double> pooled;
  pooled.reserve(ensemble.total_length());
  for (const auto& t : ensemble.traces) pooled.insert(pooled.end(), t.x.begin(), t.x.end());
  std::sort(pooled.begin(), pooled.end());
  return pooled;
}

// Data-driven starting point: state means at the K quantiles of the pooled
// observations, a broad Normal-Gamma around a noise scale of half the pooled
// standard deviation, and a mild self-transition bias.
inline Hyperparameters initial_hyperparameters(const Ensemble& ensemble, std::size_t K) {
  const std::vector<double> pooled = sorted_pooled(ensemble);
  double mean = 0.0;
  for (double v : pooled) mean += v;
  mean /= static_cast<double>(pooled.size());
  double var = 0.0;
  for (double v : pooled) var += (v - mean) * (v - mean);
  var /= static_cast<double>(pooled.size());
  if (!(var > 0.0)) var = 1.0;

  Hyperparameters psi(K);
  for (std::size_t k = 0; k < K; ++k) {
    psi.m[k] = sorted_quantile(pooled, (static_cast<double>(k) + 0.5) / static_cast<double>(K));
    psi.beta[k] = 1.0;
    psi.a[k] = 2.5;
    psi.b[k] = psi.a[k] * var * 0.25;
    psi.rho[k] = 1.0;
    for (std::size_t l = 0; l < K; ++l) psi.alpha(k, l) = k == l ? 6.0 : 1.0;
  }
  return psi;
}

// Appends one state to psi. Its mean is the pooled percentile farthest from
// every existing state in units of that state's expected noise sd; its noise
// prior is copied from the nearest state; its Dirichlet weights are those of
// initial_hyperparameters.
inline Hyperparameters grow_hyperparameters(const Hyperparameters& psi,
                                            std::span<const double> sorted_pooled) {
  const std::size_t K = psi.K;
  double best = -1.0, m_new = 0.0;
  std::size_t nearest = 0;
  for (int i = 1; i < 100; ++i) {
    const double x = sorted_quantile(sorted_pooled, i / 100.0);
    double d = std::numeric_limits<double>::infinity();
    std::size_t nk = 0;
    for (std::size_t k = 0; k < K; ++k) {
      const double v = std::abs(x - psi.m[k]) * std::sqrt(psi.a[k] / psi.b[k]);
      if (v < d) {
        d = v;
        nk = k;
      }
    }
    if (d > best) {
      best = d;
      m_new = x;
      nearest = nk;
    }
  }
  Hyperparameters out(K + 1);
  for (std::size_t k = 0; k < K; ++k) {
    out.m[k] = psi.m[k];
    out.beta[k] = psi.beta[k];
    out.a[k] = psi.a[k];
    out.b[k] = psi.b[k];
    out.rho[k] = psi.rho[k];
    for (std::size_t l = 0; l < K; ++l) out.alpha(k, l) = psi.alpha(k, l);
  }
  out.m[K] = m_new;
  out.beta[K] = 1.0;
  out.a[K] = psi.a[nearest];
  out.b[K] = psi.b[nearest];
  out.alpha(K, K) = 6.0;
  return out;
}

namespace detail {

inline Hyperparameters jitter_means(const Hyperparameters& base, const Ensemble& ensemble,
                                    std::uint64_t seed, int restart) {
  double mean = 0.0, sq = 0.0;
  const double n = static_cast<double>(ensemble.total_length());
  for (const auto& t : ensemble.traces)
    for (double v : t.x) {
      mean += v;
      sq += v * v;
    }
  mean /= n;
  const double sd = std::sqrt(std::max(sq / n - mean * mean, 0.0));
  const double width = 0.25 * (sd > 0.0 ? sd : 1.0) / static_cast<double>(base.K);
  auto rng = make_rng(seed, static_cast<std::uint64_t>(restart));
  std::normal_distribution<double> noise(0.0, width);
  Hyperparameters psi = base;
  for (double& m : psi.m) m += noise(rng);
  return psi;
}

struct RestartOutcome {
  Hyperparameters psi;
  std::vector<TracePosterior> posteriors;
  std::vector<double> history;
  std::vector<StateStatus> status;
};

inline void mstep(const Ensemble& ensemble, const std::vector<TracePosterior>& posteriors,
                  const VebConfig& cfg, int restart, int iteration, Hyperparameters& psi,
                  std::vector<StateStatus>& status) {
  const std::size_t K = psi.K;
  const auto mom = ensemble_moments(std::span<const TracePosterior>(posteriors));
  std::vector<double> occupancy(K, 0.0);
  for (const auto& post : posteriors)
    for (std::size_t t = 0; t < post.gamma.rows(); ++t)
      for (std::size_t k = 0; k < K; ++k) occupancy[k] += post.gamma(t, k);
  const double threshold = kMinOccupancyFraction * static_cast<double>(ensemble.total_length());

  Hyperparameters next = psi;
  status.assign(K, StateStatus::updated);
  std::vector<bool> keep(K, false);
  for (std::size_t k = 0; k < K; ++k) {
    if (occupancy[k] < threshold) {
      status[k] = StateStatus::unpopulated;
      keep[k] = true;
      continue;
    }
    const auto s = update_normal_gamma_state(mom, k, cfg.solver);
    if (!s) {
      status[k] = StateStatus::collapsed;
      keep[k] = true;
      continue;
    }
    next.m[k] = s->m;
    next.beta[k] = s->beta;
    next.a[k] = s->a;
    next.b[k] = s->b;
    status[k] = s->status;
  }
  if (std::all_of(keep.begin(), keep.end(), [](bool v) { return v; }))
    throw DegenerateMomentsError("veb_fit: every state is unpopulated or collapsed");
  auto dir = update_dirichlet_rows(mom, psi.alpha, psi.rho, cfg.solver, keep);
  next.alpha = std::move(dir.alpha);
  next.rho = std::move(dir.rho);
  if (cfg.on_mstep) cfg.on_mstep(MStepRecord{restart, iteration, mom, psi, next, status});
  psi = std::move(next);
}

inline RestartOutcome run_restart(const Ensemble& ensemble, const VebConfig& cfg,
                                  Hyperparameters psi, int restart) {
  const std::size_t N = ensemble.size();
  RestartOutcome out;
  out.posteriors.resize(N);
  std::vector<StateMarginals> init(N);
  for (std::size_t n = 0; n < N; ++n) init[n] = prior_marginals(ensemble.traces[n].x, psi);

  double previous = -std::numeric_limits<double>::infinity();
  for (int it = 0; it < cfg.max_outer_iterations; ++it) {
    parallel_for(N, cfg.threads, [&](std::size_t n) {
      out.posteriors[n] = fit_trace(ensemble.traces[n].x, psi, cfg.fit, std::move(init[n]));
    });
    double total = 0.0;
    for (const auto& post : out.posteriors) total += post.elbo;
    out.history.push_back(total);
    if (!cfg.update_hyperparameters) break;
    if (std::abs(total - previous) <= cfg.outer_rel_tolerance * std::abs(total)) break;
    if (it + 1 == cfg.max_outer_iterations) break;
    previous = total;
    mstep(ensemble, out.posteriors, cfg, restart, it, psi, out.status);
    // Warm start from the current q(z) keeps the summed bound non-decreasing.
    for (std::size_t n = 0; n < N; ++n)
      init[n] = StateMarginals{out.posteriors[n].gamma, out.posteriors[n].xi_pair};
  }
  out.psi = std::move(psi);
  return out;
}

}  // namespace detail

namespace detail {

inline void keep_if_better(VebResult& best, RestartOutcome&& outcome, int restart) {
  const double final_elbo = outcome.history.back();
  best.restart_elbos.push_back(final_elbo);
  if (best.elbo_history.empty() || final_elbo > best.elbo()) {
    best.psi_star = std::move(outcome.psi);
    best.posteriors = std::move(outcome.posteriors);
    best.elbo_history = std::move(outcome.history);
    best.last_status = std::move(outcome.status);
    best.best_restart = restart;
  }
}

inline VebResult fit_restarts(const Ensemble& ensemble, const VebConfig& cfg,
                              const Hyperparameters& base) {
  VebResult best;
  for (int r = 0; r < cfg.restarts; ++r) {
    const Hyperparameters start = r == 0 ? base : jitter_means(base, ensemble, cfg.seed, r);
    keep_if_better(best, run_restart(ensemble, cfg, start, r), r);
  }
  return best;
}

}  // namespace detail

// Generalized EM over the hyperparameters from several starting points (see
// InitStrategy); returns the start with the highest final summed lower
// bound. The returned posteriors are the E-step under psi_star.
inline VebResult veb_fit(const Ensemble& ensemble, const VebConfig& cfg) {
  require_valid(ensemble);
  cfg.validate();
  if (cfg.initial_psi) return detail::fit_restarts(ensemble, cfg, *cfg.initial_psi);
  if (cfg.init == InitStrategy::quantile || cfg.K == 1)
    return detail::fit_restarts(ensemble, cfg, initial_hyperparameters(ensemble, cfg.K));

  const std::vector<double> pooled = sorted_pooled(ensemble);
  VebConfig level = cfg;
  level.K = 1;
  VebResult best = detail::fit_restarts(ensemble, level, initial_hyperparameters(ensemble, 1));
  for (std::size_t k = 2; k <= cfg.K; ++k) {
    level.K = k;
    VebResult next = detail::fit_restarts(ensemble, level, initial_hyperparameters(ensemble, k));
    detail::keep_if_better(
        next, detail::run_restart(ensemble, level, grow_hyperparameters(best.psi_star, pooled), cfg.restarts),
        cfg.restarts);
    best = std::move(next);
  }
  return best;
}

}  // namespace vebhmm
