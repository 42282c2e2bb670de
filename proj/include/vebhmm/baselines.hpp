#pragma once

// Per-trace comparison estimators. Each trace gets its own HMM (maximum
// likelihood via Baum-Welch, or variational Bayes under a fixed broad prior),
// the number of states is chosen per trace, and the per-trace states are
// tied to consensus states afterwards by clustering their means with a 1-D
// Gaussian mixture.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <set>
#include <span>
#include <sstream>
#include <vector>

#include "vebhmm/empirical_bayes.hpp"
#include "vebhmm/errors.hpp"
#include "vebhmm/matrix.hpp"
#include "vebhmm/parallel.hpp"
#include "vebhmm/random.hpp"
#include "vebhmm/trace_data.hpp"
#include "vebhmm/vb_hmm.hpp"

namespace vebhmm {

struct MlConfig {
  double rel_tolerance = 1e-10;
  int max_iterations = 1000;
  double variance_floor = 1e-8;
};

struct MlFit {
  std::vector<double> mean;
  std::vector<double> variance;
  Matrix A;
  std::vector<double> pi;
  double loglik = 0.0;
  std::vector<double> loglik_history;
  bool collapsed = false;  // some state hit the variance floor
  Matrix gamma;
  Matrix counts;  // expected transition counts under the final E-step
  std::vector<double> occupancy;
  int iterations = 0;
};

inline Matrix gaussian_log_emission(std::span<const double> x, std::span<const double> mean,
                                    std::span<const double> variance) {
  Matrix out(x.size(), mean.size());
  for (std::size_t t = 0; t < x.size(); ++t)
    for (std::size_t k = 0; k < mean.size(); ++k) {
      const double d = x[t] - mean[k];
      out(t, k) = -0.5 * (kLog2Pi + std::log(variance[k]) + d * d / variance[k]);
    }
  return out;
}

namespace detail {

inline std::vector<double> trace_quantile_means(std::span<const double> x, std::size_t K) {
  std::vector<double> sorted(x.begin(), x.end());
  std::sort(sorted.begin(), sorted.end());
  std::vector<double> means(K);
  for (std::size_t k = 0; k < K; ++k)
    means[k] = sorted_quantile(sorted, (static_cast<double>(k) + 0.5) / static_cast<double>(K));
  return means;
}

inline double population_variance(std::span<const double> x) {
  const double mean = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
  double v = 0.0;
  for (double xi : x) v += (xi - mean) * (xi - mean);
  return v / static_cast<double>(x.size());
}

inline Matrix log_of(const Matrix& m) {
  Matrix out(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) out(i, j) = std::log(m(i, j));
  return out;
}

}  // namespace detail

// Baum-Welch for a K-state Gaussian HMM, started from quantile means.
// Variances are floored at cfg.variance_floor; hitting the floor sets
// `collapsed`.
inline MlFit ml_fit_trace(std::span<const double> x, std::size_t K, const MlConfig& cfg = {}) {
  if (x.size() < kMinTraceLength) throw DomainError("ml_fit_trace: trace shorter than 2");
  if (K < 1) throw DomainError("ml_fit_trace: K must be >= 1");
  const std::size_t T = x.size();
  MlFit fit;
  fit.mean = detail::trace_quantile_means(x, K);
  fit.variance.assign(K, std::max(detail::population_variance(x) / static_cast<double>(K),
                                  cfg.variance_floor));
  fit.A = Matrix(K, K, K > 1 ? 0.1 / static_cast<double>(K - 1) : 1.0);
  if (K > 1)
    for (std::size_t k = 0; k < K; ++k) fit.A(k, k) = 0.9;
  fit.pi.assign(K, 1.0 / static_cast<double>(K));

  double previous = -std::numeric_limits<double>::infinity();
  for (int it = 0; it < cfg.max_iterations; ++it) {
    std::vector<double> log_pi(K);
    for (std::size_t k = 0; k < K; ++k) log_pi[k] = std::log(fit.pi[k]);
    auto fb = forward_backward(gaussian_log_emission(x, fit.mean, fit.variance),
                               detail::log_of(fit.A), log_pi);
    fit.loglik = fb.log_Z;
    fit.loglik_history.push_back(fb.log_Z);
    fit.iterations = it + 1;
    fit.gamma = std::move(fb.gamma);
    fit.counts = Matrix(K, K);
    for (const auto& slice : fb.xi_pair) fit.counts += slice;
    fit.occupancy.assign(K, 0.0);
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t k = 0; k < K; ++k) fit.occupancy[k] += fit.gamma(t, k);
    if (it > 0 && fit.loglik - previous <= cfg.rel_tolerance * std::abs(fit.loglik)) break;
    if (it + 1 == cfg.max_iterations) break;
    previous = fit.loglik;

    for (std::size_t k = 0; k < K; ++k) fit.pi[k] = fit.gamma(0, k);
    for (std::size_t i = 0; i < K; ++i) {
      const auto row = fit.counts.row(i);
      const double total = std::accumulate(row.begin(), row.end(), 0.0);
      if (total > 0.0)
        for (std::size_t j = 0; j < K; ++j) fit.A(i, j) = row[j] / total;
    }
    for (std::size_t k = 0; k < K; ++k) {
      const double n = fit.occupancy[k];
      if (!(n > 0.0)) continue;
      double mu = 0.0;
      for (std::size_t t = 0; t < T; ++t) mu += fit.gamma(t, k) * x[t];
      mu /= n;
      double var = 0.0;
      for (std::size_t t = 0; t < T; ++t) var += fit.gamma(t, k) * (x[t] - mu) * (x[t] - mu);
      var /= n;
      if (var < cfg.variance_floor) {
        var = cfg.variance_floor;
        fit.collapsed = true;
      }
      fit.mean[k] = mu;
      fit.variance[k] = var;
    }
  }
  return fit;
}

// Free parameters of a K-state Gaussian HMM: initial (K-1), transitions
// K(K-1), means and variances 2K.
inline std::size_t ml_parameter_count(std::size_t K) { return (K - 1) + K * (K - 1) + 2 * K; }

inline double ml_bic(double loglik, std::size_t K, std::size_t T) {
  return -2.0 * loglik + static_cast<double>(ml_parameter_count(K)) * std::log(static_cast<double>(T));
}

// Broad prior for the per-trace VB baseline.
inline Hyperparameters uninformative_prior(std::size_t K, double pooled_mean) {
  Hyperparameters psi(K);
  for (std::size_t k = 0; k < K; ++k) {
    psi.m[k] = pooled_mean;
    psi.beta[k] = 1e-2;
    psi.a[k] = 1e-2;
    psi.b[k] = 1e-2;
    psi.rho[k] = 1.0;
  }
  psi.alpha.fill(1.0);
  return psi;
}

// Soft assignment to quantile-spaced centres. The broad baseline prior is
// symmetric in the states, so the starting marginals must break the tie.
inline StateMarginals quantile_marginals(std::span<const double> x, std::size_t K) {
  const auto centres = detail::trace_quantile_means(x, K);
  const double var = std::max(detail::population_variance(x) / static_cast<double>(K * K), 1e-12);
  std::vector<double> vars(K, var);
  StateMarginals init;
  init.gamma = row_softmax(gaussian_log_emission(x, centres, vars));
  init.xi_pair = independent_pairs(init.gamma);
  return init;
}

enum class SelectionMethod { ml_bic, vb_elbo };

inline const char* to_string(SelectionMethod m) {
  return m == SelectionMethod::ml_bic ? "ml" : "vb";
}

// One trace's fit at its selected number of states, in a form shared by
// both baselines.
struct BaselineTraceFit {
  std::size_t K = 0;
  std::vector<double> scores;  // per candidate K = 1..K_max: BIC (ml) or lower bound (vb)
  std::vector<double> means;
  std::vector<double> precisions;
  Matrix A;
  std::vector<double> occupancy;
  Matrix counts;
  Matrix gamma;
  bool collapsed = false;
};

struct SelectionConfig {
  MlConfig ml;
  FitConfig vb;
  double prior_mean = 0.0;  // m of the uninformative VB prior
};

inline BaselineTraceFit vb_baseline_fit(std::span<const double> x, std::size_t K,
                                        const SelectionConfig& cfg, double* score) {
  const Hyperparameters prior = uninformative_prior(K, cfg.prior_mean);
  const auto post = fit_trace(x, prior, cfg.vb, quantile_marginals(x, K));
  BaselineTraceFit out;
  out.K = K;
  out.means = post.params.m;
  out.precisions.resize(K);
  out.A = Matrix(K, K);
  for (std::size_t k = 0; k < K; ++k) {
    out.precisions[k] = post.params.a[k] / post.params.b[k];
    double row = 0.0;
    for (std::size_t l = 0; l < K; ++l) row += post.params.alpha(k, l);
    for (std::size_t l = 0; l < K; ++l) out.A(k, l) = post.params.alpha(k, l) / row;
  }
  out.counts = post.params.alpha - prior.alpha;
  out.occupancy.assign(K, 0.0);
  for (std::size_t t = 0; t < post.gamma.rows(); ++t)
    for (std::size_t k = 0; k < K; ++k) out.occupancy[k] += post.gamma(t, k);
  out.gamma = post.gamma;
  *score = post.elbo;
  return out;
}

inline BaselineTraceFit ml_baseline_fit(std::span<const double> x, std::size_t K,
                                        const SelectionConfig& cfg, double* score) {
  const auto fit = ml_fit_trace(x, K, cfg.ml);
  BaselineTraceFit out;
  out.K = K;
  out.means = fit.mean;
  out.precisions.resize(K);
  for (std::size_t k = 0; k < K; ++k) out.precisions[k] = 1.0 / fit.variance[k];
  out.A = fit.A;
  out.counts = fit.counts;
  out.occupancy = fit.occupancy;
  out.gamma = fit.gamma;
  out.collapsed = fit.collapsed;
  *score = ml_bic(fit.loglik, K, x.size());
  return out;
}

// Fits K = 1..K_max and keeps the minimum-BIC (ml) or maximum lower bound
// (vb) model; ties go to the smaller K.
inline BaselineTraceFit select_model_per_trace(std::span<const double> x, std::size_t K_max,
                                               SelectionMethod method,
                                               const SelectionConfig& cfg = {}) {
  if (K_max < 1) throw DomainError("select_model_per_trace: K_max must be >= 1");
  BaselineTraceFit best;
  std::vector<double> scores;
  double best_score = 0.0;
  for (std::size_t K = 1; K <= K_max; ++K) {
    double score = 0.0;
    auto fit = method == SelectionMethod::ml_bic ? ml_baseline_fit(x, K, cfg, &score)
                                                 : vb_baseline_fit(x, K, cfg, &score);
    scores.push_back(score);
    const bool better = method == SelectionMethod::ml_bic ? score < best_score : score > best_score;
    if (K == 1 || better) {
      best = std::move(fit);
      best_score = score;
    }
  }
  best.scores = std::move(scores);
  return best;
}

struct PooledMean {
  std::size_t trace = 0;
  std::size_t state = 0;
  double mean = 0.0;
  double weight = 0.0;
};

struct GmmFit {
  std::vector<double> weight;
  std::vector<double> mean;
  std::vector<double> variance;
  double loglik = -std::numeric_limits<double>::infinity();
};

namespace detail {

inline double log_normal_pdf(double v, double mean, double variance) {
  const double d = v - mean;
  return -0.5 * (kLog2Pi + std::log(variance) + d * d / variance);
}

inline Matrix gmm_log_joint(std::span<const double> v, const GmmFit& g) {
  Matrix out(v.size(), g.mean.size());
  for (std::size_t i = 0; i < v.size(); ++i)
    for (std::size_t k = 0; k < g.mean.size(); ++k)
      out(i, k) = std::log(g.weight[k]) + log_normal_pdf(v[i], g.mean[k], g.variance[k]);
  return out;
}

inline double weighted_quantile(std::span<const double> v, std::span<const double> w, double p) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  const double total = std::accumulate(w.begin(), w.end(), 0.0);
  double acc = 0.0;
  for (std::size_t i : order) {
    acc += w[i];
    if (acc >= p * total) return v[i];
  }
  return v[order.back()];
}

inline GmmFit run_gmm_em(std::span<const double> v, std::span<const double> w, GmmFit g,
                         double variance_floor) {
  const std::size_t K = g.mean.size();
  const double total = std::accumulate(w.begin(), w.end(), 0.0);
  double previous = -std::numeric_limits<double>::infinity();
  for (int it = 0; it < 500; ++it) {
    const Matrix log_joint = gmm_log_joint(v, g);
    Matrix resp(v.size(), K);
    double ll = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
      const auto row = log_joint.row(i);
      const double mx = *std::max_element(row.begin(), row.end());
      double s = 0.0;
      for (std::size_t k = 0; k < K; ++k) s += resp(i, k) = std::exp(row[k] - mx);
      for (std::size_t k = 0; k < K; ++k) resp(i, k) /= s;
      ll += w[i] * (mx + std::log(s));
    }
    g.loglik = ll;
    if (std::abs(ll - previous) <= 1e-10 * std::abs(ll)) break;
    previous = ll;
    for (std::size_t k = 0; k < K; ++k) {
      double n = 0.0, mu = 0.0;
      for (std::size_t i = 0; i < v.size(); ++i) {
        n += w[i] * resp(i, k);
        mu += w[i] * resp(i, k) * v[i];
      }
      if (!(n > 0.0)) continue;
      mu /= n;
      double var = 0.0;
      for (std::size_t i = 0; i < v.size(); ++i) var += w[i] * resp(i, k) * (v[i] - mu) * (v[i] - mu);
      g.weight[k] = n / total;
      g.mean[k] = mu;
      g.variance[k] = std::max(var / n, variance_floor);
    }
  }
  return g;
}

}  // namespace detail

// Weighted 1-D Gaussian mixture by EM. The first start places the means at
// weighted quantiles; later starts use k-means++ seeding. Components are
// returned sorted by mean.
inline GmmFit fit_gmm_1d(std::span<const double> values, std::span<const double> weights,
                         std::size_t K, int restarts = 10, std::uint64_t seed = 0) {
  if (values.size() != weights.size()) throw DomainError("fit_gmm_1d: size mismatch");
  std::set<double> distinct(values.begin(), values.end());
  if (distinct.size() < K) {
    std::ostringstream os;
    os << "fit_gmm_1d: " << distinct.size() << " distinct means for " << K << " components";
    throw DomainError(os.str());
  }
  double total = 0.0, mean = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!(weights[i] >= 0.0)) throw DomainError("fit_gmm_1d: weights must be >= 0");
    total += weights[i];
    mean += weights[i] * values[i];
  }
  if (!(total > 0.0)) throw DomainError("fit_gmm_1d: total weight must be > 0");
  mean /= total;
  double var = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i)
    var += weights[i] * (values[i] - mean) * (values[i] - mean);
  var /= total;
  if (!(var > 0.0)) var = 1.0;
  const double floor = 1e-6 * var;

  GmmFit best;
  for (int r = 0; r < std::max(restarts, 1); ++r) {
    GmmFit g;
    g.weight.assign(K, 1.0 / static_cast<double>(K));
    g.variance.assign(K, var / static_cast<double>(K));
    g.mean.resize(K);
    if (r == 0) {
      for (std::size_t k = 0; k < K; ++k)
        g.mean[k] = detail::weighted_quantile(values, weights,
                                              (static_cast<double>(k) + 0.5) / static_cast<double>(K));
    } else {
      auto rng = make_rng(seed, static_cast<std::uint64_t>(r));
      std::vector<double> d2(values.begin(), values.end());
      std::discrete_distribution<std::size_t> first(weights.begin(), weights.end());
      g.mean[0] = values[first(rng)];
      for (std::size_t k = 1; k < K; ++k) {
        for (std::size_t i = 0; i < values.size(); ++i) {
          double best_d = std::numeric_limits<double>::infinity();
          for (std::size_t j = 0; j < k; ++j)
            best_d = std::min(best_d, (values[i] - g.mean[j]) * (values[i] - g.mean[j]));
          d2[i] = weights[i] * best_d;
        }
        std::discrete_distribution<std::size_t> next(d2.begin(), d2.end());
        g.mean[k] = values[next(rng)];
      }
    }
    g = detail::run_gmm_em(values, weights, std::move(g), floor);
    if (g.loglik > best.loglik) best = std::move(g);
  }
  std::vector<std::size_t> order(K);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return best.mean[a] < best.mean[b]; });
  GmmFit sorted = best;
  for (std::size_t k = 0; k < K; ++k) {
    sorted.weight[k] = best.weight[order[k]];
    sorted.mean[k] = best.mean[order[k]];
    sorted.variance[k] = best.variance[order[k]];
  }
  return sorted;
}

// labels[n][i] is the consensus state of per-trace state i in trace n, or
// -1 for pairs absent from the pool.
struct StateMapping {
  std::vector<std::vector<int>> labels;
  GmmFit gmm;

  int operator()(std::size_t trace, std::size_t state) const { return labels[trace][state]; }
};

// Clusters the occupancy-weighted per-trace state means into K consensus
// states and maps each (trace, state) to its maximum-responsibility
// component.
inline StateMapping gmm_remap(std::span<const PooledMean> pool, std::size_t K,
                              std::uint64_t seed = 0, int restarts = 10) {
  if (K < 1) throw DomainError("gmm_remap: K must be >= 1");
  StateMapping mapping;
  std::size_t n_traces = 0;
  for (const auto& p : pool) n_traces = std::max(n_traces, p.trace + 1);
  mapping.labels.resize(n_traces);
  for (const auto& p : pool) {
    auto& row = mapping.labels[p.trace];
    if (row.size() <= p.state) row.resize(p.state + 1, -1);
  }
  std::vector<double> values, weights;
  for (const auto& p : pool) {
    values.push_back(p.mean);
    weights.push_back(p.weight);
  }
  if (K == 1) {
    if (pool.empty()) throw DomainError("gmm_remap: empty pool");
    for (const auto& p : pool) mapping.labels[p.trace][p.state] = 0;
    mapping.gmm = GmmFit{{1.0}, {std::accumulate(values.begin(), values.end(), 0.0) /
                                 static_cast<double>(values.size())},
                         {1.0}, 0.0};
    return mapping;
  }
  mapping.gmm = fit_gmm_1d(values, weights, K, restarts, seed);
  const Matrix log_joint = detail::gmm_log_joint(values, mapping.gmm);
  for (std::size_t i = 0; i < pool.size(); ++i) {
    const auto row = log_joint.row(i);
    const auto best = std::max_element(row.begin(), row.end()) - row.begin();
    mapping.labels[pool[i].trace][pool[i].state] = static_cast<int>(best);
  }
  return mapping;
}

// xi_kl = sum over i -> k, j -> l of counts_ij.
inline Matrix remap_counts(const Matrix& counts, std::span<const int> labels, std::size_t K) {
  if (labels.size() != counts.rows() || counts.rows() != counts.cols())
    throw DomainError("remap_counts: mapping does not cover every state");
  Matrix out(K, K);
  for (std::size_t i = 0; i < counts.rows(); ++i) {
    for (std::size_t j = 0; j < counts.cols(); ++j) {
      if (labels[i] < 0 || labels[j] < 0 || static_cast<std::size_t>(labels[i]) >= K ||
          static_cast<std::size_t>(labels[j]) >= K)
        throw DomainError("remap_counts: mapping is not total");
      out(static_cast<std::size_t>(labels[i]), static_cast<std::size_t>(labels[j])) += counts(i, j);
    }
  }
  return out;
}

// Per-trace model selection followed by consensus remapping.
struct BaselineFit {
  SelectionMethod method = SelectionMethod::ml_bic;
  std::vector<BaselineTraceFit> traces;
  StateMapping mapping;
  std::vector<Matrix> xi;  // remapped counts, K x K per trace
};

inline BaselineFit run_baseline(const Ensemble& ensemble, std::size_t K_max, std::size_t K,
                                SelectionMethod method, std::uint64_t seed = 0,
                                unsigned threads = 1, SelectionConfig cfg = {}) {
  require_valid(ensemble);
  double pooled = 0.0;
  for (const auto& t : ensemble.traces) pooled += std::accumulate(t.x.begin(), t.x.end(), 0.0);
  cfg.prior_mean = pooled / static_cast<double>(ensemble.total_length());

  BaselineFit out;
  out.method = method;
  out.traces.resize(ensemble.size());
  parallel_for(ensemble.size(), threads, [&](std::size_t n) {
    out.traces[n] = select_model_per_trace(ensemble.traces[n].x, K_max, method, cfg);
  });
  std::vector<PooledMean> pool;
  for (std::size_t n = 0; n < out.traces.size(); ++n)
    for (std::size_t i = 0; i < out.traces[n].K; ++i)
      pool.push_back({n, i, out.traces[n].means[i], out.traces[n].occupancy[i]});
  out.mapping = gmm_remap(pool, K, seed);
  out.xi.reserve(out.traces.size());
  for (std::size_t n = 0; n < out.traces.size(); ++n)
    out.xi.push_back(remap_counts(out.traces[n].counts, out.mapping.labels[n], K));
  return out;
}

}  // namespace vebhmm
