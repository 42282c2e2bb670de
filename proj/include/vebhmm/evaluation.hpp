#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <sstream>
#include <vector>

#include "vebhmm/empirical_bayes.hpp"
#include "vebhmm/errors.hpp"
#include "vebhmm/matrix.hpp"
#include "vebhmm/random.hpp"
#include "vebhmm/trace_data.hpp"
#include "vebhmm/vb_hmm.hpp"

namespace vebhmm {

// Expected transition counts of a fitted trace: alpha_hat - alpha.
inline Matrix pseudocounts(const TracePosterior& post, const Hyperparameters& psi) {
  return post.params.alpha - psi.alpha;
}

struct ErrorReport {
  double occupancy_error = 0.0;
  double transition_error = 0.0;
  std::vector<int> alignment;  // inferred consensus label -> true label
  // Raw numerators and denominators of the two normalized errors.
  double occupancy_abs_diff = 0.0;
  double occupancy_total = 0.0;
  double transition_abs_diff = 0.0;
  double transition_total = 0.0;
  bool greedy_alignment = false;
};

inline constexpr std::size_t kMaxExhaustiveAlignment = 6;

// Normalized L1 errors under a fixed alignment: diagonal ("occupancy") and
// off-diagonal ("transition") entries are scored separately, each as
// sum |xi - xi0| / sum (xi + xi0).
inline ErrorReport count_errors_aligned(std::span<const Matrix> xi, std::span<const Matrix> xi0,
                                        std::span<const int> alignment) {
  if (xi.size() != xi0.size()) throw DomainError("count_errors: trace counts differ");
  ErrorReport r;
  r.alignment.assign(alignment.begin(), alignment.end());
  for (std::size_t n = 0; n < xi.size(); ++n) {
    const std::size_t K = xi[n].rows();
    if (xi0[n].rows() != K || alignment.size() != K)
      throw DomainError("count_errors: state counts differ");
    for (std::size_t k = 0; k < K; ++k) {
      for (std::size_t l = 0; l < K; ++l) {
        const double v = xi[n](k, l);
        const double v0 = xi0[n](static_cast<std::size_t>(alignment[k]),
                                 static_cast<std::size_t>(alignment[l]));
        if (k == l) {
          r.occupancy_abs_diff += std::abs(v - v0);
          r.occupancy_total += v + v0;
        } else {
          r.transition_abs_diff += std::abs(v - v0);
          r.transition_total += v + v0;
        }
      }
    }
  }
  r.occupancy_error = r.occupancy_total > 0.0 ? r.occupancy_abs_diff / r.occupancy_total : 0.0;
  r.transition_error = r.transition_total > 0.0 ? r.transition_abs_diff / r.transition_total : 0.0;
  return r;
}

namespace detail {

inline double alignment_cost(std::span<const Matrix> xi, std::span<const Matrix> xi0,
                             std::span<const int> perm) {
  double cost = 0.0;
  for (std::size_t n = 0; n < xi.size(); ++n)
    for (std::size_t k = 0; k < perm.size(); ++k)
      for (std::size_t l = 0; l < perm.size(); ++l)
        cost += std::abs(xi[n](k, l) - xi0[n](static_cast<std::size_t>(perm[k]),
                                              static_cast<std::size_t>(perm[l])));
  return cost;
}

// Greedy matching of per-trace occupancy profiles.
inline std::vector<int> greedy_alignment(std::span<const Matrix> xi, std::span<const Matrix> xi0,
                                         std::size_t K) {
  Matrix cost(K, K);
  for (std::size_t n = 0; n < xi.size(); ++n)
    for (std::size_t k = 0; k < K; ++k)
      for (std::size_t j = 0; j < K; ++j) {
        const auto a = xi[n].row(k);
        const auto b = xi0[n].row(j);
        cost(k, j) += std::abs(std::accumulate(a.begin(), a.end(), 0.0) -
                               std::accumulate(b.begin(), b.end(), 0.0));
      }
  std::vector<int> perm(K, -1);
  std::vector<bool> used(K, false);
  for (std::size_t step = 0; step < K; ++step) {
    double best = std::numeric_limits<double>::infinity();
    std::size_t bk = 0, bj = 0;
    for (std::size_t k = 0; k < K; ++k) {
      if (perm[k] >= 0) continue;
      for (std::size_t j = 0; j < K; ++j)
        if (!used[j] && cost(k, j) < best) {
          best = cost(k, j);
          bk = k;
          bj = j;
        }
    }
    perm[bk] = static_cast<int>(bj);
    used[bj] = true;
  }
  return perm;
}

}  // namespace detail

// Aligns inferred consensus labels to the true labels by minimizing the
// total absolute count difference (exhaustive for K <= 6, greedy above),
// then scores the aligned counts.
inline ErrorReport count_errors(std::span<const Matrix> xi, std::span<const Matrix> xi0) {
  if (xi.empty() || xi.size() != xi0.size()) throw DomainError("count_errors: trace counts differ");
  const std::size_t K = xi.front().rows();
  std::vector<int> perm(K);
  std::iota(perm.begin(), perm.end(), 0);
  if (K > kMaxExhaustiveAlignment) {
    auto r = count_errors_aligned(xi, xi0, detail::greedy_alignment(xi, xi0, K));
    r.greedy_alignment = true;
    return r;
  }
  std::vector<int> best = perm;
  double best_cost = std::numeric_limits<double>::infinity();
  do {
    const double c = detail::alignment_cost(xi, xi0, perm);
    if (c < best_cost) {
      best_cost = c;
      best = perm;
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  return count_errors_aligned(xi, xi0, best);
}

// exp of the entropy of an occupancy distribution (normalized internally).
inline double effective_states_from_occupancy(std::span<const double> occupancy) {
  const double total = std::accumulate(occupancy.begin(), occupancy.end(), 0.0);
  if (!(total > 0.0)) throw DomainError("effective_states: empty occupancy");
  double h = 0.0;
  for (double o : occupancy) {
    const double q = o / total;
    if (q > 0.0) h -= q * std::log(q);
  }
  return std::clamp(std::exp(h), 1.0, static_cast<double>(occupancy.size()));
}

// K_eff = exp H(Q) with Q the time-averaged state marginal.
inline double effective_states(const Matrix& gamma) {
  std::vector<double> q(gamma.cols(), 0.0);
  for (std::size_t t = 0; t < gamma.rows(); ++t)
    for (std::size_t k = 0; k < gamma.cols(); ++k) q[k] += gamma(t, k);
  return effective_states_from_occupancy(q);
}

inline double effective_states(std::span<const int> path, std::size_t K) {
  std::vector<double> q(K, 0.0);
  for (int z : path) q[static_cast<std::size_t>(z)] += 1.0;
  return effective_states_from_occupancy(q);
}

// Penalized ensemble score -2 L + K(K+5) log N.
inline double ensemble_bic(double elbo, std::size_t K, std::size_t N) {
  if (N < 1) throw DomainError("ensemble_bic: N must be >= 1");
  return -2.0 * elbo + static_cast<double>(K * (K + 5)) * std::log(static_cast<double>(N));
}

// Relative free energy of each state in units of k_B T:
// log(sum_{l != k} A_kl / sum_{l != k} A_lk).
inline std::vector<double> delta_g(const Matrix& A) {
  const std::size_t K = A.rows();
  std::vector<double> out(K);
  for (std::size_t k = 0; k < K; ++k) {
    double outflow = 0.0, inflow = 0.0;
    for (std::size_t l = 0; l < K; ++l) {
      if (l == k) continue;
      outflow += A(k, l);
      inflow += A(l, k);
    }
    if (!(outflow > 0.0) || !(inflow > 0.0)) {
      std::ostringstream os;
      os << "delta_g: state " << k << (outflow > 0.0 ? " is unreachable" : " is absorbing");
      throw DomainError(os.str());
    }
    out[k] = std::log(outflow) - std::log(inflow);
  }
  return out;
}

struct Histogram {
  std::vector<double> edges;    // bins + 1 fixed-width edges
  std::vector<double> density;  // integrates to 1 over the edges
};

// Fixed-width density histogram on [lo, hi]; samples outside fall in the
// edge bins.
inline Histogram make_histogram(std::span<const double> samples, std::size_t bins, double lo,
                                double hi, std::span<const double> weights = {}) {
  if (bins == 0) throw DomainError("make_histogram: need at least one bin");
  if (!(hi > lo)) {
    lo -= 0.5;
    hi += 0.5;
  }
  Histogram h;
  h.edges.resize(bins + 1);
  const double width = (hi - lo) / static_cast<double>(bins);
  for (std::size_t i = 0; i <= bins; ++i) h.edges[i] = lo + width * static_cast<double>(i);
  h.density.assign(bins, 0.0);
  double total = 0.0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const double w = weights.empty() ? 1.0 : weights[i];
    const double pos = std::floor((samples[i] - lo) / width);
    const auto bin = static_cast<std::size_t>(std::clamp(pos, 0.0, static_cast<double>(bins - 1)));
    h.density[bin] += w;
    total += w;
  }
  if (total > 0.0)
    for (double& d : h.density) d /= total * width;
  return h;
}

struct DeltaGPosterior {
  std::vector<std::vector<double>> samples;  // [state][draw]
  std::vector<Histogram> histograms;         // per state
};

inline constexpr std::size_t kDefaultHistogramBins = 50;

// Monte Carlo pushforward of q(A) = prod_k Dir(A_k | alpha_hat_k) through
// delta_g.
inline DeltaGPosterior delta_g_posterior(const Matrix& hat_alpha, std::size_t n_samples,
                                         std::uint64_t seed,
                                         std::size_t bins = kDefaultHistogramBins) {
  const std::size_t K = hat_alpha.rows();
  if (n_samples < 1) throw DomainError("delta_g_posterior: n_samples must be >= 1");
  if (K < 2) throw DomainError("delta_g_posterior: need K >= 2");
  auto rng = make_rng(seed, 0);
  DeltaGPosterior out;
  out.samples.assign(K, std::vector<double>(n_samples));
  Matrix A(K, K);
  for (std::size_t s = 0; s < n_samples; ++s) {
    for (std::size_t k = 0; k < K; ++k) {
      const auto row = sample_dirichlet(rng, hat_alpha.row(k));
      std::copy(row.begin(), row.end(), A.row(k).begin());
    }
    const auto dg = delta_g(A);
    for (std::size_t k = 0; k < K; ++k) out.samples[k][s] = dg[k];
  }
  for (const auto& v : out.samples) {
    const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
    out.histograms.push_back(make_histogram(v, bins, *lo, *hi));
  }
  return out;
}

// Ensemble version: per-trace posteriors histogrammed on shared edges and
// averaged over traces.
inline std::vector<Histogram> ensemble_delta_g(std::span<const Matrix> hat_alphas,
                                               std::size_t n_samples, std::uint64_t seed,
                                               std::size_t bins = kDefaultHistogramBins) {
  if (hat_alphas.empty()) throw DomainError("ensemble_delta_g: no traces");
  const std::size_t K = hat_alphas.front().rows();
  std::vector<DeltaGPosterior> per_trace;
  per_trace.reserve(hat_alphas.size());
  for (std::size_t n = 0; n < hat_alphas.size(); ++n)
    per_trace.push_back(delta_g_posterior(hat_alphas[n], n_samples, mix_seed(seed, n), bins));
  std::vector<Histogram> out;
  for (std::size_t k = 0; k < K; ++k) {
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (const auto& p : per_trace) {
      const auto [a, b] = std::minmax_element(p.samples[k].begin(), p.samples[k].end());
      lo = std::min(lo, *a);
      hi = std::max(hi, *b);
    }
    Histogram sum;
    for (const auto& p : per_trace) {
      auto h = make_histogram(p.samples[k], bins, lo, hi);
      if (sum.edges.empty()) {
        sum = std::move(h);
        continue;
      }
      for (std::size_t i = 0; i < bins; ++i) sum.density[i] += h.density[i];
    }
    for (double& d : sum.density) d /= static_cast<double>(per_trace.size());
    out.push_back(std::move(sum));
  }
  return out;
}

struct FoldResult {
  std::vector<std::size_t> heldout;  // trace indices
  double train_elbo = 0.0;           // sum over training traces
  double heldout_elbo = 0.0;         // sum over held-out traces, psi frozen
};

// Deterministic assignment of traces to folds from a seeded shuffle.
inline std::vector<std::vector<std::size_t>> assign_folds(std::size_t N, std::size_t folds,
                                                          std::uint64_t seed) {
  std::vector<std::size_t> order(N);
  std::iota(order.begin(), order.end(), 0);
  auto rng = make_rng(seed, 0xF01D);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> out(folds);
  for (std::size_t i = 0; i < N; ++i) out[i % folds].push_back(order[i]);
  for (auto& f : out) std::sort(f.begin(), f.end());
  return out;
}

// K-state hyperparameters are fit on the training traces of each fold, then
// each held-out trace is fit with those hyperparameters frozen. Traces are
// never split.
inline std::vector<FoldResult> crossval_heldout(const Ensemble& ensemble, std::size_t K,
                                                std::size_t folds, VebConfig cfg) {
  require_valid(ensemble);
  if (folds < 2) throw DomainError("crossval_heldout: need at least 2 folds");
  if (ensemble.size() < folds) throw DomainError("crossval_heldout: fewer traces than folds");
  cfg.K = K;
  cfg.initial_psi.reset();
  const auto assignment = assign_folds(ensemble.size(), folds, cfg.seed);
  std::vector<FoldResult> out;
  for (const auto& heldout : assignment) {
    Ensemble train, test;
    std::vector<bool> is_heldout(ensemble.size(), false);
    for (std::size_t n : heldout) is_heldout[n] = true;
    for (std::size_t n = 0; n < ensemble.size(); ++n)
      (is_heldout[n] ? test : train).traces.push_back(ensemble.traces[n]);
    const auto fit = veb_fit(train, cfg);
    std::vector<double> elbos(test.size());
    parallel_for(test.size(), cfg.threads, [&](std::size_t i) {
      elbos[i] = fit_trace(test.traces[i].x, fit.psi_star, cfg.fit).elbo;
    });
    FoldResult r;
    r.heldout = heldout;
    r.train_elbo = fit.elbo();
    for (double e : elbos) r.heldout_elbo += e;
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace vebhmm
