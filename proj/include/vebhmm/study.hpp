#pragma once

// Simulate-fit-score pipeline for one cell of a noise-grid study: an
// ensemble is drawn from a scenario, analysed by the hierarchical method
// and by both per-trace baselines, and each analysis is scored against the
// sampled ground truth.

#include <cmath>
#include <cstdint>
#include <vector>

#include "vebhmm/baselines.hpp"
#include "vebhmm/empirical_bayes.hpp"
#include "vebhmm/evaluation.hpp"
#include "vebhmm/simulator.hpp"
#include "vebhmm/trace_data.hpp"

namespace vebhmm {

struct MethodScore {
  ErrorReport errors;
  std::vector<double> k_eff;          // per trace
  double mean_abs_k_eff_error = 0.0;  // mean_n |K_eff(inferred) - K_eff(true)|
};

struct CellResult {
  SimScenario scenario;
  std::vector<double> k_eff_true;
  MethodScore veb;
  MethodScore ml;
  MethodScore vb;
  double veb_elbo = 0.0;
};

struct StudyOptions {
  int restarts = 5;
  std::size_t extra_baseline_states = 0;  // baselines select K in 1..K + extra
  unsigned threads = 1;
  FitConfig fit;
  double outer_rel_tolerance = 1e-6;
  int max_outer_iterations = 100;
  InitStrategy init = InitStrategy::grow;
};

inline std::vector<double> true_effective_states(const SimOutput& sim, std::size_t K) {
  std::vector<double> out;
  out.reserve(sim.truth.z.size());
  for (const auto& z : sim.truth.z) out.push_back(effective_states(z, K));
  return out;
}

inline MethodScore score_method(std::span<const Matrix> xi, std::span<const Matrix> xi0,
                                std::vector<double> k_eff, std::span<const double> k_eff_true) {
  MethodScore s;
  s.errors = count_errors(xi, xi0);
  s.k_eff = std::move(k_eff);
  for (std::size_t n = 0; n < s.k_eff.size(); ++n)
    s.mean_abs_k_eff_error += std::abs(s.k_eff[n] - k_eff_true[n]);
  s.mean_abs_k_eff_error /= static_cast<double>(s.k_eff.size());
  return s;
}

inline MethodScore score_veb(const VebResult& fit, const GroundTruth& truth,
                             std::span<const double> k_eff_true) {
  std::vector<Matrix> xi;
  std::vector<double> k_eff;
  for (const auto& post : fit.posteriors) {
    xi.push_back(pseudocounts(post, fit.psi_star));
    k_eff.push_back(effective_states(post.gamma));
  }
  return score_method(xi, truth.xi0, std::move(k_eff), k_eff_true);
}

inline MethodScore score_baseline(const BaselineFit& fit, const GroundTruth& truth,
                                  std::span<const double> k_eff_true) {
  std::vector<double> k_eff;
  for (const auto& t : fit.traces) k_eff.push_back(effective_states_from_occupancy(t.occupancy));
  return score_method(fit.xi, truth.xi0, std::move(k_eff), k_eff_true);
}

inline VebConfig study_veb_config(const SimScenario& s, const StudyOptions& opt) {
  VebConfig cfg;
  cfg.K = s.K;
  cfg.restarts = opt.restarts;
  cfg.seed = s.seed;
  cfg.threads = opt.threads;
  cfg.fit = opt.fit;
  cfg.outer_rel_tolerance = opt.outer_rel_tolerance;
  cfg.max_outer_iterations = opt.max_outer_iterations;
  cfg.init = opt.init;
  return cfg;
}

inline CellResult run_cell(const SimScenario& s, const StudyOptions& opt = {}) {
  const SimOutput sim = sample_ensemble(s);
  CellResult r;
  r.scenario = s;
  r.k_eff_true = true_effective_states(sim, s.K);

  const VebResult veb = veb_fit(sim.ensemble, study_veb_config(s, opt));
  r.veb = score_veb(veb, sim.truth, r.k_eff_true);
  r.veb_elbo = veb.elbo();

  const std::size_t k_max = s.K + opt.extra_baseline_states;
  SelectionConfig sel;
  sel.vb = opt.fit;
  const auto ml = run_baseline(sim.ensemble, k_max, s.K, SelectionMethod::ml_bic, s.seed,
                               opt.threads, sel);
  r.ml = score_baseline(ml, sim.truth, r.k_eff_true);
  const auto vb = run_baseline(sim.ensemble, k_max, s.K, SelectionMethod::vb_elbo, s.seed,
                               opt.threads, sel);
  r.vb = score_baseline(vb, sim.truth, r.k_eff_true);
  return r;
}

// Seed of replicate r in a grid cell; distinct cells and replicates get
// decorrelated streams.
inline std::uint64_t replicate_seed(std::uint64_t base, std::size_t K, double sigma_rel,
                                    std::size_t replicate) {
  const auto sigma_key = static_cast<std::uint64_t>(std::llround(sigma_rel * 1e6));
  return mix_seed(mix_seed(mix_seed(base, K), sigma_key), replicate);
}

}  // namespace vebhmm
