// Simulate a small ensemble, fit it with VEB, and score the fit against the
// generating counts.
//   fit_and_score [K] [sigma_rel]

#include <cstdlib>
#include <iostream>

#include "vebhmm/empirical_bayes.hpp"
#include "vebhmm/simulator.hpp"
#include "vebhmm/study.hpp"

int main(int argc, char** argv) {
  using namespace vebhmm;
  SimScenario s;
  s.K = argc > 1 ? std::strtoul(argv[1], nullptr, 10) : 3;
  s.sigma_rel = argc > 2 ? std::strtod(argv[2], nullptr) : 0.4;
  s.N = 30;
  s.mean_length = 80.0;
  s.seed = 11;
  const auto sim = sample_ensemble(s);

  VebConfig cfg;
  cfg.K = s.K;
  cfg.seed = 11;
  cfg.restarts = 3;
  const auto fit = veb_fit(sim.ensemble, cfg);

  std::cout << "bound " << fit.elbo() << " (" << fit.elbo_history.size() << " bound evaluations)\n";
  for (std::size_t k = 0; k < s.K; ++k)
    std::cout << "state " << k << ": m " << fit.psi_star.m[k] << " (true " << sim.psi_true.m[k] << ")\n";

  const auto k_true = true_effective_states(sim, s.K);
  const auto score = score_veb(fit, sim.truth, k_true);
  std::cout << "occupancy error " << score.errors.occupancy_error << ", transition error "
            << score.errors.transition_error << ", mean |K_eff error| " << score.mean_abs_k_eff_error << "\n";
}
