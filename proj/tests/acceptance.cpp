// Acceptance suite: one PASS/FAIL line per criterion. Exit status is the
// number of failed criteria.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "vebhmm/cli.hpp"
#include "vebhmm/empirical_bayes.hpp"
#include "vebhmm/evaluation.hpp"
#include "vebhmm/simulator.hpp"
#include "vebhmm/special_functions.hpp"
#include "vebhmm/study.hpp"
#include "vebhmm/vb_hmm.hpp"

using namespace vebhmm;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(double v, int precision = 4) {
  std::ostringstream os;
  os.precision(precision);
  os << v;
  return os.str();
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.values().size(); ++i) m = std::max(m, std::abs(a.values()[i] - b.values()[i]));
  return m;
}

Hyperparameters random_prior(std::mt19937_64& rng, std::size_t K) {
  std::uniform_real_distribution<double> u(0.5, 3.0);
  Hyperparameters psi(K);
  for (std::size_t k = 0; k < K; ++k) {
    psi.m[k] = static_cast<double>(k) + 0.3 * (u(rng) - 1.5);
    psi.beta[k] = u(rng);
    psi.a[k] = u(rng);
    psi.b[k] = 0.2 * u(rng);
    psi.rho[k] = u(rng);
    for (std::size_t l = 0; l < K; ++l) psi.alpha(k, l) = u(rng) + (k == l ? 4.0 : 0.0);
  }
  return psi;
}

std::vector<double> random_trace(std::mt19937_64& rng, std::size_t T, std::size_t K, double noise) {
  std::uniform_int_distribution<std::size_t> state(0, K - 1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> n(0.0, noise);
  std::vector<double> x(T);
  std::size_t z = state(rng);
  for (auto& v : x) {
    if (u(rng) < 0.1) z = state(rng);
    v = static_cast<double>(z) + n(rng);
  }
  return x;
}

SimScenario desk_scenario(std::size_t K, double sigma_rel, std::uint64_t seed) {
  SimScenario s;
  s.K = K;
  s.N = 100;
  s.mean_length = 100.0;
  s.fixed_length = true;
  s.delta_mu = 0.2;
  s.mu_var_ratio = 0.4;
  s.sigma_rel = sigma_rel;
  s.seed = seed;
  return s;
}

// ---- criteria ----

Outcome oracle_equivalence() {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(20240601);
  std::uniform_real_distribution<double> u(-3.0, 0.5);
  double worst = 0.0;
  for (int rep = 0; rep < 200; ++rep) {
    const std::size_t T = 1 + rep % 6;
    const std::size_t K = 1 + (rep / 6) % 3;
    Matrix log_em(T, K), log_A(K, K);
    std::vector<double> log_pi(K);
    for (double& v : log_em.values()) v = 4.0 * u(rng);
    for (double& v : log_A.values()) v = u(rng);
    for (double& v : log_pi) v = u(rng);
    const auto fb = forward_backward(log_em, log_A, log_pi);
    const auto ref = oracle::enumerate(log_em, log_A, log_pi);
    worst = std::max(worst, max_abs_diff(fb.gamma, ref.gamma));
    for (std::size_t t = 0; t + 1 < T; ++t) worst = std::max(worst, max_abs_diff(fb.xi_pair[t], ref.xi_pair[t]));
    worst = std::max(worst, std::abs(fb.log_Z - ref.log_Z));
  }
  const double secs = seconds_since(t0);
  return {worst < 1e-10 && secs < 10.0,
          "200 instances T<=6 K<=3, max deviation " + fmt(worst, 3) + " (< 1e-10), " + fmt(secs, 3) + " s (< 10 s)"};
}

Outcome monotonicity() {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(101);
  double worst_vb = 0.0;
  for (int rep = 0; rep < 100; ++rep) {
    const std::size_t K = 1 + rep % 4;
    const auto psi = random_prior(rng, K);
    const auto x = random_trace(rng, 20 + static_cast<std::size_t>(rep), K, 0.2 + 0.01 * rep);
    const auto post = fit_trace(x, psi);
    for (std::size_t i = 1; i < post.elbo_history.size(); ++i)
      worst_vb = std::min(worst_vb, post.elbo_history[i] - post.elbo_history[i - 1]);
  }
  double worst_veb = 0.0;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    SimScenario s;
    s.K = 2 + seed % 2;
    s.N = 20;
    s.mean_length = 50.0;
    s.fixed_length = true;
    s.sigma_rel = 0.3 + 0.02 * static_cast<double>(seed);
    s.seed = seed;
    VebConfig cfg;
    cfg.K = s.K;
    cfg.seed = seed;
    cfg.restarts = 2;
    cfg.init = seed % 2 ? InitStrategy::grow : InitStrategy::quantile;
    cfg.threads = default_thread_count();
    const auto res = veb_fit(sample_ensemble(s).ensemble, cfg);
    for (std::size_t i = 1; i < res.elbo_history.size(); ++i)
      worst_veb = std::min(worst_veb, res.elbo_history[i] - res.elbo_history[i - 1]);
  }
  const double secs = seconds_since(t0);
  return {worst_vb >= -1e-8 && worst_veb >= -1e-6 && secs < 120.0,
          "100 VB fits, largest decrease " + fmt(-worst_vb, 3) + " (slack 1e-8); 20 VEB runs, largest decrease " +
              fmt(-worst_veb, 3) + " (slack 1e-6); " + fmt(secs, 3) + " s (< 120 s)"};
}

// b and 1/beta are checked relative to their size, the log-expectation
// relations in absolute terms.
Outcome mstep_fixed_point() {
  double worst = 0.0;
  int records = 0, clamped = 0;
  for (std::uint64_t seed : {3u, 8u, 13u}) {
    SimScenario s;
    s.K = 2 + seed % 3;
    s.N = 40;
    s.mean_length = 60.0;
    s.fixed_length = true;
    s.sigma_rel = 0.4;
    s.seed = seed;
    VebConfig cfg;
    cfg.K = s.K;
    cfg.seed = seed;
    cfg.restarts = 2;
    cfg.threads = default_thread_count();
    cfg.on_mstep = [&](const MStepRecord& r) {
      ++records;
      const auto& mom = r.moments;
      const auto& psi = r.psi_after;
      for (std::size_t k = 0; k < psi.K; ++k) {
        if (r.status[k] == StateStatus::unpopulated || r.status[k] == StateStatus::collapsed) continue;
        worst = std::max(worst, std::abs(psi.m[k] - mom.E_mu_lambda[k] / mom.E_lambda[k]));
        if (r.status[k] == StateStatus::updated)
          worst = std::max(worst, std::abs(1.0 / psi.beta[k] - ensemble_precision_spread(mom, k)) * psi.beta[k]);
        else
          ++clamped;
        worst = std::max(worst, std::abs(digamma(psi.a[k]) - std::log(psi.a[k]) -
                                         (mom.E_log_lambda[k] - std::log(mom.E_lambda[k]))));
        worst = std::max(worst, std::abs(psi.b[k] - psi.a[k] / mom.E_lambda[k]) / psi.b[k]);
        const auto row = psi.alpha.row(k);
        const double sum = std::accumulate(row.begin(), row.end(), 0.0);
        for (std::size_t l = 0; l < psi.K; ++l)
          worst = std::max(worst, std::abs(digamma(row[l]) - digamma(sum) - mom.E_log_A(k, l)));
      }
      const double sum = std::accumulate(psi.rho.begin(), psi.rho.end(), 0.0);
      for (std::size_t k = 0; k < psi.K; ++k)
        worst = std::max(worst, std::abs(digamma(psi.rho[k]) - digamma(sum) - mom.E_log_pi[k]));
    };
    SimScenario sc = s;
    veb_fit(sample_ensemble(sc).ensemble, cfg);
  }
  return {records > 0 && worst < 1e-8,
          std::to_string(records) + " M-steps, max residual " + fmt(worst, 3) + " (< 1e-8)" +
              (clamped ? ", " + std::to_string(clamped) + " clamped-beta states skip the beta relation" : "")};
}

std::vector<double> log_grid(double lo, double hi, int n) {
  std::vector<double> g(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) g[static_cast<std::size_t>(i)] = lo * std::pow(hi / lo, i / (n - 1.0));
  return g;
}

Outcome solver_round_trips() {
  double dg = 0.0, tg = 0.0, shape = 0.0, dir = 0.0;
  for (double x : log_grid(1e-3, 1e4, 400)) {
    dg = std::max(dg, std::abs(digamma(x + 1.0) - digamma(x) - 1.0 / x));
    tg = std::max(tg, std::abs(trigamma(x + 1.0) - trigamma(x) + 1.0 / (x * x)));
  }
  for (double a : log_grid(1e-2, 1e4, 400))
    shape = std::max(shape, std::abs(solve_gamma_shape(digamma(a) - std::log(a)) / a - 1.0));
  std::mt19937_64 rng(77);
  std::uniform_real_distribution<double> unif(0.1, 50.0);
  for (int rep = 0; rep < 500; ++rep) {
    std::vector<double> alpha(2 + static_cast<std::size_t>(rep) % 5);
    for (double& a : alpha) a = unif(rng);
    const double s = std::accumulate(alpha.begin(), alpha.end(), 0.0);
    std::vector<double> targets;
    for (double a : alpha) targets.push_back(digamma(s) - digamma(a));
    const auto got = match_dirichlet(targets);
    for (std::size_t l = 0; l < alpha.size(); ++l) dir = std::max(dir, std::abs(got[l] / alpha[l] - 1.0));
  }
  return {dg < 1e-12 && tg < 1e-10 && shape < 1e-6 && dir < 1e-6,
          "digamma recurrence " + fmt(dg, 3) + " (< 1e-12), trigamma recurrence " + fmt(tg, 3) +
              " (< 1e-10), gamma shape " + fmt(shape, 3) + " (< 1e-6), Dirichlet " + fmt(dir, 3) + " (< 1e-6)"};
}

struct MethodMeans {
  double occupancy = 0.0, transition = 0.0, k_eff = 0.0;
};

struct StudyCell {
  double sigma_rel = 0.0;
  MethodMeans veb, ml, vb;
};

std::vector<StudyCell> run_desk_study(double& secs) {
  const auto t0 = std::chrono::steady_clock::now();
  StudyOptions opt;
  opt.threads = default_thread_count();
  std::vector<StudyCell> cells;
  for (double sigma : {0.3, 0.5, 0.7}) {
    StudyCell c;
    c.sigma_rel = sigma;
    const int reps = 5;
    for (int r = 0; r < reps; ++r) {
      const auto res = run_cell(desk_scenario(3, sigma, replicate_seed(1, 3, sigma, static_cast<std::size_t>(r))), opt);
      auto add = [&](MethodMeans& m, const MethodScore& s) {
        m.occupancy += s.errors.occupancy_error / reps;
        m.transition += s.errors.transition_error / reps;
        m.k_eff += s.mean_abs_k_eff_error / reps;
      };
      add(c.veb, res.veb);
      add(c.ml, res.ml);
      add(c.vb, res.vb);
    }
    std::cout << "  sigma_rel=" << sigma << "  occupancy veb/ml/vb " << fmt(c.veb.occupancy) << " / "
              << fmt(c.ml.occupancy) << " / " << fmt(c.vb.occupancy) << "  transition " << fmt(c.veb.transition)
              << " / " << fmt(c.ml.transition) << " / " << fmt(c.vb.transition) << "  |dK_eff| "
              << fmt(c.veb.k_eff) << " / " << fmt(c.ml.k_eff) << " / " << fmt(c.vb.k_eff) << "\n";
    cells.push_back(c);
  }
  secs = seconds_since(t0);
  return cells;
}

Outcome count_error_trend(const std::vector<StudyCell>& cells, double secs) {
  bool ok = secs < 1800.0;
  std::string worst;
  for (const auto& c : cells) {
    const bool cell_ok = c.veb.occupancy < c.ml.occupancy && c.veb.occupancy < c.vb.occupancy &&
                         c.veb.transition < c.ml.transition && c.veb.transition < c.vb.transition;
    if (!cell_ok) worst += " sigma_rel=" + fmt(c.sigma_rel);
    ok = ok && cell_ok;
  }
  return {ok, "VEB below ML and VB in occupancy and transition error in every cell" +
                  (worst.empty() ? std::string() : " except" + worst) + "; study " + fmt(secs, 4) + " s (< 1800 s)"};
}

Outcome k_eff_trend(const std::vector<StudyCell>& cells) {
  for (const auto& c : cells) {
    if (c.sigma_rel != 0.5) continue;
    return {c.veb.k_eff < c.ml.k_eff && c.veb.k_eff < c.vb.k_eff,
            "sigma_rel=0.5 mean |K_eff - K_eff true|: veb " + fmt(c.veb.k_eff) + ", ml " + fmt(c.ml.k_eff) + ", vb " +
                fmt(c.vb.k_eff)};
  }
  return {false, "no sigma_rel=0.5 cell"};
}

Outcome overfit_resistance() {
  const auto sim = sample_ensemble(desk_scenario(2, 0.5, 4242));
  VebConfig cfg;
  cfg.K = 4;
  cfg.seed = 4242;
  cfg.threads = default_thread_count();
  const auto fit = veb_fit(sim.ensemble, cfg);
  std::vector<double> occ(4, 0.0);
  for (const auto& p : fit.posteriors)
    for (std::size_t t = 0; t < p.gamma.rows(); ++t)
      for (std::size_t k = 0; k < 4; ++k) occ[k] += p.gamma(t, k);
  const double total = std::accumulate(occ.begin(), occ.end(), 0.0);
  std::sort(occ.begin(), occ.end());
  const double small = (occ[0] + occ[1]) / total;

  double heldout[2] = {0.0, 0.0};
  const std::size_t Ks[2] = {2, 4};
  for (int i = 0; i < 2; ++i)
    for (const auto& f : crossval_heldout(sim.ensemble, Ks[i], 10, cfg)) heldout[i] += f.heldout_elbo;
  const double excess = (heldout[1] - heldout[0]) / std::abs(heldout[0]);
  return {small < 0.10 && excess <= 1e-3,
          "two least-occupied of 4 states hold " + fmt(100.0 * small, 3) + "% (< 10%); held-out bound K=2 " +
              fmt(heldout[0], 8) + ", K=4 " + fmt(heldout[1], 8) + ", relative excess " + fmt(excess, 3) +
              " (<= 1e-3)"};
}

// Means of delta_g_posterior against Dirichlet draws built from an
// independent gamma generator.
Outcome delta_g_machinery() {
  const std::vector<Matrix> fixtures = [] {
    std::vector<Matrix> f;
    Matrix a(2, 2);
    a(0, 0) = 8; a(0, 1) = 2; a(1, 0) = 9; a(1, 1) = 1;
    f.push_back(a);
    Matrix b(3, 3);
    const double bv[3][3] = {{5, 1, 2}, {1, 6, 1}, {2, 2, 4}};
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 3; ++j) b(i, j) = bv[i][j];
    f.push_back(b);
    Matrix c(4, 4);
    const double cv[4][4] = {{20, 0.5, 1, 3}, {2, 15, 0.7, 1}, {1, 1, 30, 2}, {0.6, 3, 2, 12}};
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < 4; ++j) c(i, j) = cv[i][j];
    f.push_back(c);
    return f;
  }();
  const std::size_t n = 200000;
  double worst_z = 0.0;
  for (std::size_t f = 0; f < fixtures.size(); ++f) {
    const auto& alpha = fixtures[f];
    const std::size_t K = alpha.rows();
    const auto post = delta_g_posterior(alpha, n, 1000 + f);
    oracle::IndependentGamma gamma(static_cast<std::uint32_t>(555 + f));
    std::vector<double> sum(K, 0.0), sq(K, 0.0);
    Matrix A(K, K);
    for (std::size_t s = 0; s < n; ++s) {
      for (std::size_t k = 0; k < K; ++k) {
        double tot = 0.0;
        for (std::size_t l = 0; l < K; ++l) tot += A(k, l) = gamma(alpha(k, l));
        for (std::size_t l = 0; l < K; ++l) A(k, l) /= tot;
      }
      for (std::size_t k = 0; k < K; ++k) {
        double inflow = 0.0;
        for (std::size_t j = 0; j < K; ++j)
          if (j != k) inflow += A(j, k);
        const double v = std::log(1.0 - A(k, k)) - std::log(inflow);
        sum[k] += v;
        sq[k] += v * v;
      }
    }
    for (std::size_t k = 0; k < K; ++k) {
      const auto& lib = post.samples[k];
      double ls = 0.0, lq = 0.0;
      for (double v : lib) {
        ls += v;
        lq += v * v;
      }
      const double nn = static_cast<double>(n);
      const double lm = ls / nn, om = sum[k] / nn;
      const double se = std::sqrt((lq / nn - lm * lm) / nn + (sq[k] / nn - om * om) / nn);
      worst_z = std::max(worst_z, std::abs(lm - om) / se);
    }
  }
  const auto two = delta_g_posterior(fixtures[0], 10000, 7);
  bool antisymmetric = true;
  for (std::size_t s = 0; s < 10000; ++s) antisymmetric = antisymmetric && two.samples[0][s] == -two.samples[1][s];
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(0.01, 0.99);
  for (int i = 0; i < 10000; ++i) {
    Matrix A(2, 2);
    A(0, 1) = u(rng);
    A(0, 0) = 1.0 - A(0, 1);
    A(1, 0) = u(rng);
    A(1, 1) = 1.0 - A(1, 0);
    const auto dg = delta_g(A);
    antisymmetric = antisymmetric && dg[0] == -dg[1];
  }
  return {worst_z < 3.0 && antisymmetric,
          "3 fixtures (K=2,3,4), max |mean difference| " + fmt(worst_z, 3) + " SE (< 3); K=2 antisymmetry " +
              (antisymmetric ? "exact" : "violated")};
}

Outcome cli_determinism() {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "vebhmm_acceptance_determinism";
  fs::remove_all(dir);
  auto p = [&](const std::string& rel) { return (dir / rel).string(); };
  SimScenario s;
  s.K = 3;
  s.N = 24;
  s.mean_length = 60.0;
  s.sigma_rel = 0.4;
  s.seed = 31;
  write_json_file(dir / "scenario.json", to_json(s));
  Json grid;
  grid["scenario"] = {{"N", 10}, {"mean_length", 40}};
  grid["K"] = {2};
  grid["sigma_rel"] = {0.3, 0.6};
  grid["replicates"] = 2;
  grid["restarts"] = 2;
  grid["seed"] = 5;
  write_json_file(dir / "grid.json", grid);

  std::ostringstream sink;
  auto run = [&](std::vector<std::string> args) {
    return cli::run_command(args, sink, sink, [](const char*) -> const char* { return nullptr; });
  };
  const std::vector<std::string> payloads = {"sim/truth.json",          "sim/traces.csv",
                                             "fit/run_report.json",     "fit/baseline_report.json",
                                             "fit/error_report.json",   "cv/crossval_report.json",
                                             "sweep/sweep_report.json", "sweep/sweep_table.csv"};
  int failures = 0;
  std::vector<std::vector<std::string>> captured;
  const std::vector<std::string> thread_counts = {"1", "8", "1"};
  for (const auto& t : thread_counts) {
    for (const char* sub : {"sim", "fit", "cv", "sweep"}) fs::remove_all(dir / sub);
    failures += run({"simulate", "--scenario", p("scenario.json"), "--out", p("sim")}) != 0;
    failures += run({"fit", "--traces", p("sim/traces.csv"), "--states", "3", "--out", p("fit"), "--seed", "2",
                     "--restarts", "3", "--threads", t}) != 0;
    failures += run({"baselines", "--traces", p("sim/traces.csv"), "--states", "3", "--out", p("fit"), "--threads",
                     t}) != 0;
    failures += run({"evaluate", "--fit", p("fit"), "--truth", p("sim")}) != 0;
    failures += run({"crossval", "--traces", p("sim/traces.csv"), "--states", "2,3", "--folds", "4", "--restarts",
                     "2", "--out", p("cv"), "--threads", t}) != 0;
    failures += run({"sweep", "--scenario-grid", p("grid.json"), "--out", p("sweep"), "--threads", t}) != 0;
    std::vector<std::string> docs;
    for (const auto& rel : payloads) docs.push_back(fs::exists(p(rel)) ? read_text_file(p(rel)) : std::string());
    captured.push_back(std::move(docs));
  }
  std::string differing;
  for (std::size_t i = 0; i < payloads.size(); ++i) {
    bool same = !captured[0][i].empty();
    for (std::size_t r = 1; r < captured.size(); ++r) same = same && captured[r][i] == captured[0][i];
    if (!same) differing += " " + payloads[i];
  }
  fs::remove_all(dir);
  return {failures == 0 && differing.empty(),
          std::to_string(payloads.size()) + " payloads from all 6 subcommands, threads 1, 8, 1 again: " +
              (differing.empty() ? "byte-identical" : "differ:" + differing) +
              (failures ? ", " + std::to_string(failures) + " commands failed" : "")};
}

}  // namespace

int main(int argc, char** argv) {
  const std::string only = argc > 1 ? argv[1] : "";
  int failed = 0, ran = 0;
  auto report = [&](const std::string& name, const std::function<Outcome()>& fn) {
    if (!only.empty() && name.find(only) == std::string::npos) return;
    ++ran;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " [" << name << "] " << o.detail << " (" << fmt(seconds_since(t0), 3)
              << " s)" << std::endl;
  };

  report("oracle-equivalence", oracle_equivalence);
  report("monotonicity", monotonicity);
  report("mstep-fixed-point", mstep_fixed_point);
  report("solver-round-trips", solver_round_trips);

  double study_secs = 0.0;
  std::vector<StudyCell> cells;
  std::string study_error;
  const bool need_study = only.empty() || std::string("count-error-trend k-eff-trend").find(only) != std::string::npos;
  try {
    if (need_study) cells = run_desk_study(study_secs);
  } catch (const std::exception& e) {
    study_error = e.what();
  }
  report("count-error-trend", [&] {
    return study_error.empty() ? count_error_trend(cells, study_secs) : Outcome{false, "exception: " + study_error};
  });
  report("k-eff-trend", [&] {
    return study_error.empty() ? k_eff_trend(cells) : Outcome{false, "exception: " + study_error};
  });
  report("overfit-resistance", overfit_resistance);
  report("delta-g-machinery", delta_g_machinery);
  report("cli-determinism", cli_determinism);

  std::cout << (failed ? "FAILED " : "ALL PASSED ") << ran - failed << "/" << ran << " criteria" << std::endl;
  return failed;
}
