#pragma once

// Command line front end: subcommands simulate, fit, baselines, evaluate,
// crossval and sweep. Every subcommand writes its results under one output
// directory as a JSON payload plus a separate <payload>.timing.json.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "vebhmm/baselines.hpp"
#include "vebhmm/empirical_bayes.hpp"
#include "vebhmm/errors.hpp"
#include "vebhmm/evaluation.hpp"
#include "vebhmm/io.hpp"
#include "vebhmm/parallel.hpp"
#include "vebhmm/simulator.hpp"
#include "vebhmm/study.hpp"
#include "vebhmm/vb_hmm.hpp"

namespace vebhmm::cli {

enum ExitCode : int { kExitOk = 0, kExitInternal = 1, kExitUsage = 2, kExitData = 3, kExitNumeric = 4 };

using EnvLookup = std::function<const char*(const char*)>;

inline const char* system_env(const char* name) { return std::getenv(name); }

// --threads, then VEBHMM_THREADS, then the hardware concurrency.
inline unsigned resolve_threads(int flag, const EnvLookup& env) {
  if (flag != 0) {
    if (flag < 1) throw UsageError("--threads must be >= 1");
    return static_cast<unsigned>(flag);
  }
  if (const char* v = env ? env("VEBHMM_THREADS") : nullptr; v && *v) {
    long long n = 0;
    if (!detail::parse_long(v, n) || n < 1 || n > 4096)
      throw UsageError(std::string("VEBHMM_THREADS must be a positive integer, got '") + v + "'");
    return static_cast<unsigned>(n);
  }
  return default_thread_count();
}

class Stopwatch {
 public:
  void lap(const std::string& stage) {
    const auto now = Clock::now();
    stages_[stage] = std::chrono::duration<double>(now - last_).count();
    last_ = now;
  }

  Json to_json(const std::string& command, unsigned threads) const {
    Json j;
    j["schema"] = "vebhmm.timing";
    j["schema_version"] = kSchemaVersion;
    j["command"] = command;
    j["threads"] = threads;
    j["wall_seconds"] = std::chrono::duration<double>(Clock::now() - start_).count();
    j["stages"] = Json::object();
    for (const auto& [k, v] : stages_) j["stages"][k] = v;
    return j;
  }

 private:
  using Clock = std::chrono::steady_clock;
  Clock::time_point start_ = Clock::now();
  Clock::time_point last_ = start_;
  std::map<std::string, double> stages_;
};

inline Json envelope(const char* schema, const char* command) {
  Json j;
  j["schema"] = schema;
  j["schema_version"] = kSchemaVersion;
  j["command"] = command;
  return j;
}

// A config file may be the bare object or a report that echoes it.
inline Json unwrap_config(const Json& j) {
  if (j.is_object() && j.contains("schema") && j.contains("config")) return j["config"];
  return j;
}

inline void finish(const std::filesystem::path& dir, const char* name, const Json& payload,
                   const Stopwatch& clock, const char* command, unsigned threads) {
  write_json_file(dir / name, payload);
  write_json_file(dir / (std::filesystem::path(name).stem().string() + ".timing.json"),
                  clock.to_json(command, threads));
}

// ---- simulate ----

struct SimulateOptions {
  std::string scenario;
  std::string out;
  std::string format = "csv";
  std::optional<std::uint64_t> seed;
};

inline Json truth_to_json(const SimOutput& sim, std::size_t K) {
  Json traces = Json::array();
  for (std::size_t n = 0; n < sim.ensemble.size(); ++n) {
    Json t;
    t["id"] = sim.ensemble.traces[n].id;
    t["T"] = sim.ensemble.traces[n].length();
    t["k_eff"] = effective_states(sim.truth.z[n], K);
    t["z"] = sim.truth.z[n];
    t["xi0"] = to_json(sim.truth.xi0[n]);
    const auto& th = sim.truth.theta[n];
    t["theta"] = {{"mu", th.mu}, {"lambda", th.lambda}, {"A", to_json(th.A)}, {"pi", th.pi}};
    traces.push_back(std::move(t));
  }
  return traces;
}

inline int cmd_simulate(const SimulateOptions& o, std::ostream& out) {
  Stopwatch clock;
  const Json doc = unwrap_config(read_json_file(o.scenario));
  SimScenario s = scenario_from_json(doc.contains("scenario") ? doc["scenario"] : doc);
  if (o.seed) s.seed = *o.seed;
  const auto format = parse_trace_format(o.format);
  const SimOutput sim = sample_ensemble(s);
  clock.lap("simulate");

  const std::filesystem::path dir(o.out);
  const auto traces_name = std::string("traces.") + to_string(format);
  write_traces(dir / traces_name, sim.ensemble, format);
  Json j = envelope("vebhmm.truth", "simulate");
  j["config"] = {{"scenario", to_json(s)}, {"format", to_string(format)}};
  j["traces_file"] = traces_name;
  j["psi_true"] = to_json(sim.psi_true);
  j["traces"] = truth_to_json(sim, s.K);
  clock.lap("write");
  finish(dir, "truth.json", j, clock, "simulate", 1);
  out << "simulated " << sim.ensemble.size() << " traces (" << sim.ensemble.total_length()
      << " points) into " << dir.string() << "\n";
  return kExitOk;
}

// ---- fit ----

struct FitOptions {
  std::string traces;
  std::string out;
  std::string format;
  std::string config;
  std::string init;
  std::size_t states = 0;
  int restarts = 0;
  std::uint64_t seed = 0;
  int threads = 0;
  int max_outer = 0;
  double outer_tol = 0.0;
  std::size_t delta_g_samples = 10000;
  std::size_t bins = kDefaultHistogramBins;
  // which flags were given on the command line
  bool has_seed = false, has_delta_g = false, has_bins = false;
};

struct Histograms {
  Histogram pooled;
  std::vector<Histogram> per_state;
  std::vector<double> weight;
};

// Observations pooled over traces, and split across states by q(z).
inline Histograms observation_histograms(const Ensemble& ens, const std::vector<TracePosterior>& post,
                                         std::size_t K, std::size_t bins) {
  std::vector<double> xs;
  xs.reserve(ens.total_length());
  for (const auto& t : ens.traces) xs.insert(xs.end(), t.x.begin(), t.x.end());
  const auto [lo, hi] = std::minmax_element(xs.begin(), xs.end());
  Histograms h;
  h.pooled = make_histogram(xs, bins, *lo, *hi);
  std::vector<double> w(xs.size());
  for (std::size_t k = 0; k < K; ++k) {
    std::size_t i = 0;
    double total = 0.0;
    for (const auto& p : post)
      for (std::size_t t = 0; t < p.gamma.rows(); ++t) total += w[i++] = p.gamma(t, k);
    h.per_state.push_back(make_histogram(xs, bins, *lo, *hi, w));
    h.weight.push_back(total / static_cast<double>(xs.size()));
  }
  return h;
}

inline Json histograms_to_json(const Histograms& h) {
  Json j;
  j["pooled"] = to_json(h.pooled);
  j["per_state"] = Json::array();
  for (std::size_t k = 0; k < h.per_state.size(); ++k) {
    Json s = to_json(h.per_state[k]);
    s["weight"] = h.weight[k];
    j["per_state"].push_back(std::move(s));
  }
  return j;
}

inline VebConfig resolve_veb_config(const Json* base, std::size_t states, int restarts,
                                    std::optional<std::uint64_t> seed, const std::string& init,
                                    int max_outer, double outer_tol) {
  VebConfig cfg;
  cfg.K = 0;
  if (base) cfg = veb_config_from_json(*base, cfg);
  if (states != 0) cfg.K = states;
  if (cfg.K == 0) throw UsageError("number of states not given (--states or config K)");
  if (restarts != 0) cfg.restarts = restarts;
  if (seed) cfg.seed = *seed;
  if (!init.empty()) cfg.init = parse_init_strategy(init);
  if (max_outer != 0) cfg.max_outer_iterations = max_outer;
  if (outer_tol != 0.0) cfg.outer_rel_tolerance = outer_tol;
  cfg.validate();
  return cfg;
}

struct TraceInput {
  std::string path;
  TraceFormat format;
};

inline TraceInput resolve_input(const std::string& flag_path, const std::string& flag_format,
                                const Json& echoed) {
  TraceInput in;
  in.path = flag_path;
  if (in.path.empty() && echoed.is_object() && echoed.contains("traces")) in.path = echoed["traces"].get<std::string>();
  if (in.path.empty()) throw UsageError("no trace file given (--traces)");
  if (!flag_format.empty())
    in.format = parse_trace_format(flag_format);
  else if (flag_path.empty() && echoed.contains("format"))
    in.format = parse_trace_format(echoed["format"].get<std::string>());
  else
    in.format = format_from_path(in.path);
  return in;
}

inline Json input_summary(const TraceInput& in, const Ensemble& ens) {
  return {{"traces", in.path}, {"format", to_string(in.format)}, {"n_traces", ens.size()},
          {"total_length", ens.total_length()}};
}

inline int cmd_fit(const FitOptions& o, const EnvLookup& env, std::ostream& out) {
  Stopwatch clock;
  Json echoed = Json::object();
  if (!o.config.empty()) echoed = unwrap_config(read_json_file(o.config));
  const Json* veb_base = nullptr;
  if (echoed.contains("veb"))
    veb_base = &echoed["veb"];
  else if (!o.config.empty())
    veb_base = &echoed;
  std::size_t dg_samples = o.delta_g_samples, bins = o.bins;
  if (!o.has_delta_g && echoed.contains("delta_g_samples")) dg_samples = echoed["delta_g_samples"].get<std::size_t>();
  if (!o.has_bins && echoed.contains("histogram_bins")) bins = echoed["histogram_bins"].get<std::size_t>();
  if (bins < 1) throw UsageError("--bins must be >= 1");

  VebConfig cfg = resolve_veb_config(veb_base, o.states, o.restarts,
                                     o.has_seed ? std::optional<std::uint64_t>(o.seed) : std::nullopt,
                                     o.init, o.max_outer, o.outer_tol);
  const TraceInput input = resolve_input(o.traces, o.format, echoed);
  cfg.threads = resolve_threads(o.threads, env);

  const Ensemble ens = read_traces(input.path, input.format);
  require_valid(ens);
  clock.lap("read");
  const VebResult fit = veb_fit(ens, cfg);
  clock.lap("veb_fit");

  const std::size_t K = cfg.K;
  Json j = envelope("vebhmm.run_report", "fit");
  j["config"] = {{"traces", input.path}, {"format", to_string(input.format)}, {"veb", to_json(cfg)},
                 {"delta_g_samples", dg_samples}, {"histogram_bins", bins}};
  j["input"] = input_summary(input, ens);
  j["psi_star"] = to_json(fit.psi_star);
  j["elbo"] = {{"total", fit.elbo()}, {"history", fit.elbo_history}, {"restart_elbos", fit.restart_elbos},
               {"best_restart", fit.best_restart}};
  j["ensemble_bic"] = ensemble_bic(fit.elbo(), K, ens.size());
  Json status = Json::array();
  for (auto s : fit.last_status) status.push_back(to_string(s));
  j["state_status"] = status;

  std::vector<double> occupancy(K, 0.0);
  Json traces = Json::array();
  std::vector<Matrix> hat_alpha;
  for (std::size_t n = 0; n < ens.size(); ++n) {
    const auto& post = fit.posteriors[n];
    std::vector<double> occ(K, 0.0);
    for (std::size_t t = 0; t < post.gamma.rows(); ++t)
      for (std::size_t k = 0; k < K; ++k) occ[k] += post.gamma(t, k);
    for (std::size_t k = 0; k < K; ++k) occupancy[k] += occ[k];
    Json tj;
    tj["id"] = ens.traces[n].id;
    tj["T"] = ens.traces[n].length();
    tj["elbo"] = post.elbo;
    tj["iterations"] = post.iterations;
    tj["terms"] = to_json(post.terms);
    tj["k_eff"] = effective_states(post.gamma);
    tj["occupancy"] = occ;
    tj["pseudocounts"] = to_json(pseudocounts(post, fit.psi_star));
    tj["viterbi"] = viterbi_path(ens.traces[n].x, post.params);
    traces.push_back(std::move(tj));
    hat_alpha.push_back(post.params.alpha);
  }
  for (double& v : occupancy) v /= static_cast<double>(ens.total_length());
  j["occupancy"] = occupancy;
  j["histograms"] = histograms_to_json(observation_histograms(ens, fit.posteriors, K, bins));
  clock.lap("summaries");
  if (K >= 2 && dg_samples > 0) {
    const auto dg = ensemble_delta_g(hat_alpha, dg_samples, cfg.seed, bins);
    Json per_state = Json::array();
    for (const auto& h : dg) per_state.push_back(to_json(h));
    j["delta_g"] = {{"samples_per_trace", dg_samples}, {"seed", cfg.seed}, {"per_state", per_state}};
  } else {
    j["delta_g"] = nullptr;
  }
  clock.lap("delta_g");
  j["traces"] = std::move(traces);

  const std::filesystem::path dir(o.out);
  finish(dir, "run_report.json", j, clock, "fit", cfg.threads);
  out << "fit K=" << K << " on " << ens.size() << " traces: elbo " << format_double(fit.elbo())
      << ", report " << (dir / "run_report.json").string() << "\n";
  return kExitOk;
}

// ---- baselines ----

struct BaselinesOptions {
  std::string traces;
  std::string out;
  std::string format;
  std::string method = "both";
  std::size_t states = 0;
  std::size_t k_max = 0;
  std::uint64_t seed = 0;
  int threads = 0;
};

inline Json baseline_to_json(const BaselineFit& fit, const Ensemble& ens) {
  Json j;
  j["method"] = to_string(fit.method);
  j["gmm"] = {{"weight", fit.mapping.gmm.weight}, {"mean", fit.mapping.gmm.mean},
              {"variance", fit.mapping.gmm.variance}, {"loglik", fit.mapping.gmm.loglik}};
  Json traces = Json::array();
  for (std::size_t n = 0; n < fit.traces.size(); ++n) {
    const auto& t = fit.traces[n];
    Json tj;
    tj["id"] = ens.traces[n].id;
    tj["T"] = ens.traces[n].length();
    tj["selected_K"] = t.K;
    tj["scores"] = t.scores;
    tj["means"] = t.means;
    tj["precisions"] = t.precisions;
    tj["A"] = to_json(t.A);
    tj["occupancy"] = t.occupancy;
    tj["k_eff"] = effective_states_from_occupancy(t.occupancy);
    tj["labels"] = fit.mapping.labels[n];
    tj["counts"] = to_json(fit.xi[n]);
    traces.push_back(std::move(tj));
  }
  j["traces"] = std::move(traces);
  return j;
}

inline int cmd_baselines(const BaselinesOptions& o, const EnvLookup& env, std::ostream& out) {
  Stopwatch clock;
  if (o.states < 1) throw UsageError("--states must be >= 1");
  const std::size_t k_max = o.k_max == 0 ? o.states : o.k_max;
  std::vector<SelectionMethod> methods;
  if (o.method == "ml" || o.method == "both") methods.push_back(SelectionMethod::ml_bic);
  if (o.method == "vb" || o.method == "both") methods.push_back(SelectionMethod::vb_elbo);
  if (methods.empty()) throw UsageError("--method must be ml, vb or both");
  const TraceInput input = resolve_input(o.traces, o.format, Json());
  const unsigned threads = resolve_threads(o.threads, env);
  const Ensemble ens = read_traces(input.path, input.format);
  require_valid(ens);
  clock.lap("read");

  Json j = envelope("vebhmm.baseline_report", "baselines");
  j["config"] = {{"traces", input.path}, {"format", to_string(input.format)}, {"K", o.states},
                 {"k_max", k_max}, {"method", o.method}, {"seed", o.seed}};
  j["input"] = input_summary(input, ens);
  j["methods"] = Json::object();
  for (auto m : methods) {
    const auto fit = run_baseline(ens, k_max, o.states, m, o.seed, threads);
    j["methods"][to_string(m)] = baseline_to_json(fit, ens);
    clock.lap(to_string(m));
  }
  const std::filesystem::path dir(o.out);
  finish(dir, "baseline_report.json", j, clock, "baselines", threads);
  out << "baselines (" << o.method << ") on " << ens.size() << " traces, report "
      << (dir / "baseline_report.json").string() << "\n";
  return kExitOk;
}

// ---- evaluate ----

struct EvaluateOptions {
  std::string fit;
  std::string truth;
  std::string out;
};

inline Matrix padded(const Matrix& m, std::size_t K) {
  Matrix out(K, K);
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) out(i, j) = m(i, j);
  return out;
}

struct MethodCounts {
  std::string name;
  std::size_t K = 0;
  std::vector<std::string> ids;
  std::vector<Matrix> xi;
  std::vector<double> k_eff;
};

inline MethodCounts read_method_counts(const std::string& name, const Json& traces, const char* key) {
  MethodCounts m;
  m.name = name;
  try {
    for (const auto& t : traces) {
      m.ids.push_back(t.at("id").get<std::string>());
      m.xi.push_back(matrix_from_json(t.at(key), name + " " + key));
      m.k_eff.push_back(t.at("k_eff").get<double>());
      if (m.xi.back().rows() != m.xi.back().cols()) throw DataError(name + ": count matrix is not square");
      if (m.K == 0) m.K = m.xi.back().rows();
      if (m.xi.back().rows() != m.K) throw DataError(name + ": count matrices differ in size");
    }
  } catch (const Json::exception& e) {
    throw DataError(name + ": malformed report: " + e.what());
  }
  if (m.ids.empty()) throw DataError(name + ": report has no traces");
  return m;
}

inline int cmd_evaluate(const EvaluateOptions& o, std::ostream& out) {
  Stopwatch clock;
  const std::filesystem::path fit_dir(o.fit), truth_dir(o.truth);
  const Json truth = read_json_file(truth_dir / "truth.json");
  const auto reference = read_method_counts("truth", truth.at("traces"), "xi0");

  std::vector<MethodCounts> methods;
  if (std::filesystem::exists(fit_dir / "run_report.json")) {
    const Json r = read_json_file(fit_dir / "run_report.json");
    methods.push_back(read_method_counts("veb", r.at("traces"), "pseudocounts"));
  }
  if (std::filesystem::exists(fit_dir / "baseline_report.json")) {
    const Json r = read_json_file(fit_dir / "baseline_report.json");
    for (const auto& [name, m] : r.at("methods").items()) methods.push_back(read_method_counts(name, m.at("traces"), "counts"));
  }
  if (methods.empty())
    throw DataError("no run_report.json or baseline_report.json in '" + fit_dir.string() + "'");
  clock.lap("read");

  Json j = envelope("vebhmm.error_report", "evaluate");
  j["config"] = {{"fit", o.fit}, {"truth", o.truth}};
  j["K_true"] = reference.K;
  j["n_traces"] = reference.ids.size();
  j["methods"] = Json::object();
  for (const auto& m : methods) {
    if (m.ids != reference.ids)
      throw DataError(m.name + ": trace ids do not match the ground truth");
    const std::size_t K = std::max(m.K, reference.K);
    std::vector<Matrix> xi, xi0;
    for (std::size_t n = 0; n < m.xi.size(); ++n) {
      xi.push_back(padded(m.xi[n], K));
      xi0.push_back(padded(reference.xi[n], K));
    }
    const ErrorReport r = count_errors(xi, xi0);
    double k_err = 0.0;
    for (std::size_t n = 0; n < m.k_eff.size(); ++n) k_err += std::abs(m.k_eff[n] - reference.k_eff[n]);
    Json mj = to_json(r);
    mj["K_fit"] = m.K;
    mj["mean_abs_k_eff_error"] = k_err / static_cast<double>(m.k_eff.size());
    j["methods"][m.name] = std::move(mj);
  }
  clock.lap("score");
  const std::filesystem::path dir = o.out.empty() ? fit_dir : std::filesystem::path(o.out);
  finish(dir, "error_report.json", j, clock, "evaluate", 1);
  for (const auto& [name, mj] : j["methods"].items())
    out << name << ": occupancy error " << format_double(mj["occupancy_error"].get<double>())
        << ", transition error " << format_double(mj["transition_error"].get<double>()) << "\n";
  return kExitOk;
}

// ---- crossval ----

struct CrossvalOptions {
  std::string traces;
  std::string out;
  std::string format;
  std::string config;
  std::string init;
  std::vector<std::size_t> states;
  std::size_t folds = 10;
  int restarts = 0;
  std::uint64_t seed = 0;
  bool has_seed = false, has_folds = false;
  int threads = 0;
};

inline int cmd_crossval(const CrossvalOptions& o, const EnvLookup& env, std::ostream& out) {
  Stopwatch clock;
  Json echoed = Json::object();
  if (!o.config.empty()) echoed = unwrap_config(read_json_file(o.config));
  std::vector<std::size_t> states = o.states;
  if (states.empty() && echoed.contains("states")) states = echoed["states"].get<std::vector<std::size_t>>();
  if (states.empty()) throw UsageError("no state counts given (--states)");
  std::size_t folds = o.folds;
  if (!o.has_folds && echoed.contains("folds")) folds = echoed["folds"].get<std::size_t>();
  const Json* veb_base = echoed.contains("veb") ? &echoed["veb"] : nullptr;
  VebConfig cfg = resolve_veb_config(veb_base, states.front(), o.restarts,
                                     o.has_seed ? std::optional<std::uint64_t>(o.seed) : std::nullopt,
                                     o.init, 0, 0.0);
  const TraceInput input = resolve_input(o.traces, o.format, echoed);
  cfg.threads = resolve_threads(o.threads, env);
  const Ensemble ens = read_traces(input.path, input.format);
  require_valid(ens);
  clock.lap("read");

  Json results = Json::array();
  for (std::size_t K : states) {
    const auto fr = crossval_heldout(ens, K, folds, cfg);
    Json fj = Json::array();
    double total = 0.0;
    for (const auto& f : fr) {
      std::vector<std::string> ids;
      for (std::size_t n : f.heldout) ids.push_back(ens.traces[n].id);
      fj.push_back({{"heldout", ids}, {"train_elbo", f.train_elbo}, {"heldout_elbo", f.heldout_elbo}});
      total += f.heldout_elbo;
    }
    results.push_back({{"K", K}, {"heldout_elbo", total}, {"folds", fj}});
    clock.lap("K=" + std::to_string(K));
    out << "K=" << K << ": held-out elbo " << format_double(total) << "\n";
  }
  Json j = envelope("vebhmm.crossval_report", "crossval");
  Json veb = to_json(cfg);
  veb.erase("K");
  j["config"] = {{"traces", input.path}, {"format", to_string(input.format)}, {"states", states},
                 {"folds", folds}, {"veb", veb}};
  j["input"] = input_summary(input, ens);
  j["results"] = std::move(results);
  finish(std::filesystem::path(o.out), "crossval_report.json", j, clock, "crossval", cfg.threads);
  return kExitOk;
}

// ---- sweep ----

struct SweepGrid {
  SimScenario scenario;
  std::vector<std::size_t> K{3};
  std::vector<double> sigma_rel{0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};
  std::size_t replicates = 5;
  std::uint64_t seed = 0;
  StudyOptions study;
};

inline Json to_json(const SweepGrid& g) {
  Json j;
  Json s = to_json(g.scenario);
  s.erase("K");
  s.erase("sigma_rel");
  s.erase("seed");
  j["scenario"] = s;
  j["K"] = g.K;
  j["sigma_rel"] = g.sigma_rel;
  j["replicates"] = g.replicates;
  j["seed"] = g.seed;
  j["restarts"] = g.study.restarts;
  j["extra_baseline_states"] = g.study.extra_baseline_states;
  j["init"] = to_string(g.study.init);
  j["outer_rel_tolerance"] = g.study.outer_rel_tolerance;
  j["max_outer_iterations"] = g.study.max_outer_iterations;
  j["fit"] = to_json(g.study.fit);
  return j;
}

inline SweepGrid sweep_grid_from_json(const Json& j) {
  SweepGrid g;
  detail::FieldReader r(j, "scenario grid");
  Json scenario, fit;
  std::string init = to_string(g.study.init);
  r.read("scenario", scenario)
      .read("K", g.K)
      .read("sigma_rel", g.sigma_rel)
      .read("replicates", g.replicates)
      .read("seed", g.seed)
      .read("restarts", g.study.restarts)
      .read("extra_baseline_states", g.study.extra_baseline_states)
      .read("init", init)
      .read("outer_rel_tolerance", g.study.outer_rel_tolerance)
      .read("max_outer_iterations", g.study.max_outer_iterations)
      .read("fit", fit);
  r.reject_unknown();
  if (!scenario.is_null()) g.scenario = scenario_from_json(scenario);
  if (!fit.is_null()) g.study.fit = fit_config_from_json(fit);
  g.study.init = parse_init_strategy(init);
  if (g.K.empty() || g.sigma_rel.empty()) throw UsageError("scenario grid: K and sigma_rel must be non-empty");
  if (g.replicates < 1) throw UsageError("scenario grid: replicates must be >= 1");
  if (g.study.restarts < 1) throw UsageError("scenario grid: restarts must be >= 1");
  return g;
}

struct Summary {
  double mean = 0.0;
  double se = 0.0;
};

inline Summary summarize(const std::vector<double>& v) {
  Summary s;
  for (double x : v) s.mean += x;
  s.mean /= static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - s.mean) * (x - s.mean);
    s.se = std::sqrt(ss / static_cast<double>(v.size() - 1) / static_cast<double>(v.size()));
  }
  return s;
}

struct MethodSummary {
  Summary occupancy, transition, k_eff;
  double pooled_occupancy = 0.0, pooled_transition = 0.0;
};

inline MethodSummary summarize_method(const std::vector<const MethodScore*>& reps) {
  std::vector<double> occ, tr, ke;
  double occ_abs = 0.0, occ_tot = 0.0, tr_abs = 0.0, tr_tot = 0.0;
  for (const auto* r : reps) {
    occ.push_back(r->errors.occupancy_error);
    tr.push_back(r->errors.transition_error);
    ke.push_back(r->mean_abs_k_eff_error);
    occ_abs += r->errors.occupancy_abs_diff;
    occ_tot += r->errors.occupancy_total;
    tr_abs += r->errors.transition_abs_diff;
    tr_tot += r->errors.transition_total;
  }
  MethodSummary m;
  m.occupancy = summarize(occ);
  m.transition = summarize(tr);
  m.k_eff = summarize(ke);
  m.pooled_occupancy = occ_tot > 0.0 ? occ_abs / occ_tot : 0.0;
  m.pooled_transition = tr_tot > 0.0 ? tr_abs / tr_tot : 0.0;
  return m;
}

inline Json score_to_json(const MethodScore& s) {
  return {{"occupancy_error", s.errors.occupancy_error}, {"transition_error", s.errors.transition_error},
          {"mean_abs_k_eff_error", s.mean_abs_k_eff_error}, {"greedy_alignment", s.errors.greedy_alignment}};
}

inline Json summary_to_json(const MethodSummary& m) {
  auto ms = [](const Summary& s) { return Json{{"mean", s.mean}, {"se", s.se}}; };
  return {{"occupancy_error", ms(m.occupancy)}, {"transition_error", ms(m.transition)},
          {"k_eff_error", ms(m.k_eff)}, {"pooled_occupancy_error", m.pooled_occupancy},
          {"pooled_transition_error", m.pooled_transition}};
}

inline int cmd_sweep(const std::string& grid_path, const std::string& out_dir, int threads_flag,
                     const EnvLookup& env, std::ostream& out) {
  Stopwatch clock;
  SweepGrid g = sweep_grid_from_json(unwrap_config(read_json_file(grid_path)));
  g.study.threads = resolve_threads(threads_flag, env);
  const std::pair<const char*, MethodScore CellResult::*> methods[] = {
      {"veb", &CellResult::veb}, {"ml", &CellResult::ml}, {"vb", &CellResult::vb}};

  Json cells = Json::array();
  std::ostringstream table;
  table << "K,sigma_rel,replicates";
  for (const auto& [name, member] : methods)
    for (const char* col : {"occupancy_error_mean", "occupancy_error_se", "transition_error_mean",
                            "transition_error_se", "k_eff_error_mean", "k_eff_error_se",
                            "pooled_occupancy_error", "pooled_transition_error"})
      table << ',' << name << '_' << col;
  table << '\n';
  for (std::size_t K : g.K) {
    for (double sigma : g.sigma_rel) {
      std::vector<CellResult> reps;
      Json rj = Json::array();
      for (std::size_t r = 0; r < g.replicates; ++r) {
        SimScenario s = g.scenario;
        s.K = K;
        s.sigma_rel = sigma;
        s.seed = replicate_seed(g.seed, K, sigma, r);
        reps.push_back(run_cell(s, g.study));
        const auto& c = reps.back();
        rj.push_back({{"seed", s.seed}, {"veb_elbo", c.veb_elbo}, {"veb", score_to_json(c.veb)},
                      {"ml", score_to_json(c.ml)}, {"vb", score_to_json(c.vb)}});
      }
      Json summary;
      std::ostringstream row;
      row << K << ',' << format_double(sigma) << ',' << g.replicates;
      for (const auto& [name, member] : methods) {
        std::vector<const MethodScore*> ptrs;
        for (const auto& c : reps) ptrs.push_back(&(c.*member));
        const auto m = summarize_method(ptrs);
        summary[name] = summary_to_json(m);
        for (double v : {m.occupancy.mean, m.occupancy.se, m.transition.mean, m.transition.se, m.k_eff.mean,
                         m.k_eff.se, m.pooled_occupancy, m.pooled_transition})
          row << ',' << format_double(v);
      }
      table << row.str() << '\n';
      out << "K=" << K << " sigma_rel=" << format_double(sigma) << ": occupancy error veb "
          << format_double(summary["veb"]["occupancy_error"]["mean"].get<double>()) << " ml "
          << format_double(summary["ml"]["occupancy_error"]["mean"].get<double>()) << " vb "
          << format_double(summary["vb"]["occupancy_error"]["mean"].get<double>()) << "\n";
      cells.push_back({{"K", K}, {"sigma_rel", sigma}, {"summary", summary}, {"replicates", rj}});
      clock.lap("K=" + std::to_string(K) + ",sigma_rel=" + format_double(sigma));
    }
  }
  Json j = envelope("vebhmm.sweep_report", "sweep");
  j["config"] = to_json(g);
  j["cells"] = std::move(cells);
  const std::filesystem::path dir(out_dir);
  write_text_file(dir / "sweep_table.csv", table.str());
  finish(dir, "sweep_report.json", j, clock, "sweep", g.study.threads);
  return kExitOk;
}

// ---- entry point ----

inline void report_error(std::ostream& err, const char* kind, int code, const std::string& message) {
  Json j;
  j["error"] = {{"kind", kind}, {"exit_code", code}, {"message", message}};
  err << j.dump() << "\n";
}

inline int run_command(int argc, const char* const* argv, std::ostream& out, std::ostream& err,
                       const EnvLookup& env = system_env) {
  CLI::App app{"Hierarchical variational Bayes HMM analysis of time-series ensembles", "vebhmm"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "vebhmm 1.0.0");

  SimulateOptions sim;
  auto* simulate = app.add_subcommand("simulate", "Draw a synthetic ensemble with ground truth");
  simulate->add_option("--scenario", sim.scenario, "Scenario JSON file")->required();
  simulate->add_option("--out", sim.out, "Output directory")->required();
  simulate->add_option("--format", sim.format, "Trace file format (csv or jsonl)");
  auto* sim_seed = simulate->add_option("--seed", "Override the scenario seed");

  FitOptions fo;
  auto* fit = app.add_subcommand("fit", "Empirical Bayes fit of a K-state ensemble model");
  fit->add_option("--traces", fo.traces, "Trace file (csv or jsonl)");
  fit->add_option("--states,-K", fo.states, "Number of consensus states");
  fit->add_option("--out", fo.out, "Output directory")->required();
  fit->add_option("--format", fo.format, "Trace file format (default: from extension)");
  fit->add_option("--config", fo.config, "Config JSON (VebConfig fields, or a previous run report)");
  fit->add_option("--restarts", fo.restarts, "Restarts per model size");
  auto* fit_seed = fit->add_option("--seed", fo.seed, "Random seed");
  fit->add_option("--threads", fo.threads, "Worker threads");
  fit->add_option("--init", fo.init, "Initialization strategy (grow or quantile)");
  fit->add_option("--max-outer", fo.max_outer, "Maximum outer iterations");
  fit->add_option("--outer-tol", fo.outer_tol, "Relative tolerance of the outer loop");
  auto* fit_dg = fit->add_option("--delta-g-samples", fo.delta_g_samples, "Monte Carlo draws per trace for free energies (0 disables)");
  auto* fit_bins = fit->add_option("--bins", fo.bins, "Histogram bins");

  BaselinesOptions bo;
  auto* baselines = app.add_subcommand("baselines", "Per-trace ML and VB fits with consensus remapping");
  baselines->add_option("--traces", bo.traces, "Trace file (csv or jsonl)")->required();
  baselines->add_option("--states,-K", bo.states, "Number of consensus states")->required();
  baselines->add_option("--k-max", bo.k_max, "Largest per-trace model (default: --states)");
  baselines->add_option("--out", bo.out, "Output directory")->required();
  baselines->add_option("--format", bo.format, "Trace file format (default: from extension)");
  baselines->add_option("--method", bo.method, "ml, vb or both");
  baselines->add_option("--seed", bo.seed, "Random seed for the remapping mixture");
  baselines->add_option("--threads", bo.threads, "Worker threads");

  EvaluateOptions eo;
  auto* evaluate = app.add_subcommand("evaluate", "Score fitted transition counts against ground truth");
  evaluate->add_option("--fit", eo.fit, "Directory with run_report.json and/or baseline_report.json")->required();
  evaluate->add_option("--truth", eo.truth, "Directory with truth.json")->required();
  evaluate->add_option("--out", eo.out, "Output directory (default: the --fit directory)");

  CrossvalOptions co;
  auto* crossval = app.add_subcommand("crossval", "Held-out lower bound by trace-level cross-validation");
  crossval->add_option("--traces", co.traces, "Trace file (csv or jsonl)");
  crossval->add_option("--states,-K", co.states, "State counts to compare, e.g. 2,4")->delimiter(',');
  auto* cv_folds = crossval->add_option("--folds", co.folds, "Number of folds");
  crossval->add_option("--out", co.out, "Output directory")->required();
  crossval->add_option("--format", co.format, "Trace file format (default: from extension)");
  crossval->add_option("--config", co.config, "Config JSON (a previous crossval report)");
  crossval->add_option("--restarts", co.restarts, "Restarts per model size");
  auto* cv_seed = crossval->add_option("--seed", co.seed, "Random seed");
  crossval->add_option("--threads", co.threads, "Worker threads");
  crossval->add_option("--init", co.init, "Initialization strategy (grow or quantile)");

  std::string grid_path, sweep_out;
  int sweep_threads = 0;
  auto* sweep = app.add_subcommand("sweep", "Simulate, fit and score every cell of a noise grid");
  sweep->add_option("--scenario-grid", grid_path, "Grid JSON file")->required();
  sweep->add_option("--out", sweep_out, "Output directory")->required();
  sweep->add_option("--threads", sweep_threads, "Worker threads");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForVersion&) {
    out << app.version() << "\n";
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    report_error(err, "usage", kExitUsage, e.what());
    return kExitUsage;
  }

  try {
    if (*simulate) {
      if (sim_seed->count()) sim.seed = sim_seed->as<std::uint64_t>();
      return cmd_simulate(sim, out);
    }
    if (*fit) {
      fo.has_seed = fit_seed->count() > 0;
      fo.has_delta_g = fit_dg->count() > 0;
      fo.has_bins = fit_bins->count() > 0;
      return cmd_fit(fo, env, out);
    }
    if (*baselines) return cmd_baselines(bo, env, out);
    if (*evaluate) return cmd_evaluate(eo, out);
    if (*crossval) {
      co.has_seed = cv_seed->count() > 0;
      co.has_folds = cv_folds->count() > 0;
      return cmd_crossval(co, env, out);
    }
    if (*sweep) return cmd_sweep(grid_path, sweep_out, sweep_threads, env, out);
  } catch (const UsageError& e) {
    report_error(err, "usage", kExitUsage, e.what());
    return kExitUsage;
  } catch (const DomainError& e) {
    report_error(err, "usage", kExitUsage, e.what());
    return kExitUsage;
  } catch (const DataError& e) {
    report_error(err, "data", kExitData, e.what());
    return kExitData;
  } catch (const Json::exception& e) {
    report_error(err, "data", kExitData, e.what());
    return kExitData;
  } catch (const std::filesystem::filesystem_error& e) {
    report_error(err, "data", kExitData, e.what());
    return kExitData;
  } catch (const NumericError& e) {
    report_error(err, "numeric", kExitNumeric, e.what());
    return kExitNumeric;
  } catch (const ConvergenceError& e) {
    report_error(err, "numeric", kExitNumeric, e.what());
    return kExitNumeric;
  } catch (const std::exception& e) {
    report_error(err, "internal", kExitInternal, e.what());
    return kExitInternal;
  }
  return kExitUsage;
}

inline int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err,
                       const EnvLookup& env = system_env) {
  std::vector<const char*> argv{"vebhmm"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return run_command(static_cast<int>(argv.size()), argv.data(), out, err, env);
}

}  // namespace vebhmm::cli
