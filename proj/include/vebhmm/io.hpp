#pragma once

// Trace files, JSON documents and the conversions between library types and
// their serialized form.

#include <charconv>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "vebhmm/empirical_bayes.hpp"
#include "vebhmm/errors.hpp"
#include "vebhmm/evaluation.hpp"
#include "vebhmm/simulator.hpp"
#include "vebhmm/trace_data.hpp"

namespace vebhmm {

using Json = nlohmann::ordered_json;

inline constexpr int kSchemaVersion = 1;

enum class TraceFormat { csv, jsonl };

inline TraceFormat parse_trace_format(std::string_view s) {
  if (s == "csv") return TraceFormat::csv;
  if (s == "jsonl") return TraceFormat::jsonl;
  throw UsageError("unknown trace format '" + std::string(s) + "' (expected csv or jsonl)");
}

inline const char* to_string(TraceFormat f) { return f == TraceFormat::csv ? "csv" : "jsonl"; }

inline TraceFormat format_from_path(const std::filesystem::path& p) {
  const auto ext = p.extension().string();
  return ext == ".jsonl" || ext == ".json" ? TraceFormat::jsonl : TraceFormat::csv;
}

// Shortest decimal form that parses back to the same double.
inline std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

namespace detail {

inline std::string located(const std::string& source, std::size_t line, const std::string& what) {
  return source + ":" + std::to_string(line) + ": " + what;
}

inline void strip_cr(std::string& line) {
  if (!line.empty() && line.back() == '\r') line.pop_back();
}

inline bool parse_double(std::string_view s, double& out) {
  if (s.empty()) return false;
  if (s.front() == '+') s.remove_prefix(1);
  const auto res = std::from_chars(s.data(), s.data() + s.size(), out);
  return res.ec == std::errc() && res.ptr == s.data() + s.size() && std::isfinite(out);
}

inline bool parse_long(std::string_view s, long long& out) {
  if (s.empty()) return false;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), out);
  return res.ec == std::errc() && res.ptr == s.data() + s.size();
}

}  // namespace detail

// CSV with header `trace_id,t,value`. Rows of one trace may be interleaved
// with other traces but must carry consecutive increasing t.
inline Ensemble read_traces_csv(std::istream& in, const std::string& source = "<csv>") {
  std::string line;
  std::size_t lineno = 0;
  if (!std::getline(in, line)) throw DataError(source + ": empty file, expected header trace_id,t,value");
  ++lineno;
  detail::strip_cr(line);
  if (line.starts_with("\xEF\xBB\xBF")) line.erase(0, 3);
  if (line != "trace_id,t,value")
    throw DataError(detail::located(source, lineno, "expected header trace_id,t,value, got '" + line + "'"));

  Ensemble ens;
  std::map<std::string, std::size_t> index;
  std::vector<long long> last_t;
  while (std::getline(in, line)) {
    ++lineno;
    detail::strip_cr(line);
    if (line.empty()) continue;
    const auto c1 = line.find(',');
    const auto c2 = c1 == std::string::npos ? c1 : line.find(',', c1 + 1);
    if (c2 == std::string::npos || line.find(',', c2 + 1) != std::string::npos)
      throw DataError(detail::located(source, lineno, "expected 3 comma-separated fields"));
    const std::string id = line.substr(0, c1);
    const std::string_view t_str(line.data() + c1 + 1, c2 - c1 - 1);
    const std::string_view v_str(line.data() + c2 + 1, line.size() - c2 - 1);
    if (id.empty()) throw DataError(detail::located(source, lineno, "empty trace_id"));
    long long t = 0;
    if (!detail::parse_long(t_str, t))
      throw DataError(detail::located(source, lineno, "t is not an integer: '" + std::string(t_str) + "'"));
    double v = 0.0;
    if (!detail::parse_double(v_str, v))
      throw DataError(detail::located(source, lineno, "value is not a finite number: '" + std::string(v_str) + "'"));

    auto [it, fresh] = index.try_emplace(id, ens.traces.size());
    if (fresh) {
      ens.traces.push_back({id, {}});
      last_t.push_back(t);
    } else {
      const long long prev = last_t[it->second];
      const std::size_t at = ens.traces[it->second].x.size();
      if (t == prev)
        throw DataError(detail::located(source, lineno, "duplicate t=" + std::to_string(t) + " in trace '" + id + "'"));
      if (t < prev)
        throw DataError(detail::located(source, lineno, "non-monotone t in trace '" + id + "' at index " +
                                                            std::to_string(at) + ": t=" + std::to_string(t) +
                                                            " after t=" + std::to_string(prev)));
      if (t != prev + 1)
        throw DataError(detail::located(source, lineno, "gap in t in trace '" + id + "' at index " +
                                                            std::to_string(at) + ": t jumps from " +
                                                            std::to_string(prev) + " to " + std::to_string(t)));
      last_t[it->second] = t;
    }
    ens.traces[it->second].x.push_back(v);
  }
  if (ens.traces.empty()) throw DataError(source + ": no data rows");
  return ens;
}

// One object per line: {"id": ..., "x": [...]}.
inline Ensemble read_traces_jsonl(std::istream& in, const std::string& source = "<jsonl>") {
  Ensemble ens;
  std::map<std::string, std::size_t> seen;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    detail::strip_cr(line);
    if (lineno == 1 && line.starts_with("\xEF\xBB\xBF")) line.erase(0, 3);
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    Json j;
    try {
      j = Json::parse(line);
    } catch (const Json::parse_error& e) {
      throw DataError(detail::located(source, lineno, std::string("invalid JSON: ") + e.what()));
    }
    if (!j.is_object() || !j.contains("id") || !j.contains("x") || !j["x"].is_array())
      throw DataError(detail::located(source, lineno, "expected an object with 'id' and array 'x'"));
    Trace t;
    if (j["id"].is_string())
      t.id = j["id"].get<std::string>();
    else if (j["id"].is_number_integer())
      t.id = std::to_string(j["id"].get<long long>());
    else
      throw DataError(detail::located(source, lineno, "'id' must be a string or integer"));
    if (t.id.empty()) throw DataError(detail::located(source, lineno, "empty id"));
    if (!seen.emplace(t.id, lineno).second)
      throw DataError(detail::located(source, lineno, "duplicate trace id '" + t.id + "'"));
    t.x.reserve(j["x"].size());
    for (std::size_t i = 0; i < j["x"].size(); ++i) {
      const auto& v = j["x"][i];
      if (!v.is_number() || !std::isfinite(v.get<double>()))
        throw DataError(detail::located(source, lineno, "x[" + std::to_string(i) + "] is not a finite number"));
      t.x.push_back(v.get<double>());
    }
    ens.traces.push_back(std::move(t));
  }
  if (ens.traces.empty()) throw DataError(source + ": no traces");
  return ens;
}

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

inline void write_text_file(const std::filesystem::path& path, std::string_view content) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out << content;
  if (!out) throw DataError("write failed for '" + path.string() + "'");
}

inline Ensemble read_traces(const std::filesystem::path& path, TraceFormat format) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  return format == TraceFormat::csv ? read_traces_csv(in, path.string())
                                    : read_traces_jsonl(in, path.string());
}

inline void write_traces_csv(std::ostream& out, const Ensemble& ens) {
  out << "trace_id,t,value\n";
  for (const auto& t : ens.traces) {
    if (t.id.empty() || t.id.find_first_of(",\r\n") != std::string::npos)
      throw DataError("trace id '" + t.id + "' cannot be written to CSV");
    for (std::size_t i = 0; i < t.x.size(); ++i) out << t.id << ',' << i << ',' << format_double(t.x[i]) << '\n';
  }
}

inline void write_traces_jsonl(std::ostream& out, const Ensemble& ens) {
  for (const auto& t : ens.traces) {
    Json j;
    j["id"] = t.id;
    j["x"] = t.x;
    out << j.dump() << '\n';
  }
}

inline void write_traces(const std::filesystem::path& path, const Ensemble& ens, TraceFormat format) {
  std::ostringstream os;
  if (format == TraceFormat::csv)
    write_traces_csv(os, ens);
  else
    write_traces_jsonl(os, ens);
  write_text_file(path, os.str());
}

inline Json parse_json(std::string_view text, const std::string& source) {
  try {
    return Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw DataError(source + ": invalid JSON: " + e.what());
  }
}

inline Json read_json_file(const std::filesystem::path& path) {
  return parse_json(read_text_file(path), path.string());
}

inline void write_json_file(const std::filesystem::path& path, const Json& j) {
  write_text_file(path, j.dump(2) + "\n");
}

// ---- library types <-> JSON ----

inline Json to_json(const Matrix& m) {
  Json rows = Json::array();
  for (std::size_t r = 0; r < m.rows(); ++r) {
    const auto row = m.row(r);
    rows.push_back(std::vector<double>(row.begin(), row.end()));
  }
  return rows;
}

inline Matrix matrix_from_json(const Json& j, const std::string& what) {
  if (!j.is_array() || j.empty()) throw DataError(what + ": expected a non-empty array of rows");
  const std::size_t R = j.size();
  const std::size_t C = j[0].is_array() ? j[0].size() : 0;
  Matrix m(R, C);
  for (std::size_t r = 0; r < R; ++r) {
    if (!j[r].is_array() || j[r].size() != C) throw DataError(what + ": ragged matrix");
    for (std::size_t c = 0; c < C; ++c) {
      if (!j[r][c].is_number()) throw DataError(what + ": non-numeric entry");
      m(r, c) = j[r][c].get<double>();
    }
  }
  return m;
}

inline Json to_json(const Hyperparameters& psi) {
  Json j;
  j["K"] = psi.K;
  j["m"] = psi.m;
  j["beta"] = psi.beta;
  j["a"] = psi.a;
  j["b"] = psi.b;
  j["alpha"] = to_json(psi.alpha);
  j["rho"] = psi.rho;
  return j;
}

inline Hyperparameters hyperparameters_from_json(const Json& j) {
  try {
    Hyperparameters psi;
    psi.K = j.at("K").get<std::size_t>();
    psi.m = j.at("m").get<std::vector<double>>();
    psi.beta = j.at("beta").get<std::vector<double>>();
    psi.a = j.at("a").get<std::vector<double>>();
    psi.b = j.at("b").get<std::vector<double>>();
    psi.alpha = matrix_from_json(j.at("alpha"), "alpha");
    psi.rho = j.at("rho").get<std::vector<double>>();
    psi.validate();
    return psi;
  } catch (const Json::exception& e) {
    throw DataError(std::string("hyperparameters: ") + e.what());
  } catch (const DomainError& e) {
    throw DataError(e.what());
  }
}

inline Json to_json(const ElboTerms& t) {
  Json j;
  j["trajectory"] = t.trajectory;
  j["kl_normal_gamma"] = t.kl_normal_gamma;
  j["kl_transitions"] = t.kl_transitions;
  j["kl_initial"] = t.kl_initial;
  j["total"] = t.total();
  return j;
}

inline Json to_json(const Histogram& h) {
  Json j;
  j["edges"] = h.edges;
  j["density"] = h.density;
  return j;
}

inline Json to_json(const ErrorReport& r) {
  Json j;
  j["occupancy_error"] = r.occupancy_error;
  j["transition_error"] = r.transition_error;
  j["alignment"] = r.alignment;
  j["occupancy_abs_diff"] = r.occupancy_abs_diff;
  j["occupancy_total"] = r.occupancy_total;
  j["transition_abs_diff"] = r.transition_abs_diff;
  j["transition_total"] = r.transition_total;
  j["greedy_alignment"] = r.greedy_alignment;
  return j;
}

namespace detail {

// Copies the keys of `j` onto fields by exact name; any other key is an error.
class FieldReader {
 public:
  FieldReader(const Json& j, std::string what) : j_(j), what_(std::move(what)) {
    if (!j.is_object()) throw UsageError(what_ + ": expected a JSON object");
  }

  template <typename T>
  FieldReader& read(const char* name, T& field) {
    known_.push_back(name);
    if (!j_.contains(name)) return *this;
    try {
      field = j_.at(name).get<T>();
    } catch (const Json::exception&) {
      throw UsageError(what_ + ": field '" + name + "' has the wrong type");
    }
    return *this;
  }

  FieldReader& skip(const char* name) {
    known_.push_back(name);
    return *this;
  }

  void reject_unknown() const {
    for (const auto& item : j_.items())
      if (std::find(known_.begin(), known_.end(), item.key()) == known_.end())
        throw UsageError(what_ + ": unknown field '" + item.key() + "'");
  }

 private:
  const Json& j_;
  std::string what_;
  std::vector<std::string> known_;
};

}  // namespace detail

inline Json to_json(const SimScenario& s) {
  Json j;
  j["K"] = s.K;
  j["N"] = s.N;
  j["mean_length"] = s.mean_length;
  j["delta_mu"] = s.delta_mu;
  j["sigma_rel"] = s.sigma_rel;
  j["mu_var_ratio"] = s.mu_var_ratio;
  j["alpha_self"] = s.alpha_self;
  j["seed"] = s.seed;
  j["fixed_length"] = s.fixed_length;
  return j;
}

inline void read_scenario_fields(detail::FieldReader& r, SimScenario& s) {
  r.read("K", s.K)
      .read("N", s.N)
      .read("mean_length", s.mean_length)
      .read("delta_mu", s.delta_mu)
      .read("sigma_rel", s.sigma_rel)
      .read("mu_var_ratio", s.mu_var_ratio)
      .read("alpha_self", s.alpha_self)
      .read("seed", s.seed)
      .read("fixed_length", s.fixed_length);
}

inline SimScenario scenario_from_json(const Json& j, SimScenario s = {}) {
  detail::FieldReader r(j, "scenario");
  read_scenario_fields(r, s);
  r.reject_unknown();
  return s;
}

inline InitStrategy parse_init_strategy(std::string_view s) {
  if (s == "grow") return InitStrategy::grow;
  if (s == "quantile") return InitStrategy::quantile;
  throw UsageError("unknown init strategy '" + std::string(s) + "' (expected grow or quantile)");
}

inline Json to_json(const FitConfig& f) {
  Json j;
  j["elbo_rel_tolerance"] = f.elbo_rel_tolerance;
  j["max_vb_iterations"] = f.max_vb_iterations;
  return j;
}

inline FitConfig fit_config_from_json(const Json& j, FitConfig f = {}) {
  detail::FieldReader r(j, "fit");
  r.read("elbo_rel_tolerance", f.elbo_rel_tolerance).read("max_vb_iterations", f.max_vb_iterations);
  r.reject_unknown();
  return f;
}

inline Json to_json(const SolverConfig& s) {
  Json j;
  j["abs_tolerance"] = s.abs_tolerance;
  j["max_iterations"] = s.max_iterations;
  return j;
}

inline SolverConfig solver_config_from_json(const Json& j, SolverConfig s = {}) {
  detail::FieldReader r(j, "solver");
  r.read("abs_tolerance", s.abs_tolerance).read("max_iterations", s.max_iterations);
  r.reject_unknown();
  return s;
}

// Worker count is left out: it never changes the payload.
inline Json to_json(const VebConfig& c) {
  Json j;
  j["K"] = c.K;
  j["outer_rel_tolerance"] = c.outer_rel_tolerance;
  j["max_outer_iterations"] = c.max_outer_iterations;
  j["restarts"] = c.restarts;
  j["seed"] = c.seed;
  j["init"] = to_string(c.init);
  j["update_hyperparameters"] = c.update_hyperparameters;
  j["fit"] = to_json(c.fit);
  j["solver"] = to_json(c.solver);
  j["initial_psi"] = c.initial_psi ? to_json(*c.initial_psi) : Json(nullptr);
  return j;
}

inline VebConfig veb_config_from_json(const Json& j, VebConfig c = {}) {
  detail::FieldReader r(j, "veb config");
  std::string init = to_string(c.init);
  Json fit, solver, initial_psi;
  r.read("K", c.K)
      .read("outer_rel_tolerance", c.outer_rel_tolerance)
      .read("max_outer_iterations", c.max_outer_iterations)
      .read("restarts", c.restarts)
      .read("seed", c.seed)
      .read("init", init)
      .read("update_hyperparameters", c.update_hyperparameters)
      .read("fit", fit)
      .read("solver", solver)
      .read("initial_psi", initial_psi);
  r.reject_unknown();
  c.init = parse_init_strategy(init);
  if (!fit.is_null()) c.fit = fit_config_from_json(fit, c.fit);
  if (!solver.is_null()) c.solver = solver_config_from_json(solver, c.solver);
  if (!initial_psi.is_null()) c.initial_psi = hyperparameters_from_json(initial_psi);
  return c;
}

}  // namespace vebhmm
