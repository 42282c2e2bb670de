#include "vebhmm/io.hpp"

#include <gtest/gtest.h>

#include <cstring>
#include <limits>
#include <random>
#include <sstream>

using namespace vebhmm;

namespace {

Ensemble csv(const std::string& text) {
  std::istringstream in(text);
  return read_traces_csv(in, "fixture.csv");
}

Ensemble jsonl(const std::string& text) {
  std::istringstream in(text);
  return read_traces_jsonl(in, "fixture.jsonl");
}

std::string error_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const DataError& e) {
    return e.what();
  }
  return "";
}

bool contains(const std::string& s, const std::string& what) { return s.find(what) != std::string::npos; }

Ensemble random_ensemble(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> n_dist(1, 6), t_dist(2, 40), exp_dist(-300, 300);
  std::normal_distribution<double> normal;
  Ensemble e;
  const int N = n_dist(rng);
  for (int n = 0; n < N; ++n) {
    Trace t;
    t.id = "trace-" + std::to_string(n) + (n % 2 ? "_x" : "");
    const int T = t_dist(rng);
    for (int i = 0; i < T; ++i) {
      double v = normal(rng);
      if (i % 7 == 3) v = std::ldexp(v, exp_dist(rng) * 3);
      if (i % 11 == 5) v = std::nextafter(0.0, 1.0);
      t.x.push_back(v);
    }
    e.traces.push_back(std::move(t));
  }
  return e;
}

}  // namespace

TEST(ReadTracesCsv, TwoTraceFixture) {
  const auto e = csv("trace_id,t,value\na,0,0.1\na,1,0.2\na,2,0.3\nb,0,1.5\nb,1,-2e-3\n");
  ASSERT_EQ(e.size(), 2u);
  EXPECT_EQ(e.traces[0].id, "a");
  EXPECT_EQ(e.traces[0].x, (std::vector<double>{0.1, 0.2, 0.3}));
  EXPECT_EQ(e.traces[1].id, "b");
  EXPECT_EQ(e.traces[1].x, (std::vector<double>{1.5, -2e-3}));
}

TEST(ReadTracesCsv, InterleavedRowsAreGroupedInFirstAppearanceOrder) {
  const auto e = csv("trace_id,t,value\nz,5,1\nb,0,2\nz,6,3\nb,1,4\nz,7,5\n");
  ASSERT_EQ(e.size(), 2u);
  EXPECT_EQ(e.traces[0].id, "z");
  EXPECT_EQ(e.traces[0].x, (std::vector<double>{1, 3, 5}));
  EXPECT_EQ(e.traces[1].x, (std::vector<double>{2, 4}));
}

TEST(ReadTracesCsv, CrlfBomAndBlankLines) {
  const auto e = csv("\xEF\xBB\xBFtrace_id,t,value\r\na,0,1.25\r\n\r\na,1,+2\r\n");
  ASSERT_EQ(e.size(), 1u);
  EXPECT_EQ(e.traces[0].x, (std::vector<double>{1.25, 2.0}));
}

TEST(ReadTracesCsv, GapNamesTraceAndIndex) {
  const auto msg = error_of([] { csv("trace_id,t,value\na,0,1\na,1,1\na,3,1\n"); });
  EXPECT_TRUE(contains(msg, "gap")) << msg;
  EXPECT_TRUE(contains(msg, "'a'")) << msg;
  EXPECT_TRUE(contains(msg, "index 2")) << msg;
  EXPECT_TRUE(contains(msg, "fixture.csv:4:")) << msg;
}

TEST(ReadTracesCsv, NonMonotoneAndDuplicateT) {
  auto msg = error_of([] { csv("trace_id,t,value\na,0,1\na,1,1\na,0,1\n"); });
  EXPECT_TRUE(contains(msg, "non-monotone")) << msg;
  EXPECT_TRUE(contains(msg, ":4:")) << msg;
  msg = error_of([] { csv("trace_id,t,value\nb,0,1\nb,1,1\nb,1,2\n"); });
  EXPECT_TRUE(contains(msg, "duplicate t=1")) << msg;
  EXPECT_TRUE(contains(msg, "'b'")) << msg;
}

TEST(ReadTracesCsv, ParseErrorsCarryLineNumbers) {
  EXPECT_TRUE(contains(error_of([] { csv("trace_id,t,value\na,0,1\na,1,abc\n"); }), "fixture.csv:3:"));
  EXPECT_TRUE(contains(error_of([] { csv("trace_id,t,value\na,0,1\na,x,1\n"); }), ":3: t is not an integer"));
  EXPECT_TRUE(contains(error_of([] { csv("trace_id,t,value\na,0\n"); }), ":2: expected 3"));
  EXPECT_TRUE(contains(error_of([] { csv("trace_id,t,value\na,0,1,5\n"); }), ":2: expected 3"));
  EXPECT_TRUE(contains(error_of([] { csv("trace_id,t,value\na,0,nan\n"); }), ":2: value"));
  EXPECT_TRUE(contains(error_of([] { csv("trace_id,t,value\n,0,1\n"); }), "empty trace_id"));
}

TEST(ReadTracesCsv, RequiresHeaderAndData) {
  EXPECT_TRUE(contains(error_of([] { csv("a,0,1\na,1,2\n"); }), ":1: expected header"));
  EXPECT_TRUE(contains(error_of([] { csv("id,time,value\n"); }), "expected header"));
  EXPECT_FALSE(error_of([] { csv(""); }).empty());
  EXPECT_TRUE(contains(error_of([] { csv("trace_id,t,value\n"); }), "no data rows"));
}

TEST(ReadTracesCsv, CommaDecimalIsRejected) {
  EXPECT_FALSE(error_of([] { csv("trace_id,t,value\na,0,1,5\n"); }).empty());
  EXPECT_FALSE(error_of([] { csv("trace_id,t,value\na,0,1.5e\n"); }).empty());
}

TEST(ReadTracesJsonl, ObjectsPerLine) {
  const auto e = jsonl("{\"id\": \"a\", \"x\": [1, 2.5, -3]}\r\n\n{\"id\": 7, \"x\": [0.5, 0.25]}\n");
  ASSERT_EQ(e.size(), 2u);
  EXPECT_EQ(e.traces[0].x, (std::vector<double>{1, 2.5, -3}));
  EXPECT_EQ(e.traces[1].id, "7");
}

TEST(ReadTracesJsonl, Errors) {
  EXPECT_TRUE(contains(error_of([] { jsonl("{\"id\":\"a\",\"x\":[1,2]}\n{\"id\":\"b\",\"x\":[1,\n"); }),
                       "fixture.jsonl:2: invalid JSON"));
  EXPECT_TRUE(contains(error_of([] { jsonl("{\"id\":\"a\"}\n"); }), ":1: expected an object"));
  EXPECT_TRUE(contains(error_of([] { jsonl("{\"id\":\"a\",\"x\":[1,\"q\"]}\n"); }), "x[1]"));
  EXPECT_TRUE(contains(error_of([] { jsonl("{\"id\":\"a\",\"x\":[1]}\n{\"id\":\"a\",\"x\":[2]}\n"); }),
                       ":2: duplicate trace id"));
  EXPECT_TRUE(contains(error_of([] { jsonl("{\"id\":1.5,\"x\":[1]}\n"); }), "'id'"));
  EXPECT_TRUE(contains(error_of([] { jsonl("\n"); }), "no traces"));
}

TEST(WriteTraces, RoundTripIsIdentity) {
  std::mt19937_64 rng(17);
  for (int rep = 0; rep < 50; ++rep) {
    const auto e = random_ensemble(rng);
    std::ostringstream c, j;
    write_traces_csv(c, e);
    write_traces_jsonl(j, e);
    EXPECT_EQ(csv(c.str()), e);
    EXPECT_EQ(jsonl(j.str()), e);
  }
}

TEST(WriteTraces, RejectsIdsThatBreakCsv) {
  Ensemble e;
  e.traces.push_back({"a,b", {1.0, 2.0}});
  std::ostringstream os;
  EXPECT_THROW(write_traces_csv(os, e), DataError);
}

TEST(WriteTraces, FilesByExtension) {
  const auto dir = std::filesystem::temp_directory_path() / "vebhmm_io_test";
  std::filesystem::remove_all(dir);
  Ensemble e;
  e.traces.push_back({"one", {0.1, 0.2, 0.3}});
  e.traces.push_back({"two", {1e-300, -4.0}});
  for (const char* name : {"t.csv", "t.jsonl"}) {
    const auto path = dir / name;
    write_traces(path, e, format_from_path(path));
    EXPECT_EQ(read_traces(path, format_from_path(path)), e);
  }
  EXPECT_EQ(format_from_path("x.jsonl"), TraceFormat::jsonl);
  EXPECT_EQ(format_from_path("x.txt"), TraceFormat::csv);
  EXPECT_THROW(read_traces(dir / "missing.csv", TraceFormat::csv), DataError);
  std::filesystem::remove_all(dir);
}

TEST(FormatDouble, ShortestRoundTrip) {
  std::mt19937_64 rng(3);
  for (int i = 0; i < 100000; ++i) {
    std::uint64_t bits = rng();
    double v;
    std::memcpy(&v, &bits, sizeof v);
    if (!std::isfinite(v)) continue;
    double back = 0.0;
    const auto s = format_double(v);
    ASSERT_TRUE(detail::parse_double(s, back)) << s;
    ASSERT_EQ(back, v) << s;
  }
  EXPECT_EQ(format_double(0.1), "0.1");
  EXPECT_EQ(format_double(2.0), "2");
}

TEST(JsonConversion, HyperparametersRoundTrip) {
  Hyperparameters psi(2);
  psi.m = {0.1, 0.30000000000000004};
  psi.beta = {1e-6, 1e9};
  psi.alpha(0, 1) = 2.5;
  psi.rho = {0.7, 1.3};
  const auto back = hyperparameters_from_json(Json::parse(to_json(psi).dump()));
  EXPECT_EQ(back, psi);
  Json bad = to_json(psi);
  bad["beta"][0] = -1.0;
  EXPECT_THROW(hyperparameters_from_json(bad), DataError);
  bad = to_json(psi);
  bad.erase("rho");
  EXPECT_THROW(hyperparameters_from_json(bad), DataError);
}

TEST(JsonConversion, ScenarioFieldsMirrorTheStruct) {
  SimScenario s;
  s.K = 4;
  s.sigma_rel = 0.7;
  s.seed = 99;
  s.fixed_length = true;
  const auto back = scenario_from_json(Json::parse(to_json(s).dump()));
  EXPECT_EQ(to_json(back), to_json(s));
  EXPECT_EQ(back.K, 4u);
  EXPECT_EQ(back.seed, 99u);
  EXPECT_THROW(scenario_from_json(Json{{"sigma", 0.3}}), UsageError);
  EXPECT_THROW(scenario_from_json(Json{{"K", "three"}}), UsageError);
  EXPECT_THROW(scenario_from_json(Json::array()), UsageError);
  EXPECT_EQ(scenario_from_json(Json::object()).K, SimScenario{}.K);
}

TEST(JsonConversion, VebConfigRoundTrip) {
  VebConfig c;
  c.K = 3;
  c.restarts = 2;
  c.seed = 12;
  c.init = InitStrategy::quantile;
  c.fit.max_vb_iterations = 17;
  c.solver.abs_tolerance = 1e-9;
  c.initial_psi = Hyperparameters(3);
  const auto back = veb_config_from_json(Json::parse(to_json(c).dump()));
  EXPECT_EQ(to_json(back), to_json(c));
  EXPECT_EQ(back.init, InitStrategy::quantile);
  ASSERT_TRUE(back.initial_psi.has_value());
  EXPECT_EQ(*back.initial_psi, *c.initial_psi);
  EXPECT_FALSE(to_json(c).contains("threads"));
  EXPECT_THROW(veb_config_from_json(Json{{"init", "random"}}), UsageError);
  EXPECT_THROW(veb_config_from_json(Json{{"fit", {{"tolerance", 1.0}}}}), UsageError);
  EXPECT_THROW(veb_config_from_json(Json{{"threads", 4}}), UsageError);
}

TEST(JsonConversion, MatrixShapeChecks) {
  Matrix m(2, 3);
  m(1, 2) = 4.5;
  EXPECT_EQ(matrix_from_json(to_json(m), "m"), m);
  EXPECT_THROW(matrix_from_json(Json::parse("[[1,2],[3]]"), "m"), DataError);
  EXPECT_THROW(matrix_from_json(Json::parse("[]"), "m"), DataError);
  EXPECT_THROW(matrix_from_json(Json::parse("[[1,\"a\"]]"), "m"), DataError);
}
