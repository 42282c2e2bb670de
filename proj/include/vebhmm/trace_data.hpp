#pragma once

#include <cmath>
#include <cstddef>
#include <sstream>
#include <string>
#include <vector>

#include "vebhmm/errors.hpp"
#include "vebhmm/matrix.hpp"

namespace vebhmm {

inline constexpr std::size_t kMinTraceLength = 2;

struct Trace {
  std::string id;
  std::vector<double> x;

  std::size_t length() const { return x.size(); }
  friend bool operator==(const Trace&, const Trace&) = default;
};

struct Ensemble {
  std::vector<Trace> traces;

  std::size_t size() const { return traces.size(); }
  std::size_t total_length() const {
    std::size_t n = 0;
    for (const auto& t : traces) n += t.length();
    return n;
  }
  friend bool operator==(const Ensemble&, const Ensemble&) = default;
};

// Parameters of the conjugate prior over one trace's HMM parameters:
// per-state Normal-Gamma (m, beta, a, b) on (mu, lambda), Dirichlet rows
// alpha on the transition matrix and rho on the initial state. The same
// layout holds the variational posterior of a single trace.
struct Hyperparameters {
  std::size_t K = 0;
  std::vector<double> m;
  std::vector<double> beta;
  std::vector<double> a;
  std::vector<double> b;
  Matrix alpha;
  std::vector<double> rho;

  Hyperparameters() = default;
  explicit Hyperparameters(std::size_t k)
      : K(k), m(k, 0.0), beta(k, 1.0), a(k, 1.0), b(k, 1.0), alpha(k, k, 1.0), rho(k, 1.0) {}

  // K(K+5): 4K Normal-Gamma scalars, K^2 transition and K initial weights.
  std::size_t free_parameter_count() const { return K * (K + 5); }

  // Throws DomainError on shape mismatch or non-positive concentrations.
  void validate() const {
    auto fail = [](const std::string& why) { throw DomainError("Hyperparameters: " + why); };
    if (K == 0) fail("K must be >= 1");
    if (m.size() != K || beta.size() != K || a.size() != K || b.size() != K || rho.size() != K ||
        alpha.rows() != K || alpha.cols() != K)
      fail("inconsistent shapes");
    auto positive = [](double v) { return v > 0.0 && std::isfinite(v); };
    for (std::size_t k = 0; k < K; ++k) {
      if (!std::isfinite(m[k])) fail("m must be finite");
      if (!positive(beta[k]) || !positive(a[k]) || !positive(b[k]) || !positive(rho[k]))
        fail("beta, a, b, rho must be > 0");
      for (std::size_t l = 0; l < K; ++l)
        if (!positive(alpha(k, l))) fail("alpha must be > 0");
    }
  }

  friend bool operator==(const Hyperparameters&, const Hyperparameters&) = default;
};

// Same layout, different role: the hatted parameters of q(theta_n).
using PosteriorParameters = Hyperparameters;

// Additive decomposition of a trace's evidence lower bound.
struct ElboTerms {
  double trajectory = 0.0;       // E_q[log weights] + H[q(z)]
  double kl_normal_gamma = 0.0;  // KL(q(mu, lambda) || prior), summed over states
  double kl_transitions = 0.0;   // sum over rows of KL(Dir(alpha_hat) || Dir(alpha))
  double kl_initial = 0.0;       // KL(Dir(rho_hat) || Dir(rho))

  double total() const { return trajectory - kl_normal_gamma - kl_transitions - kl_initial; }
};

struct TracePosterior {
  PosteriorParameters params;
  Matrix gamma;                 // T x K, q(z_t = k)
  std::vector<Matrix> xi_pair;  // T-1 slices of K x K, q(z_t = i, z_{t+1} = j)
  double elbo = 0.0;
  ElboTerms terms;
  std::vector<double> elbo_history;
  int iterations = 0;

  std::size_t K() const { return params.K; }
  std::size_t length() const { return gamma.rows(); }
};

// Per-trace parameters drawn by the simulator.
struct TraceParameters {
  std::vector<double> mu;
  std::vector<double> lambda;
  Matrix A;
  std::vector<double> pi;
};

struct GroundTruth {
  std::vector<std::vector<int>> z;
  std::vector<TraceParameters> theta;
  std::vector<Matrix> xi0;
};

// Ensemble averages (1/N) sum_n E_q(theta_n)[.] that drive the
// hyperparameter update.
struct EnsembleMoments {
  std::vector<double> E_lambda;
  std::vector<double> E_log_lambda;
  std::vector<double> E_mu_lambda;
  std::vector<double> E_mu2_lambda;
  Matrix E_log_A;
  std::vector<double> E_log_pi;
  // Optional: E[lambda (mu - m)^2] at m = E[mu lambda] / E[lambda], summed
  // in centred form. Empty means "derive from the raw moments".
  std::vector<double> E_lambda_dev2;

  std::size_t K() const { return E_lambda.size(); }
};

struct Violation {
  std::string trace_id;
  std::string reason;
  friend bool operator==(const Violation&, const Violation&) = default;
};

// Checks the Trace/Ensemble invariants. Violations are returned, not thrown.
inline std::vector<Violation> validate(const Ensemble& ensemble) {
  std::vector<Violation> out;
  if (ensemble.traces.empty()) out.push_back({"", "ensemble is empty"});
  for (const auto& trace : ensemble.traces) {
    if (trace.length() < kMinTraceLength) out.push_back({trace.id, "length below minimum"});
    for (std::size_t t = 0; t < trace.x.size(); ++t) {
      if (!std::isfinite(trace.x[t])) {
        std::ostringstream os;
        os << "non-finite value at index " << t;
        out.push_back({trace.id, os.str()});
        break;
      }
    }
  }
  return out;
}

inline void require_valid(const Ensemble& ensemble) {
  const auto violations = validate(ensemble);
  if (violations.empty()) return;
  std::ostringstream os;
  os << "invalid ensemble: ";
  for (std::size_t i = 0; i < violations.size(); ++i) {
    if (i) os << "; ";
    os << "trace '" << violations[i].trace_id << "': " << violations[i].reason;
  }
  throw DataError(os.str());
}

}  // namespace vebhmm
