#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "vebhmm/errors.hpp"

namespace vebhmm {

// Convergence controls shared by the Newton solvers below.
struct SolverConfig {
  double abs_tolerance = 1e-10;
  int max_iterations = 200;

  void validate() const {
    if (!(abs_tolerance > 0.0)) throw DomainError("SolverConfig: abs_tolerance must be > 0");
    if (max_iterations < 1) throw DomainError("SolverConfig: max_iterations must be >= 1");
  }
};

namespace detail {

inline constexpr double kAsymptoticThreshold = 10.0;

// psi(x) - log(x) for x >= 10 from the Bernoulli series, truncated after
// the x^-14 term (next term < 1e-16 at x = 10).
inline double digamma_minus_log_series(double x) {
  const double r = 1.0 / x;
  const double r2 = r * r;
  return -0.5 * r -
         r2 * (1.0 / 12 -
               r2 * (1.0 / 120 -
                     r2 * (1.0 / 252 -
                           r2 * (1.0 / 240 -
                                 r2 * (1.0 / 132 - r2 * (691.0 / 32760 - r2 / 12))))));
}

// psi'(x) - 1/x for x >= 10.
inline double trigamma_minus_reciprocal_series(double x) {
  const double r = 1.0 / x;
  const double r2 = r * r;
  return r2 * (0.5 +
               r * (1.0 / 6 -
                    r2 * (1.0 / 30 -
                          r2 * (1.0 / 42 -
                                r2 * (1.0 / 30 -
                                      r2 * (5.0 / 66 - r2 * (691.0 / 2730 - r2 * 7.0 / 6)))))));
}

inline void require_positive(double x, const char* what) {
  if (!(x > 0.0) || !std::isfinite(x)) {
    std::ostringstream os;
    os << what << ": argument must be finite and > 0, got " << x;
    throw DomainError(os.str());
  }
}

// Number of unit shifts that move x to the asymptotic region.
inline int shift_count(double x) {
  return x >= kAsymptoticThreshold ? 0 : static_cast<int>(std::ceil(kAsymptoticThreshold - x));
}

}  // namespace detail

// The recurrences are unrolled from the shifted argument back down to x, so
// the last operation is the -1/x (or +1/x^2) term and the recurrence holds
// to the rounding of that single addition.
inline double digamma(double x) {
  detail::require_positive(x, "digamma");
  const int n = detail::shift_count(x);
  const double y = x + n;
  double v = std::log(y) + detail::digamma_minus_log_series(y);
  for (int i = n - 1; i >= 0; --i) v -= 1.0 / (x + i);
  return v;
}

inline double trigamma(double x) {
  detail::require_positive(x, "trigamma");
  const int n = detail::shift_count(x);
  const double y = x + n;
  double v = 1.0 / y + detail::trigamma_minus_reciprocal_series(y);
  for (int i = n - 1; i >= 0; --i) v += 1.0 / ((x + i) * (x + i));
  return v;
}

// psi(x) - log(x) without the cancellation of evaluating both separately.
inline double digamma_minus_log(double x) {
  detail::require_positive(x, "digamma_minus_log");
  const int n = detail::shift_count(x);
  if (n == 0) return detail::digamma_minus_log_series(x);
  const double y = x + n;
  double v = detail::digamma_minus_log_series(y) + std::log(y / x);
  for (int i = n - 1; i >= 0; --i) v -= 1.0 / (x + i);
  return v;
}

// psi'(x) - 1/x, the derivative of digamma_minus_log.
inline double trigamma_minus_reciprocal(double x) {
  detail::require_positive(x, "trigamma_minus_reciprocal");
  if (x >= detail::kAsymptoticThreshold) return detail::trigamma_minus_reciprocal_series(x);
  return trigamma(x) - 1.0 / x;
}

// Solves psi(a) - log(a) = c for the Gamma shape a, c < 0.
//
// psi(a) - log(a) increases monotonically from -inf (a -> 0) to 0 (a -> inf),
// so the root is unique. Newton runs in u = log(a) inside a bracket that is
// tightened after every step; steps leaving the bracket become bisections.
inline double solve_gamma_shape(double c, const SolverConfig& cfg = {}) {
  cfg.validate();
  if (!(c < 0.0) || !std::isfinite(c)) {
    std::ostringstream os;
    os << "solve_gamma_shape: target must be finite and < 0, got " << c;
    throw DomainError(os.str());
  }
  auto residual = [c](double u) { return digamma_minus_log(std::exp(u)) - c; };

  // Closed-form approximation used for Gamma maximum likelihood.
  const double s = -c;
  double u = std::log((3.0 - s + std::sqrt((s - 3.0) * (s - 3.0) + 24.0 * s)) / (12.0 * s));

  double lo = u - 1.0;
  double hi = u + 1.0;
  while (residual(lo) > 0.0) lo -= 2.0 * (u - lo);
  while (residual(hi) < 0.0) hi += 2.0 * (hi - u);

  for (int it = 0; it < cfg.max_iterations; ++it) {
    const double r = residual(u);
    if (r == 0.0) return std::exp(u);
    if (r < 0.0)
      lo = u;
    else
      hi = u;
    const double a = std::exp(u);
    const double slope = a * trigamma_minus_reciprocal(a);
    double next = u - r / slope;
    if (!(next > lo && next < hi)) next = 0.5 * (lo + hi);
    const double step = next - u;
    u = next;
    if (std::abs(r) < cfg.abs_tolerance && std::abs(step) <= 1e-13 * std::max(1.0, std::abs(u)))
      return std::exp(u);
    if (hi - lo <= 4 * std::numeric_limits<double>::epsilon() * std::max(1.0, std::abs(u))) break;
  }
  if (std::abs(residual(u)) < cfg.abs_tolerance) return std::exp(u);
  std::ostringstream os;
  os << "solve_gamma_shape: no convergence for c = " << c << " after " << cfg.max_iterations
     << " iterations";
  throw ConvergenceError(os.str());
}

// Finds alpha > 0 with psi(sum alpha) - psi(alpha_l) = targets_l for all l.
//
// This is the stationarity condition of the concave function
//   f(alpha) = lgamma(sum alpha) - sum lgamma(alpha_l) - sum alpha_l t_l,
// so Newton steps are damped by backtracking on f. The Hessian is
// diag(-psi'(alpha)) + psi'(sum alpha) 1 1^T and is inverted in O(K).
// A solution exists iff every target is positive and sum exp(-t_l) < 1.
inline std::vector<double> match_dirichlet(std::span<const double> targets,
                                           const SolverConfig& cfg = {},
                                           std::span<const double> warm_start = {}) {
  cfg.validate();
  const std::size_t k = targets.size();
  if (k < 2) throw DomainError("match_dirichlet: need at least two components");
  double mass = 0.0;
  for (double t : targets) {
    if (!(t > 0.0) || !std::isfinite(t)) {
      std::ostringstream os;
      os << "match_dirichlet: targets must be finite and > 0, got " << t;
      throw DomainError(os.str());
    }
    mass += std::exp(-t);
  }
  if (!(mass < 1.0))
    throw DomainError("match_dirichlet: targets are not expected log-probability gaps");

  // f_scale tracks the size of the terms that cancel in the objective, which
  // sets its rounding level.
  double f_scale = 0.0;
  auto objective = [&](std::span<const double> alpha) {
    double s = 0.0, f = 0.0;
    f_scale = 1.0;
    for (std::size_t l = 0; l < k; ++l) {
      s += alpha[l];
      const double lg = std::lgamma(alpha[l]);
      f -= lg + alpha[l] * targets[l];
      f_scale += std::abs(lg) + alpha[l] * targets[l];
    }
    const double lgs = std::lgamma(s);
    f_scale += std::abs(lgs);
    return f + lgs;
  };
  // The residual cannot be resolved below the rounding of the terms it is
  // made of, which matters once some alpha_l is tiny and psi(alpha_l) huge.
  double floor_excess = 0.0;
  auto gradient = [&](std::span<const double> alpha, std::vector<double>& g) {
    const double s = std::accumulate(alpha.begin(), alpha.end(), 0.0);
    const double psi_s = digamma(s);
    double worst = 0.0;
    floor_excess = 0.0;
    for (std::size_t l = 0; l < k; ++l) {
      const double psi_l = digamma(alpha[l]);
      g[l] = psi_s - psi_l - targets[l];
      worst = std::max(worst, std::abs(g[l]));
      const double noise = 32.0 * std::numeric_limits<double>::epsilon() *
                           (std::abs(psi_s) + std::abs(psi_l) + targets[l]);
      floor_excess = std::max(floor_excess, std::abs(g[l]) - noise);
    }
    return worst;
  };
  auto converged = [&](double worst) { return worst < cfg.abs_tolerance || floor_excess <= 0.0; };

  std::vector<double> alpha(k);
  const bool warm = warm_start.size() == k &&
                    std::all_of(warm_start.begin(), warm_start.end(),
                                [](double v) { return v > 0.0 && std::isfinite(v); });
  if (warm) {
    std::copy(warm_start.begin(), warm_start.end(), alpha.begin());
  } else {
    // Mean from exp(-t), concentration from a scalar bisection on the
    // mean-weighted equation.
    std::vector<double> p(k);
    double weighted_target = 0.0;
    for (std::size_t l = 0; l < k; ++l) {
      p[l] = std::exp(-targets[l]) / mass;
      weighted_target += p[l] * targets[l];
    }
    auto h = [&](double log_s) {
      const double s = std::exp(log_s);
      double v = 0.0;
      for (std::size_t l = 0; l < k; ++l) v += p[l] * (digamma(s) - digamma(s * p[l]));
      return v - weighted_target;
    };
    double lo = -20.0, hi = 20.0;
    if (h(lo) < 0.0) hi = lo;
    else if (h(hi) > 0.0) lo = hi;
    for (int it = 0; it < 100 && hi - lo > 1e-6; ++it) {
      const double mid = 0.5 * (lo + hi);
      (h(mid) > 0.0 ? lo : hi) = mid;
    }
    const double s = std::exp(0.5 * (lo + hi));
    for (std::size_t l = 0; l < k; ++l) alpha[l] = s * p[l];
  }

  std::vector<double> g(k), g_trial(k), step(k), trial(k);
  double worst = gradient(alpha, g);
  double f = objective(alpha);
  for (int it = 0; it < cfg.max_iterations; ++it) {
    const double s = std::accumulate(alpha.begin(), alpha.end(), 0.0);
    const double z = trigamma(s);
    double num = 0.0, den = 1.0 / z;
    std::vector<double> q(k);
    for (std::size_t l = 0; l < k; ++l) {
      q[l] = -trigamma(alpha[l]);
      num += g[l] / q[l];
      den += 1.0 / q[l];
    }
    const double b = num / den;
    double rel_step = 0.0;
    for (std::size_t l = 0; l < k; ++l) {
      step[l] = -(g[l] - b) / q[l];
      rel_step = std::max(rel_step, std::abs(step[l]) / alpha[l]);
    }
    if (converged(worst) && rel_step < 1e-12) return alpha;

    const double excess_before_search = floor_excess;
    double scale = 1.0;
    bool accepted = false;
    for (int ls = 0; ls < 60; ++ls, scale *= 0.5) {
      bool positive = true;
      for (std::size_t l = 0; l < k; ++l) {
        trial[l] = alpha[l] + scale * step[l];
        positive = positive && trial[l] > 0.0 && std::isfinite(trial[l]);
      }
      if (!positive) continue;
      const double f_trial = objective(trial);
      // Near the optimum f is flat to rounding; fall back to the gradient norm.
      const double flat = 64.0 * std::numeric_limits<double>::epsilon() * f_scale;
      if (f_trial > f + flat ||
          (f_trial >= f - flat && gradient(trial, g_trial) < worst)) {
        accepted = true;
        f = f_trial;
        break;
      }
    }
    if (!accepted) {
      floor_excess = excess_before_search;
      break;
    }
    alpha.swap(trial);
    worst = gradient(alpha, g);
  }
  if (converged(worst)) return alpha;
  std::ostringstream os;
  os << "match_dirichlet: no convergence, max residual " << worst;
  throw ConvergenceError(os.str());
}

}  // namespace vebhmm
