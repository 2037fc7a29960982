#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <span>
#include <vector>

#include "gsae/errors.hpp"

namespace gsae {

struct OptimizerConfig {
  int max_iterations = 5000;  // per Nelder-Mead run
  double tolerance = 1e-10;   // relative spread of simplex function values
  int restarts = 3;           // extra runs from perturbed copies of the best point
  double initial_step = 0.1;  // simplex edge length on the search scale

  void check() const {
    if (!(tolerance > 0.0)) throw DomainError("OptimizerConfig: tolerance must be positive");
    if (max_iterations < 1) throw DomainError("OptimizerConfig: max_iterations must be >= 1");
    if (restarts < 0) throw DomainError("OptimizerConfig: restarts must be >= 0");
    if (!(initial_step > 0.0)) throw DomainError("OptimizerConfig: initial_step must be positive");
  }
};

struct MinimizeResult {
  std::vector<double> argmin;
  double value = std::numeric_limits<double>::infinity();
  int iterations = 0;
  int evaluations = 0;
  bool converged = false;
};

namespace detail {

struct NelderMeadRun {
  std::vector<double> best;
  double value;
  int iterations;
  bool converged;
};

template <class Objective>
double safe_eval(Objective& f, std::span<const double> x, int& evals) {
  ++evals;
  const double v = f(x);
  return std::isfinite(v) ? v : std::numeric_limits<double>::infinity();
}

template <class Objective>
NelderMeadRun nelder_mead(Objective& f, const std::vector<double>& start, double start_value,
                          const std::vector<double>& steps, const OptimizerConfig& cfg, int& evals) {
  const std::size_t n = start.size();
  std::vector<std::vector<double>> pts(n + 1, start);
  std::vector<double> vals(n + 1, start_value);
  for (std::size_t k = 0; k < n; ++k) {
    pts[k + 1][k] += steps[k];
    vals[k + 1] = safe_eval(f, pts[k + 1], evals);
  }

  std::vector<std::size_t> order(n + 1);
  std::vector<double> centroid(n), trial(n), trial2(n);
  int it = 0;
  bool converged = false;
  for (; it < cfg.max_iterations; ++it) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return vals[a] < vals[b]; });
    const std::size_t lo = order.front();
    const std::size_t hi = order.back();
    const std::size_t second = order[n - 1];
    const double flo = vals[lo];
    const double fhi = vals[hi];
    if (std::isfinite(fhi) &&
        2.0 * std::abs(fhi - flo) <= cfg.tolerance * (std::abs(fhi) + std::abs(flo) + cfg.tolerance)) {
      converged = true;
      break;
    }

    std::fill(centroid.begin(), centroid.end(), 0.0);
    for (std::size_t k = 0; k <= n; ++k) {
      if (k == hi) continue;
      for (std::size_t d = 0; d < n; ++d) centroid[d] += pts[k][d];
    }
    for (double& c : centroid) c /= static_cast<double>(n);

    for (std::size_t d = 0; d < n; ++d) trial[d] = centroid[d] + (centroid[d] - pts[hi][d]);
    const double fr = safe_eval(f, trial, evals);
    if (fr < flo) {
      for (std::size_t d = 0; d < n; ++d) trial2[d] = centroid[d] + 2.0 * (centroid[d] - pts[hi][d]);
      const double fe = safe_eval(f, trial2, evals);
      if (fe < fr) {
        pts[hi] = trial2;
        vals[hi] = fe;
      } else {
        pts[hi] = trial;
        vals[hi] = fr;
      }
      continue;
    }
    if (fr < vals[second]) {
      pts[hi] = trial;
      vals[hi] = fr;
      continue;
    }
    // contraction: outside if the reflected point beat the worst, else inside
    const bool outside = fr < fhi;
    for (std::size_t d = 0; d < n; ++d) {
      trial2[d] = outside ? centroid[d] + 0.5 * (trial[d] - centroid[d]) : centroid[d] + 0.5 * (pts[hi][d] - centroid[d]);
    }
    const double fc = safe_eval(f, trial2, evals);
    if (fc < (outside ? fr : fhi)) {
      pts[hi] = trial2;
      vals[hi] = fc;
      continue;
    }
    for (std::size_t k = 0; k <= n; ++k) {
      if (k == lo) continue;
      for (std::size_t d = 0; d < n; ++d) pts[k][d] = pts[lo][d] + 0.5 * (pts[k][d] - pts[lo][d]);
      vals[k] = safe_eval(f, pts[k], evals);
    }
  }
  const auto best = static_cast<std::size_t>(std::min_element(vals.begin(), vals.end()) - vals.begin());
  return {pts[best], vals[best], it, converged};
}

}  // namespace detail

/// Derivative-free Nelder-Mead minimization with deterministic restarts.
/// The first run starts from `start`; each restart rebuilds the simplex around
/// a perturbed copy of the best point found so far. Non-finite objective
/// values are treated as +inf. No randomness is involved.
template <class Objective>
MinimizeResult minimize(Objective&& objective, std::span<const double> start, const OptimizerConfig& config = {}) {
  config.check();
  if (start.empty()) throw DomainError("minimize: empty start vector");
  const std::size_t n = start.size();
  int evals = 0;
  std::vector<double> x0(start.begin(), start.end());
  double f0 = detail::safe_eval(objective, x0, evals);

  MinimizeResult result;
  result.argmin = x0;
  result.value = f0;

  const std::vector<double> steps(n, config.initial_step);
  auto run = detail::nelder_mead(objective, x0, f0, steps, config, evals);
  result.iterations += run.iterations;
  result.converged = run.converged;
  if (run.value <= result.value) {
    result.argmin = run.best;
    result.value = run.value;
  }

  for (int r = 0; r < config.restarts; ++r) {
    std::vector<double> perturbed = result.argmin;
    // alternate signs so successive restarts probe different directions
    for (std::size_t d = 0; d < n; ++d) {
      const double sign = ((d + static_cast<std::size_t>(r)) % 2 == 0) ? 1.0 : -1.0;
      perturbed[d] += sign * 0.5 * config.initial_step;
    }
    double fp = detail::safe_eval(objective, perturbed, evals);
    if (!std::isfinite(fp)) {
      perturbed = result.argmin;
      fp = result.value;
    }
    std::vector<double> restart_steps(n);
    for (std::size_t d = 0; d < n; ++d) restart_steps[d] = (d % 2 == 0 ? 1.0 : -1.0) * config.initial_step;
    run = detail::nelder_mead(objective, perturbed, fp, restart_steps, config, evals);
    result.iterations += run.iterations;
    if (run.value < result.value) {
      result.argmin = run.best;
      result.value = run.value;
    }
    result.converged = run.converged;
  }
  result.evaluations = evals;

  if (!std::isfinite(result.value)) {
    throw ConvergenceError("minimize: objective was non-finite at every evaluated point", result.argmin, result.value);
  }
  return result;
}

}  // namespace gsae
