#pragma once

// Independent oracles shared by the test suites. Nothing here calls into the
// library code paths it is used to check.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <vector>

#include <boost/math/distributions/gamma.hpp>
#include <boost/math/quadrature/gauss_kronrod.hpp>

namespace gsae::testing {

/// Adaptive Gauss-Kronrod (61 point) integral of f over [a, b].
inline double integrate(const std::function<double(double)>& f, double a, double b, double tol = 1e-13) {
  double err = 0.0;
  return boost::math::quadrature::gauss_kronrod<double, 61>::integrate(f, a, b, 20, tol, &err);
}

/// Integral over (0, inf) via u = t / (1 - t).
inline double integrate_half_line(const std::function<double(double)>& f, double tol = 1e-13) {
  auto g = [&](double t) {
    if (t >= 1.0) return 0.0;
    const double u = t / (1.0 - t);
    const double v = f(u);
    return v == 0.0 ? 0.0 : v / ((1.0 - t) * (1.0 - t));
  };
  return integrate(g, 0.0, 1.0, tol);
}

/// One-sample Kolmogorov-Smirnov statistic of `sample` against `cdf`.
inline double ks_statistic(std::vector<double> sample, const std::function<double(double)>& cdf) {
  std::sort(sample.begin(), sample.end());
  const double n = static_cast<double>(sample.size());
  double d = 0.0;
  for (std::size_t i = 0; i < sample.size(); ++i) {
    const double f = cdf(sample[i]);
    d = std::max({d, std::abs(f - static_cast<double>(i) / n), std::abs(static_cast<double>(i + 1) / n - f)});
  }
  return d;
}

/// Asymptotic 1% critical value of the one-sample KS statistic.
inline double ks_critical_1pct(std::size_t n) { return 1.62762 / std::sqrt(static_cast<double>(n)); }

/// Gamma CDF from Boost, used as an oracle for the in-house incomplete gamma.
inline double boost_gamma_cdf(double shape, double rate, double y) {
  if (y <= 0.0) return 0.0;
  return boost::math::cdf(boost::math::gamma_distribution<double>(shape, 1.0 / rate), y);
}

inline double mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

inline double variance(const std::vector<double>& v) {
  const double m = mean(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return s / static_cast<double>(v.size() - 1);
}

}  // namespace gsae::testing

#include <random>
#include <string>

#include "gsae/data.hpp"

namespace gsae::testing {

/// Gamma-gamma population generator built on the standard library only.
/// Area i gets n[i] sampled units followed by N - n[i] non-sampled ones,
/// covariate x ~ U(0, 2) (one covariate plus intercept).
struct GgTruth {
  double alpha, delta;
  std::vector<double> gamma;  // length 2
};

inline SurveyData make_gg_data(const GgTruth& t, const std::vector<std::size_t>& n, std::size_t N, std::mt19937_64& eng,
                               std::vector<std::vector<double>>* full_population = nullptr) {
  SurveyData d;
  d.p = 1;
  std::uniform_real_distribution<double> ux(0.0, 2.0);
  std::gamma_distribution<double> gu(t.delta, 1.0 / t.delta);
  for (std::size_t i = 0; i < n.size(); ++i) {
    AreaFrame a;
    a.area_id = std::to_string(i + 1);
    a.N = N;
    const double u = gu(eng);
    std::vector<double> pop;
    for (std::size_t j = 0; j < N; ++j) {
      const double x = ux(eng);
      const double rate = std::exp(t.gamma[0] + t.gamma[1] * x) * u;
      const double y = std::gamma_distribution<double>(t.alpha, 1.0 / rate)(eng);
      pop.push_back(y);
      if (j < n[i]) {
        a.sampled_units.push_back(UnitRecord{a.area_id, y, {1.0, x}, std::nullopt, true});
      } else {
        a.nonsampled_covariates.push_back({1.0, x});
      }
    }
    if (full_population) full_population->push_back(std::move(pop));
    d.areas.push_back(std::move(a));
  }
  return d;
}

}  // namespace gsae::testing

namespace gsae::testing {

struct GlmmTruth {
  double nu, phi;
  std::vector<double> beta;  // length 2
};

/// GLMM population generator on the standard library, same layout as make_gg_data.
inline SurveyData make_glmm_data(const GlmmTruth& t, const std::vector<std::size_t>& n, std::size_t N,
                                 std::mt19937_64& eng, std::vector<std::vector<double>>* full_population = nullptr) {
  SurveyData d;
  d.p = 1;
  std::uniform_real_distribution<double> ux(0.0, 2.0);
  std::normal_distribution<double> nv(0.0, t.phi);
  for (std::size_t i = 0; i < n.size(); ++i) {
    AreaFrame a;
    a.area_id = std::to_string(i + 1);
    a.N = N;
    const double v = nv(eng);
    std::vector<double> pop;
    for (std::size_t j = 0; j < N; ++j) {
      const double x = ux(eng);
      const double mu = std::exp(t.beta[0] + t.beta[1] * x + v);
      const double y = std::gamma_distribution<double>(t.nu, mu / t.nu)(eng);
      pop.push_back(y);
      if (j < n[i]) {
        a.sampled_units.push_back(UnitRecord{a.area_id, y, {1.0, x}, std::nullopt, true});
      } else {
        a.nonsampled_covariates.push_back({1.0, x});
      }
    }
    if (full_population) full_population->push_back(std::move(pop));
    d.areas.push_back(std::move(a));
  }
  return d;
}

}  // namespace gsae::testing
