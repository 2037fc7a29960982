#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <span>
#include <string>

#include <boost/math/special_functions/gamma.hpp>

#include "gsae/errors.hpp"

namespace gsae {

/// Natural log of the gamma function for finite x > 0.
inline double log_gamma_fn(double x) {
  if (!(x > 0.0) || !std::isfinite(x)) {
    throw DomainError("log_gamma_fn: argument must be positive and finite, got " + std::to_string(x));
  }
  // boost's lgamma is reentrant; std::lgamma writes the global signgam.
  return boost::math::lgamma(x);
}

namespace detail {

inline constexpr int kIncGammaMaxIter = 100000;
inline constexpr double kIncGammaEps = 1e-16;

// Lower series: gamma(a,x) / Gamma(a), valid and fast for x < a + 1.
inline double inc_gamma_series(double a, double x, double log_prefactor) {
  double ap = a;
  double del = 1.0 / a;
  double sum = del;
  for (int n = 0; n < kIncGammaMaxIter; ++n) {
    ap += 1.0;
    del *= x / ap;
    sum += del;
    if (std::abs(del) < std::abs(sum) * kIncGammaEps) {
      return sum * std::exp(log_prefactor);
    }
  }
  throw EvaluationError("reg_incomplete_gamma: series did not converge");
}

// Upper continued fraction (modified Lentz): Gamma(a,x) / Gamma(a), for x >= a + 1.
inline double inc_gamma_cont_frac(double a, double x, double log_prefactor) {
  constexpr double tiny = 1e-300;
  double b = x + 1.0 - a;
  double c = 1.0 / tiny;
  double d = 1.0 / b;
  double h = d;
  for (int i = 1; i < kIncGammaMaxIter; ++i) {
    const double an = -i * (i - a);
    b += 2.0;
    d = an * d + b;
    if (std::abs(d) < tiny) d = tiny;
    c = b + an / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < kIncGammaEps) {
      return std::exp(log_prefactor) * h;
    }
  }
  throw EvaluationError("reg_incomplete_gamma: continued fraction did not converge");
}

}  // namespace detail

namespace detail {

// P(a, x) with log Gamma(a) supplied by the caller. `prefactor`, if given,
// receives x^a e^{-x} / Gamma(a), which is x times the Gamma(a, 1) density.
inline double reg_inc_gamma_lg(double a, double lg_a, double x, double* prefactor = nullptr) {
  if (x == 0.0) {
    if (prefactor) *prefactor = 0.0;
    return 0.0;
  }
  if (std::isinf(x)) {
    if (prefactor) *prefactor = 0.0;
    return 1.0;
  }
  const double log_prefactor = a * std::log(x) - x - lg_a;
  if (prefactor) *prefactor = std::exp(log_prefactor);
  if (x < a + 1.0) return std::clamp(inc_gamma_series(a, x, log_prefactor), 0.0, 1.0);
  return std::clamp(1.0 - inc_gamma_cont_frac(a, x, log_prefactor), 0.0, 1.0);
}

}  // namespace detail

/// Regularized lower incomplete gamma P(a, x) = gamma(a, x) / Gamma(a).
/// Series below x = a + 1, continued fraction above.
inline double reg_incomplete_gamma(double a, double x) {
  if (!(a > 0.0) || !std::isfinite(a) || !(x >= 0.0)) {
    throw DomainError("reg_incomplete_gamma: need a > 0 and x >= 0");
  }
  if (x == 0.0) return 0.0;
  if (std::isinf(x)) return 1.0;
  return detail::reg_inc_gamma_lg(a, log_gamma_fn(a), x);
}

/// CDF of Gamma(shape, rate) (rate parametrization).
inline double gamma_cdf(double shape, double rate, double y) {
  if (!(rate > 0.0)) throw DomainError("gamma_cdf: rate must be positive");
  if (y <= 0.0) return 0.0;
  return reg_incomplete_gamma(shape, rate * y);
}

inline double gamma_log_pdf(double shape, double rate, double y) {
  if (!(shape > 0.0) || !(rate > 0.0)) throw DomainError("gamma_log_pdf: invalid parameters");
  if (!(y > 0.0)) return -std::numeric_limits<double>::infinity();
  return shape * std::log(rate) - log_gamma_fn(shape) + (shape - 1.0) * std::log(y) - rate * y;
}

inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }

/// Inverse standard normal CDF: Acklam's rational approximation followed by
/// one Halley refinement step, which brings it to near machine precision.
inline double normal_quantile(double p) {
  if (!(p > 0.0 && p < 1.0)) {
    if (p == 0.0) return -std::numeric_limits<double>::infinity();
    if (p == 1.0) return std::numeric_limits<double>::infinity();
    throw DomainError("normal_quantile: p must lie in [0, 1]");
  }
  static constexpr double a[] = {-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
                                 1.383577518672690e+02,  -3.066479806614716e+01, 2.506628277459239e+00};
  static constexpr double b[] = {-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
                                 6.680131188771972e+01,  -1.328068155288572e+01};
  static constexpr double c[] = {-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
                                 -2.549732539343734e+00, 4.374664141464968e+00,  2.938163982698783e+00};
  static constexpr double d[] = {7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
                                 3.754408661907416e+00};
  constexpr double p_low = 0.02425;
  double x;
  if (p < p_low) {
    const double q = std::sqrt(-2.0 * std::log(p));
    x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  } else if (p <= 1.0 - p_low) {
    const double q = p - 0.5;
    const double r = q * q;
    x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
        (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
  } else {
    const double q = std::sqrt(-2.0 * std::log1p(-p));
    x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  }
  const double e = normal_cdf(x) - p;
  const double u = e * std::sqrt(2.0 * std::numbers::pi) * std::exp(0.5 * x * x);
  return x - u / (1.0 + 0.5 * x * u);
}

/// log(sum(exp(v))) with a max shift. Empty input gives -inf.
inline double log_sum_exp(std::span<const double> v) {
  double m = -std::numeric_limits<double>::infinity();
  for (double x : v) m = std::max(m, x);
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

}  // namespace gsae
