#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "gsae/errors.hpp"

namespace gsae {

struct RootOptions {
  double value_tolerance = 1e-10;  // stop when |f(x) - target| <= this
  double width_tolerance = 1e-12;  // or when the bracket is this narrow
  int max_iterations = 500;
};

/// Solves f(x) = target for nondecreasing f on [lo, hi]. Illinois-style
/// secant steps inside a bisection safeguard: a step is bisected whenever the
/// secant point leaves the bracket or two secant steps failed to halve it.
template <class F>
double find_root_increasing(F&& f, double target, double lo, double hi, const RootOptions& opt = {}) {
  if (!(lo <= hi)) throw BracketError("find_root_increasing: lo must not exceed hi");
  double glo = f(lo) - target;
  double ghi = f(hi) - target;
  if (std::isnan(glo) || std::isnan(ghi)) throw BracketError("find_root_increasing: NaN at bracket end");
  if (glo > 0.0 || ghi < 0.0) {
    throw BracketError("find_root_increasing: bracket [" + std::to_string(lo) + ", " + std::to_string(hi) +
                       "] does not straddle target " + std::to_string(target));
  }
  if (std::abs(glo) <= opt.value_tolerance) return lo;
  if (std::abs(ghi) <= opt.value_tolerance) return hi;

  // Illinois bookkeeping: secant uses scaled copies of the end values.
  double slo = glo;
  double shi = ghi;
  int side = 0;  // +1 if hi was retained last step, -1 if lo
  double last_width = hi - lo;
  int slow_steps = 0;
  double x = 0.5 * (lo + hi);
  for (int it = 0; it < opt.max_iterations; ++it) {
    const double width = hi - lo;
    if (width <= opt.width_tolerance) break;
    bool bisect = slow_steps >= 2;
    if (!bisect) {
      x = hi - shi * (hi - lo) / (shi - slo);
      if (!(x > lo && x < hi)) bisect = true;
    }
    if (bisect) {
      x = 0.5 * (lo + hi);
      slow_steps = 0;
      slo = glo;
      shi = ghi;
      side = 0;
    }
    if (x <= lo || x >= hi) break;  // no representable interior point left
    const double g = f(x) - target;
    if (std::isnan(g)) throw EvaluationError("find_root_increasing: NaN inside bracket");
    if (std::abs(g) <= opt.value_tolerance) return x;
    if (g < 0.0) {
      lo = x;
      glo = slo = g;
      if (side == -1) shi *= 0.5;
      side = -1;
    } else {
      hi = x;
      ghi = shi = g;
      if (side == +1) slo *= 0.5;
      side = +1;
    }
    const double new_width = hi - lo;
    slow_steps = (new_width > 0.5 * last_width) ? slow_steps + 1 : 0;
    last_width = new_width;
  }
  return std::abs(glo) < std::abs(ghi) ? lo : hi;
}

/// Newton iteration for nondecreasing f with derivative, safeguarded by the
/// bracket [lo, hi]; f(lo) <= target <= f(hi) is assumed, not evaluated.
/// hi may be +inf: while no upper end is known, steps that overshoot are
/// replaced by doubling, at most `max_doublings` times. `fd(x, df)` returns
/// f(x) and writes f'(x) to df. Steps that leave the bracket or fail to halve
/// the residual fall back to bisection.
template <class FD>
double find_root_increasing_newton(FD&& fd, double target, double lo, double hi, double x0,
                                   const RootOptions& opt = {}, int max_doublings = 60) {
  if (!(lo <= hi)) throw BracketError("find_root_increasing_newton: lo must not exceed hi");
  double x = x0;
  if (!(x > lo && x < hi)) x = std::isinf(hi) ? (lo > 0.0 ? 2.0 * lo : 1.0) : 0.5 * (lo + hi);
  double best_x = x;
  double best_g = std::numeric_limits<double>::infinity();
  double last_g = std::numeric_limits<double>::infinity();
  int doublings = 0;
  for (int it = 0; it < opt.max_iterations; ++it) {
    double df = 0.0;
    const double g = fd(x, df) - target;
    if (std::isnan(g)) throw EvaluationError("find_root_increasing_newton: NaN inside bracket");
    if (std::abs(g) < std::abs(best_g)) {
      best_g = g;
      best_x = x;
    }
    if (std::abs(g) <= opt.value_tolerance) return x;
    if (g < 0.0) {
      lo = x;
    } else {
      hi = x;
    }
    if (hi - lo <= opt.width_tolerance * std::max(1.0, std::abs(x))) break;
    double next = (df > 0.0 && std::isfinite(df)) ? x - g / df : std::numeric_limits<double>::quiet_NaN();
    const bool stalled = std::abs(g) > 0.5 * std::abs(last_g);
    last_g = g;
    if (!(next > lo && next < hi) || stalled) {
      if (std::isinf(hi)) {
        if (++doublings > max_doublings) {
          throw BracketError("find_root_increasing_newton: no upper bracket after " + std::to_string(max_doublings) +
                             " doublings");
        }
        next = 2.0 * std::max(x, lo);
      } else {
        next = 0.5 * (lo + hi);
      }
    }
    if (next <= lo || next >= hi) break;
    x = next;
  }
  return best_x;
}

}  // namespace gsae
