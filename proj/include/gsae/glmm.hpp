#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numbers>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "gsae/data.hpp"
#include "gsae/errors.hpp"
#include "gsae/gamma_gamma.hpp"
#include "gsae/numerics/gauss_hermite.hpp"
#include "gsae/numerics/optimize.hpp"
#include "gsae/numerics/rng.hpp"
#include "gsae/numerics/special.hpp"
#include "gsae/parallel.hpp"
#include "gsae/targets.hpp"

namespace gsae {

/// Gamma GLMM: y | v ~ Gamma(nu, nu / mu), mu = exp(x'beta + v), v ~ N(0, phi^2).
struct GlmmParams {
  std::vector<double> beta;
  double phi = 1.0;
  double nu = 1.0;

  void check() const {
    if (!(phi > 0.0) || !std::isfinite(phi)) throw DomainError("GlmmParams: phi must be positive");
    if (!(nu > 0.0) || !std::isfinite(nu)) throw DomainError("GlmmParams: nu must be positive");
    if (beta.empty()) throw DomainError("GlmmParams: beta must include the intercept");
  }
};

struct GlmmFit {
  GlmmParams params;
  std::vector<double> vhat;  // conditional modes, one per area in data order
  double loglik = 0.0;
  bool converged = false;
  std::size_t iterations = 0;
};

/// Quadrature used by the GLMM likelihood. nodes == 1 is the Laplace
/// approximation; otherwise at least 5 nodes are required.
struct GlmmConfig {
  int quad_nodes = 25;
  OptimizerConfig optimizer{};

  void check() const {
    if (quad_nodes != 1 && quad_nodes < 5) throw DomainError("GLMM quadrature needs 1 (Laplace) or >= 5 nodes");
    optimizer.check();
  }
};

namespace detail {

// Per-area sufficient pieces of the conditional log-density
//   log g(y_s | v) = c - nu n v - nu s exp(-v)
// with s = sum y exp(-x'beta) and
//   c = sum [nu log nu - lgamma(nu) + (nu - 1) log y - nu x'beta].
struct GlmmAreaTerms {
  double n = 0.0;
  double s = 0.0;
  double c = 0.0;
};

inline GlmmAreaTerms glmm_area_terms(const FlatSample& f, std::size_t a, std::span<const double> beta, double nu,
                                     double nu_const) {
  GlmmAreaTerms t;
  const std::size_t b = f.begin[a];
  const std::size_t e = f.begin[a + 1];
  t.n = static_cast<double>(e - b);
  double sum_xb = 0.0;
  for (std::size_t j = b; j < e; ++j) {
    const double* xr = &f.x[j * f.dim];
    double xb = 0.0;
    for (std::size_t k = 0; k < f.dim; ++k) xb += xr[k] * beta[k];
    sum_xb += xb;
    t.s += f.y[j] * std::exp(-xb);
  }
  t.c = t.n * nu_const + (nu - 1.0) * f.sum_log_y[a] - nu * sum_xb;
  return t;
}

inline double glmm_nu_const(double nu) { return nu * std::log(nu) - log_gamma_fn(nu); }

// Mode of l(v) = -nu n v - nu s e^{-v} - v^2 / (2 phi^2). The score is strictly
// decreasing, so Newton steps are kept inside a shrinking bracket.
inline double glmm_mode(const GlmmAreaTerms& t, double phi, double nu) {
  if (t.n == 0.0) return 0.0;
  const double inv_phi2 = 1.0 / (phi * phi);
  auto score = [&](double v) { return nu * t.s * std::exp(-v) - nu * t.n - v * inv_phi2; };
  double lo, hi;
  const double g0 = score(0.0);
  if (g0 == 0.0) return 0.0;
  if (g0 > 0.0) {
    lo = 0.0;
    hi = phi * phi * nu * t.s;
  } else {
    hi = 0.0;
    lo = -phi * phi * nu * t.n;
  }
  // start from the no-shrinkage solution log(s / n), clipped into the bracket
  double v = std::clamp(std::log(t.s / t.n), lo, hi);
  for (int it = 0; it < 200; ++it) {
    const double g = score(v);
    if (g == 0.0) return v;
    if (g > 0.0) lo = v; else hi = v;
    const double h = -nu * t.s * std::exp(-v) - inv_phi2;
    double next = v - g / h;
    if (!(next > lo && next < hi)) next = 0.5 * (lo + hi);
    if (std::abs(next - v) <= 1e-13 * (1.0 + std::abs(v)) || hi - lo <= 1e-15 * (1.0 + std::abs(v))) return next;
    v = next;
  }
  return v;
}

// log of the area integral by adaptive Gauss-Hermite quadrature centred at the mode.
inline double glmm_area_loglik(const GlmmAreaTerms& t, double phi, double nu, const GaussHermiteRule& rule,
                               double* mode_out = nullptr) {
  if (t.n == 0.0) {
    if (mode_out) *mode_out = 0.0;
    return 0.0;
  }
  const double inv_phi2 = 1.0 / (phi * phi);
  const double log_norm = -0.5 * std::log(2.0 * std::numbers::pi * phi * phi);
  auto ell = [&](double v) { return t.c - nu * t.n * v - nu * t.s * std::exp(-v) - 0.5 * v * v * inv_phi2 + log_norm; };
  const double mode = glmm_mode(t, phi, nu);
  if (mode_out) *mode_out = mode;
  const double curvature = nu * t.s * std::exp(-mode) + inv_phi2;
  const double sigma = 1.0 / std::sqrt(curvature);
  const double scale = std::numbers::sqrt2 * sigma;
  double peak = -std::numeric_limits<double>::infinity();
  thread_local std::vector<double> terms;
  terms.resize(rule.nodes.size());
  for (std::size_t k = 0; k < rule.nodes.size(); ++k) {
    const double z = rule.nodes[k];
    terms[k] = rule.log_weights[k] + z * z + ell(mode + scale * z);
    peak = std::max(peak, terms[k]);
  }
  double acc = 0.0;
  for (double v : terms) acc += std::exp(v - peak);
  return std::log(scale) + peak + std::log(acc);
}

inline double glmm_loglik_flat(const GlmmParams& p, const FlatSample& f, const GaussHermiteRule& rule,
                               std::size_t* failed_area = nullptr, std::vector<double>* modes = nullptr) {
  const double nu_const = glmm_nu_const(p.nu);
  double total = 0.0;
  if (modes) modes->assign(f.areas(), 0.0);
  for (std::size_t a = 0; a < f.areas(); ++a) {
    const auto t = glmm_area_terms(f, a, p.beta, p.nu, nu_const);
    double mode = 0.0;
    const double la = glmm_area_loglik(t, p.phi, p.nu, rule, &mode);
    if (!std::isfinite(la)) {
      if (failed_area) *failed_area = a;
      return std::numeric_limits<double>::quiet_NaN();
    }
    if (modes) (*modes)[a] = mode;
    total += la;
  }
  return total;
}

// Maps FlatSample (id order) modes back to data order.
inline std::vector<double> modes_in_data_order(const SurveyData& data, const FlatSample& f,
                                               const std::vector<double>& flat_modes) {
  std::vector<double> out(data.D(), 0.0);
  std::map<std::string, double> by_id;
  for (std::size_t a = 0; a < f.areas(); ++a) by_id[f.ids[a]] = flat_modes[a];
  for (std::size_t i = 0; i < data.D(); ++i) out[i] = by_id.at(data.areas[i].area_id);
  return out;
}

}  // namespace detail

/// Marginal GLMM log-likelihood with the area effect integrated by adaptive
/// Gauss-Hermite quadrature (nodes == 1 gives the Laplace approximation).
inline double glmm_loglik(const GlmmParams& params, const SurveyData& data, int quad_nodes = 25) {
  params.check();
  GlmmConfig{quad_nodes}.check();
  if (params.beta.size() != data.p + 1) throw DomainError("glmm_loglik: beta length must be p + 1");
  const detail::FlatSample flat(data);
  const auto rule = gauss_hermite(quad_nodes);
  std::size_t failed = 0;
  const double ll = detail::glmm_loglik_flat(params, flat, rule, &failed);
  if (std::isnan(ll)) throw EvaluationError("glmm_loglik: non-finite contribution from area " + flat.ids[failed]);
  return ll;
}

/// Conditional modes of the area effects at `params`, in data order.
inline std::vector<double> glmm_modes(const GlmmParams& params, const SurveyData& data) {
  params.check();
  const detail::FlatSample flat(data);
  const double nu_const = detail::glmm_nu_const(params.nu);
  std::vector<double> modes(flat.areas());
  for (std::size_t a = 0; a < flat.areas(); ++a) {
    modes[a] = detail::glmm_mode(detail::glmm_area_terms(flat, a, params.beta, params.nu, nu_const), params.phi, params.nu);
  }
  return detail::modes_in_data_order(data, flat, modes);
}

/// Maximum likelihood over (beta, log phi, log nu). Start: beta from least
/// squares of log y on x, phi from the spread of area mean residuals, nu from
/// the residual coefficient of variation.
inline GlmmFit glmm_fit(const SurveyData& data, const GlmmConfig& config = {},
                        const std::optional<GlmmParams>& start = std::nullopt) {
  config.check();
  const detail::FlatSample flat(data);
  const std::size_t dim = flat.dim;
  if (flat.y.empty()) throw DomainError("glmm_fit: no sampled units");
  if (flat.y.size() <= data.p + 3) throw DomainError("glmm_fit: total sample size must exceed p + 3");
  const auto rule = gauss_hermite(config.quad_nodes);

  std::vector<double> theta(dim + 2);
  if (start) {
    start->check();
    std::copy(start->beta.begin(), start->beta.end(), theta.begin());
    theta[dim] = std::log(start->phi);
    theta[dim + 1] = std::log(start->nu);
  } else {
    const auto ls = detail::log_linear_ls(flat);
    std::vector<double> ratio(flat.y.size());
    std::vector<double> area_means;
    for (std::size_t a = 0; a < flat.areas(); ++a) {
      double acc = 0.0;
      for (std::size_t j = flat.begin[a]; j < flat.begin[a + 1]; ++j) {
        double xb = 0.0;
        for (std::size_t k = 0; k < dim; ++k) xb += flat.x[j * dim + k] * ls[k];
        ratio[j] = flat.y[j] * std::exp(-xb);
        acc += std::log(ratio[j]);
      }
      if (flat.begin[a + 1] > flat.begin[a]) area_means.push_back(acc / static_cast<double>(flat.begin[a + 1] - flat.begin[a]));
    }
    double m = 0.0, v = 0.0;
    for (double r : ratio) m += r;
    m /= static_cast<double>(ratio.size());
    for (double r : ratio) v += (r - m) * (r - m);
    v /= static_cast<double>(ratio.size());
    double am = 0.0, av = 0.0;
    for (double x : area_means) am += x;
    am /= static_cast<double>(area_means.size());
    for (double x : area_means) av += (x - am) * (x - am);
    av /= static_cast<double>(std::max<std::size_t>(1, area_means.size()));
    std::copy(ls.begin(), ls.end(), theta.begin());
    const double cv2 = v / (m * m);
    theta[dim] = 0.5 * std::log(std::max(av, 1e-4));
    theta[dim + 1] = std::log(std::clamp(1.0 / std::max(cv2, 1e-6), 0.05, 1e4));
    // log y has mean log mu + digamma(nu) - log nu; shift the intercept to mu
    theta[0] += std::log(m);
  }

  auto to_params = [dim](std::span<const double> t) {
    GlmmParams p;
    p.beta.assign(t.begin(), t.begin() + static_cast<std::ptrdiff_t>(dim));
    p.phi = std::exp(t[dim]);
    p.nu = std::exp(t[dim + 1]);
    return p;
  };

  auto objective = [&](std::span<const double> t) {
    const GlmmParams p = to_params(t);
    if (!(p.phi > 0.0) || !(p.nu > 0.0) || !std::isfinite(p.phi) || !std::isfinite(p.nu)) {
      return std::numeric_limits<double>::infinity();
    }
    const double ll = detail::glmm_loglik_flat(p, flat, rule);
    return std::isfinite(ll) ? -ll : std::numeric_limits<double>::infinity();
  };

  GlmmFit r;
  try {
    const auto m = minimize(objective, theta, config.optimizer);
    r.params = to_params(m.argmin);
    r.loglik = -m.value;
    r.iterations = m.iterations;
    r.converged = m.converged && std::isfinite(r.loglik);
  } catch (const ConvergenceError& e) {
    r.params = to_params(e.best_point());
    r.converged = false;
  }
  std::vector<double> modes;
  detail::glmm_loglik_flat(r.params, flat, rule, nullptr, &modes);
  r.vhat = detail::modes_in_data_order(data, flat, modes);
  return r;
}

namespace detail {

// sum_l w_l h_l / sum_l w_l with w_l = exp(log_w_l), shifted by the maximum.
inline double weighted_ratio(std::span<const double> log_w, std::span<const double> h) {
  double peak = -std::numeric_limits<double>::infinity();
  for (double lw : log_w) {
    if (!std::isnan(lw)) peak = std::max(peak, lw);
  }
  if (!std::isfinite(peak)) throw EstimatorError("EB_HZ: importance weights are degenerate");
  double num = 0.0, den = 0.0;
  for (std::size_t l = 0; l < log_w.size(); ++l) {
    if (std::isnan(log_w[l])) continue;
    const double w = std::exp(log_w[l] - peak);
    num += w * h[l];
    den += w;
  }
  return num / den;
}

inline std::vector<double> glmm_means(const GlmmParams& p, const std::vector<std::vector<double>>& xs, double v) {
  std::vector<double> mu;
  mu.reserve(xs.size());
  for (const auto& x : xs) mu.push_back(std::exp(linear_predictor(x, p.beta) + v));
  return mu;
}

}  // namespace detail

/// EBP approximation by importance sampling from the prior of v:
/// v_l ~ N(0, phi^2), weight g(y_s | v_l), and L2 simulated completions per v_l.
inline std::vector<double> predict_ebp_hz_many(const GlmmParams& params, const AreaFrame& area,
                                               std::span<const TargetParameter> targets, std::size_t L1, std::size_t L2,
                                               RngStream& rng) {
  if (L1 < 1 || L2 < 1) throw DomainError("predict_ebp_hz: L1 and L2 must be >= 1");
  params.check();
  if (area.nonsampled_count() == 0) return detail::constant_prediction(targets, area, 1).point;
  area.require_nonsampled_covariates();
  const double nu = params.nu;
  const double nu_const = detail::glmm_nu_const(nu);
  double c = 0.0, s = 0.0;
  for (const auto& u : area.sampled_units) {
    const double xb = linear_predictor(u.x, params.beta);
    c += nu_const + (nu - 1.0) * std::log(u.y) - nu * xb;
    s += u.y * std::exp(-xb);
  }
  const double n = static_cast<double>(area.n());
  const auto base_mu = detail::glmm_means(params, area.nonsampled_covariates, 0.0);
  const GammaSampler y_sampler(nu);
  std::vector<double> log_w(L1);
  std::vector<std::vector<double>> h(targets.size(), std::vector<double>(L1));
  std::vector<double> scale(base_mu.size());
  std::vector<double> hk(targets.size());
  for (std::size_t l1 = 0; l1 < L1; ++l1) {
    const double v = params.phi * rng.normal();
    log_w[l1] = c - nu * n * v - nu * s * std::exp(-v);
    const double ev = std::exp(v) / nu;
    for (std::size_t j = 0; j < scale.size(); ++j) scale[j] = base_mu[j] * ev;
    const auto inner = detail::simulate_targets(targets, area, L2, [&](std::size_t, std::span<double> tail) {
      for (std::size_t j = 0; j < tail.size(); ++j) tail[j] = y_sampler(rng) * scale[j];
    });
    for (std::size_t k = 0; k < targets.size(); ++k) h[k][l1] = inner.point[k];
  }
  std::vector<double> out(targets.size());
  for (std::size_t k = 0; k < targets.size(); ++k) out[k] = detail::weighted_ratio(log_w, h[k]);
  return out;
}

inline double predict_ebp_hz(const GlmmFit& fit, const AreaFrame& area, const TargetParameter& target, std::size_t L1,
                             std::size_t L2, RngStream& rng) {
  return predict_ebp_hz_many(fit.params, area, std::span(&target, 1), L1, L2, rng)[0];
}

/// Plug-in predictor: non-sampled values replaced by exp(x'beta + vhat).
inline std::vector<double> predict_plugin_many(const GlmmParams& params, double vhat, const AreaFrame& area,
                                               std::span<const TargetParameter> targets) {
  params.check();
  std::vector<double> pop = area.sampled_y();
  if (area.nonsampled_count() > 0) {
    area.require_nonsampled_covariates();
    const auto mu = detail::glmm_means(params, area.nonsampled_covariates, vhat);
    pop.insert(pop.end(), mu.begin(), mu.end());
  }
  std::vector<double> out(targets.size());
  evaluate_many(targets, pop, out);
  return out;
}

inline double predict_plugin(const GlmmFit& fit, std::size_t area_index, const AreaFrame& area,
                             const TargetParameter& target) {
  return predict_plugin_many(fit.params, fit.vhat.at(area_index), area, std::span(&target, 1))[0];
}

/// Marginal predictor: L completions with y ~ Gamma(nu, nu / exp(x'beta + vhat)).
inline std::vector<double> predict_marginal_many(const GlmmParams& params, double vhat, const AreaFrame& area,
                                                 std::span<const TargetParameter> targets, std::size_t L,
                                                 RngStream& rng) {
  if (L < 1) throw DomainError("predict_marginal: L must be >= 1");
  params.check();
  if (area.nonsampled_count() == 0) return detail::constant_prediction(targets, area, 1).point;
  area.require_nonsampled_covariates();
  auto scale = detail::glmm_means(params, area.nonsampled_covariates, vhat);
  for (auto& m : scale) m /= params.nu;
  const GammaSampler y_sampler(params.nu);
  return detail::simulate_targets(targets, area, L, [&](std::size_t, std::span<double> tail) {
    for (std::size_t j = 0; j < tail.size(); ++j) tail[j] = y_sampler(rng) * scale[j];
  }).point;
}

inline double predict_marginal(const GlmmFit& fit, std::size_t area_index, const AreaFrame& area,
                               const TargetParameter& target, std::size_t L, RngStream& rng) {
  return predict_marginal_many(fit.params, fit.vhat.at(area_index), area, std::span(&target, 1), L, rng)[0];
}

}  // namespace gsae
