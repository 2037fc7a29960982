#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "gsae/data.hpp"
#include "gsae/errors.hpp"
#include "gsae/numerics/optimize.hpp"
#include "gsae/numerics/rng.hpp"
#include "gsae/numerics/special.hpp"
#include "gsae/parallel.hpp"
#include "gsae/targets.hpp"

namespace gsae {

/// Gamma-gamma model: y_ij | u_i ~ Gamma(alpha, exp(x_ij' gamma) u_i),
/// u_i ~ Gamma(delta, delta).
struct GammaGammaParams {
  double alpha = 1.0;
  double delta = 1.0;
  std::vector<double> gamma_coef;

  void check() const {
    if (!(alpha > 0.0) || !std::isfinite(alpha)) throw DomainError("GammaGammaParams: alpha must be positive");
    if (!(delta > 0.0) || !std::isfinite(delta)) throw DomainError("GammaGammaParams: delta must be positive");
    if (gamma_coef.empty()) throw DomainError("GammaGammaParams: gamma needs at least an intercept");
  }
};

/// Posterior of the area effect: u_i | y_is ~ Gamma(shape, rate).
struct PosteriorU {
  double shape = 1.0;
  double rate = 1.0;

  double mean() const { return shape / rate; }
  /// E[1/u]; finite only for shape > 1.
  double mean_inverse() const {
    if (!(shape > 1.0)) throw MomentError("E[1/u] diverges: posterior shape " + std::to_string(shape) + " <= 1");
    return rate / (shape - 1.0);
  }
};

struct FitResult {
  GammaGammaParams params;
  double loglik = -std::numeric_limits<double>::infinity();
  bool converged = false;
  int iterations = 0;
};

inline double linear_predictor(std::span<const double> x, std::span<const double> coef) {
  if (x.size() != coef.size()) throw DomainError("covariate length does not match coefficient length");
  double s = 0.0;
  for (std::size_t k = 0; k < x.size(); ++k) s += x[k] * coef[k];
  return s;
}

namespace detail {

// Sampled data flattened for repeated likelihood evaluation. Areas are laid
// out in id order so sums do not depend on how the caller arranged them.
struct FlatSample {
  std::size_t dim = 0;
  std::vector<double> y;
  std::vector<double> x;  // row-major, one row of `dim` per sampled unit
  std::vector<std::size_t> begin;  // area a owns units [begin[a], begin[a+1])
  std::vector<double> sum_log_y;
  std::vector<double> sum_x;  // D x dim
  std::vector<std::string> ids;

  explicit FlatSample(const SurveyData& data) : dim(data.p + 1) {
    begin.push_back(0);
    std::vector<const AreaFrame*> order;
    for (const auto& a : data.areas) order.push_back(&a);
    std::stable_sort(order.begin(), order.end(),
                     [](const AreaFrame* l, const AreaFrame* r) { return area_id_less(l->area_id, r->area_id); });
    for (const AreaFrame* ap : order) {
      const AreaFrame& a = *ap;
      double sly = 0.0;
      std::vector<double> sx(dim, 0.0);
      for (const auto& u : a.sampled_units) {
        if (u.x.size() != dim) throw DataError("area " + a.area_id + ": covariate length mismatch");
        y.push_back(u.y);
        sly += std::log(u.y);
        for (std::size_t k = 0; k < dim; ++k) {
          x.push_back(u.x[k]);
          sx[k] += u.x[k];
        }
      }
      begin.push_back(y.size());
      sum_log_y.push_back(sly);
      sum_x.insert(sum_x.end(), sx.begin(), sx.end());
      ids.push_back(a.area_id);
    }
  }

  std::size_t areas() const { return ids.size(); }
};

// Log-likelihood; on a non-finite intermediate returns NaN and reports the area.
inline double gg_loglik_flat(double alpha, double delta, std::span<const double> gamma, const FlatSample& s,
                             std::size_t* failed_area = nullptr) {
  const double lg_alpha = log_gamma_fn(alpha);
  const double lg_delta = log_gamma_fn(delta);
  const double delta_term = delta * std::log(delta) - lg_delta;
  double total = 0.0;
  for (std::size_t a = 0; a < s.areas(); ++a) {
    const std::size_t b = s.begin[a];
    const std::size_t e = s.begin[a + 1];
    if (b == e) continue;
    const double n = static_cast<double>(e - b);
    double weighted = 0.0;
    for (std::size_t j = b; j < e; ++j) {
      const double* xr = &s.x[j * s.dim];
      double eta = 0.0;
      for (std::size_t k = 0; k < s.dim; ++k) eta += xr[k] * gamma[k];
      weighted += s.y[j] * std::exp(eta);
    }
    double sx_gamma = 0.0;
    for (std::size_t k = 0; k < s.dim; ++k) sx_gamma += s.sum_x[a * s.dim + k] * gamma[k];
    const double shape = n * alpha + delta;
    const double term = delta_term - n * lg_alpha + (alpha - 1.0) * s.sum_log_y[a] + alpha * sx_gamma +
                        log_gamma_fn(shape) - shape * std::log(weighted + delta);
    if (!std::isfinite(term)) {
      if (failed_area) *failed_area = a;
      return std::numeric_limits<double>::quiet_NaN();
    }
    total += term;
  }
  return total;
}

// Least-squares coefficients of log y on x over all sampled units.
inline std::vector<double> log_linear_ls(const FlatSample& s) {
  const auto m = static_cast<Eigen::Index>(s.y.size());
  const auto d = static_cast<Eigen::Index>(s.dim);
  Eigen::MatrixXd X(m, d);
  Eigen::VectorXd ly(m);
  for (Eigen::Index j = 0; j < m; ++j) {
    for (Eigen::Index k = 0; k < d; ++k) X(j, k) = s.x[static_cast<std::size_t>(j * d + k)];
    ly(j) = std::log(s.y[static_cast<std::size_t>(j)]);
  }
  const Eigen::VectorXd beta = X.colPivHouseholderQr().solve(ly);
  return {beta.data(), beta.data() + beta.size()};
}

}  // namespace detail

/// Marginal log-likelihood sum_i log f(y_is | psi), with the area effect
/// integrated out in closed form. Areas with n_i = 0 contribute 0.
inline double loglik(const GammaGammaParams& params, const SurveyData& data) {
  params.check();
  if (params.gamma_coef.size() != data.p + 1) throw DomainError("loglik: gamma length must be p + 1");
  const detail::FlatSample flat(data);
  std::size_t failed = 0;
  const double ll = detail::gg_loglik_flat(params.alpha, params.delta, params.gamma_coef, flat, &failed);
  if (std::isnan(ll)) {
    throw EvaluationError("loglik: non-finite contribution from area " + flat.ids[failed]);
  }
  return ll;
}

/// Maximum likelihood over (log alpha, log delta, gamma). Without `start`, gamma
/// starts at the negated log-linear least-squares coefficients (y has rate
/// exp(x'gamma) u, so log y decreases in x'gamma) and log alpha = log delta = 0.
inline FitResult fit(const SurveyData& data, const OptimizerConfig& config = {},
                     const std::optional<GammaGammaParams>& start = std::nullopt) {
  const detail::FlatSample flat(data);
  const std::size_t dim = flat.dim;
  if (flat.y.empty()) throw DomainError("fit: no sampled units");
  if (flat.y.size() <= data.p + 3) throw DomainError("fit: total sample size must exceed p + 3");

  std::vector<double> theta(dim + 2);
  if (start) {
    start->check();
    theta[0] = std::log(start->alpha);
    theta[1] = std::log(start->delta);
    std::copy(start->gamma_coef.begin(), start->gamma_coef.end(), theta.begin() + 2);
  } else {
    const auto ls = detail::log_linear_ls(flat);
    for (std::size_t k = 0; k < dim; ++k) theta[2 + k] = -ls[k];
  }

  auto to_params = [dim](std::span<const double> t) {
    GammaGammaParams p;
    p.alpha = std::exp(t[0]);
    p.delta = std::exp(t[1]);
    p.gamma_coef.assign(t.begin() + 2, t.begin() + 2 + static_cast<std::ptrdiff_t>(dim));
    return p;
  };

  const auto [ymin, ymax] = std::minmax_element(flat.y.begin(), flat.y.end());
  if (*ymin == *ymax) {
    // every response equal: the likelihood increases without bound in alpha
    FitResult r;
    r.params = to_params(theta);
    r.converged = false;
    return r;
  }

  auto objective = [&flat](std::span<const double> t) {
    const double a = std::exp(t[0]);
    const double d = std::exp(t[1]);
    if (!std::isfinite(a) || !std::isfinite(d) || a <= 0.0 || d <= 0.0) return std::numeric_limits<double>::infinity();
    const double ll = detail::gg_loglik_flat(a, d, t.subspan(2), flat);
    return std::isfinite(ll) ? -ll : std::numeric_limits<double>::infinity();
  };

  FitResult r;
  try {
    const auto m = minimize(objective, theta, config);
    r.params = to_params(m.argmin);
    r.loglik = -m.value;
    r.iterations = m.iterations;
    r.converged = m.converged && std::isfinite(r.loglik);
  } catch (const ConvergenceError& e) {
    r.params = to_params(e.best_point());
    r.converged = false;
  }
  return r;
}

inline PosteriorU posterior_u(const GammaGammaParams& params, const AreaFrame& area) {
  params.check();
  double rate = params.delta;
  for (const auto& u : area.sampled_units) rate += u.y * std::exp(linear_predictor(u.x, params.gamma_coef));
  if (!std::isfinite(rate)) throw EvaluationError("posterior_u: non-finite rate in area " + area.area_id);
  return {static_cast<double>(area.n()) * params.alpha + params.delta, rate};
}

/// Closed-form best predictor of the area mean.
inline double predict_mean_closed(const GammaGammaParams& params, const AreaFrame& area) {
  const PosteriorU post = posterior_u(params, area);
  if (!(post.shape > 1.0)) {
    throw MomentError("predict_mean_closed: n*alpha + delta = " + std::to_string(post.shape) + " <= 1 in area " +
                      area.area_id);
  }
  double total = 0.0;
  for (const auto& u : area.sampled_units) total += u.y;
  if (area.nonsampled_count() > 0) {
    area.require_nonsampled_covariates();
    const double inv_u = post.mean_inverse();
    for (const auto& x : area.nonsampled_covariates) {
      total += params.alpha * std::exp(-linear_predictor(x, params.gamma_coef)) * inv_u;
    }
  }
  return total / static_cast<double>(area.N);
}

/// Monte Carlo predictions for several targets from one set of simulated
/// populations. draws[k][l] is target k evaluated on simulated population l.
struct EbPrediction {
  std::vector<double> point;
  std::vector<std::vector<double>> draws;
};

namespace detail {

inline EbPrediction constant_prediction(std::span<const TargetParameter> targets, const AreaFrame& area, std::size_t L) {
  std::vector<double> y = area.sampled_y();
  std::vector<double> h(targets.size());
  evaluate_many(targets, y, h);
  EbPrediction p;
  p.point = h;
  for (double v : h) p.draws.emplace_back(L, v);
  return p;
}

// Shared Monte Carlo loop: `fill(l, tail)` writes one draw of the non-sampled
// responses into tail; the sampled part is fixed.
template <class Fill>
EbPrediction simulate_targets(std::span<const TargetParameter> targets, const AreaFrame& area, std::size_t L, Fill&& fill) {
  const std::size_t n = area.n();
  const std::size_t N = area.N;
  std::vector<double> population(N);
  for (std::size_t j = 0; j < n; ++j) population[j] = area.sampled_units[j].y;
  std::vector<double> work(N);
  std::vector<double> h(targets.size());
  EbPrediction p;
  p.draws.assign(targets.size(), std::vector<double>(L));
  std::span<double> tail(population.data() + n, N - n);
  for (std::size_t l = 0; l < L; ++l) {
    fill(l, tail);
    std::copy(population.begin(), population.end(), work.begin());
    evaluate_many(targets, work, h);
    for (std::size_t k = 0; k < targets.size(); ++k) p.draws[k][l] = h[k];
  }
  p.point.resize(targets.size());
  for (std::size_t k = 0; k < targets.size(); ++k) {
    double s = 0.0;
    for (double v : p.draws[k]) s += v;
    p.point[k] = s / static_cast<double>(L);
  }
  return p;
}

}  // namespace detail

/// Empirical best prediction by simulation: u ~ posterior, then each
/// non-sampled y ~ Gamma(alpha, exp(x'gamma) u), then h on the completed
/// population; the point prediction is the average over L draws.
inline EbPrediction eb_predict_many(const GammaGammaParams& params, const AreaFrame& area,
                                    std::span<const TargetParameter> targets, std::size_t L, RngStream& rng) {
  if (L < 1) throw DomainError("eb_predict: L must be >= 1");
  params.check();
  if (area.N == 0) throw DataError("eb_predict: area " + area.area_id + " has N = 0");
  if (area.nonsampled_count() == 0) return detail::constant_prediction(targets, area, L);
  area.require_nonsampled_covariates();
  const PosteriorU post = posterior_u(params, area);
  std::vector<double> scale;
  scale.reserve(area.nonsampled_covariates.size());
  for (const auto& x : area.nonsampled_covariates) scale.push_back(std::exp(-linear_predictor(x, params.gamma_coef)));
  const GammaSampler u_sampler(post.shape);
  const GammaSampler y_sampler(params.alpha);
  return detail::simulate_targets(targets, area, L, [&](std::size_t, std::span<double> tail) {
    const double u = u_sampler(rng) / post.rate;
    for (std::size_t j = 0; j < tail.size(); ++j) tail[j] = y_sampler(rng) * scale[j] / u;
  });
}

struct SinglePrediction {
  double point = 0.0;
  std::vector<double> mc_draws;
};

inline SinglePrediction eb_predict(const GammaGammaParams& params, const AreaFrame& area, const TargetParameter& target,
                                   std::size_t L, RngStream& rng) {
  auto p = eb_predict_many(params, area, std::span(&target, 1), L, rng);
  return {p.point[0], std::move(p.draws[0])};
}

/// One row of a prediction table.
struct PredictionRow {
  std::string area;
  std::string target;
  std::string method;
  double estimate = 0.0;
  std::size_t n = 0;
  std::size_t N = 0;
  std::size_t L = 0;
  std::uint64_t seed = 0;
  std::size_t fallback_count = 0;
};

inline void write_prediction_table(std::ostream& out, std::span<const PredictionRow> rows) {
  out << "area,target,method,estimate,n,N,L,seed,fallback_count\n";
  for (const auto& r : rows) {
    out << r.area << ',' << r.target << ',' << r.method << ',' << detail::format_double(r.estimate) << ',' << r.n << ','
        << r.N << ',' << r.L << ',' << r.seed << ',' << r.fallback_count << '\n';
  }
}

/// Fit once, then predict every target in every area; area i draws from
/// stream (seed, i) so results do not depend on the thread count.
inline std::vector<PredictionRow> eb_pipeline(const SurveyData& data, std::span<const TargetParameter> targets,
                                              std::size_t L, std::uint64_t seed, const OptimizerConfig& config = {},
                                              unsigned threads = 1, FitResult* fit_out = nullptr) {
  const FitResult f = fit(data, config);
  if (!f.converged) throw EstimatorError("eb_pipeline: model fit did not converge");
  if (fit_out) *fit_out = f;
  std::vector<std::vector<PredictionRow>> per_area(data.D());
  parallel_for(data.D(), threads, [&](std::size_t i) {
    const auto& area = data.areas[i];
    RngStream rng(seed, i);
    EbPrediction p;
    try {
      p = eb_predict_many(f.params, area, targets, L, rng);
    } catch (const Error& e) {
      throw EstimatorError("area " + area.area_id + ": " + e.what());
    }
    for (std::size_t k = 0; k < targets.size(); ++k) {
      per_area[i].push_back({area.area_id, targets[k].label, "EB", p.point[k], area.n(), area.N, L, seed, 0});
    }
  });
  std::vector<PredictionRow> rows;
  for (auto& v : per_area) rows.insert(rows.end(), v.begin(), v.end());
  return rows;
}

/// Simulates an area effect and sampled responses from the model at the
/// sampled units' covariates (the parametric-bootstrap sample generator).
inline SurveyData simulate_sample(const GammaGammaParams& params, const SurveyData& data, RngStream& rng) {
  SurveyData out = data;
  const GammaSampler u_sampler(params.delta);
  const GammaSampler y_sampler(params.alpha);
  for (auto& a : out.areas) {
    const double u = u_sampler(rng) / params.delta;
    for (auto& unit : a.sampled_units) {
      unit.y = y_sampler(rng) / (std::exp(linear_predictor(unit.x, params.gamma_coef)) * u);
    }
  }
  return out;
}

}  // namespace gsae
