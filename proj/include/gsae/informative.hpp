#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "gsae/data.hpp"
#include "gsae/errors.hpp"
#include "gsae/gamma_gamma.hpp"
#include "gsae/numerics/optimize.hpp"
#include "gsae/numerics/rng.hpp"
#include "gsae/numerics/roots.hpp"
#include "gsae/numerics/special.hpp"
#include "gsae/parallel.hpp"
#include "gsae/targets.hpp"

namespace gsae {

/// Expected sampling weight given (x, y) for a sampled unit:
/// E(w | x, y) = kappa_i exp(x'a - b y). The intercept a[0] is always 0
/// because it is not identified separately from the area constants kappa_i.
struct WeightModelParams {
  std::vector<double> a;                // length p + 1, a[0] == 0
  double b = 0.0;
  std::map<std::string, double> kappa;  // keyed by area id; areas without sample are absent
  bool degenerate = false;              // weights carried no information about (a, b)
  double sse = 0.0;

  void check() const {
    if (!std::isfinite(b)) throw DomainError("WeightModelParams: b must be finite");
    for (double v : a) {
      if (!std::isfinite(v)) throw DomainError("WeightModelParams: a must be finite");
    }
    for (const auto& [id, k] : kappa) {
      if (!(k > 0.0) || !std::isfinite(k)) throw DomainError("WeightModelParams: kappa for area " + id + " must be positive");
    }
  }
};

struct InformativeModel {
  GammaGammaParams sample_params;
  WeightModelParams weights;

  void check() const {
    sample_params.check();
    weights.check();
    if (weights.a.size() != sample_params.gamma_coef.size()) {
      throw DomainError("InformativeModel: weight coefficients and gamma must have the same length");
    }
  }

  double kappa(const std::string& area_id) const {
    const auto it = weights.kappa.find(area_id);
    if (it == weights.kappa.end()) throw DomainError("InformativeModel: no kappa for area " + area_id);
    return it->second;
  }
};

/// Smallest lambda for which the complement mixture is used.
inline constexpr double kLambdaFloor = 1.0 + 1e-6;

namespace detail {

struct WeightSample {
  std::vector<std::size_t> start;  // area offsets into the unit arrays, size areas + 1
  std::vector<std::string> ids;
  std::vector<double> w, y;
  std::vector<double> x;  // row-major, p + 1 columns
  std::size_t dim = 0;
};

inline WeightSample weight_sample(const SurveyData& data) {
  WeightSample s;
  s.dim = data.p + 1;
  std::vector<const AreaFrame*> order;
  for (const auto& a : data.areas) {
    if (a.n() > 0) order.push_back(&a);
  }
  std::stable_sort(order.begin(), order.end(),
                   [](const AreaFrame* l, const AreaFrame* r) { return area_id_less(l->area_id, r->area_id); });
  s.start.push_back(0);
  for (const AreaFrame* a : order) {
    for (const auto& u : a->sampled_units) {
      if (!u.weight) throw DataError("fit_weight_model: area " + a->area_id + " has a sampled unit without a weight");
      if (!(*u.weight > 0.0)) throw DataError("fit_weight_model: weights must be positive (area " + a->area_id + ")");
      s.w.push_back(*u.weight);
      s.y.push_back(u.y);
      s.x.insert(s.x.end(), u.x.begin(), u.x.end());
    }
    s.ids.push_back(a->area_id);
    s.start.push_back(s.w.size());
  }
  return s;
}

// Profiled SSE for slopes theta = (a_1..a_p, b); kappa_i in closed form.
inline double weight_sse(const WeightSample& s, std::span<const double> theta, std::vector<double>* kappa = nullptr) {
  const std::size_t p = s.dim - 1;
  const double b = theta[p];
  double sse = 0.0;
  if (kappa) kappa->clear();
  for (std::size_t i = 0; i + 1 < s.start.size(); ++i) {
    double sww = 0.0, swe = 0.0, see = 0.0;
    for (std::size_t j = s.start[i]; j < s.start[i + 1]; ++j) {
      double eta = -b * s.y[j];
      for (std::size_t k = 1; k <= p; ++k) eta += s.x[j * s.dim + k] * theta[k - 1];
      const double e = std::exp(eta);
      sww += s.w[j] * s.w[j];
      swe += s.w[j] * e;
      see += e * e;
    }
    if (!(see > 0.0) || !std::isfinite(see)) return std::numeric_limits<double>::infinity();
    sse += std::max(0.0, sww - swe * swe / see);
    if (kappa) kappa->push_back(swe / see);
  }
  return sse;
}

// Within-area least squares of log w on (x, y): the slope start values.
inline std::vector<double> within_area_log_ls(const WeightSample& s) {
  const std::size_t p = s.dim - 1;
  const auto m = static_cast<Eigen::Index>(s.w.size());
  Eigen::MatrixXd X(m, static_cast<Eigen::Index>(p + 1));
  Eigen::VectorXd lw(m);
  for (std::size_t i = 0; i + 1 < s.start.size(); ++i) {
    const std::size_t lo = s.start[i], hi = s.start[i + 1];
    std::vector<double> mean(p + 2, 0.0);
    for (std::size_t j = lo; j < hi; ++j) {
      for (std::size_t k = 1; k <= p; ++k) mean[k - 1] += s.x[j * s.dim + k];
      mean[p] += s.y[j];
      mean[p + 1] += std::log(s.w[j]);
    }
    for (double& v : mean) v /= static_cast<double>(hi - lo);
    for (std::size_t j = lo; j < hi; ++j) {
      const auto r = static_cast<Eigen::Index>(j);
      for (std::size_t k = 1; k <= p; ++k) X(r, static_cast<Eigen::Index>(k - 1)) = s.x[j * s.dim + k] - mean[k - 1];
      X(r, static_cast<Eigen::Index>(p)) = s.y[j] - mean[p];
      lw(r) = std::log(s.w[j]) - mean[p + 1];
    }
  }
  Eigen::VectorXd c = X.colPivHouseholderQr().solve(lw);
  std::vector<double> theta(c.data(), c.data() + c.size());
  theta[p] = -theta[p];  // log w = ... - b y
  for (double& v : theta) {
    if (!std::isfinite(v)) v = 0.0;
  }
  return theta;
}

}  // namespace detail

/// Least-squares fit of the weight model. kappa_i is profiled out, so the
/// simplex search runs over (a_1..a_p, b) only.
inline WeightModelParams fit_weight_model(const SurveyData& data, const OptimizerConfig& config = {}) {
  const detail::WeightSample s = detail::weight_sample(data);
  if (s.w.empty()) throw DataError("fit_weight_model: no sampled units with weights");
  const std::size_t p = data.p;

  WeightModelParams out;
  bool constant_within = true;
  for (std::size_t i = 0; i + 1 < s.start.size() && constant_within; ++i) {
    for (std::size_t j = s.start[i] + 1; j < s.start[i + 1]; ++j) {
      if (s.w[j] != s.w[s.start[i]]) {
        constant_within = false;
        break;
      }
    }
  }

  std::vector<double> theta(p + 1, 0.0);
  if (!constant_within) {
    theta = detail::within_area_log_ls(s);
    const double start_sse = detail::weight_sse(s, theta);
    auto objective = [&s](std::span<const double> t) { return detail::weight_sse(s, t); };
    const MinimizeResult r = minimize(objective, theta, config);
    if (r.value < start_sse) theta = r.argmin;
  }
  out.degenerate = constant_within;

  std::vector<double> kappa;
  out.sse = detail::weight_sse(s, theta, &kappa);
  if (!std::isfinite(out.sse)) throw EstimatorError("fit_weight_model: non-finite SSE at the solution");
  out.a.assign(p + 1, 0.0);
  for (std::size_t k = 0; k < p; ++k) out.a[k + 1] = theta[k];
  out.b = theta[p];
  for (std::size_t i = 0; i < s.ids.size(); ++i) out.kappa[s.ids[i]] = kappa[i];
  out.check();
  return out;
}

/// lambda = kappa exp(a'x) (1 + b / eta)^(-alpha) from its parts.
inline double lambda_from_parts(double kappa, double ax, double b, double alpha, double eta) {
  const double base = 1.0 + b / eta;
  if (!(base > 0.0)) throw DomainError("lambda_factor: 1 + b/eta must be positive");
  return kappa * std::exp(ax - alpha * std::log(base));
}

/// Expected weight of a sampled unit with covariates x in the given area,
/// conditional on the area effect u (eta = exp(x'gamma_s) u).
inline double lambda_factor(const InformativeModel& model, std::span<const double> x, const std::string& area_id,
                            double u) {
  if (!(u > 0.0)) throw DomainError("lambda_factor: u must be positive");
  const double eta = std::exp(linear_predictor(x, model.sample_params.gamma_coef)) * u;
  return lambda_from_parts(model.kappa(area_id), linear_predictor(x, model.weights.a), model.weights.b,
                           model.sample_params.alpha, eta);
}

/// Population density f(y | x, u): Gamma(alpha_s, eta + b).
inline double population_density(const InformativeModel& model, std::span<const double> x, double u, double y) {
  if (!(u > 0.0)) throw DomainError("population_density: u must be positive");
  const double eta = std::exp(linear_predictor(x, model.sample_params.gamma_coef)) * u;
  const double rate = eta + model.weights.b;
  if (!(rate > 0.0)) throw DomainError("population_density: eta + b must be positive");
  if (!(y > 0.0)) return 0.0;
  return std::exp(gamma_log_pdf(model.sample_params.alpha, rate, y));
}

/// Complement distribution of one non-sampled unit for a fixed u:
/// F(y) = lambda/(lambda-1) P(alpha, (eta+b) y) - 1/(lambda-1) P(alpha, eta y).
class ComplementDistribution {
 public:
  ComplementDistribution(double alpha, double lg_alpha, double eta, double b, double lambda)
      : alpha_(alpha), lg_alpha_(lg_alpha), eta_(eta), b_(b), lambda_(lambda) {
    if (!(lambda > kLambdaFloor)) throw SamplerError("complement distribution undefined for lambda <= 1 + 1e-6");
    if (!(eta > 0.0) || !(eta + b > 0.0)) throw DomainError("ComplementDistribution: rates must be positive");
    wp_ = lambda / (lambda - 1.0);
    ws_ = 1.0 / (lambda - 1.0);
  }

  double lambda() const noexcept { return lambda_; }

  double cdf(double y) const {
    double d;
    return cdf_and_density(y, d);
  }

  double density(double y) const {
    double d;
    cdf_and_density(y, d);
    return d;
  }

  /// F(y); the mixture density at y goes to `dens`.
  double cdf_and_density(double y, double& dens) const {
    if (!(y > 0.0)) {
      dens = 0.0;
      return 0.0;
    }
    double pre_p, pre_s;
    const double Pp = detail::reg_inc_gamma_lg(alpha_, lg_alpha_, (eta_ + b_) * y, &pre_p);
    const double Ps = detail::reg_inc_gamma_lg(alpha_, lg_alpha_, eta_ * y, &pre_s);
    dens = (wp_ * pre_p - ws_ * pre_s) / y;
    const double F = wp_ * Pp - ws_ * Ps;
    // Only rounding-scale excursions are clamped.
    if (F < 0.0 && F > -1e-12) return 0.0;
    if (F > 1.0 && F < 1.0 + 1e-12) return 1.0;
    return F;
  }

  /// Mass of the region where the mixture density is negative. With
  /// c = kappa e^{a'x} the density is negative where c e^{-b y} < 1, i.e.
  /// beyond y0 = log(c) / b for b > 0 and below it for b < 0.
  double negative_mass(double y0) const {
    if (std::isnan(y0) || (y0 <= 0.0 && b_ < 0.0)) return 0.0;
    if (b_ > 0.0) {
      if (std::isinf(y0)) return 0.0;
      y0 = std::max(y0, 0.0);
      const double qp = 1.0 - detail::reg_inc_gamma_lg(alpha_, lg_alpha_, (eta_ + b_) * y0);
      const double qs = 1.0 - detail::reg_inc_gamma_lg(alpha_, lg_alpha_, eta_ * y0);
      return std::max(0.0, ws_ * qs - wp_ * qp);
    }
    if (b_ == 0.0 || std::isinf(y0)) return 0.0;
    const double pp = detail::reg_inc_gamma_lg(alpha_, lg_alpha_, (eta_ + b_) * y0);
    const double ps = detail::reg_inc_gamma_lg(alpha_, lg_alpha_, eta_ * y0);
    return std::max(0.0, ws_ * ps - wp_ * pp);
  }

  /// Inverse CDF: Newton from a Wilson-Hilferty guess of the Gamma(alpha,
  /// eta + b) quantile, doubling upward until the target is bracketed.
  double quantile(double q) const {
    if (!(q > 0.0 && q < 1.0)) throw DomainError("ComplementDistribution::quantile: q must lie in (0, 1)");
    const double z = normal_quantile(q);
    const double t = 1.0 - 1.0 / (9.0 * alpha_) + z / (3.0 * std::sqrt(alpha_));
    double guess = alpha_ * t * t * t / (eta_ + b_);
    if (!(guess > 0.0) || !std::isfinite(guess)) guess = 0.1 * alpha_ / (eta_ + b_);
    RootOptions opt;
    opt.value_tolerance = 1e-13;
    opt.width_tolerance = 1e-15;
    opt.max_iterations = 300;
    try {
      return find_root_increasing_newton([this](double y, double& d) { return cdf_and_density(y, d); }, q, 0.0,
                                         std::numeric_limits<double>::infinity(), guess, opt);
    } catch (const BracketError& e) {
      throw SamplerError(std::string("complement quantile: ") + e.what());
    }
  }

 private:
  double alpha_, lg_alpha_, eta_, b_, lambda_;
  double wp_ = 0.0, ws_ = 0.0;
};

inline ComplementDistribution complement_distribution(const InformativeModel& model, std::span<const double> x,
                                                      const std::string& area_id, double u) {
  if (!(u > 0.0)) throw DomainError("complement: u must be positive");
  const double eta = std::exp(linear_predictor(x, model.sample_params.gamma_coef)) * u;
  const double alpha = model.sample_params.alpha;
  const double lambda =
      lambda_from_parts(model.kappa(area_id), linear_predictor(x, model.weights.a), model.weights.b, alpha, eta);
  return {alpha, log_gamma_fn(alpha), eta, model.weights.b, lambda};
}

/// Complement CDF. Throws SamplerError when lambda <= 1 + 1e-6, in which case
/// callers use the population distribution instead.
inline double complement_cdf(const InformativeModel& model, std::span<const double> x, double u,
                             const std::string& area_id, double y) {
  if (!(y >= 0.0)) throw DomainError("complement_cdf: y must be nonnegative");
  return complement_distribution(model, x, area_id, u).cdf(y);
}

inline double draw_complement(const InformativeModel& model, std::span<const double> x, double u,
                              const std::string& area_id, RngStream& rng) {
  return complement_distribution(model, x, area_id, u).quantile(rng.uniform());
}

/// Grid check that the mixture density is nonnegative: 1000 points up to the
/// 1 - 1e-12 quantile of the sample distribution. Throws SamplerError on failure.
inline void check_mixture_validity(const InformativeModel& model, std::span<const double> x, double u,
                                   const std::string& area_id) {
  const ComplementDistribution c = complement_distribution(model, x, area_id, u);
  const double eta = std::exp(linear_predictor(x, model.sample_params.gamma_coef)) * u;
  const double y_hi = boost::math::gamma_q_inv(model.sample_params.alpha, 1e-12) / eta;
  for (int k = 1; k <= 1000; ++k) {
    const double y = y_hi * k / 1000.0;
    if (c.density(y) < -1e-12) {
      throw SamplerError("area " + area_id + ": complement density is negative at y = " + std::to_string(y) +
                         "; weight model and sample model are inconsistent");
    }
  }
}

struct InformativeOptions {
  bool population_approximation = false;  // draw every non-sampled unit from Gamma(alpha_s, eta + b)
  // The fitted weight model is exponential in y, so for b > 0 the mixture
  // density is always negative somewhere in the far tail. Inversion never
  // lands there (F only exceeds 1 beyond the crossing); only a material
  // negative mass signals an inconsistent fit.
  double max_negative_mass = 0.05;
};

struct InfoPrediction {
  EbPrediction prediction;
  std::size_t fallback_count = 0;  // unit draws taken from the population distribution because lambda <= 1 + 1e-6
  double max_negative_mass = 0.0;  // largest negative mass of a complement mixture met during sampling
};

/// EB prediction under informative sampling: u from the sample-model
/// posterior, non-sampled y from the complement distribution by inversion.
/// With b == 0 this is eb_predict_many at the sample parameters, draw for draw.
inline InfoPrediction eb_predict_info_many(const InformativeModel& model, const AreaFrame& area,
                                           std::span<const TargetParameter> targets, std::size_t L, RngStream& rng,
                                           const InformativeOptions& options = {}) {
  if (L < 1) throw DomainError("eb_predict_info: L must be >= 1");
  model.check();
  const GammaGammaParams& sp = model.sample_params;
  if (model.weights.b == 0.0) return {eb_predict_many(sp, area, targets, L, rng), 0};
  if (area.N == 0) throw DataError("eb_predict_info: area " + area.area_id + " has N = 0");
  if (area.nonsampled_count() == 0) return {detail::constant_prediction(targets, area, L), 0};
  area.require_nonsampled_covariates();

  const double b = model.weights.b;
  const double alpha = sp.alpha;
  const double lg_alpha = log_gamma_fn(alpha);
  const PosteriorU post = posterior_u(sp, area);
  const auto kit = model.weights.kappa.find(area.area_id);
  const bool use_population = options.population_approximation || kit == model.weights.kappa.end();

  const std::size_t m = area.nonsampled_covariates.size();
  std::vector<double> rate(m), wfac(m), y0(m);
  for (std::size_t j = 0; j < m; ++j) {
    const auto& x = area.nonsampled_covariates[j];
    rate[j] = std::exp(linear_predictor(x, sp.gamma_coef));
    if (!use_population) {
      wfac[j] = kit->second * std::exp(linear_predictor(x, model.weights.a));
      // E(w | x, y) crosses 1 at y0; the mixture density is negative on the side where it is below 1.
      y0[j] = std::log(wfac[j]) / b;
    }
  }

  const GammaSampler u_sampler(post.shape);
  const GammaSampler pop_sampler(alpha);
  std::size_t fallbacks = use_population && !options.population_approximation ? L * m : 0;
  double max_neg = 0.0;
  EbPrediction pred;
  try {
    pred = detail::simulate_targets(targets, area, L, [&](std::size_t, std::span<double> tail) {
      const double u = u_sampler(rng) / post.rate;
      for (std::size_t j = 0; j < m; ++j) {
        const double eta = rate[j] * u;
        if (use_population) {
          tail[j] = pop_sampler(rng) / (eta + b);
          continue;
        }
        const double lambda = lambda_from_parts(wfac[j], 0.0, b, alpha, eta);
        if (!(lambda > kLambdaFloor)) {
          ++fallbacks;
          tail[j] = pop_sampler(rng) / (eta + b);
          continue;
        }
        const ComplementDistribution c(alpha, lg_alpha, eta, b, lambda);
        // Cheap screen: for b > 0 the sample-distribution tail beyond y0 is
        // negligible once eta * y0 sits far above the Gamma(alpha, 1) bulk.
        const bool screened = b > 0.0 && eta * y0[j] >= alpha + 12.0 * std::sqrt(alpha) + 40.0;
        if (!screened) {
          const double neg = c.negative_mass(y0[j]);
          max_neg = std::max(max_neg, neg);
          if (neg > options.max_negative_mass) {
            throw SamplerError("complement density has negative mass " + std::to_string(neg) +
                               "; weight model and sample model are inconsistent");
          }
        }
        tail[j] = c.quantile(rng.uniform());
      }
    });
  } catch (const SamplerError& e) {
    throw SamplerError("area " + area.area_id + ": " + e.what());
  }
  return {std::move(pred), fallbacks, max_neg};
}

struct InformativeFit {
  FitResult sample_fit;
  InformativeModel model;
};

/// Fits the sample model (gamma-gamma on the sampled units) and the weight model.
inline InformativeFit fit_informative(const SurveyData& data, const OptimizerConfig& config = {}) {
  if (!data.all_weights_present()) throw DataError("fit_informative: every sampled unit needs a weight");
  InformativeFit f;
  f.sample_fit = fit(data, config);
  if (!f.sample_fit.converged) throw EstimatorError("fit_informative: sample model fit did not converge");
  f.model.sample_params = f.sample_fit.params;
  f.model.weights = fit_weight_model(data, config);
  return f;
}

/// EB_INFO for every area and target; area i draws from stream (seed, i),
/// the same streams eb_pipeline uses.
inline std::vector<PredictionRow> eb_info_pipeline(const InformativeModel& model, const SurveyData& data,
                                                   std::span<const TargetParameter> targets, std::size_t L,
                                                   std::uint64_t seed, unsigned threads = 1,
                                                   const InformativeOptions& options = {}) {
  std::vector<std::vector<PredictionRow>> per_area(data.D());
  parallel_for(data.D(), threads, [&](std::size_t i) {
    const auto& area = data.areas[i];
    RngStream rng(seed, i);
    const InfoPrediction p = eb_predict_info_many(model, area, targets, L, rng, options);
    for (std::size_t k = 0; k < targets.size(); ++k) {
      per_area[i].push_back({area.area_id, targets[k].label, "EB_INFO", p.prediction.point[k], area.n(), area.N, L,
                             seed, p.fallback_count});
    }
  });
  std::vector<PredictionRow> rows;
  for (auto& v : per_area) rows.insert(rows.end(), v.begin(), v.end());
  return rows;
}

}  // namespace gsae
