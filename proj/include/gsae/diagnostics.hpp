#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "gsae/data.hpp"
#include "gsae/errors.hpp"
#include "gsae/gamma_gamma.hpp"
#include "gsae/glmm.hpp"
#include "gsae/mse.hpp"
#include "gsae/numerics/special.hpp"
#include "gsae/targets.hpp"

namespace gsae {

enum class ResidualModel { GammaGamma, Glmm };

inline std::string to_string(ResidualModel m) { return m == ResidualModel::GammaGamma ? "gg" : "glmm"; }

/// Generalized (probability integral transform) residuals of the sampled
/// units, in data order: area by area, units in their stored order.
struct ResidualSet {
  struct Entry {
    std::string area;
    std::size_t unit = 0;  // index within the area's sampled units
    double r = 0.0;
    double normal_score = 0.0;
    bool clamped = false;  // r hit 0 or 1 and was moved inside by machine epsilon
  };
  ResidualModel model = ResidualModel::GammaGamma;
  std::vector<Entry> entries;

  std::vector<double> r() const {
    std::vector<double> v;
    v.reserve(entries.size());
    for (const auto& e : entries) v.push_back(e.r);
    return v;
  }
  std::vector<double> normal_scores() const {
    std::vector<double> v;
    v.reserve(entries.size());
    for (const auto& e : entries) v.push_back(e.normal_score);
    return v;
  }
};

/// Plug-in for u_i in the gamma-gamma residuals. `Literal` uses shape
/// alpha + delta; `PosteriorMean` uses n_i alpha + delta. Both share the
/// posterior rate sum_j y e^{x'gamma} + delta.
enum class UhatRule { Literal, PosteriorMean };

inline UhatRule parse_uhat_rule(const std::string& s) {
  if (s == "literal") return UhatRule::Literal;
  if (s == "posterior-mean") return UhatRule::PosteriorMean;
  throw DomainError("unknown u-hat rule '" + s + "' (expected literal or posterior-mean)");
}

namespace detail {

inline ResidualSet::Entry pit_entry(const std::string& area, std::size_t unit, double r) {
  constexpr double eps = std::numeric_limits<double>::epsilon();
  ResidualSet::Entry e{area, unit, r, 0.0, false};
  if (e.r <= 0.0) {
    e.r = eps;
    e.clamped = true;
  } else if (e.r >= 1.0) {
    e.r = 1.0 - eps;
    e.clamped = true;
  }
  e.normal_score = normal_quantile(e.r);
  return e;
}

}  // namespace detail

inline double uhat_gamma_gamma(const GammaGammaParams& params, const AreaFrame& area, UhatRule rule) {
  const PosteriorU post = posterior_u(params, area);
  const double shape = rule == UhatRule::Literal ? params.alpha + params.delta : post.shape;
  return shape / post.rate;
}

inline ResidualSet residuals_gamma_gamma(const GammaGammaParams& params, const SurveyData& data,
                                         UhatRule rule = UhatRule::Literal) {
  params.check();
  ResidualSet out;
  out.model = ResidualModel::GammaGamma;
  for (const auto& area : data.areas) {
    if (area.n() == 0) continue;
    const double u = uhat_gamma_gamma(params, area, rule);
    for (std::size_t j = 0; j < area.n(); ++j) {
      const auto& unit = area.sampled_units[j];
      const double rate = std::exp(linear_predictor(unit.x, params.gamma_coef)) * u;
      out.entries.push_back(detail::pit_entry(area.area_id, j, gamma_cdf(params.alpha, rate, unit.y)));
    }
  }
  return out;
}

inline ResidualSet residuals_gamma_gamma(const FitResult& fit, const SurveyData& data, UhatRule rule = UhatRule::Literal) {
  if (!fit.converged) throw EstimatorError("residuals_gamma_gamma: fit did not converge");
  return residuals_gamma_gamma(fit.params, data, rule);
}

/// GLMM residuals at the conditional modes: Gamma(nu, nu / exp(x'beta + v_i)).
inline ResidualSet residuals_glmm(const GlmmParams& params, std::span<const double> vhat, const SurveyData& data) {
  params.check();
  if (vhat.size() != data.D()) throw DomainError("residuals_glmm: need one v-hat per area");
  ResidualSet out;
  out.model = ResidualModel::Glmm;
  for (std::size_t i = 0; i < data.D(); ++i) {
    const auto& area = data.areas[i];
    for (std::size_t j = 0; j < area.n(); ++j) {
      const auto& unit = area.sampled_units[j];
      const double mu = std::exp(linear_predictor(unit.x, params.beta) + vhat[i]);
      out.entries.push_back(detail::pit_entry(area.area_id, j, gamma_cdf(params.nu, params.nu / mu, unit.y)));
    }
  }
  return out;
}

inline ResidualSet residuals_glmm(const GlmmFit& fit, const SurveyData& data) {
  if (!fit.converged) throw EstimatorError("residuals_glmm: fit did not converge");
  return residuals_glmm(fit.params, fit.vhat, data);
}

/// Slope of sorted normal scores on standard normal plotting positions
/// (i - 0.5)/n, regression through the origin.
inline double qq_slope(std::vector<double> scores) {
  if (scores.empty()) throw DomainError("qq_slope: no residuals");
  std::sort(scores.begin(), scores.end());
  const double n = static_cast<double>(scores.size());
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const double q = normal_quantile((static_cast<double>(i) + 0.5) / n);
    sxy += q * scores[i];
    sxx += q * q;
  }
  return sxy / sxx;
}

inline void write_residuals(std::ostream& out, const ResidualSet& set) {
  out << "area,unit,r,normal_score,model\n";
  for (const auto& e : set.entries) {
    out << e.area << ',' << e.unit << ',' << detail::format_double(e.r) << ',' << detail::format_double(e.normal_score)
        << ',' << to_string(set.model) << '\n';
  }
}

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
};

/// point -/+ z_{(1+level)/2} sqrt(mse). A negative mse yields no interval.
inline std::optional<Interval> normal_ci(double point, double mse, double level) {
  if (!(level > 0.0 && level < 1.0)) throw DomainError("normal_ci: level must lie in (0, 1)");
  if (std::isnan(mse) || std::isnan(point)) throw DomainError("normal_ci: NaN input");
  if (mse < 0.0) return std::nullopt;
  const double half = normal_quantile(0.5 * (1.0 + level)) * std::sqrt(mse);
  return Interval{point - half, point + half};
}

/// CI table `area,target,variant,lo,hi,flag`, one row per MSE variant.
inline void write_ci_table(std::ostream& out, const SurveyData& data, std::span<const TargetParameter> targets,
                           const MseTable& table, double level) {
  out << "area,target,variant,lo,hi,flag\n";
  for (std::size_t i = 0; i < data.D(); ++i) {
    for (std::size_t k = 0; k < targets.size(); ++k) {
      for (const auto& [variant, value] : table.estimates[i][k].variants) {
        out << data.areas[i].area_id << ',' << targets[k].label << ',' << to_string(variant) << ',';
        const auto ci = normal_ci(table.point[i][k], value, level);
        if (ci) {
          out << detail::format_double(ci->lo) << ',' << detail::format_double(ci->hi) << ",\n";
        } else {
          out << ",,negative\n";
        }
      }
    }
  }
}

}  // namespace gsae
