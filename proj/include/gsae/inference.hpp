#pragma once

#include <cmath>
#include <fstream>
#include <functional>
#include <istream>
#include <limits>
#include <map>
#include <ostream>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Dense>

#include "gsae/data.hpp"
#include "gsae/errors.hpp"
#include "gsae/gamma_gamma.hpp"
#include "gsae/glmm.hpp"
#include "gsae/numerics/special.hpp"

namespace gsae {

/// Central-difference Hessian of f at theta with step h_k = rel_step * max(1, |theta_k|).
inline Eigen::MatrixXd numerical_hessian(const std::function<double(std::span<const double>)>& f,
                                         std::span<const double> theta, double rel_step = 1e-4) {
  const std::size_t d = theta.size();
  std::vector<double> h(d);
  for (std::size_t k = 0; k < d; ++k) h[k] = rel_step * std::max(1.0, std::abs(theta[k]));
  std::vector<double> t(theta.begin(), theta.end());
  auto at = [&](std::size_t i, double si, std::size_t j, double sj) {
    t.assign(theta.begin(), theta.end());
    t[i] += si * h[i];
    t[j] += sj * h[j];
    return f(t);
  };
  Eigen::MatrixXd H(d, d);
  const double f0 = f(theta);
  for (std::size_t i = 0; i < d; ++i) {
    H(i, i) = (at(i, 1.0, i, 1.0) - 2.0 * f0 + at(i, -1.0, i, -1.0)) / (4.0 * h[i] * h[i]);
    for (std::size_t j = i + 1; j < d; ++j) {
      const double v = (at(i, 1.0, j, 1.0) - at(i, 1.0, j, -1.0) - at(i, -1.0, j, 1.0) + at(i, -1.0, j, -1.0)) /
                       (4.0 * h[i] * h[j]);
      H(i, j) = v;
      H(j, i) = v;
    }
  }
  return H;
}

struct ParameterEstimate {
  std::string name;
  double estimate = 0.0;
  double se = std::numeric_limits<double>::quiet_NaN();  // natural scale (delta method for log-scale parameters)
  double lo = std::numeric_limits<double>::quiet_NaN();
  double hi = std::numeric_limits<double>::quiet_NaN();
  std::string ci_method;  // wald | wald-log; empty when the Hessian is not positive definite
};

namespace detail {

// Wald intervals from the Hessian of the negative log-likelihood on the search
// scale. Parameters flagged `log_scale` are exp-transformed back.
inline std::vector<ParameterEstimate> wald_table(const std::vector<std::string>& names, std::span<const double> theta,
                                                 const std::vector<bool>& log_scale, const Eigen::MatrixXd& H,
                                                 double level) {
  const double z = normal_quantile(0.5 * (1.0 + level));
  Eigen::LLT<Eigen::MatrixXd> llt(H);
  const bool pd = llt.info() == Eigen::Success && H.allFinite();
  Eigen::MatrixXd cov;
  if (pd) cov = llt.solve(Eigen::MatrixXd::Identity(H.rows(), H.cols()));
  std::vector<ParameterEstimate> out;
  for (std::size_t k = 0; k < names.size(); ++k) {
    ParameterEstimate e;
    e.name = names[k];
    e.estimate = log_scale[k] ? std::exp(theta[k]) : theta[k];
    const auto kk = static_cast<Eigen::Index>(k);
    if (pd && cov(kk, kk) > 0.0) {
      const double s = std::sqrt(cov(kk, kk));
      if (log_scale[k]) {
        e.se = e.estimate * s;
        e.lo = std::exp(theta[k] - z * s);
        e.hi = std::exp(theta[k] + z * s);
        e.ci_method = "wald-log";
      } else {
        e.se = s;
        e.lo = theta[k] - z * s;
        e.hi = theta[k] + z * s;
        e.ci_method = "wald";
      }
    }
    out.push_back(e);
  }
  return out;
}

}  // namespace detail

/// Estimates with Wald intervals; alpha and delta are interval-estimated on the log scale.
inline std::vector<ParameterEstimate> wald_intervals(const GammaGammaParams& est, const SurveyData& data,
                                                     double level = 0.95) {
  est.check();
  const detail::FlatSample flat(data);
  const std::size_t dim = est.gamma_coef.size();
  std::vector<double> theta{std::log(est.alpha), std::log(est.delta)};
  theta.insert(theta.end(), est.gamma_coef.begin(), est.gamma_coef.end());
  auto nll = [&](std::span<const double> t) {
    return -detail::gg_loglik_flat(std::exp(t[0]), std::exp(t[1]), t.subspan(2), flat);
  };
  std::vector<std::string> names{"alpha", "delta"};
  for (std::size_t k = 0; k < dim; ++k) names.push_back("gamma" + std::to_string(k));
  std::vector<bool> log_scale(names.size(), false);
  log_scale[0] = log_scale[1] = true;
  return detail::wald_table(names, theta, log_scale, numerical_hessian(nll, theta), level);
}

/// GLMM version over (beta, log phi, log nu).
inline std::vector<ParameterEstimate> wald_intervals(const GlmmParams& est, const SurveyData& data, int quad_nodes,
                                                     double level = 0.95) {
  est.check();
  GlmmConfig{quad_nodes}.check();
  const detail::FlatSample flat(data);
  const auto rule = gauss_hermite(quad_nodes);
  const std::size_t dim = est.beta.size();
  std::vector<double> theta(est.beta);
  theta.push_back(std::log(est.phi));
  theta.push_back(std::log(est.nu));
  auto nll = [&](std::span<const double> t) {
    GlmmParams p{std::vector<double>(t.begin(), t.begin() + static_cast<std::ptrdiff_t>(dim)), std::exp(t[dim]),
                 std::exp(t[dim + 1])};
    return -detail::glmm_loglik_flat(p, flat, rule);
  };
  std::vector<std::string> names;
  for (std::size_t k = 0; k < dim; ++k) names.push_back("beta" + std::to_string(k));
  names.push_back("phi");
  names.push_back("nu");
  std::vector<bool> log_scale(names.size(), false);
  log_scale[dim] = log_scale[dim + 1] = true;
  return detail::wald_table(names, theta, log_scale, numerical_hessian(nll, theta), level);
}

// ---------------------------------------------------------------------------
// Fit artifact: `parameter,estimate,se,ci_lo,ci_hi,ci_method`, one row per
// parameter plus a trailing loglik row. The model is implied by the names.

using ModelParams = std::variant<GammaGammaParams, GlmmParams>;

inline void write_fit_artifact(std::ostream& out, std::span<const ParameterEstimate> rows, double loglik) {
  auto num = [](double v) { return std::isnan(v) ? std::string("NA") : detail::format_double(v); };
  out << "parameter,estimate,se,ci_lo,ci_hi,ci_method\n";
  for (const auto& r : rows)
    out << r.name << ',' << num(r.estimate) << ',' << num(r.se) << ',' << num(r.lo) << ',' << num(r.hi) << ','
        << r.ci_method << '\n';
  out << "loglik," << num(loglik) << ",NA,NA,NA,\n";
}

inline ModelParams read_fit_artifact(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || detail::trim(line) != "parameter,estimate,se,ci_lo,ci_hi,ci_method")
    throw ParseError("fit artifact: unexpected header", 1);
  std::map<std::string, double> values;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (detail::trim(line).empty()) continue;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() != 6) throw ParseError("fit artifact line " + std::to_string(lineno) + ": expected 6 fields", lineno);
    const std::string name = detail::trim(cells[0]);
    if (name == "loglik") continue;
    values[name] = detail::parse_double(detail::trim(cells[1]), lineno, "estimate");
  }
  auto coefs = [&](const std::string& prefix) {
    std::vector<double> v;
    for (std::size_t k = 0; values.count(prefix + std::to_string(k)); ++k) v.push_back(values.at(prefix + std::to_string(k)));
    if (v.empty()) throw ParseError("fit artifact: no " + prefix + " coefficients", 0);
    return v;
  };
  if (values.count("alpha") && values.count("delta")) {
    GammaGammaParams p{values.at("alpha"), values.at("delta"), coefs("gamma")};
    p.check();
    return p;
  }
  if (values.count("nu") && values.count("phi")) {
    GlmmParams p{coefs("beta"), values.at("phi"), values.at("nu")};
    p.check();
    return p;
  }
  throw ParseError("fit artifact: neither gamma-gamma (alpha, delta) nor GLMM (phi, nu) parameters found", 0);
}

inline ModelParams load_fit_artifact(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open fit artifact '" + path + "'");
  return read_fit_artifact(in);
}

}  // namespace gsae
