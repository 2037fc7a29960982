#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "gsae/data.hpp"
#include "gsae/errors.hpp"
#include "gsae/gamma_gamma.hpp"
#include "gsae/glmm.hpp"
#include "gsae/informative.hpp"
#include "gsae/mse.hpp"
#include "gsae/numerics/rng.hpp"
#include "gsae/parallel.hpp"
#include "gsae/targets.hpp"

namespace gsae {

enum class SimMethod { EB, EB_clsd, EB_HZ, PI, M, Dir, EB_INFO };

inline constexpr std::array<SimMethod, 7> kAllSimMethods = {SimMethod::EB, SimMethod::EB_clsd, SimMethod::EB_HZ,
                                                            SimMethod::PI, SimMethod::M,       SimMethod::Dir,
                                                            SimMethod::EB_INFO};

inline std::string to_string(SimMethod m) {
  switch (m) {
    case SimMethod::EB: return "EB";
    case SimMethod::EB_clsd: return "EB_clsd";
    case SimMethod::EB_HZ: return "EB_HZ";
    case SimMethod::PI: return "PI";
    case SimMethod::M: return "M";
    case SimMethod::Dir: return "Dir";
    case SimMethod::EB_INFO: return "EB_INFO";
  }
  return "?";
}

inline SimMethod parse_sim_method(const std::string& s) {
  for (auto m : kAllSimMethods)
    if (to_string(m) == s) return m;
  throw DomainError("unknown simulation method '" + s + "'");
}

/// Simple random sampling without replacement within each area.
struct SrsworSampling {};

/// Randomized-list systematic PPS with
/// pi_ij proportional to exp(a x_ij + b y_ij + tau_ij / tau_divisor), tau ~ Gamma(tau_shape, tau_shape).
struct InformativeSampling {
  double a = 0.05;
  double b = 0.2;
  double tau_shape = 4.0;
  double tau_divisor = 20.0;
};

using Generator = std::variant<GammaGammaParams, GlmmParams>;
using SamplingScheme = std::variant<SrsworSampling, InformativeSampling>;

struct SimDesign {
  std::size_t D = 100;
  std::size_t N = 100;
  std::size_t n_small = 10;  // areas 1..D/2
  std::size_t n_large = 20;  // the rest
  Generator generator = GammaGammaParams{1.0, 4.0, {1.0, 0.5}};
  SamplingScheme sampling = SrsworSampling{};
  std::size_t M = 500;
  std::size_t L = 100;
  std::size_t B = 100;
  std::size_t B1 = 100;
  std::size_t L1 = 200;  // EB_HZ outer draws
  std::size_t L2 = 5;    // EB_HZ inner completions
  std::uint64_t seed = 1;
  std::vector<SimMethod> methods{SimMethod::EB, SimMethod::Dir};
  std::vector<TargetParameter> targets{TargetParameter::mean()};
  bool mse = false;      // MSE variants, conditional reference and T^Bias (gamma-gamma generator only)
  int glmm_quad_nodes = 1;  // Laplace, as in the reference study
  double max_failure_fraction = 0.05;
  OptimizerConfig optimizer{};
  InformativeOptions informative{};

  std::size_t n_of(std::size_t area) const { return area < D / 2 ? n_small : n_large; }
  bool gamma_gamma_truth() const { return std::holds_alternative<GammaGammaParams>(generator); }

  void check() const {
    if (D < 1 || N < 1) throw DomainError("SimDesign: D and N must be positive");
    if (n_small < 1 || n_large < 1 || n_small > N || n_large > N) throw DomainError("SimDesign: need 1 <= n <= N");
    if (M < 1 || L < 2) throw DomainError("SimDesign: need M >= 1 and L >= 2");
    if (L1 < 1 || L2 < 1) throw DomainError("SimDesign: L1 and L2 must be positive");
    if (targets.empty()) throw DomainError("SimDesign: no targets");
    if (methods.empty() && !mse) throw DomainError("SimDesign: nothing to compute");
    std::visit([](const auto& p) { p.check(); }, generator);
    if (const auto* s = std::get_if<InformativeSampling>(&sampling)) {
      if (!(s->tau_shape > 0.0) || !(s->tau_divisor > 0.0)) throw DomainError("SimDesign: bad tau settings");
      if (!std::isfinite(s->a) || !std::isfinite(s->b)) throw DomainError("SimDesign: a and b must be finite");
    }
    if (mse && !gamma_gamma_truth()) throw DomainError("SimDesign: MSE evaluation needs the gamma-gamma generator");
    if (mse && B < 1) throw DomainError("SimDesign: MSE evaluation needs B >= 1");
    if (!(max_failure_fraction >= 0.0 && max_failure_fraction < 1.0))
      throw DomainError("SimDesign: max_failure_fraction must lie in [0, 1)");
    for (std::size_t i = 0; i + 1 < methods.size(); ++i)
      for (std::size_t j = i + 1; j < methods.size(); ++j)
        if (methods[i] == methods[j]) throw DomainError("SimDesign: duplicate method " + to_string(methods[i]));
  }
};

/// Full finite population of one replicate; x rows carry the intercept.
struct Population {
  std::vector<std::vector<std::vector<double>>> x;  // [area][unit] -> (1, x)
  std::vector<std::vector<double>> y;               // [area][unit]
  std::vector<double> effect;                       // u_i (gamma-gamma) or v_i (GLMM)
};

namespace detail {

inline constexpr std::uint64_t kSimCovariateStream = 3ULL << 40;
inline constexpr std::uint64_t kSimReplicateStream = 4ULL << 40;

// Substreams of a replicate stream.
inline constexpr std::uint64_t kSubPopulation = 0;
inline constexpr std::uint64_t kSubSampling = 1;
inline constexpr std::uint64_t kSubMethods = 1ULL << 32;  // + method index * 2^20 + area

inline RngStream replicate_stream(const SimDesign& d, std::size_t m) { return RngStream(d.seed, kSimReplicateStream + m); }

inline std::uint64_t replicate_seed(const SimDesign& d, std::size_t m, std::uint64_t salt) {
  return splitmix64(splitmix64(d.seed ^ (kSimReplicateStream + m)) + salt);
}

}  // namespace detail

/// x_ij ~ U(0, 2), drawn once from the design seed and shared by every replicate.
inline std::vector<std::vector<std::vector<double>>> fixed_covariates(const SimDesign& design) {
  RngStream rng(design.seed, detail::kSimCovariateStream);
  std::vector<std::vector<std::vector<double>>> x(design.D);
  for (auto& area : x) {
    area.reserve(design.N);
    for (std::size_t j = 0; j < design.N; ++j) area.push_back({1.0, 2.0 * rng.uniform()});
  }
  return x;
}

inline Population generate_population(const SimDesign& design, std::size_t replicate,
                                      const std::vector<std::vector<std::vector<double>>>& covariates) {
  if (covariates.size() != design.D) throw DomainError("generate_population: covariates do not match D");
  RngStream rng = detail::replicate_stream(design, replicate).substream(detail::kSubPopulation);
  Population pop;
  pop.x = covariates;
  pop.y.resize(design.D);
  pop.effect.resize(design.D);
  if (const auto* p = std::get_if<GammaGammaParams>(&design.generator)) {
    const GammaSampler u_sampler(p->delta);
    const GammaSampler y_sampler(p->alpha);
    for (std::size_t i = 0; i < design.D; ++i) {
      const double u = u_sampler(rng) / p->delta;
      pop.effect[i] = u;
      for (const auto& x : covariates[i])
        pop.y[i].push_back(y_sampler(rng) / (std::exp(linear_predictor(x, p->gamma_coef)) * u));
    }
  } else {
    const auto& g = std::get<GlmmParams>(design.generator);
    const GammaSampler y_sampler(g.nu);
    for (std::size_t i = 0; i < design.D; ++i) {
      const double v = g.phi * rng.normal();
      pop.effect[i] = v;
      for (const auto& x : covariates[i])
        pop.y[i].push_back(y_sampler(rng) * std::exp(linear_predictor(x, g.beta) + v) / g.nu);
    }
  }
  return pop;
}

inline Population generate_population(const SimDesign& design, std::size_t replicate) {
  return generate_population(design, replicate, fixed_covariates(design));
}

struct SampleDraw {
  SurveyData data;
  std::vector<std::vector<std::size_t>> sampled;  // [area] population indices, increasing
  std::size_t pi_repairs = 0;                     // units capped at pi = 1
};

namespace detail {

inline std::size_t uniform_index(RngStream& rng, std::size_t n) {
  return std::min(n - 1, static_cast<std::size_t>(rng.uniform() * static_cast<double>(n)));
}

// Caps pi at 1 and rescales the rest to keep sum pi = n; returns the number capped.
inline std::size_t cap_inclusion_probabilities(std::vector<double>& pi, double n) {
  std::vector<bool> capped(pi.size(), false);
  std::size_t count = 0;
  for (;;) {
    double free_sum = 0.0;
    for (std::size_t j = 0; j < pi.size(); ++j)
      if (!capped[j]) free_sum += pi[j];
    const double target = n - static_cast<double>(count);
    bool changed = false;
    for (std::size_t j = 0; j < pi.size(); ++j) {
      if (capped[j]) continue;
      pi[j] *= target / free_sum;
      if (pi[j] > 1.0) {
        capped[j] = true;
        ++count;
        changed = true;
      }
    }
    for (std::size_t j = 0; j < pi.size(); ++j)
      if (capped[j]) pi[j] = 1.0;
    if (!changed) return count;
  }
}

// Randomized-list systematic PPS; pi must sum to n with every pi <= 1.
inline std::vector<std::size_t> systematic_pps(const std::vector<double>& pi, std::size_t n, RngStream& rng) {
  const std::size_t N = pi.size();
  std::vector<std::size_t> order(N);
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t j = N; j > 1; --j) std::swap(order[j - 1], order[uniform_index(rng, j)]);
  const double start = rng.uniform();
  std::vector<std::size_t> chosen;
  chosen.reserve(n);
  std::vector<bool> taken(N, false);
  double cum = 0.0;
  std::size_t next = 0;  // index of the next selection point start + next
  for (std::size_t j : order) {
    cum += pi[j];
    if (next < n && cum > start + static_cast<double>(next)) {
      chosen.push_back(j);
      taken[j] = true;
      ++next;
    }
  }
  // Rounding in the cumulative sum can leave the last point just past the total.
  for (auto it = order.rbegin(); chosen.size() < n && it != order.rend(); ++it)
    if (!taken[*it]) {
      chosen.push_back(*it);
      taken[*it] = true;
    }
  std::sort(chosen.begin(), chosen.end());
  return chosen;
}

inline std::vector<std::size_t> srswor(std::size_t N, std::size_t n, RngStream& rng) {
  std::vector<std::size_t> idx(N);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t j = 0; j < n; ++j) std::swap(idx[j], idx[j + uniform_index(rng, N - j)]);
  idx.resize(n);
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace detail

/// Draws the replicate's sample; every sampled unit carries w = 1 / pi.
inline SampleDraw draw_sample(const SimDesign& design, const Population& pop, std::size_t replicate) {
  RngStream rng = detail::replicate_stream(design, replicate).substream(detail::kSubSampling);
  SampleDraw s;
  s.data.p = 1;
  s.sampled.resize(design.D);
  const auto* info = std::get_if<InformativeSampling>(&design.sampling);
  const GammaSampler tau_sampler(info ? info->tau_shape : 1.0);
  for (std::size_t i = 0; i < design.D; ++i) {
    const std::size_t N = pop.y[i].size();
    const std::size_t n = design.n_of(i);
    std::vector<double> pi(N, static_cast<double>(n) / static_cast<double>(N));
    if (info) {
      std::vector<double> log_s(N);
      for (std::size_t j = 0; j < N; ++j) {
        const double tau = tau_sampler(rng) / info->tau_shape;
        log_s[j] = info->a * pop.x[i][j][1] + info->b * pop.y[i][j] + tau / info->tau_divisor;
      }
      const double mx = *std::max_element(log_s.begin(), log_s.end());
      double total = 0.0;
      for (std::size_t j = 0; j < N; ++j) total += (pi[j] = std::exp(log_s[j] - mx));
      for (double& v : pi) v *= static_cast<double>(n) / total;
      s.pi_repairs += detail::cap_inclusion_probabilities(pi, static_cast<double>(n));
      s.sampled[i] = detail::systematic_pps(pi, n, rng);
    } else {
      s.sampled[i] = detail::srswor(N, n, rng);
    }
    AreaFrame a;
    a.area_id = std::to_string(i + 1);
    a.N = N;
    std::size_t k = 0;
    for (std::size_t j = 0; j < N; ++j) {
      if (k < s.sampled[i].size() && s.sampled[i][k] == j) {
        a.sampled_units.push_back({a.area_id, pop.y[i][j], pop.x[i][j], 1.0 / pi[j], true});
        ++k;
      } else {
        a.nonsampled_covariates.push_back(pop.x[i][j]);
      }
    }
    s.data.areas.push_back(std::move(a));
  }
  return s;
}

// ---------------------------------------------------------------------------
// Metric tables

struct PredictorMetric {
  std::size_t stratum_n = 0;
  std::string target;
  std::string method;
  double rb_pct = 0.0;
  double rrmse_pct = 0.0;
};

struct MseMetric {
  std::string target;
  std::string variant;
  double rb_uncond_pct = 0.0;
  double rb_cond_pct = 0.0;
};

struct TBiasMetric {
  std::string target;
  double t_bias = 0.0;
};

struct MetricTable {
  std::vector<PredictorMetric> predictors;
  std::vector<MseMetric> mse;
  std::vector<TBiasMetric> t_bias;
  std::size_t replicates_requested = 0;
  std::size_t replicates_used = 0;  // successful replicates entering the metrics
  std::size_t failures = 0;
  std::vector<std::string> failure_log;
  bool complete = true;  // false when a time budget stopped the study early
  std::size_t pi_repairs = 0;
  std::size_t nonconverged_fits = 0;
  std::size_t info_fallbacks = 0;
  double info_max_negative_mass = 0.0;
  double seconds = 0.0;

  const PredictorMetric* find(std::size_t stratum_n, const std::string& target, const std::string& method) const {
    for (const auto& r : predictors)
      if (r.stratum_n == stratum_n && r.target == target && r.method == method) return &r;
    return nullptr;
  }
  const MseMetric* find_mse(const std::string& target, const std::string& variant) const {
    for (const auto& r : mse)
      if (r.target == target && r.variant == variant) return &r;
    return nullptr;
  }
  const TBiasMetric* find_t_bias(const std::string& target) const {
    for (const auto& r : t_bias)
      if (r.target == target) return &r;
    return nullptr;
  }
};

/// Accumulates per-area sums over replicates and reduces them to stratum
/// averages of RB_i and RRMSE_i (percent).
class PredictorAccumulator {
 public:
  PredictorAccumulator(std::vector<std::size_t> area_n, std::vector<std::string> targets,
                       std::vector<std::string> methods)
      : area_n_(std::move(area_n)), targets_(std::move(targets)), methods_(std::move(methods)),
        cells_(area_n_.size() * targets_.size() * methods_.size()) {}

  /// NaN estimates mark a method that does not apply to the target and are skipped.
  void add(std::size_t method, std::size_t area, std::size_t target, double estimate, double truth) {
    if (std::isnan(estimate)) return;
    Cell& c = cells_[index(method, area, target)];
    const double e = estimate - truth;
    c.err += e;
    c.sq += e * e;
    c.truth += truth;
    ++c.count;
  }

  std::vector<PredictorMetric> finish() const {
    std::vector<std::size_t> strata = area_n_;
    std::sort(strata.begin(), strata.end());
    strata.erase(std::unique(strata.begin(), strata.end()), strata.end());
    std::vector<PredictorMetric> out;
    for (std::size_t n : strata)
      for (std::size_t k = 0; k < targets_.size(); ++k)
        for (std::size_t m = 0; m < methods_.size(); ++m) {
          double rb = 0.0, rrmse = 0.0;
          std::size_t areas = 0;
          for (std::size_t i = 0; i < area_n_.size(); ++i) {
            if (area_n_[i] != n) continue;
            const Cell& c = cells_[index(m, i, k)];
            if (c.count == 0) continue;
            const double cnt = static_cast<double>(c.count);
            const double mean_truth = c.truth / cnt;
            rb += (c.err / cnt) / mean_truth;
            rrmse += std::sqrt(c.sq / cnt) / std::abs(mean_truth);
            ++areas;
          }
          if (areas == 0) continue;
          out.push_back({n, targets_[k], methods_[m], 100.0 * rb / static_cast<double>(areas),
                         100.0 * rrmse / static_cast<double>(areas)});
        }
    return out;
  }

 private:
  struct Cell {
    double err = 0.0, sq = 0.0, truth = 0.0;
    std::size_t count = 0;
  };
  std::size_t index(std::size_t m, std::size_t i, std::size_t k) const {
    return (m * area_n_.size() + i) * targets_.size() + k;
  }
  std::vector<std::size_t> area_n_;
  std::vector<std::string> targets_;
  std::vector<std::string> methods_;
  std::vector<Cell> cells_;
};

/// Per replicate, everything the reductions need. Matrices are [area][target].
struct ReplicateOutcome {
  bool ok = false;
  std::string error;
  std::vector<std::vector<double>> theta;
  std::vector<std::vector<std::vector<double>>> estimates;  // [method][area][target]
  // MSE evaluation
  std::map<MseVariant, std::vector<std::vector<double>>> mse;
  std::vector<std::vector<double>> theta_bp;   // best predictor at the true parameters
  std::vector<std::vector<double>> m1_hat;     // leading term at the estimates
  std::vector<std::vector<double>> m1_true;    // leading term at the true parameters
  std::size_t pi_repairs = 0;
  std::size_t nonconverged_fits = 0;
  std::size_t info_fallbacks = 0;
  double info_max_negative_mass = 0.0;
};

namespace detail {

inline bool uses(const SimDesign& d, SimMethod m) {
  return std::find(d.methods.begin(), d.methods.end(), m) != d.methods.end();
}

inline std::vector<std::vector<double>> nan_matrix(std::size_t D, std::size_t K) {
  return std::vector<std::vector<double>>(D, std::vector<double>(K, std::numeric_limits<double>::quiet_NaN()));
}

inline RngStream method_stream(const RngStream& rep, std::size_t method, std::size_t area) {
  return rep.substream(kSubMethods + (static_cast<std::uint64_t>(method) << 20) + area);
}

inline ReplicateOutcome run_replicate(const SimDesign& design, std::size_t m,
                                      const std::vector<std::vector<std::vector<double>>>& covariates) {
  const std::size_t D = design.D;
  const std::size_t K = design.targets.size();
  const auto& targets = design.targets;
  ReplicateOutcome out;
  const Population pop = generate_population(design, m, covariates);
  const SampleDraw sample = draw_sample(design, pop, m);
  const SurveyData& data = sample.data;
  out.pi_repairs = sample.pi_repairs;

  out.theta.assign(D, std::vector<double>(K));
  for (std::size_t i = 0; i < D; ++i) {
    std::vector<double> y = pop.y[i];
    evaluate_many(targets, y, out.theta[i]);
  }

  const bool need_gg = uses(design, SimMethod::EB) || uses(design, SimMethod::EB_clsd) ||
                       uses(design, SimMethod::EB_INFO) || design.mse;
  const bool need_glmm = uses(design, SimMethod::EB_HZ) || uses(design, SimMethod::PI) || uses(design, SimMethod::M);

  std::optional<FitResult> gg;
  if (need_gg) {
    gg = fit(data, design.optimizer);
    if (!gg->converged) ++out.nonconverged_fits;
  }
  std::optional<GlmmFit> glmm;
  if (need_glmm) {
    GlmmConfig cfg;
    cfg.quad_nodes = design.glmm_quad_nodes;
    cfg.optimizer = design.optimizer;
    glmm = glmm_fit(data, cfg);
    if (!glmm->converged) ++out.nonconverged_fits;
  }

  const RngStream rep = replicate_stream(design, m);
  const std::uint64_t eb_seed = replicate_seed(design, m, 1);
  std::optional<EbWithDraws> eb;
  if (uses(design, SimMethod::EB) || design.mse) eb = eb_with_leading_terms(gg->params, data, targets, design.L, eb_seed);

  std::optional<InformativeModel> info;
  if (uses(design, SimMethod::EB_INFO)) {
    info = InformativeModel{gg->params, fit_weight_model(data, design.optimizer)};
  }

  out.estimates.resize(design.methods.size());
  for (std::size_t mi = 0; mi < design.methods.size(); ++mi) {
    const SimMethod method = design.methods[mi];
    auto& est = out.estimates[mi];
    est = nan_matrix(D, K);
    for (std::size_t i = 0; i < D; ++i) {
      const AreaFrame& area = data.areas[i];
      RngStream rng = method_stream(rep, static_cast<std::size_t>(method), i);
      switch (method) {
        case SimMethod::EB: est[i] = eb->point[i]; break;
        case SimMethod::EB_clsd:
          for (std::size_t k = 0; k < K; ++k)
            if (targets[k].kind == TargetParameter::Kind::Mean) est[i][k] = predict_mean_closed(gg->params, area);
          break;
        case SimMethod::EB_HZ:
          est[i] = predict_ebp_hz_many(glmm->params, area, targets, design.L1, design.L2, rng);
          break;
        case SimMethod::PI: est[i] = predict_plugin_many(glmm->params, glmm->vhat[i], area, targets); break;
        case SimMethod::M: est[i] = predict_marginal_many(glmm->params, glmm->vhat[i], area, targets, design.L, rng); break;
        case SimMethod::Dir:
          for (std::size_t k = 0; k < K; ++k) est[i][k] = direct_estimate(targets[k], area);
          break;
        case SimMethod::EB_INFO: {
          const auto p = eb_predict_info_many(*info, area, targets, design.L, rng, design.informative);
          est[i] = p.prediction.point;
          out.info_fallbacks += p.fallback_count;
          out.info_max_negative_mass = std::max(out.info_max_negative_mass, p.max_negative_mass);
          break;
        }
      }
    }
  }

  if (design.mse) {
    const auto& truth = std::get<GammaGammaParams>(design.generator);
    MseRequest req;
    req.L = design.L;
    req.B = design.B;
    req.B1 = design.B1;
    req.seed = eb_seed;
    req.bootstrap.optimizer = design.optimizer;
    const MseTable table = mse_estimates(data, gg->params, targets, req);
    for (std::size_t i = 0; i < D; ++i)
      for (std::size_t k = 0; k < K; ++k)
        for (const auto& [variant, value] : table.estimates[i][k].variants) {
          auto& mat = out.mse[variant];
          if (mat.empty()) mat = nan_matrix(D, K);
          mat[i][k] = value;
        }
    // Best predictor at the true parameters with 4L draws keeps its noise subdominant.
    const auto bp = eb_with_leading_terms(truth, data, targets, 4 * design.L, replicate_seed(design, m, 2));
    out.theta_bp = bp.point;
    out.m1_true = bp.m1_raw;
    out.m1_hat = eb->m1_raw;
    if (!uses(design, SimMethod::EB)) out.estimates.push_back(eb->point);  // theta-hat EB for the MSE references
  }
  out.ok = true;
  return out;
}

}  // namespace detail

/// Execution controls that do not change the design.
struct StudyOptions {
  unsigned threads = 1;
  double time_budget_seconds = std::numeric_limits<double>::infinity();
  std::function<void(std::size_t done, std::size_t total)> progress;
};

namespace detail {

inline void reduce_mse(const SimDesign& design, std::span<const ReplicateOutcome* const> ok, std::size_t eb_column,
                       MetricTable& t) {
  const std::size_t D = design.D;
  const std::size_t K = design.targets.size();
  const double cells = static_cast<double>(ok.size() * D);
  std::vector<double> uncond(K, 0.0), cond(K, 0.0);
  for (std::size_t k = 0; k < K; ++k) {
    double m1bar = 0.0, m2bar = 0.0;
    for (const auto* r : ok)
      for (std::size_t i = 0; i < D; ++i) {
        const double eb = r->estimates[eb_column][i][k];
        const double e = eb - r->theta[i][k];
        uncond[k] += e * e;
        const double b1 = r->theta_bp[i][k] - r->theta[i][k];
        const double b2 = eb - r->theta_bp[i][k];
        m1bar += b1 * b1;
        m2bar += b2 * b2;
      }
    uncond[k] /= cells;
    cond[k] = (m1bar + m2bar) / cells;
  }
  for (MseVariant v : kAllMseVariants) {
    if (!ok.front()->mse.count(v)) continue;
    for (std::size_t k = 0; k < K; ++k) {
      double s = 0.0;
      for (const auto* r : ok)
        for (std::size_t i = 0; i < D; ++i) s += r->mse.at(v)[i][k];
      const double mean = s / cells;
      t.mse.push_back({design.targets[k].label, to_string(v), 100.0 * (mean - uncond[k]) / uncond[k],
                       100.0 * (mean - cond[k]) / cond[k]});
    }
  }
  for (std::size_t k = 0; k < K; ++k) {
    std::vector<double> omega;
    omega.reserve(ok.size());
    for (const auto* r : ok) {
      double s = 0.0;
      for (std::size_t i = 0; i < D; ++i) s += r->m1_hat[i][k] - r->m1_true[i][k];
      omega.push_back(s / static_cast<double>(D));
    }
    const double M = static_cast<double>(omega.size());
    const double mean = std::accumulate(omega.begin(), omega.end(), 0.0) / M;
    double ss = 0.0;
    for (double w : omega) ss += (w - mean) * (w - mean);
    const double sd = omega.size() > 1 ? std::sqrt(ss / (M - 1.0)) : std::numeric_limits<double>::quiet_NaN();
    t.t_bias.push_back({design.targets[k].label, mean / (sd / std::sqrt(M))});
  }
}

}  // namespace detail

/// Runs the Monte Carlo study. Replicates run in parallel with their own
/// streams and are reduced in index order, so the table does not depend on
/// the thread count. Failed replicates are logged and left out; more than
/// max_failure_fraction of M failures aborts with EstimatorError. A finite
/// time budget stops scheduling new replicates once exceeded.
inline MetricTable run_study(const SimDesign& design, const StudyOptions& options = {}) {
  design.check();
  using clock = std::chrono::steady_clock;
  const auto t0 = clock::now();
  const auto covariates = fixed_covariates(design);
  const std::size_t max_failures =
      static_cast<std::size_t>(std::floor(design.max_failure_fraction * static_cast<double>(design.M)));

  std::vector<ReplicateOutcome> outcomes(design.M);
  std::vector<bool> ran(design.M, false);
  std::atomic<bool> stop{false};
  std::atomic<std::size_t> failures{0};
  std::atomic<std::size_t> done{0};
  std::mutex progress_mutex;
  parallel_for(design.M, options.threads, [&](std::size_t m) {
    if (stop.load()) return;
    const double elapsed = std::chrono::duration<double>(clock::now() - t0).count();
    if (elapsed > options.time_budget_seconds) {
      stop = true;
      return;
    }
    try {
      outcomes[m] = detail::run_replicate(design, m, covariates);
    } catch (const Error& e) {
      outcomes[m].ok = false;
      outcomes[m].error = e.what();
      if (failures.fetch_add(1) + 1 > max_failures) stop = true;
    }
    ran[m] = true;  // distinct slots per index
    const std::size_t d = done.fetch_add(1) + 1;
    if (options.progress) {
      std::lock_guard lock(progress_mutex);
      options.progress(d, design.M);
    }
  });

  MetricTable t;
  t.replicates_requested = design.M;
  std::vector<const ReplicateOutcome*> ok;
  for (std::size_t m = 0; m < design.M; ++m) {
    if (!ran[m]) {
      t.complete = false;
      continue;
    }
    const auto& r = outcomes[m];
    if (!r.ok) {
      ++t.failures;
      t.failure_log.push_back("replicate " + std::to_string(m) + ": " + r.error);
      continue;
    }
    ok.push_back(&r);
    t.pi_repairs += r.pi_repairs;
    t.nonconverged_fits += r.nonconverged_fits;
    t.info_fallbacks += r.info_fallbacks;
    t.info_max_negative_mass = std::max(t.info_max_negative_mass, r.info_max_negative_mass);
  }
  t.replicates_used = ok.size();
  t.seconds = std::chrono::duration<double>(clock::now() - t0).count();
  if (t.failures > max_failures) {
    std::string msg = "run_study: " + std::to_string(t.failures) + " failed replicates exceed the allowed " +
                      std::to_string(max_failures);
    if (!t.failure_log.empty()) msg += "; first: " + t.failure_log.front();
    throw EstimatorError(msg);
  }
  if (ok.empty()) return t;

  std::vector<std::size_t> area_n(design.D);
  for (std::size_t i = 0; i < design.D; ++i) area_n[i] = design.n_of(i);
  std::vector<std::string> target_labels, method_labels;
  for (const auto& tp : design.targets) target_labels.push_back(tp.label);
  for (auto mth : design.methods) method_labels.push_back(to_string(mth));
  PredictorAccumulator acc(area_n, target_labels, method_labels);
  for (const auto* r : ok)
    for (std::size_t mi = 0; mi < design.methods.size(); ++mi)
      for (std::size_t i = 0; i < design.D; ++i)
        for (std::size_t k = 0; k < design.targets.size(); ++k)
          acc.add(mi, i, k, r->estimates[mi][i][k], r->theta[i][k]);
  t.predictors = acc.finish();

  if (design.mse) {
    const auto it = std::find(design.methods.begin(), design.methods.end(), SimMethod::EB);
    const std::size_t eb_column =
        it != design.methods.end() ? static_cast<std::size_t>(it - design.methods.begin()) : design.methods.size();
    detail::reduce_mse(design, ok, eb_column, t);
  }
  return t;
}

// ---------------------------------------------------------------------------
// CSV output

inline void write_predictor_metrics(std::ostream& out, const MetricTable& t) {
  out << "stratum_n,target,method,rb_pct,rrmse_pct\n";
  for (const auto& r : t.predictors)
    out << r.stratum_n << ',' << r.target << ',' << r.method << ',' << detail::format_double(r.rb_pct) << ','
        << detail::format_double(r.rrmse_pct) << '\n';
}

inline void write_mse_metrics(std::ostream& out, const MetricTable& t) {
  out << "target,variant,rb_uncond_pct,rb_cond_pct\n";
  for (const auto& r : t.mse)
    out << r.target << ',' << r.variant << ',' << detail::format_double(r.rb_uncond_pct) << ','
        << detail::format_double(r.rb_cond_pct) << '\n';
}

inline void write_t_bias(std::ostream& out, const MetricTable& t) {
  out << "target,t_bias\n";
  for (const auto& r : t.t_bias) out << r.target << ',' << detail::format_double(r.t_bias) << '\n';
}

// ---------------------------------------------------------------------------
// Presets and configuration

inline std::vector<TargetParameter> study_targets() {
  return {TargetParameter::mean(), TargetParameter::quantile(0.25), TargetParameter::quantile(0.75),
          TargetParameter::gini()};
}

inline const std::vector<std::string>& preset_names() {
  static const std::vector<std::string> names{"sim1-gg", "sim1-glmm", "sim2-mse", "sim3-informative"};
  return names;
}

inline SimDesign preset(const std::string& name) {
  SimDesign d;
  d.targets = study_targets();
  if (name == "sim1-gg") {
    d.methods = {SimMethod::EB, SimMethod::EB_clsd, SimMethod::EB_HZ, SimMethod::M, SimMethod::PI, SimMethod::Dir};
  } else if (name == "sim1-glmm") {
    d.generator = GlmmParams{{0.5, 0.05}, 0.1, 1.0};
    d.methods = {SimMethod::EB, SimMethod::EB_clsd, SimMethod::EB_HZ, SimMethod::M, SimMethod::PI, SimMethod::Dir};
  } else if (name == "sim2-mse") {
    d.methods = {SimMethod::EB};
    d.mse = true;
  } else if (name == "sim3-informative") {
    d.sampling = InformativeSampling{};
    d.methods = {SimMethod::EB_INFO, SimMethod::EB,  SimMethod::EB_HZ,
                 SimMethod::M,       SimMethod::PI, SimMethod::Dir};
    // Plain inversion of the complement CDF, with no negative-mass guard: a
    // guard would drop replicates whose posterior draws of u are small, which
    // selects on the outcome. The largest mass met is still reported.
    d.informative.max_negative_mass = std::numeric_limits<double>::infinity();
  } else {
    std::string list;
    for (const auto& n : preset_names()) list += (list.empty() ? "" : ", ") + n;
    throw DomainError("unknown preset '" + name + "' (available: " + list + ")");
  }
  return d;
}

/// Overrides design fields from a JSON object. Recognized keys: preset, D, N,
/// n_small, n_large, M, L, B, B1, L1, L2, seed, methods, targets, mse,
/// glmm_quad_nodes, max_failure_fraction, alpha, delta, gamma, nu, beta, phi,
/// sampling ("srswor" | "informative"), a, b, tau_shape, tau_divisor,
/// max_negative_mass (null: unlimited).
inline SimDesign design_from_json(const nlohmann::json& j, std::optional<SimDesign> base = std::nullopt) {
  if (!j.is_object()) throw DomainError("study config must be a JSON object");
  static const std::vector<std::string> known{
      "preset", "D",     "N",     "n_small", "n_large", "M",   "L",    "B",        "B1",
      "L1",     "L2",    "seed",  "methods", "targets", "mse", "glmm_quad_nodes", "max_failure_fraction",
      "alpha",  "delta", "gamma", "nu",      "beta",    "phi", "sampling", "a",  "b",
      "tau_shape", "tau_divisor", "max_negative_mass"};
  for (const auto& [key, value] : j.items())
    if (std::find(known.begin(), known.end(), key) == known.end())
      throw DomainError("study config: unknown key '" + key + "'");
  try {
    SimDesign d = j.contains("preset") ? preset(j.at("preset").get<std::string>()) : base.value_or(SimDesign{});
    auto size_field = [&](const char* key, std::size_t& field) {
      if (j.contains(key)) {
        const auto v = j.at(key).get<long long>();
        if (v < 0) throw DomainError(std::string("study config: ") + key + " must be non-negative");
        field = static_cast<std::size_t>(v);
      }
    };
    size_field("D", d.D);
    size_field("N", d.N);
    size_field("n_small", d.n_small);
    size_field("n_large", d.n_large);
    size_field("M", d.M);
    size_field("L", d.L);
    size_field("B", d.B);
    size_field("B1", d.B1);
    size_field("L1", d.L1);
    size_field("L2", d.L2);
    if (j.contains("seed")) d.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("mse")) d.mse = j.at("mse").get<bool>();
    if (j.contains("glmm_quad_nodes")) d.glmm_quad_nodes = j.at("glmm_quad_nodes").get<int>();
    if (j.contains("max_failure_fraction")) d.max_failure_fraction = j.at("max_failure_fraction").get<double>();
    if (j.contains("max_negative_mass")) {
      const auto& v = j.at("max_negative_mass");
      d.informative.max_negative_mass = v.is_null() ? std::numeric_limits<double>::infinity() : v.get<double>();
    }
    if (j.contains("methods")) {
      d.methods.clear();
      for (const auto& m : j.at("methods")) d.methods.push_back(parse_sim_method(m.get<std::string>()));
    }
    if (j.contains("targets")) {
      d.targets.clear();
      for (const auto& t : j.at("targets")) d.targets.push_back(TargetParameter::parse(t.get<std::string>()));
    }
    const bool gg_keys = j.contains("alpha") || j.contains("delta") || j.contains("gamma");
    const bool glmm_keys = j.contains("nu") || j.contains("beta") || j.contains("phi");
    if (gg_keys && glmm_keys) throw DomainError("study config: mixes gamma-gamma and GLMM generator keys");
    if (gg_keys) {
      auto p = d.gamma_gamma_truth() ? std::get<GammaGammaParams>(d.generator) : GammaGammaParams{1.0, 4.0, {1.0, 0.5}};
      if (j.contains("alpha")) p.alpha = j.at("alpha").get<double>();
      if (j.contains("delta")) p.delta = j.at("delta").get<double>();
      if (j.contains("gamma")) p.gamma_coef = j.at("gamma").get<std::vector<double>>();
      d.generator = p;
    }
    if (glmm_keys) {
      auto p = d.gamma_gamma_truth() ? GlmmParams{{0.5, 0.05}, 0.1, 1.0} : std::get<GlmmParams>(d.generator);
      if (j.contains("nu")) p.nu = j.at("nu").get<double>();
      if (j.contains("beta")) p.beta = j.at("beta").get<std::vector<double>>();
      if (j.contains("phi")) p.phi = j.at("phi").get<double>();
      d.generator = p;
    }
    if (j.contains("sampling")) {
      const auto s = j.at("sampling").get<std::string>();
      if (s == "srswor") {
        d.sampling = SrsworSampling{};
      } else if (s == "informative") {
        if (!std::holds_alternative<InformativeSampling>(d.sampling)) d.sampling = InformativeSampling{};
      } else {
        throw DomainError("study config: sampling must be srswor or informative");
      }
    }
    const bool info_keys = j.contains("a") || j.contains("b") || j.contains("tau_shape") || j.contains("tau_divisor");
    if (info_keys) {
      auto* s = std::get_if<InformativeSampling>(&d.sampling);
      if (!s) throw DomainError("study config: a, b, tau_* need informative sampling");
      if (j.contains("a")) s->a = j.at("a").get<double>();
      if (j.contains("b")) s->b = j.at("b").get<double>();
      if (j.contains("tau_shape")) s->tau_shape = j.at("tau_shape").get<double>();
      if (j.contains("tau_divisor")) s->tau_divisor = j.at("tau_divisor").get<double>();
    }
    const std::size_t dim = std::visit(
        [](const auto& p) {
          if constexpr (std::is_same_v<std::decay_t<decltype(p)>, GammaGammaParams>) return p.gamma_coef.size();
          else return p.beta.size();
        },
        d.generator);
    if (dim != 2) throw DomainError("study config: the simulated covariate design has an intercept and one x");
    d.check();
    return d;
  } catch (const nlohmann::json::exception& e) {
    throw DomainError(std::string("study config: ") + e.what());
  }
}

}  // namespace gsae
