#pragma once

#include <array>
#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "gsae/data.hpp"
#include "gsae/errors.hpp"
#include "gsae/gamma_gamma.hpp"
#include "gsae/numerics/rng.hpp"
#include "gsae/parallel.hpp"
#include "gsae/targets.hpp"

namespace gsae {

enum class MseVariant { NoBC, Add, Mult, HM, Comp, S, D };

inline constexpr std::array<MseVariant, 7> kAllMseVariants = {MseVariant::NoBC, MseVariant::Add, MseVariant::Mult,
                                                               MseVariant::HM,   MseVariant::Comp, MseVariant::S,
                                                               MseVariant::D};

inline std::string to_string(MseVariant v) {
  switch (v) {
    case MseVariant::NoBC: return "noBC";
    case MseVariant::Add: return "Add";
    case MseVariant::Mult: return "Mult";
    case MseVariant::HM: return "HM";
    case MseVariant::Comp: return "Comp";
    case MseVariant::S: return "S";
    case MseVariant::D: return "D";
  }
  return "?";
}

inline MseVariant parse_mse_variant(const std::string& s) {
  for (auto v : kAllMseVariants)
    if (to_string(v) == s) return v;
  throw DomainError("unknown MSE variant '" + s + "'");
}

struct MseEstimate {
  double m1_raw = 0.0;
  double m2 = 0.0;
  double m1_boot_mean = 0.0;
  std::map<MseVariant, double> variants;
};

/// Conditional-variance estimate from the retained Monte Carlo draws.
inline double leading_term(std::span<const double> mc_draws, double point) {
  if (mc_draws.size() < 2) throw DomainError("leading_term: need at least two draws");
  double s = 0.0;
  for (double v : mc_draws) s += (v - point) * (v - point);
  return s / static_cast<double>(mc_draws.size() - 1);
}

struct BiasCorrections {
  double add = 0.0;
  double mult = 0.0;
  double hm = 0.0;
  double comp = 0.0;
};

inline BiasCorrections bias_corrections(double m1_raw, double m1_boot_mean) {
  if (!(m1_boot_mean > 0.0)) {
    if (m1_raw == 0.0 && m1_boot_mean == 0.0) return {};  // nothing left to predict
    throw EstimatorError("bias correction needs a positive bootstrap mean of the leading term");
  }
  BiasCorrections c;
  c.add = 2.0 * m1_raw - m1_boot_mean;
  c.mult = m1_raw * m1_raw / m1_boot_mean;
  if (m1_raw >= m1_boot_mean) {
    c.hm = c.add;
    c.comp = c.add;
  } else {
    c.hm = m1_raw * std::exp(-(m1_boot_mean - m1_raw) / m1_boot_mean);
    c.comp = c.mult;
  }
  return c;
}

/// Combines the pieces into every variant; S and D are attached when given.
inline MseEstimate assemble(double m1_raw, double m2, double m1_boot_mean, std::optional<double> s = std::nullopt,
                            std::optional<double> d = std::nullopt) {
  MseEstimate e;
  e.m1_raw = m1_raw;
  e.m2 = m2;
  e.m1_boot_mean = m1_boot_mean;
  const auto c = bias_corrections(m1_raw, m1_boot_mean);
  e.variants[MseVariant::NoBC] = m1_raw + m2;
  e.variants[MseVariant::Add] = c.add + m2;
  e.variants[MseVariant::Mult] = c.mult + m2;
  e.variants[MseVariant::HM] = c.hm + m2;
  e.variants[MseVariant::Comp] = c.comp + m2;
  if (s) e.variants[MseVariant::S] = *s;
  if (d) e.variants[MseVariant::D] = *d;
  return e;
}

/// Refit used inside the bootstraps: returns nullopt when the replicate fails.
using RefitFn = std::function<std::optional<GammaGammaParams>(const SurveyData&, const GammaGammaParams& start)>;

struct BootstrapOptions {
  unsigned threads = 1;
  OptimizerConfig optimizer{};
  double max_drop_fraction = 0.2;
  RefitFn refit;  // empty: maximum likelihood started at the supplied estimate
};

namespace detail {

// Stream-id bases keep bootstrap randomness disjoint from the per-area EB
// streams (ids 0..D-1) of the main prediction.
inline constexpr std::uint64_t kM2Stream = 1ULL << 40;
inline constexpr std::uint64_t kDirectStream = 2ULL << 40;

inline RefitFn resolve_refit(const BootstrapOptions& opt) {
  if (opt.refit) return opt.refit;
  const OptimizerConfig cfg = opt.optimizer;
  return [cfg](const SurveyData& d, const GammaGammaParams& start) -> std::optional<GammaGammaParams> {
    try {
      const auto f = fit(d, cfg, start);
      if (!f.converged) return std::nullopt;
      return f.params;
    } catch (const Error&) {
      return std::nullopt;
    }
  };
}

inline void check_drops(std::size_t dropped, std::size_t total, double cap, const char* what) {
  if (static_cast<double>(dropped) > cap * static_cast<double>(total)) {
    throw EstimatorError(std::string(what) + ": " + std::to_string(dropped) + " of " + std::to_string(total) +
                         " bootstrap refits failed (cap " + std::to_string(static_cast<int>(cap * 100)) + "%)");
  }
}

inline double mean_square_about(std::span<const double> values, double center) {
  double s = 0.0;
  for (double v : values) s += (v - center) * (v - center);
  return s / static_cast<double>(values.size());
}

// Full population for area i: sampled units first (in order), then non-sampled.
inline void simulate_population(const GammaGammaParams& p, const AreaFrame& area, const GammaSampler& u_sampler,
                                const GammaSampler& y_sampler, RngStream& rng, std::vector<double>& pop) {
  area.require_nonsampled_covariates();
  pop.resize(area.N);
  const double u = u_sampler(rng) / p.delta;
  std::size_t j = 0;
  for (const auto& unit : area.sampled_units) pop[j++] = y_sampler(rng) / (std::exp(linear_predictor(unit.x, p.gamma_coef)) * u);
  for (const auto& x : area.nonsampled_covariates) pop[j++] = y_sampler(rng) / (std::exp(linear_predictor(x, p.gamma_coef)) * u);
}

// S = mean of first-stage squared errors; D = 2 S - mean of second-stage MSEs.
inline std::pair<double, double> single_and_double(std::span<const double> d_star, std::span<const double> mse_second) {
  double s = 0.0, ss = 0.0;
  for (double v : d_star) s += v;
  for (double v : mse_second) ss += v;
  s /= static_cast<double>(d_star.size());
  return {s, 2.0 * s - ss / static_cast<double>(mse_second.size())};
}

}  // namespace detail

/// Per area and target: the original EB point, its retained draws' leading term.
struct EbWithDraws {
  std::vector<std::vector<double>> point;   // [area][target]
  std::vector<std::vector<double>> m1_raw;  // [area][target]
};

/// EB on every area with stream (seed, i), keeping the leading terms.
inline EbWithDraws eb_with_leading_terms(const GammaGammaParams& params, const SurveyData& data,
                                         std::span<const TargetParameter> targets, std::size_t L, std::uint64_t seed,
                                         unsigned threads = 1) {
  EbWithDraws r;
  r.point.assign(data.D(), {});
  r.m1_raw.assign(data.D(), {});
  parallel_for(data.D(), threads, [&](std::size_t i) {
    RngStream rng(seed, i);
    const auto p = eb_predict_many(params, data.areas[i], targets, L, rng);
    r.point[i] = p.point;
    for (std::size_t k = 0; k < targets.size(); ++k) {
      r.m1_raw[i].push_back(L >= 2 ? leading_term(p.draws[k], p.point[k]) : 0.0);
    }
  });
  return r;
}

struct BootstrapM2Area {
  double m2 = 0.0;
  double m1_boot_mean = 0.0;
  std::vector<double> m1_boot;     // one per retained replicate
  std::vector<double> theta_boot;  // one per retained replicate
};

struct BootstrapM2Result {
  std::vector<std::vector<BootstrapM2Area>> areas;  // [area][target]
  std::size_t replicates_used = 0;
  std::size_t replicates_dropped = 0;
};

/// Parametric bootstrap for the parameter-uncertainty term. Replicate b
/// regenerates the sampled responses at psi_hat (stream (seed, 2^40 + b)),
/// refits, and recomputes EB on the ORIGINAL data at the bootstrap estimate.
/// The EB inside a replicate reuses stream (seed, i), the stream of the
/// original prediction, so m2 measures parameter variation rather than
/// Monte Carlo noise.
inline BootstrapM2Result bootstrap_m2(const SurveyData& data, const GammaGammaParams& psi_hat,
                                      std::span<const TargetParameter> targets, std::size_t B, std::size_t L,
                                      std::uint64_t seed, const BootstrapOptions& opt = {},
                                      const EbWithDraws* original = nullptr) {
  if (B < 2) throw DomainError("bootstrap_m2: B must be >= 2");
  const RefitFn refit = detail::resolve_refit(opt);
  EbWithDraws own;
  if (!original) {
    own = eb_with_leading_terms(psi_hat, data, targets, L, seed, opt.threads);
    original = &own;
  }
  const std::size_t D = data.D();
  const std::size_t K = targets.size();
  // [b][i][k]
  std::vector<std::optional<std::vector<std::vector<std::pair<double, double>>>>> rep(B);
  parallel_for(B, opt.threads, [&](std::size_t b) {
    RngStream rng(seed, detail::kM2Stream + b);
    const SurveyData boot = simulate_sample(psi_hat, data, rng);
    const auto psi_b = refit(boot, psi_hat);
    if (!psi_b) return;
    std::vector<std::vector<std::pair<double, double>>> out(D);
    for (std::size_t i = 0; i < D; ++i) {
      RngStream area_rng(seed, i);
      const auto p = eb_predict_many(*psi_b, data.areas[i], targets, L, area_rng);
      for (std::size_t k = 0; k < K; ++k) {
        out[i].emplace_back(p.point[k], L >= 2 ? leading_term(p.draws[k], p.point[k]) : 0.0);
      }
    }
    rep[b] = std::move(out);
  });
  BootstrapM2Result r;
  for (const auto& x : rep) (x ? r.replicates_used : r.replicates_dropped)++;
  detail::check_drops(r.replicates_dropped, B, opt.max_drop_fraction, "bootstrap_m2");
  r.areas.assign(D, std::vector<BootstrapM2Area>(K));
  for (std::size_t b = 0; b < B; ++b) {
    if (!rep[b]) continue;
    for (std::size_t i = 0; i < D; ++i)
      for (std::size_t k = 0; k < K; ++k) {
        r.areas[i][k].theta_boot.push_back((*rep[b])[i][k].first);
        r.areas[i][k].m1_boot.push_back((*rep[b])[i][k].second);
      }
  }
  for (std::size_t i = 0; i < D; ++i)
    for (std::size_t k = 0; k < K; ++k) {
      auto& a = r.areas[i][k];
      a.m2 = detail::mean_square_about(a.theta_boot, original->point[i][k]);
      double s = 0.0;
      for (double v : a.m1_boot) s += v;
      a.m1_boot_mean = s / static_cast<double>(a.m1_boot.size());
    }
  return r;
}

struct BootstrapDirectArea {
  double s = 0.0;
  double d = 0.0;
  std::vector<double> d_star;      // first-stage squared errors
  std::vector<double> mse_second;  // second-stage means
};

struct BootstrapDirectResult {
  std::vector<std::vector<BootstrapDirectArea>> areas;  // [area][target]
  std::size_t replicates_used = 0;
  std::size_t replicates_dropped = 0;
};

namespace detail {

// One full-population bootstrap round at `psi`: returns per-area, per-target
// squared error of the EBP refitted on the simulated sample, or nullopt if the
// refit fails. `psi_fit_out` receives the refitted parameters.
inline std::optional<std::vector<std::vector<double>>> population_round(
    const SurveyData& data, const GammaGammaParams& psi, std::span<const TargetParameter> targets, std::size_t L,
    const RngStream& stream, const RefitFn& refit, GammaGammaParams* psi_fit_out) {
  const std::size_t D = data.D();
  const std::size_t K = targets.size();
  RngStream pop_rng = stream.substream(0);
  SurveyData boot = data;
  std::vector<std::vector<double>> truth(D, std::vector<double>(K));
  const GammaSampler u_sampler(psi.delta);
  const GammaSampler y_sampler(psi.alpha);
  std::vector<double> pop;
  for (std::size_t i = 0; i < D; ++i) {
    auto& area = boot.areas[i];
    simulate_population(psi, area, u_sampler, y_sampler, pop_rng, pop);
    for (std::size_t j = 0; j < area.n(); ++j) area.sampled_units[j].y = pop[j];
    evaluate_many(targets, pop, truth[i]);
  }
  const auto psi_b = refit(boot, psi);
  if (!psi_b) return std::nullopt;
  if (psi_fit_out) *psi_fit_out = *psi_b;
  for (std::size_t i = 0; i < D; ++i) {
    RngStream eb_rng = stream.substream(1 + i);
    const auto p = eb_predict_many(*psi_b, boot.areas[i], targets, L, eb_rng);
    for (std::size_t k = 0; k < K; ++k) truth[i][k] = (p.point[k] - truth[i][k]) * (p.point[k] - truth[i][k]);
  }
  return truth;
}

}  // namespace detail

/// Single-stage (S) and simplified double (D) parametric bootstrap on full
/// simulated populations. Replicate b1 uses stream (seed, 2^41 + b1); its
/// second stage (B2 rounds) uses substreams of that stream.
inline BootstrapDirectResult bootstrap_direct(const SurveyData& data, const GammaGammaParams& psi_hat,
                                              std::span<const TargetParameter> targets, std::size_t B1, std::size_t B2,
                                              std::size_t L, std::uint64_t seed, const BootstrapOptions& opt = {}) {
  if (B1 < 2) throw DomainError("bootstrap_direct: B1 must be >= 2");
  if (B2 < 1) throw DomainError("bootstrap_direct: B2 must be >= 1");
  const RefitFn refit = detail::resolve_refit(opt);
  const std::size_t D = data.D();
  const std::size_t K = targets.size();
  struct Rep {
    std::vector<std::vector<double>> first;
    std::vector<std::vector<double>> second;
  };
  std::vector<std::optional<Rep>> rep(B1);
  parallel_for(B1, opt.threads, [&](std::size_t b1) {
    const RngStream stream(seed, detail::kDirectStream + b1);
    GammaGammaParams psi_b;
    auto first = detail::population_round(data, psi_hat, targets, L, stream.substream(0), refit, &psi_b);
    if (!first) return;
    std::vector<std::vector<double>> second(D, std::vector<double>(K, 0.0));
    std::size_t ok = 0;
    for (std::size_t b2 = 0; b2 < B2; ++b2) {
      auto s = detail::population_round(data, psi_b, targets, L, stream.substream(1 + b2), refit, nullptr);
      if (!s) continue;
      ++ok;
      for (std::size_t i = 0; i < D; ++i)
        for (std::size_t k = 0; k < K; ++k) second[i][k] += (*s)[i][k];
    }
    if (ok == 0) return;
    for (auto& row : second)
      for (auto& v : row) v /= static_cast<double>(ok);
    rep[b1] = Rep{std::move(*first), std::move(second)};
  });
  BootstrapDirectResult r;
  for (const auto& x : rep) (x ? r.replicates_used : r.replicates_dropped)++;
  detail::check_drops(r.replicates_dropped, B1, opt.max_drop_fraction, "bootstrap_direct");
  r.areas.assign(D, std::vector<BootstrapDirectArea>(K));
  for (std::size_t b = 0; b < B1; ++b) {
    if (!rep[b]) continue;
    for (std::size_t i = 0; i < D; ++i)
      for (std::size_t k = 0; k < K; ++k) {
        r.areas[i][k].d_star.push_back(rep[b]->first[i][k]);
        r.areas[i][k].mse_second.push_back(rep[b]->second[i][k]);
      }
  }
  for (auto& row : r.areas)
    for (auto& a : row) std::tie(a.s, a.d) = detail::single_and_double(a.d_star, a.mse_second);
  return r;
}

/// Everything the MSE table needs for one fitted dataset.
struct MseTable {
  std::vector<std::vector<double>> point;            // [area][target]
  std::vector<std::vector<MseEstimate>> estimates;   // [area][target]
  std::size_t m2_dropped = 0;
  std::size_t direct_dropped = 0;
};

struct MseRequest {
  std::size_t L = 100;
  std::size_t B = 100;
  std::size_t B1 = 0;  // 0 skips the S / D bootstrap
  std::size_t B2 = 1;
  std::uint64_t seed = 0;
  BootstrapOptions bootstrap{};
};

inline MseTable mse_estimates(const SurveyData& data, const GammaGammaParams& psi_hat,
                              std::span<const TargetParameter> targets, const MseRequest& req) {
  const auto original = eb_with_leading_terms(psi_hat, data, targets, req.L, req.seed, req.bootstrap.threads);
  const auto m2 = bootstrap_m2(data, psi_hat, targets, req.B, req.L, req.seed, req.bootstrap, &original);
  std::optional<BootstrapDirectResult> direct;
  if (req.B1 > 0) direct = bootstrap_direct(data, psi_hat, targets, req.B1, req.B2, req.L, req.seed, req.bootstrap);
  MseTable t;
  t.point = original.point;
  t.m2_dropped = m2.replicates_dropped;
  t.direct_dropped = direct ? direct->replicates_dropped : 0;
  t.estimates.assign(data.D(), {});
  for (std::size_t i = 0; i < data.D(); ++i)
    for (std::size_t k = 0; k < targets.size(); ++k) {
      const auto& a = m2.areas[i][k];
      std::optional<double> s, d;
      if (direct) {
        s = direct->areas[i][k].s;
        d = direct->areas[i][k].d;
      }
      t.estimates[i].push_back(assemble(original.m1_raw[i][k], a.m2, a.m1_boot_mean, s, d));
    }
  return t;
}

/// `area,target,variant,estimate,m1_raw,m1_boot_mean,m2,flag`; negative
/// estimates are reported as-is and flagged.
inline void write_mse_table(std::ostream& out, const SurveyData& data, std::span<const TargetParameter> targets,
                            const MseTable& t) {
  out << "area,target,variant,estimate,m1_raw,m1_boot_mean,m2,flag\n";
  for (std::size_t i = 0; i < data.D(); ++i)
    for (std::size_t k = 0; k < targets.size(); ++k) {
      const auto& e = t.estimates[i][k];
      for (const auto& [variant, value] : e.variants) {
        out << data.areas[i].area_id << ',' << targets[k].label << ',' << to_string(variant) << ','
            << detail::format_double(value) << ',' << detail::format_double(e.m1_raw) << ','
            << detail::format_double(e.m1_boot_mean) << ',' << detail::format_double(e.m2) << ','
            << (value < 0.0 ? "negative" : "") << '\n';
      }
    }
}

}  // namespace gsae
