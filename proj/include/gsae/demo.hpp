#pragma once

#include <cmath>
#include <cstdint>
#include <string>

#include "gsae/data.hpp"
#include "gsae/gamma_gamma.hpp"
#include "gsae/numerics/rng.hpp"

namespace gsae {

/// Parameters of the synthetic soil-erosion demo: magnitudes of the gamma-gamma
/// fit to the Ohio county data (response RUSLE2-like, covariate USLE-like).
inline GammaGammaParams demo_erosion_params() { return {1.659, 4.922, {2.183, -0.156}}; }

inline constexpr std::uint64_t kDemoErosionSeed = 20190401;

/// 73 counties with ids 39001, 39003, ..., 39145; 4 to 39 sampled points per
/// county plus two to three times as many non-sampled covariate rows.
/// Sampling is non-informative; weights are N_i / n_i with mild jitter.
inline SurveyData demo_erosion(std::uint64_t seed = kDemoErosionSeed) {
  const GammaGammaParams psi = demo_erosion_params();
  const GammaSampler u_sampler(psi.delta);
  const GammaSampler y_sampler(psi.alpha);
  const GammaSampler x_sampler(2.0);
  SurveyData data;
  data.p = 1;
  for (std::size_t i = 0; i < 73; ++i) {
    RngStream rng(seed, i);
    AreaFrame a;
    a.area_id = std::to_string(39001 + 2 * i);
    const double s = rng.uniform();
    const auto n = 4 + static_cast<std::size_t>(36.0 * s * s);
    const auto extra = 2 * n + static_cast<std::size_t>(n * rng.uniform());
    a.N = n + extra;
    const double u = u_sampler(rng) / psi.delta;
    const double base_w = static_cast<double>(a.N) / static_cast<double>(n);
    for (std::size_t j = 0; j < n; ++j) {
      const std::vector<double> x{1.0, 2.5 * x_sampler(rng)};
      const double y = y_sampler(rng) / (std::exp(linear_predictor(x, psi.gamma_coef)) * u);
      const double w = std::max(1.0, base_w * std::exp(0.1 * rng.normal()));
      a.sampled_units.push_back({a.area_id, y, x, w, true});
    }
    for (std::size_t j = 0; j < extra; ++j) a.nonsampled_covariates.push_back({1.0, 2.5 * x_sampler(rng)});
    data.areas.push_back(std::move(a));
  }
  return data;
}

}  // namespace gsae
