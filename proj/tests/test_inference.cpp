#include <cmath>
#include <sstream>

#include <gtest/gtest.h>

#include "gsae/demo.hpp"
#include "gsae/inference.hpp"
#include "test_support.hpp"

namespace gsae {
namespace {

TEST(NumericalHessian, ExactForQuadratic) {
  // f = 0.5 t'At + b't, Hessian A.
  Eigen::Matrix3d A;
  A << 4, 1, -0.5, 1, 3, 0.25, -0.5, 0.25, 2;
  auto f = [&](std::span<const double> t) {
    Eigen::Vector3d v(t[0], t[1], t[2]);
    return 0.5 * v.dot(A * v) + v.sum();
  };
  const std::vector<double> theta{0.3, -2.0, 150.0};
  const Eigen::MatrixXd H = numerical_hessian(f, theta);
  EXPECT_LT((H - A).cwiseAbs().maxCoeff(), 1e-4);
}

TEST(NumericalHessian, MatchesAnalyticSecondDerivatives) {
  // f = exp(a) + a b^2 + sin(b).
  auto f = [](std::span<const double> t) { return std::exp(t[0]) + t[0] * t[1] * t[1] + std::sin(t[1]); };
  const std::vector<double> theta{0.7, -1.3};
  const Eigen::MatrixXd H = numerical_hessian(f, theta);
  EXPECT_NEAR(H(0, 0), std::exp(0.7), 1e-6);
  EXPECT_NEAR(H(0, 1), 2.0 * -1.3, 1e-6);
  EXPECT_NEAR(H(1, 0), H(0, 1), 0.0);
  EXPECT_NEAR(H(1, 1), 2.0 * 0.7 - std::sin(-1.3), 1e-6);
}

TEST(WaldTable, LogScaleAndNonPositiveDefinite) {
  Eigen::Matrix2d H;
  H << 4.0, 0.0, 0.0, 100.0;
  const std::vector<double> theta{std::log(2.0), 1.5};
  const auto rows = detail::wald_table({"a", "b"}, theta, {true, false}, H, 0.95);
  const double z = 1.959963984540054;
  EXPECT_DOUBLE_EQ(rows[0].estimate, 2.0);
  EXPECT_NEAR(rows[0].se, 2.0 * 0.5, 1e-12);
  EXPECT_NEAR(rows[0].lo, 2.0 * std::exp(-z * 0.5), 1e-9);
  EXPECT_NEAR(rows[0].hi, 2.0 * std::exp(z * 0.5), 1e-9);
  EXPECT_EQ(rows[0].ci_method, "wald-log");
  EXPECT_NEAR(rows[1].lo, 1.5 - z * 0.1, 1e-9);
  EXPECT_EQ(rows[1].ci_method, "wald");

  H(1, 1) = -1.0;
  const auto bad = detail::wald_table({"a", "b"}, theta, {true, false}, H, 0.95);
  for (const auto& r : bad) {
    EXPECT_TRUE(std::isnan(r.se));
    EXPECT_TRUE(r.ci_method.empty());
  }
}

// Wald standard errors against the spread of estimates over independent
// datasets from the same generator.
TEST(WaldIntervals, StandardErrorsMatchSamplingSpread) {
  constexpr int R = 40;
  std::vector<std::vector<double>> est(4), se(4);
  for (int r = 0; r < R; ++r) {
    const SurveyData data = demo_erosion(1000 + r);
    const FitResult f = fit(data);
    ASSERT_TRUE(f.converged);
    const auto rows = wald_intervals(f.params, data);
    ASSERT_EQ(rows.size(), 4u);
    for (std::size_t k = 0; k < 4; ++k) {
      est[k].push_back(rows[k].estimate);
      se[k].push_back(rows[k].se);
      EXPECT_LT(rows[k].lo, rows[k].estimate);
      EXPECT_GT(rows[k].hi, rows[k].estimate);
    }
  }
  for (std::size_t k = 0; k < 4; ++k) {
    const double m = testing::mean(est[k]);
    double ss = 0.0;
    for (double v : est[k]) ss += (v - m) * (v - m);
    const double sd = std::sqrt(ss / (R - 1));
    // SD of a 40-draw sample has relative SE ~ 11%; allow 35%.
    EXPECT_NEAR(testing::mean(se[k]) / sd, 1.0, 0.35) << "parameter " << k;
  }
}

TEST(WaldIntervals, GlmmRowsAndNames) {
  const SurveyData data = demo_erosion();
  GlmmConfig cfg;
  cfg.quad_nodes = 9;
  const GlmmFit g = glmm_fit(data, cfg);
  const auto rows = wald_intervals(g.params, data, 9, 0.9);
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_EQ(rows[0].name, "beta0");
  EXPECT_EQ(rows[2].name, "phi");
  EXPECT_EQ(rows[3].name, "nu");
  EXPECT_EQ(rows[2].ci_method, "wald-log");
  EXPECT_GT(rows[2].lo, 0.0);
  for (const auto& r : rows) EXPECT_TRUE(std::isfinite(r.se));
}

TEST(FitArtifact, RoundTripsBothModels) {
  const SurveyData data = demo_erosion();
  const FitResult f = fit(data);
  std::stringstream ss;
  write_fit_artifact(ss, wald_intervals(f.params, data), f.loglik);
  const ModelParams back = read_fit_artifact(ss);
  const auto& gg = std::get<GammaGammaParams>(back);
  EXPECT_EQ(gg.alpha, f.params.alpha);
  EXPECT_EQ(gg.delta, f.params.delta);
  EXPECT_EQ(gg.gamma_coef, f.params.gamma_coef);

  const GlmmParams g{{-1.5, 0.2, 0.01}, 0.4, 1.3};
  std::vector<ParameterEstimate> rows{{"beta0", -1.5}, {"beta1", 0.2}, {"beta2", 0.01}, {"phi", 0.4}, {"nu", 1.3}};
  std::stringstream s2;
  write_fit_artifact(s2, rows, -10.0);
  EXPECT_NE(s2.str().find("beta0,-1.5,NA,NA,NA,\n"), std::string::npos);
  const GlmmParams gb = std::get<GlmmParams>(read_fit_artifact(s2));
  EXPECT_EQ(gb.beta, g.beta);
  EXPECT_EQ(gb.phi, g.phi);
  EXPECT_EQ(gb.nu, g.nu);
}

TEST(FitArtifact, RejectsMalformedInput) {
  std::stringstream bad_header("param,est\n");
  EXPECT_THROW(read_fit_artifact(bad_header), ParseError);
  std::stringstream bad_value("parameter,estimate,se,ci_lo,ci_hi,ci_method\nalpha,x,NA,NA,NA,\n");
  EXPECT_THROW(read_fit_artifact(bad_value), ParseError);
  std::stringstream no_model("parameter,estimate,se,ci_lo,ci_hi,ci_method\nfoo,1,NA,NA,NA,\n");
  EXPECT_THROW(read_fit_artifact(no_model), ParseError);
  EXPECT_THROW(load_fit_artifact("/nonexistent/fit.csv"), DataError);
}

TEST(Demo, ShapeAndRegenerable) {
  const SurveyData a = demo_erosion();
  EXPECT_EQ(a.D(), 73u);
  EXPECT_EQ(a.areas.front().area_id, "39001");
  EXPECT_EQ(a.areas.back().area_id, "39145");
  EXPECT_TRUE(a.all_weights_present());
  std::stringstream s1, s2;
  write_csv(s1, a);
  write_csv(s2, demo_erosion());
  EXPECT_EQ(s1.str(), s2.str());
}

}  // namespace
}  // namespace gsae
