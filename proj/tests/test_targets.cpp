#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "gsae/targets.hpp"

namespace gsae {
namespace {

double gini_brute_force(const std::vector<double>& v) {
  const double n = static_cast<double>(v.size());
  double s = 0.0, total = 0.0;
  for (double a : v) {
    total += a;
    for (double b : v) s += std::abs(a - b);
  }
  return s / (2.0 * n * n * (total / n));
}

TEST(Evaluate, QuantileType7) {
  const std::vector<double> v{4, 1, 3, 2};
  EXPECT_DOUBLE_EQ(evaluate(TargetParameter::quantile(0.25), v), 1.75);
  EXPECT_DOUBLE_EQ(evaluate(TargetParameter::quantile(0.75), v), 3.25);
  EXPECT_DOUBLE_EQ(evaluate(TargetParameter::quantile(0.0), v), 1.0);
  EXPECT_DOUBLE_EQ(evaluate(TargetParameter::quantile(1.0), v), 4.0);
  EXPECT_DOUBLE_EQ(evaluate(TargetParameter::quantile(0.3), std::vector<double>{7.0}), 7.0);
}

TEST(Evaluate, GiniOfConstantIsZero) {
  EXPECT_EQ(evaluate(TargetParameter::gini(), std::vector<double>{0.5, 0.5, 0.5}), 0.0);
}

TEST(Evaluate, MeanAndExceedance) {
  EXPECT_DOUBLE_EQ(evaluate(TargetParameter::mean(), std::vector<double>{1, 3}), 2.0);
  EXPECT_DOUBLE_EQ(evaluate(TargetParameter::exceed(0.22), std::vector<double>{0.1, 0.3}), 0.5);
  // strict inequality
  EXPECT_DOUBLE_EQ(evaluate(TargetParameter::exceed(0.3), std::vector<double>{0.3, 0.3, 0.4}), 1.0 / 3.0);
}

TEST(Evaluate, EmptyInputIsDomainError) {
  for (const auto& t : {TargetParameter::mean(), TargetParameter::gini(), TargetParameter::quantile(0.5)}) {
    EXPECT_THROW(evaluate(t, std::vector<double>{}), DomainError);
  }
}

TEST(Gini, MatchesDoubleSumOnRandomVectors) {
  std::mt19937_64 eng(11);
  std::uniform_int_distribution<int> size(2, 200);
  std::lognormal_distribution<double> val(0.0, 1.5);
  for (int rep = 0; rep < 1000; ++rep) {
    std::vector<double> v(static_cast<std::size_t>(size(eng)));
    for (auto& x : v) x = val(eng);
    const double g = evaluate(TargetParameter::gini(), v);
    ASSERT_NEAR(g, gini_brute_force(v), 1e-12) << "rep " << rep;
    ASSERT_GE(g, 0.0);
    ASSERT_LT(g, 1.0);
  }
}

TEST(Gini, ScaleAndPermutationInvariant) {
  std::mt19937_64 eng(3);
  std::gamma_distribution<double> g(0.7, 1.0);
  std::vector<double> v(50);
  for (auto& x : v) x = g(eng);
  const double base = evaluate(TargetParameter::gini(), v);
  std::vector<double> scaled = v;
  for (auto& x : scaled) x *= 8.0;  // power of two keeps the scaling exact
  EXPECT_EQ(evaluate(TargetParameter::gini(), scaled), base);
  for (auto& x : scaled) x = x / 8.0 * 3.7;
  EXPECT_NEAR(evaluate(TargetParameter::gini(), scaled), base, 1e-14);
  std::shuffle(v.begin(), v.end(), eng);
  EXPECT_EQ(evaluate(TargetParameter::gini(), v), base);
}

TEST(Quantile, NondecreasingInP) {
  std::mt19937_64 eng(8);
  std::exponential_distribution<double> e(1.0);
  std::vector<double> v(37);
  for (auto& x : v) x = e(eng);
  double prev = -1.0;
  for (int k = 0; k <= 1000; ++k) {
    const double q = evaluate(TargetParameter::quantile(k / 1000.0), v);
    ASSERT_GE(q, prev);
    prev = q;
  }
  EXPECT_EQ(evaluate(TargetParameter::quantile(0.0), v), *std::min_element(v.begin(), v.end()));
  EXPECT_EQ(evaluate(TargetParameter::quantile(1.0), v), *std::max_element(v.begin(), v.end()));
}

TEST(EvaluateMany, MatchesIndividualEvaluation) {
  std::vector<TargetParameter> ts{TargetParameter::mean(), TargetParameter::quantile(0.25), TargetParameter::gini(),
                                  TargetParameter::exceed(1.0), TargetParameter::quantile(0.75)};
  std::mt19937_64 eng(4);
  std::exponential_distribution<double> e(1.0);
  std::vector<double> v(101);
  for (auto& x : v) x = e(eng);
  std::vector<double> work = v, out(ts.size());
  evaluate_many(ts, work, out);
  for (std::size_t k = 0; k < ts.size(); ++k) EXPECT_NEAR(out[k], evaluate(ts[k], v), 1e-15) << ts[k].label;
}

TEST(Parse, Grammar) {
  EXPECT_EQ(TargetParameter::parse("mean").kind, TargetParameter::Kind::Mean);
  EXPECT_EQ(TargetParameter::parse("gini").kind, TargetParameter::Kind::Gini);
  const auto q = TargetParameter::parse("q:0.25");
  EXPECT_EQ(q.kind, TargetParameter::Kind::Quantile);
  EXPECT_EQ(q.arg, 0.25);
  EXPECT_EQ(q.label, "q:0.25");
  const auto x = TargetParameter::parse("exceed:0.22");
  EXPECT_EQ(x.arg, 0.22);
  EXPECT_EQ(x.label, "exceed:0.22");
  EXPECT_THROW(TargetParameter::parse("q:1.5"), DomainError);
  EXPECT_THROW(TargetParameter::parse("exceed:-1"), DomainError);
  EXPECT_THROW(TargetParameter::parse("median"), DomainError);
  EXPECT_THROW(TargetParameter::parse("q:abc"), DomainError);
}

TEST(DirectEstimate, UsesSampleOnly) {
  AreaFrame a;
  a.area_id = "A";
  a.N = 10;
  a.sampled_units = {UnitRecord{"A", 1.0, {1.0}, {}, true}, UnitRecord{"A", 3.0, {1.0}, {}, true}};
  EXPECT_DOUBLE_EQ(direct_estimate(TargetParameter::mean(), a), 2.0);
  EXPECT_DOUBLE_EQ(direct_estimate(TargetParameter::gini(), a), evaluate(TargetParameter::gini(), a.sampled_y()));
  a.sampled_units = {UnitRecord{"A", 0.1, {1.0}, {}, true}, UnitRecord{"A", 0.3, {1.0}, {}, true}};
  EXPECT_DOUBLE_EQ(direct_estimate(TargetParameter::exceed(0.22), a), 0.5);
  a.sampled_units.clear();
  EXPECT_THROW(direct_estimate(TargetParameter::mean(), a), DataError);
}

}  // namespace
}  // namespace gsae
