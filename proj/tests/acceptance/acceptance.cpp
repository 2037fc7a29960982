// Acceptance checks. Usage: acceptance [c1 .. c8 | all]
// Prints one PASS/FAIL line per criterion; exit status 0 only if all pass.
//
// Environment:
//   GSAE_THREADS              worker threads (default: hardware concurrency)
//   GSAE_C6_BUDGET_SECONDS    wall-clock budget for c6 (default 7200)
//   GSAE_ACCEPTANCE_LOG       file to which each PASS/FAIL line is appended

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <sys/wait.h>
#include <thread>
#include <vector>

#include "gsae/gsae.hpp"
#include "test_support.hpp"

namespace {

using namespace gsae;
using Clock = std::chrono::steady_clock;

struct Outcome {
  bool pass = false;
  std::string detail;
};

unsigned threads() {
  if (const char* s = std::getenv("GSAE_THREADS")) return static_cast<unsigned>(std::max(1L, std::strtol(s, nullptr, 10)));
  return std::max(1u, std::thread::hardware_concurrency());
}

std::string fmt(double v, int digits = 2) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string sci(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2e", v);
  return buf;
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

MetricTable study(SimDesign d, double budget = std::numeric_limits<double>::infinity()) {
  StudyOptions opt;
  opt.threads = threads();
  opt.time_budget_seconds = budget;
  const auto t0 = Clock::now();
  const std::size_t step = std::max<std::size_t>(1, d.M / 10);
  opt.progress = [&, step](std::size_t done, std::size_t total) {
    if (done % step == 0 || done == total)
      std::cerr << "  " << done << '/' << total << " replicates, " << fmt(seconds_since(t0), 0) << " s\n";
  };
  return run_study(d, opt);
}

double rrmse(const MetricTable& t, std::size_t n, const std::string& target, const std::string& method) {
  const auto* m = t.find(n, target, method);
  if (!m) throw std::runtime_error("missing metric " + method + "/" + target);
  return m->rrmse_pct;
}

double rb(const MetricTable& t, std::size_t n, const std::string& target, const std::string& method) {
  const auto* m = t.find(n, target, method);
  if (!m) throw std::runtime_error("missing metric " + method + "/" + target);
  return m->rb_pct;
}

std::string study_note(const MetricTable& t) {
  return " [replicates " + std::to_string(t.replicates_used) + "/" + std::to_string(t.replicates_requested) +
         ", failures " + std::to_string(t.failures) + ", non-converged fits " + std::to_string(t.nonconverged_fits) +
         "]";
}

std::string runtime_note(double secs, double limit) {
  return " runtime " + fmt(secs, 0) + " s (limit " + fmt(limit, 0) + " s, " + std::to_string(threads()) +
         " thread(s))";
}

// 1. Closed-form likelihood against adaptive quadrature over u.
Outcome c1() {
  const auto t0 = Clock::now();
  std::mt19937_64 eng(20240101);
  std::uniform_real_distribution<double> ua(0.5, 5.0), ud(0.5, 8.0), ug(-1.0, 1.0);
  std::uniform_int_distribution<std::size_t> un(1, 8);
  double worst = 0.0;
  for (int rep = 0; rep < 100; ++rep) {
    const GammaGammaParams p{ua(eng), ud(eng), {ug(eng), 0.5 * ug(eng)}};
    const auto data = testing::make_gg_data({p.alpha, p.delta, p.gamma_coef}, {un(eng), un(eng), un(eng)}, 10, eng);
    for (const auto& a : data.areas) {
      auto log_joint = [&](double u) {
        double s = p.delta * std::log(p.delta) - std::lgamma(p.delta) + (p.delta - 1.0) * std::log(u) - p.delta * u;
        for (const auto& unit : a.sampled_units) {
          const double rate = std::exp(p.gamma_coef[0] + p.gamma_coef[1] * unit.x[1]) * u;
          s += p.alpha * std::log(rate) - std::lgamma(p.alpha) + (p.alpha - 1.0) * std::log(unit.y) - rate * unit.y;
        }
        return s;
      };
      double peak = -INFINITY;
      for (int k = 1; k < 4000; ++k) peak = std::max(peak, log_joint(k / 4000.0 / (1.0 - k / 4000.0)));
      const double z =
          testing::integrate_half_line([&](double u) { return u <= 0.0 ? 0.0 : std::exp(log_joint(u) - peak); });
      const double oracle = peak + std::log(z);
      SurveyData one;
      one.p = 1;
      one.areas.push_back(a);
      worst = std::max(worst, std::abs(loglik(p, one) / oracle - 1.0));
    }
  }
  const double secs = seconds_since(t0);
  return {worst <= 1e-6 && secs < 60.0,
          "100 fixtures, max relative error " + sci(worst) + " (tol 1e-6);" + runtime_note(secs, 60)};
}

// 2. MC predictor of the mean with L = 1e5 against the closed form.
Outcome c2() {
  const auto t0 = Clock::now();
  std::mt19937_64 eng(20240202);
  std::uniform_real_distribution<double> ua(0.5, 5.0), ud(1.5, 8.0), ug(-1.0, 1.0);
  std::uniform_int_distribution<std::size_t> un(1, 20);
  int within = 0;
  double worst = 0.0;
  for (int rep = 0; rep < 50; ++rep) {
    const GammaGammaParams p{ua(eng), ud(eng), {ug(eng), 0.5 * ug(eng)}};
    const std::size_t n = un(eng);
    const auto data = testing::make_gg_data({p.alpha, p.delta, p.gamma_coef}, {n}, n + 20, eng);
    const double closed = predict_mean_closed(p, data.areas[0]);
    RngStream rng(42, static_cast<std::uint64_t>(rep));
    const auto r = eb_predict(p, data.areas[0], TargetParameter::mean(), 100000, rng);
    const double se = std::sqrt(testing::variance(r.mc_draws) / 1e5);
    const double z = std::abs(r.point - closed) / se;
    worst = std::max(worst, z);
    within += z <= 3.0;
  }
  const double secs = seconds_since(t0);
  return {within == 50 && secs < 120.0, std::to_string(within) + "/50 fixtures within 3 MC SE, largest |z| " +
                                            fmt(worst) + ";" + runtime_note(secs, 120)};
}

// 3. Predictor ordering at n = 10, mean target.
Outcome c3() {
  const auto t0 = Clock::now();
  SimDesign d = preset("sim1-gg");
  d.M = 500;
  d.L = 100;
  d.B = 100;
  d.methods = {SimMethod::EB, SimMethod::M, SimMethod::Dir};
  d.targets = {TargetParameter::mean()};
  const MetricTable t = study(d);
  const double secs = seconds_since(t0);
  const double eb = rrmse(t, 10, "mean", "EB"), m = rrmse(t, 10, "mean", "M"), dir = rrmse(t, 10, "mean", "Dir");
  const bool pass = t.complete && eb < m && m < dir && std::abs(eb - 33.48) <= 3.0 && std::abs(dir - 40.21) <= 4.0 &&
                    secs < 1200.0;
  return {pass, "RRMSE EB " + fmt(eb) + " < M " + fmt(m) + " < Dir " + fmt(dir) +
                    " (EB target 33.48 +- 3, Dir 40.21 +- 4);" + runtime_note(secs, 1200) + study_note(t)};
}

// 4. GLMM-generated data: EB stays within 1pp of EB_HZ for the mean.
Outcome c4() {
  const auto t0 = Clock::now();
  SimDesign d = preset("sim1-glmm");
  d.M = 300;
  d.methods = {SimMethod::EB, SimMethod::EB_HZ};
  d.targets = {TargetParameter::mean()};
  const MetricTable t = study(d);
  const double secs = seconds_since(t0);
  bool pass = t.complete && secs < 1800.0;
  std::string detail;
  for (std::size_t n : {d.n_small, d.n_large}) {
    const double eb = rrmse(t, n, "mean", "EB"), hz = rrmse(t, n, "mean", "EB_HZ");
    pass = pass && eb <= hz + 1.0;
    detail += "n=" + std::to_string(n) + ": EB " + fmt(eb) + " vs EB_HZ " + fmt(hz) + "; ";
  }
  return {pass, detail + "(need EB <= EB_HZ + 1);" + runtime_note(secs, 1800) + study_note(t)};
}

// 5. Plug-in bias signs and magnitudes at n = 10.
Outcome c5() {
  const auto t0 = Clock::now();
  SimDesign d = preset("sim1-gg");
  d.M = 300;
  d.methods = {SimMethod::PI};
  const MetricTable t = study(d);
  const double secs = seconds_since(t0);
  const double q25 = rb(t, 10, "q:0.25", "PI"), gini = rb(t, 10, "gini", "PI");
  auto within = [](double v, double ref) { return std::abs(v - ref) <= 0.25 * std::abs(ref); };
  const bool pass = t.complete && q25 > 0.0 && gini < 0.0 && within(q25, 142.96) && within(gini, -59.85);
  return {pass, "RB(PI) Q0.25 " + fmt(q25) + " (ref +142.96), Gini " + fmt(gini) +
                    " (ref -59.85), tolerance +-25% relative;" + runtime_note(secs, 1800) + study_note(t)};
}

// 6. MSE estimator biases. Time-boxed: reports interim statistics when the
// budget runs out before M replicates.
Outcome c6() {
  const auto t0 = Clock::now();
  double budget = 7200.0;
  if (const char* s = std::getenv("GSAE_C6_BUDGET_SECONDS")) budget = std::strtod(s, nullptr);
  SimDesign d = preset("sim2-mse");
  d.M = 2000;
  d.B = 100;
  d.B1 = 100;
  // Replicates in flight when the budget expires still finish; leave room for them.
  const MetricTable t = study(d, std::max(0.0, budget - 120.0));
  const double secs = seconds_since(t0);
  if (t.replicates_used == 0)
    return {false, "no replicate finished within the " + fmt(budget, 0) + " s budget" + study_note(t)};
  const auto* nobc = t.find_mse("mean", "noBC");
  const auto* s = t.find_mse("mean", "S");
  const auto* dd = t.find_mse("mean", "D");
  const auto* tb = t.find_t_bias("gini");
  if (!nobc || !s || !dd || !tb) return {false, "missing MSE metrics" + study_note(t)};
  const bool stats = std::abs(nobc->rb_uncond_pct) <= 10.0 && s->rb_uncond_pct > 0.0 &&
                     dd->rb_uncond_pct < s->rb_uncond_pct && tb->t_bias < -2.0;
  std::string detail = std::string(t.complete ? "" : "INCOMPLETE (budget exhausted; interim statistics) ") +
                       "mean RB_uncond noBC " + fmt(nobc->rb_uncond_pct) + "% (|.| <= 10), S " +
                       fmt(s->rb_uncond_pct) + "% (> 0), D " + fmt(dd->rb_uncond_pct) + "% (< S); T^Bias gini " +
                       fmt(tb->t_bias) + " (< -2);" + runtime_note(secs, 7200) + study_note(t);
  return {t.complete && stats && secs < 7200.0, detail};
}

// 7. Informative sampling: EB_INFO removes the selection bias EB carries.
Outcome c7() {
  const auto t0 = Clock::now();
  // Complement CDF with b = 0 equals the sample gamma CDF.
  std::mt19937_64 eng(20240707);
  std::uniform_real_distribution<double> U(0.0, 1.0);
  double worst = 0.0;
  for (int rep = 0; rep < 50; ++rep) {
    const double alpha = 0.3 + 4.0 * U(eng), g0 = U(eng) - 0.5, g1 = U(eng), u = 0.2 + 2.0 * U(eng);
    InformativeModel model{{alpha, 4.0, {g0, g1}}, {}};
    model.weights.a = {0.0, 0.2 * U(eng)};
    model.weights.b = 0.0;
    model.weights.kappa["A"] = 1.5 + 10.0 * U(eng);
    const std::vector<double> x{1.0, 2.0 * U(eng)};
    const double eta = std::exp(g0 + g1 * x[1]) * u;
    for (int k = 1; k <= 200; ++k) {
      const double y = 8.0 * alpha / eta * k / 200.0;
      worst = std::max(worst, std::abs(complement_cdf(model, x, u, "A", y) - testing::boost_gamma_cdf(alpha, eta, y)));
    }
  }
  SimDesign d = preset("sim3-informative");
  d.M = 300;
  d.methods = {SimMethod::EB_INFO, SimMethod::EB};
  d.targets = {TargetParameter::mean()};
  const MetricTable t = study(d);
  const double secs = seconds_since(t0);
  const double info = rb(t, 10, "mean", "EB_INFO"), eb = rb(t, 10, "mean", "EB");
  const double info20 = rb(t, 20, "mean", "EB_INFO"), eb20 = rb(t, 20, "mean", "EB");
  const bool pass = t.complete && std::abs(info) < 2.0 && eb > 7.0 && worst <= 1e-10 && secs < 2400.0;
  return {pass, "n=10 mean RB EB_INFO " + fmt(info) + "% (|.| < 2), EB " + fmt(eb) + "% (> 7); n=20: EB_INFO " +
                    fmt(info20) + "%, EB " + fmt(eb20) + "%; b=0 complement CDF max error " + sci(worst) +
                    " (tol 1e-10); max negative mass " + fmt(t.info_max_negative_mass, 4) + ";" +
                    runtime_note(secs, 2400) + study_note(t)};
}

// 8. Property tests, run one at a time from the unit-test binaries. A test
// counts only if gtest reports it ran and passed (an empty filter exits 0).
Outcome c8() {
  const auto t0 = Clock::now();
  const std::vector<std::pair<std::string, std::string>> tests{
      {GSAE_TEST_NUMERICS, "DrawGamma.KolmogorovSmirnovBothRegimes"},
      {GSAE_TEST_NUMERICS, "IncompleteGamma.Recurrences"},
      {GSAE_TEST_GAMMA_GAMMA, "PosteriorU.BayesRuleOracle"},
      {GSAE_TEST_TARGETS, "Gini.MatchesDoubleSumOnRandomVectors"},
      {GSAE_TEST_TARGETS, "Evaluate.QuantileType7"},
      {GSAE_TEST_MSE, "BiasCorrections.UpperBranch"},
      {GSAE_TEST_MSE, "BiasCorrections.LowerBranch"},
      {GSAE_TEST_INFORMATIVE, "DrawComplement.KolmogorovSmirnovAgainstQuadratureCdf"},
      {GSAE_TEST_DIAGNOSTICS, "ResidualsGammaGamma.PitUniformUnderTrueModelWithPosteriorMeanPlugIn"},
      {GSAE_TEST_SIM, "RunStudy.ThreadCountInvariance"},
  };
  std::string failed;
  for (const auto& [bin, name] : tests) {
    const std::string cmd = "\"" + bin + "\" --gtest_filter='" + name + "' 2>&1";
    std::string out;
    int status = -1;
    if (FILE* pipe = popen(cmd.c_str(), "r")) {
      char buf[4096];
      while (std::fgets(buf, sizeof buf, pipe)) out += buf;
      status = pclose(pipe);
    }
    const bool ok = WIFEXITED(status) && WEXITSTATUS(status) == 0 && out.find("[  PASSED  ] 1 test.") != std::string::npos;
    if (!ok) failed += (failed.empty() ? "" : ", ") + name;
  }
  const double secs = seconds_since(t0);
  return {failed.empty() && secs < 300.0,
          (failed.empty() ? std::to_string(tests.size()) +
                                " property tests passed (gamma KS, incomplete-gamma recurrences, posterior conjugacy, "
                                "Gini double sum, type-7 quantiles, upper and lower bias-correction branches, "
                                "inversion KS, PIT uniformity, thread invariance)"
                          : "failing or not run: " + failed) +
              ";" + runtime_note(secs, 300)};
}

}  // namespace

int main(int argc, char** argv) {
  const std::map<std::string, std::pair<std::string, std::function<Outcome()>>> checks{
      {"c1", {"likelihood oracle equivalence", c1}},  {"c2", {"closed-form vs MC predictor", c2}},
      {"c3", {"desk-scale predictor ordering", c3}},    {"c4", {"GLMM robustness", c4}},
      {"c5", {"PI bias signs", c5}},                  {"c6", {"MSE estimator biases (slow)", c6}},
      {"c7", {"informative sampling", c7}},           {"c8", {"property suites", c8}},
  };
  std::vector<std::string> wanted;
  for (int i = 1; i < argc; ++i) wanted.push_back(argv[i]);
  if (wanted.empty() || (wanted.size() == 1 && wanted[0] == "all"))
    for (const auto& [k, v] : checks) wanted.push_back(k);
  bool all = true;
  for (const auto& key : wanted) {
    const auto it = checks.find(key);
    if (it == checks.end()) {
      std::cerr << "unknown criterion '" << key << "'\n";
      return 2;
    }
    Outcome o;
    try {
      o = it->second.second();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    const std::string line = std::string(o.pass ? "PASS " : "FAIL ") + key + " " + it->second.first + ": " + o.detail;
    std::cout << line << std::endl;
    if (const char* log = std::getenv("GSAE_ACCEPTANCE_LOG")) std::ofstream(log, std::ios::app) << line << '\n';
    all = all && o.pass;
  }
  return all ? 0 : 1;
}
