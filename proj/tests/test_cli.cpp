#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "gsae/data.hpp"
#include "gsae/demo.hpp"

namespace {

namespace fs = std::filesystem;

const std::string kCli = GSAE_CLI_PATH;
const std::string kDemo = GSAE_DEMO_PATH;

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("gsae_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  int run(const std::string& args) const {
    const std::string cmd = kCli + " " + args + " >" + path("stdout.txt") + " 2>" + path("stderr.txt");
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  }

  fs::path dir_;
};

std::string slurp(const std::string& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::size_t line_count(const std::string& p) {
  const std::string s = slurp(p);
  return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n'));
}

TEST(CliDemo, ShippedFileMatchesGenerator) {
  const gsae::SurveyData shipped = gsae::load_csv(kDemo, {});
  EXPECT_EQ(shipped.D(), 73u);
  std::stringstream regenerated;
  gsae::write_csv(regenerated, gsae::demo_erosion());
  EXPECT_EQ(slurp(kDemo), regenerated.str());
}

TEST_F(Cli, FitWritesOneRowPerParameterPlusLoglik) {
  ASSERT_EQ(run("fit --data " + kDemo + " --out " + path("gg.csv")), 0);
  // header + alpha, delta, gamma0, gamma1 + loglik: 4 + p rows of estimates with p = 1 covariate.
  EXPECT_EQ(line_count(path("gg.csv")), 1u + 4u + 1u);
  const std::string s = slurp(path("gg.csv"));
  EXPECT_NE(s.find("alpha,"), std::string::npos);
  EXPECT_NE(s.find("wald-log"), std::string::npos);
  EXPECT_TRUE(fs::exists(path("gg.csv.manifest.json")));
}

TEST_F(Cli, UnreadableInputExitsOne) {
  EXPECT_EQ(run("fit --data " + path("missing.csv") + " --out " + path("x.csv")), 1);
  EXPECT_NE(slurp(path("stderr.txt")).find("cannot open"), std::string::npos);
  EXPECT_EQ(run("fit --out " + path("x.csv")), 1);
  EXPECT_EQ(run("frobnicate"), 1);
}

TEST_F(Cli, NonConvergenceExitsTwo) {
  std::ofstream(path("flat.csv")) << "area,y,x1\na,1,0.1\na,1,0.5\nb,1,0.2\nb,1,0.9\nb,1,0.3\n";
  EXPECT_EQ(run("fit --data " + path("flat.csv") + " --out " + path("f.csv")), 2);
  EXPECT_TRUE(fs::exists(path("f.csv")));
}

TEST_F(Cli, SameSeedByteIdenticalAcrossThreads) {
  ASSERT_EQ(run("fit --data " + kDemo + " --out " + path("gg.csv")), 0);
  const std::string base = "predict --data " + kDemo + " --fit " + path("gg.csv") + " --targets mean,q:0.25,gini --L 50";
  ASSERT_EQ(run("--seed 7 " + base + " --out " + path("a.csv")), 0);
  ASSERT_EQ(run("--seed 7 " + base + " --out " + path("b.csv")), 0);
  ASSERT_EQ(run("--seed 7 --threads 3 " + base + " --out " + path("c.csv")), 0);
  ASSERT_EQ(run("--seed 8 " + base + " --out " + path("d.csv")), 0);
  EXPECT_EQ(slurp(path("a.csv")), slurp(path("b.csv")));
  EXPECT_EQ(slurp(path("a.csv")), slurp(path("c.csv")));
  EXPECT_NE(slurp(path("a.csv")), slurp(path("d.csv")));

  ASSERT_EQ(run("fit --data " + kDemo + " --out " + path("gg2.csv")), 0);
  EXPECT_EQ(slurp(path("gg.csv")), slurp(path("gg2.csv")));
}

TEST_F(Cli, PredictMethodChecks) {
  ASSERT_EQ(run("fit --data " + kDemo + " --out " + path("gg.csv")), 0);
  const std::string d = "predict --data " + kDemo;
  EXPECT_EQ(run(d + " --method dir --targets mean,gini --out " + path("dir.csv")), 0);
  EXPECT_EQ(line_count(path("dir.csv")), 1u + 73u * 2u);
  EXPECT_EQ(run(d + " --fit " + path("gg.csv") + " --method eb-clsd --targets mean --out " + path("c.csv")), 0);
  EXPECT_EQ(run(d + " --fit " + path("gg.csv") + " --method eb-clsd --targets q:0.25 --out " + path("c2.csv")), 1);
  EXPECT_EQ(run(d + " --method eb --out " + path("e.csv")), 1);  // no fit
  EXPECT_EQ(run(d + " --fit " + path("gg.csv") + " --method pi --out " + path("p.csv")), 1);  // model mismatch
  EXPECT_EQ(run(d + " --fit " + path("gg.csv") + " --method nope --out " + path("p.csv")), 1);
  EXPECT_EQ(run(d + " --fit " + path("gg.csv") + " --method eb-info --out " + path("i.csv")), 0);

  // eb-info needs weights: drop the column.
  std::ofstream(path("schema.json")) << R"({"columns": {"weight": null}})";
  EXPECT_EQ(run(d + " --schema " + path("schema.json") + " --fit " + path("gg.csv") + " --method eb-info --out " +
                path("i2.csv")),
            1);
  EXPECT_NE(slurp(path("stderr.txt")).find("weight"), std::string::npos);
}

TEST_F(Cli, GlmmMethods) {
  ASSERT_EQ(run("fit --model glmm --quad-nodes 9 --data " + kDemo + " --out " + path("glmm.csv")), 0);
  const std::string s = slurp(path("glmm.csv"));
  EXPECT_NE(s.find("phi,"), std::string::npos);
  for (const std::string m : {"pi", "m", "eb-hz"})
    EXPECT_EQ(run("predict --data " + kDemo + " --fit " + path("glmm.csv") + " --method " + m +
                  " --L 20 --L1 20 --L2 2 --targets mean --out " + path(m + ".csv")),
              0)
        << m;
  EXPECT_EQ(run("predict --data " + kDemo + " --fit " + path("glmm.csv") + " --method eb --out " + path("x.csv")), 1);
}

TEST_F(Cli, MseDefaultsToNobcAndWritesIntervals) {
  ASSERT_EQ(run("fit --data " + kDemo + " --out " + path("gg.csv")), 0);
  ASSERT_EQ(run("mse --data " + kDemo + " --fit " + path("gg.csv") + " --B 4 --L 20 --out " + path("m.csv") +
                " --ci-out " + path("ci.csv")),
            0);
  const std::string m = slurp(path("m.csv"));
  EXPECT_NE(m.find(",mean,noBC,"), std::string::npos);
  EXPECT_EQ(m.find(",HM,"), std::string::npos);
  EXPECT_EQ(line_count(path("m.csv")), 1u + 73u);
  EXPECT_EQ(line_count(path("ci.csv")), 1u + 73u);
  EXPECT_EQ(run("mse --data " + kDemo + " --fit " + path("gg.csv") + " --variants bogus --out " + path("m2.csv")), 1);
}

TEST_F(Cli, DiagnosePrintsSummary) {
  ASSERT_EQ(run("fit --data " + kDemo + " --out " + path("gg.csv")), 0);
  ASSERT_EQ(run("diagnose --uhat posterior-mean --data " + kDemo + " --fit " + path("gg.csv") + " --out " +
                path("r.csv")),
            0);
  EXPECT_NE(slurp(path("stdout.txt")).find("QQ slope"), std::string::npos);
  const auto manifest = nlohmann::json::parse(slurp(path("r.csv.manifest.json")));
  EXPECT_LT(manifest.at("summary").at("ks_uniform").get<double>(), 0.06);
}

TEST_F(Cli, ConfigSuppliesOptionDefaults) {
  ASSERT_EQ(run("fit --data " + kDemo + " --out " + path("gg.csv")), 0);
  std::ofstream(path("cfg.json")) << R"({"targets": ["mean", "gini"], "L": 30, "seed": 5})";
  ASSERT_EQ(run("--config " + path("cfg.json") + " predict --data " + kDemo + " --fit " + path("gg.csv") +
                " --out " + path("a.csv")),
            0);
  ASSERT_EQ(run("--seed 5 predict --data " + kDemo + " --fit " + path("gg.csv") +
                " --targets mean,gini --L 30 --out " + path("b.csv")),
            0);
  EXPECT_EQ(slurp(path("a.csv")), slurp(path("b.csv")));
  std::ofstream(path("broken.json")) << "{";
  EXPECT_EQ(run("--config " + path("broken.json") + " predict --data " + kDemo + " --out " + path("c.csv")), 1);
}

TEST_F(Cli, SimulatePresetsAndManifest) {
  ASSERT_EQ(run("simulate --list-presets"), 0);
  const std::string listing = slurp(path("stdout.txt"));
  for (const char* p : {"sim1-gg", "sim1-glmm", "sim2-mse", "sim3-informative"})
    EXPECT_NE(listing.find(p), std::string::npos) << p;
  EXPECT_EQ(run("simulate --preset sim9 --out-dir " + path("s")), 1);

  std::ofstream(path("study.json"))
      << R"({"preset": "sim1-gg", "D": 8, "N": 30, "n_small": 5, "n_large": 8, "methods": ["EB", "Dir"]})";
  ASSERT_EQ(run("--config " + path("study.json") + " simulate --M 3 --out-dir " + path("s1")), 0);
  ASSERT_EQ(run("--config " + path("study.json") + " --threads 2 simulate --M 3 --out-dir " + path("s2")), 0);
  EXPECT_EQ(slurp(path("s1/predictors.csv")), slurp(path("s2/predictors.csv")));
  const auto manifest = nlohmann::json::parse(slurp(path("s1/manifest.json")));
  EXPECT_EQ(manifest.at("command"), "simulate");
  EXPECT_EQ(manifest.at("status"), "ok");
  EXPECT_EQ(manifest.at("study").at("replicates_used"), 3);
  EXPECT_TRUE(manifest.at("versions").contains("gsae"));
}

}  // namespace
