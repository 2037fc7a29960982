#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <Eigen/Core>
#include <boost/version.hpp>
#include <nlohmann/json.hpp>

#include "gsae/gsae.hpp"

namespace {

using namespace gsae;
using json = nlohmann::json;
namespace fs = std::filesystem;

constexpr const char* kVersion = "0.1.0";

// Exit codes: 0 success, 1 usage or data error, 2 numerical failure.
constexpr int kExitUsage = 1;
constexpr int kExitNumerical = 2;

class NonConvergence : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Global {
  std::uint64_t seed = 1;
  unsigned threads = 1;
  std::string config;
  std::string manifest;
  std::vector<std::string> argv;
};

struct DataArgs {
  std::string path;
  std::string schema;

  SurveyData load() const {
    const CsvSchema s = schema.empty() ? CsvSchema{} : CsvSchema::from_file(schema);
    return load_csv(path, s);
  }
};

std::ofstream open_output(const std::string& path) {
  if (path.empty()) throw DataError("no output path given");
  const fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path + "'");
  return out;
}

std::vector<TargetParameter> parse_targets(const std::vector<std::string>& texts) {
  std::vector<TargetParameter> t;
  for (const auto& s : texts) t.push_back(TargetParameter::parse(s));
  if (t.empty()) throw DomainError("no targets given");
  return t;
}

json versions() {
  return {{"gsae", kVersion},
          {"compiler", __VERSION__},
          {"boost", BOOST_LIB_VERSION},
          {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                        std::to_string(EIGEN_MINOR_VERSION)},
          {"nlohmann_json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                                std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                                std::to_string(NLOHMANN_JSON_VERSION_PATCH)},
          {"cli11", CLI11_VERSION}};
}

class Manifest {
 public:
  Manifest(std::string command, const Global& g) : start_(std::chrono::steady_clock::now()) {
    doc_["command"] = std::move(command);
    doc_["argv"] = g.argv;
    doc_["config"] = g.config.empty() ? json(nullptr) : json(g.config);
    doc_["seed"] = g.seed;
    doc_["threads"] = g.threads;
    doc_["versions"] = versions();
    doc_["inputs"] = json::object();
    doc_["outputs"] = json::array();
    doc_["timings"] = json::object();
  }
  json& doc() { return doc_; }
  void input(const std::string& key, const std::string& path) {
    if (!path.empty()) doc_["inputs"][key] = path;
  }
  void output(const std::string& path) { doc_["outputs"].push_back(path); }
  void lap(const std::string& name) {
    const auto now = std::chrono::steady_clock::now();
    doc_["timings"][name + "_seconds"] = std::chrono::duration<double>(now - lap_).count();
    lap_ = now;
  }
  void write(const std::string& path, const std::string& status) {
    doc_["status"] = status;
    doc_["timings"]["total_seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    auto out = open_output(path);
    out << doc_.dump(2) << '\n';
  }

 private:
  json doc_;
  std::chrono::steady_clock::time_point start_;
  std::chrono::steady_clock::time_point lap_ = std::chrono::steady_clock::now();
};

std::string manifest_path(const Global& g, const std::string& primary) {
  return g.manifest.empty() ? primary + ".manifest.json" : g.manifest;
}

// ---------------------------------------------------------------------------
// fit

struct FitArgs {
  DataArgs data;
  std::string model = "gg";
  std::string out;
  int quad_nodes = 25;
  double level = 0.95;
};

int cmd_fit(const FitArgs& a, const Global& g) {
  Manifest m("fit", g);
  m.input("data", a.data.path);
  const SurveyData data = a.data.load();
  m.lap("load");
  std::vector<ParameterEstimate> rows;
  double ll = 0.0;
  bool converged = false;
  std::size_t iterations = 0;
  if (a.model == "gg") {
    const FitResult f = fit(data);
    converged = f.converged;
    iterations = static_cast<std::size_t>(f.iterations);
    ll = f.loglik;
    rows = wald_intervals(f.params, data, a.level);
  } else if (a.model == "glmm") {
    GlmmConfig cfg;
    cfg.quad_nodes = a.quad_nodes;
    const GlmmFit f = glmm_fit(data, cfg);
    converged = f.converged;
    iterations = f.iterations;
    ll = f.loglik;
    rows = wald_intervals(f.params, data, a.quad_nodes, a.level);
  } else {
    throw DomainError("unknown model '" + a.model + "' (expected gg or glmm)");
  }
  m.lap("fit");
  auto out = open_output(a.out);
  write_fit_artifact(out, rows, ll);
  out.close();
  m.output(a.out);
  m.doc()["model"] = a.model;
  m.doc()["converged"] = converged;
  m.doc()["iterations"] = iterations;
  m.doc()["ci_level"] = a.level;
  m.write(manifest_path(g, a.out), converged ? "ok" : "nonconverged");
  if (!converged) throw NonConvergence("model fit did not converge; estimates written to " + a.out);
  return 0;
}

// ---------------------------------------------------------------------------
// predict

struct PredictArgs {
  DataArgs data;
  std::string fit;
  std::string method = "eb";
  std::vector<std::string> targets{"mean"};
  std::size_t L = 100;
  std::size_t L1 = 200;
  std::size_t L2 = 5;
  double max_negative_mass = 0.05;
  std::string out;
};

const GammaGammaParams& need_gg(const ModelParams& p, const std::string& method) {
  if (const auto* gg = std::get_if<GammaGammaParams>(&p)) return *gg;
  throw DomainError("method " + method + " needs a gamma-gamma fit (fit --model gg)");
}

const GlmmParams& need_glmm(const ModelParams& p, const std::string& method) {
  if (const auto* g = std::get_if<GlmmParams>(&p)) return *g;
  throw DomainError("method " + method + " needs a GLMM fit (fit --model glmm)");
}

int cmd_predict(const PredictArgs& a, const Global& g) {
  static const std::vector<std::string> methods{"eb", "eb-clsd", "eb-hz", "pi", "m", "dir", "eb-info"};
  if (std::find(methods.begin(), methods.end(), a.method) == methods.end())
    throw DomainError("unknown method '" + a.method + "'");
  Manifest m("predict", g);
  m.input("data", a.data.path);
  m.input("fit", a.fit);
  const auto targets = parse_targets(a.targets);
  if (a.method == "eb-clsd")
    for (const auto& t : targets)
      if (t.kind != TargetParameter::Kind::Mean)
        throw DomainError("eb-clsd is the closed-form predictor of the mean only; got target " + t.label);
  const SurveyData data = a.data.load();
  if (a.method == "eb-info" && !data.all_weights_present())
    throw DataError("eb-info needs a weight for every sampled unit");
  std::optional<ModelParams> params;
  if (a.method != "dir") {
    if (a.fit.empty()) throw DomainError("method " + a.method + " needs --fit");
    params = load_fit_artifact(a.fit);
  }
  m.lap("load");

  std::optional<InformativeModel> info;
  if (a.method == "eb-info") {
    info = InformativeModel{need_gg(*params, a.method), fit_weight_model(data)};
    m.doc()["weight_model"] = {{"a", info->weights.a}, {"b", info->weights.b}, {"degenerate", info->weights.degenerate}};
  }
  std::vector<double> vhat;
  if (a.method == "eb-hz" || a.method == "pi" || a.method == "m") vhat = glmm_modes(need_glmm(*params, a.method), data);
  if (a.method == "eb" || a.method == "eb-clsd") (void)need_gg(*params, a.method);

  const std::string label = a.method == "eb"        ? "EB"
                            : a.method == "eb-clsd" ? "EB_clsd"
                            : a.method == "eb-hz"   ? "EB_HZ"
                            : a.method == "pi"      ? "PI"
                            : a.method == "m"       ? "M"
                            : a.method == "dir"     ? "Dir"
                                                    : "EB_INFO";
  InformativeOptions info_opt;
  info_opt.max_negative_mass = a.max_negative_mass;
  std::vector<std::vector<PredictionRow>> per_area(data.D());
  parallel_for(data.D(), g.threads, [&](std::size_t i) {
    const AreaFrame& area = data.areas[i];
    RngStream rng(g.seed, i);
    std::vector<double> est;
    std::size_t fallbacks = 0;
    std::size_t L = a.L;
    try {
      if (a.method == "eb") {
        est = eb_predict_many(std::get<GammaGammaParams>(*params), area, targets, a.L, rng).point;
      } else if (a.method == "eb-clsd") {
        est.assign(targets.size(), predict_mean_closed(std::get<GammaGammaParams>(*params), area));
        L = 0;
      } else if (a.method == "eb-hz") {
        est = predict_ebp_hz_many(std::get<GlmmParams>(*params), area, targets, a.L1, a.L2, rng);
        L = a.L1 * a.L2;
      } else if (a.method == "pi") {
        est = predict_plugin_many(std::get<GlmmParams>(*params), vhat[i], area, targets);
        L = 0;
      } else if (a.method == "m") {
        est = predict_marginal_many(std::get<GlmmParams>(*params), vhat[i], area, targets, a.L, rng);
      } else if (a.method == "dir") {
        for (const auto& t : targets) est.push_back(area.n() > 0 ? direct_estimate(t, area) : std::nan(""));
        L = 0;
      } else {
        const auto p = eb_predict_info_many(*info, area, targets, a.L, rng, info_opt);
        est = p.prediction.point;
        fallbacks = p.fallback_count;
      }
    } catch (const DataError&) {
      throw;
    } catch (const Error& e) {
      throw EstimatorError("area " + area.area_id + ": " + e.what());
    }
    for (std::size_t k = 0; k < targets.size(); ++k)
      per_area[i].push_back({area.area_id, targets[k].label, label, est[k], area.n(), area.N, L, g.seed, fallbacks});
  });
  m.lap("predict");
  std::vector<PredictionRow> rows;
  for (auto& v : per_area) rows.insert(rows.end(), v.begin(), v.end());
  auto out = open_output(a.out);
  write_prediction_table(out, rows);
  out.close();
  m.output(a.out);
  m.doc()["method"] = a.method;
  m.doc()["targets"] = a.targets;
  m.doc()["L"] = a.L;
  m.write(manifest_path(g, a.out), "ok");
  return 0;
}

// ---------------------------------------------------------------------------
// mse

struct MseArgs {
  DataArgs data;
  std::string fit;
  std::vector<std::string> targets{"mean"};
  std::vector<std::string> variants{"nobc"};
  std::size_t B = 100;
  std::size_t B1 = 0;
  std::size_t B2 = 1;
  std::size_t L = 100;
  double level = 0.95;
  std::string out;
  std::string ci_out;
};

MseVariant variant_from_cli(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  for (MseVariant v : kAllMseVariants) {
    std::string name = to_string(v);
    std::transform(name.begin(), name.end(), name.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    if (name == s) return v;
  }
  throw DomainError("unknown MSE variant '" + s + "' (expected nobc, add, mult, hm, comp, s, d)");
}

int cmd_mse(const MseArgs& a, const Global& g) {
  Manifest m("mse", g);
  m.input("data", a.data.path);
  m.input("fit", a.fit);
  const auto targets = parse_targets(a.targets);
  std::vector<MseVariant> wanted;
  for (const auto& s : a.variants) wanted.push_back(variant_from_cli(s));
  if (wanted.empty()) throw DomainError("no MSE variants requested");
  const bool needs_double = std::any_of(wanted.begin(), wanted.end(),
                                        [](MseVariant v) { return v == MseVariant::S || v == MseVariant::D; });
  const SurveyData data = a.data.load();
  const GammaGammaParams psi = need_gg(load_fit_artifact(a.fit), "mse");
  m.lap("load");
  MseRequest req;
  req.L = a.L;
  req.B = a.B;
  req.B1 = needs_double ? (a.B1 > 0 ? a.B1 : a.B) : 0;
  req.B2 = a.B2;
  req.seed = g.seed;
  req.bootstrap.threads = g.threads;
  MseTable table = mse_estimates(data, psi, targets, req);
  m.lap("mse");
  for (auto& row : table.estimates)
    for (auto& e : row)
      std::erase_if(e.variants, [&](const auto& kv) {
        return std::find(wanted.begin(), wanted.end(), kv.first) == wanted.end();
      });
  auto out = open_output(a.out);
  write_mse_table(out, data, targets, table);
  out.close();
  m.output(a.out);
  if (!a.ci_out.empty()) {
    auto ci = open_output(a.ci_out);
    write_ci_table(ci, data, targets, table, a.level);
    ci.close();
    m.output(a.ci_out);
  }
  m.doc()["B"] = req.B;
  m.doc()["B1"] = req.B1;
  m.doc()["B2"] = req.B2;
  m.doc()["L"] = req.L;
  m.doc()["m2_dropped"] = table.m2_dropped;
  m.doc()["direct_dropped"] = table.direct_dropped;
  m.write(manifest_path(g, a.out), "ok");
  return 0;
}

// ---------------------------------------------------------------------------
// diagnose

struct DiagnoseArgs {
  DataArgs data;
  std::string fit;
  std::string uhat = "literal";
  std::string out;
};

int cmd_diagnose(const DiagnoseArgs& a, const Global& g) {
  Manifest m("diagnose", g);
  m.input("data", a.data.path);
  m.input("fit", a.fit);
  const SurveyData data = a.data.load();
  const ModelParams params = load_fit_artifact(a.fit);
  const UhatRule rule = parse_uhat_rule(a.uhat);
  const ResidualSet res = std::holds_alternative<GammaGammaParams>(params)
                              ? residuals_gamma_gamma(std::get<GammaGammaParams>(params), data, rule)
                              : residuals_glmm(std::get<GlmmParams>(params),
                                               glmm_modes(std::get<GlmmParams>(params), data), data);
  auto out = open_output(a.out);
  write_residuals(out, res);
  out.close();
  m.output(a.out);

  std::vector<double> r = res.r();
  std::sort(r.begin(), r.end());
  double ks = 0.0;
  const double n = static_cast<double>(r.size());
  for (std::size_t i = 0; i < r.size(); ++i)
    ks = std::max({ks, r[i] - static_cast<double>(i) / n, static_cast<double>(i + 1) / n - r[i]});
  const double slope = qq_slope(res.normal_scores());
  std::cout << "residuals: " << r.size() << "  KS vs U(0,1): " << ks << "  QQ slope: " << slope << '\n';
  m.doc()["uhat"] = a.uhat;
  m.doc()["summary"] = {{"count", r.size()}, {"ks_uniform", ks}, {"qq_slope", slope}};
  m.write(manifest_path(g, a.out), "ok");
  return 0;
}

// ---------------------------------------------------------------------------
// simulate

struct SimulateArgs {
  std::string preset;
  bool list = false;
  std::string out_dir;
  std::optional<std::size_t> M, L, B, B1;
  double time_budget = std::numeric_limits<double>::infinity();
  bool seed_given = false;
};

int cmd_simulate(const SimulateArgs& a, const Global& g) {
  if (a.list) {
    for (const auto& n : preset_names()) std::cout << n << '\n';
    return 0;
  }
  if (a.out_dir.empty()) throw DomainError("simulate needs --out-dir");
  Manifest m("simulate", g);
  std::optional<SimDesign> base;
  if (!a.preset.empty()) base = preset(a.preset);
  SimDesign d;
  if (!g.config.empty()) {
    std::ifstream in(g.config);
    if (!in) throw DataError("cannot open study config '" + g.config + "'");
    json j;
    try {
      j = json::parse(in);
    } catch (const json::exception& e) {
      throw DataError("study config " + g.config + ": " + e.what());
    }
    const bool config_seed = j.contains("seed");
    d = design_from_json(j, base);
    if (!config_seed || a.seed_given) d.seed = g.seed;
  } else if (base) {
    d = *base;
    d.seed = g.seed;
  } else {
    throw DomainError("simulate needs --preset or --config");
  }
  if (a.M) d.M = *a.M;
  if (a.L) d.L = *a.L;
  if (a.B) d.B = *a.B;
  if (a.B1) d.B1 = *a.B1;
  d.check();

  StudyOptions opt;
  opt.threads = g.threads;
  opt.time_budget_seconds = a.time_budget;
  const std::size_t step = std::max<std::size_t>(1, d.M / 20);
  opt.progress = [step](std::size_t done, std::size_t total) {
    if (done % step == 0 || done == total) std::cerr << "replicates " << done << '/' << total << '\n';
  };
  const MetricTable t = run_study(d, opt);
  m.lap("study");

  const fs::path dir(a.out_dir);
  const std::string pred = (dir / "predictors.csv").string();
  auto out = open_output(pred);
  write_predictor_metrics(out, t);
  out.close();
  m.output(pred);
  if (d.mse) {
    const std::string mse = (dir / "mse.csv").string();
    auto mo = open_output(mse);
    write_mse_metrics(mo, t);
    mo.close();
    m.output(mse);
    const std::string tb = (dir / "t_bias.csv").string();
    auto to = open_output(tb);
    write_t_bias(to, t);
    to.close();
    m.output(tb);
  }
  if (!t.failure_log.empty()) {
    const std::string fl = (dir / "failures.log").string();
    auto fo = open_output(fl);
    for (const auto& line : t.failure_log) fo << line << '\n';
    m.output(fl);
  }
  m.doc()["preset"] = a.preset.empty() ? json(nullptr) : json(a.preset);
  m.doc()["design"] = {{"D", d.D}, {"N", d.N}, {"n_small", d.n_small}, {"n_large", d.n_large}, {"M", d.M},
                       {"L", d.L}, {"B", d.B}, {"B1", d.B1}, {"seed", d.seed}, {"mse", d.mse}};
  m.doc()["study"] = {{"replicates_used", t.replicates_used}, {"failures", t.failures},
                      {"complete", t.complete},               {"pi_repairs", t.pi_repairs},
                      {"nonconverged_fits", t.nonconverged_fits}, {"info_fallbacks", t.info_fallbacks}};
  m.write(g.manifest.empty() ? (dir / "manifest.json").string() : g.manifest, t.complete ? "ok" : "incomplete");
  std::cerr << "replicates used " << t.replicates_used << " of " << d.M << ", failures " << t.failures << '\n';
  return 0;
}

// ---------------------------------------------------------------------------
// --config for non-simulate commands: a JSON object whose keys are long option
// names of the command (or global options). Values fill options that are not
// on the command line.

std::vector<std::string> expand_config(const std::vector<std::string>& args) {
  std::string config, command;
  static const std::vector<std::string> commands{"fit", "predict", "mse", "diagnose", "simulate"};
  for (std::size_t i = 1; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) config = args[i + 1];
    if (args[i].rfind("--config=", 0) == 0) config = args[i].substr(9);
    if (command.empty() && std::find(commands.begin(), commands.end(), args[i]) != commands.end()) command = args[i];
  }
  if (config.empty() || command == "simulate" || command.empty()) return args;
  std::ifstream in(config);
  if (!in) throw DataError("cannot open config '" + config + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw DataError("config " + config + ": " + e.what());
  }
  if (!j.is_object()) throw DataError("config " + config + " must be a JSON object");
  std::vector<std::string> out = args;
  auto present = [&](const std::string& flag) {
    for (const auto& s : args)
      if (s == flag || s.rfind(flag + "=", 0) == 0) return true;
    return false;
  };
  auto scalar = [](const json& v) {
    if (v.is_string()) return v.get<std::string>();
    return v.dump();
  };
  for (const auto& [key, value] : j.items()) {
    const std::string flag = "--" + key;
    if (present(flag)) continue;
    if (value.is_boolean()) {
      if (value.get<bool>()) out.push_back(flag);
    } else if (value.is_array()) {
      for (const auto& v : value) {
        out.push_back(flag);
        out.push_back(scalar(v));
      }
    } else {
      out.push_back(flag);
      out.push_back(scalar(value));
    }
  }
  return out;
}

void add_data_options(CLI::App* sub, DataArgs& d) {
  sub->add_option("--data", d.path, "Survey CSV (area, y, x..., optional weight, sampled)")->required();
  sub->add_option("--schema", d.schema, "JSON column mapping / population sizes");
}

int run(int argc, char** argv) {
  Global g;
  std::vector<std::string> args(argv, argv + argc);
  try {
    args = expand_config(args);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  }
  g.argv.assign(argv + 1, argv + argc);

  CLI::App app{"gsae: gamma-gamma small area estimation"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);
  app.fallthrough();
  auto* seed_opt = app.add_option("--seed", g.seed, "Master seed; every random stream derives from it");
  app.add_option("--threads", g.threads, "Worker threads (results do not depend on it)")->check(CLI::PositiveNumber);
  app.add_option("--config", g.config, "JSON config (simulate: study design; other commands: option defaults)");
  app.add_option("--manifest", g.manifest, "Manifest path (default: next to the main output)");

  FitArgs fa;
  auto* fit_cmd = app.add_subcommand("fit", "Fit the gamma-gamma model or the gamma GLMM");
  add_data_options(fit_cmd, fa.data);
  fit_cmd->add_option("--model", fa.model, "gg or glmm")->check(CLI::IsMember({"gg", "glmm"}));
  fit_cmd->add_option("--out", fa.out, "Parameter estimates CSV")->required();
  fit_cmd->add_option("--quad-nodes", fa.quad_nodes, "GLMM quadrature nodes (1 = Laplace)");
  fit_cmd->add_option("--level", fa.level, "Wald interval level")->check(CLI::Range(0.0, 1.0));

  PredictArgs pa;
  auto* pred_cmd = app.add_subcommand("predict", "Predict area parameters");
  add_data_options(pred_cmd, pa.data);
  pred_cmd->add_option("--fit", pa.fit, "Fit artifact from `gsae fit`");
  pred_cmd->add_option("--method", pa.method, "eb, eb-clsd, eb-hz, pi, m, dir, eb-info");
  pred_cmd->add_option("--targets", pa.targets, "mean, q:<p>, gini, exceed:<t>")->delimiter(',');
  pred_cmd->add_option("--L", pa.L, "Monte Carlo draws")->check(CLI::PositiveNumber);
  pred_cmd->add_option("--L1", pa.L1, "eb-hz outer draws")->check(CLI::PositiveNumber);
  pred_cmd->add_option("--L2", pa.L2, "eb-hz inner draws")->check(CLI::PositiveNumber);
  pred_cmd->add_option("--max-negative-mass", pa.max_negative_mass, "eb-info tolerance for negative complement mass");
  pred_cmd->add_option("--out", pa.out, "Prediction CSV")->required();

  MseArgs ma;
  auto* mse_cmd = app.add_subcommand("mse", "Bootstrap MSE estimates and normal intervals for EB");
  add_data_options(mse_cmd, ma.data);
  mse_cmd->add_option("--fit", ma.fit, "Gamma-gamma fit artifact")->required();
  mse_cmd->add_option("--targets", ma.targets, "mean, q:<p>, gini, exceed:<t>")->delimiter(',');
  mse_cmd->add_option("--variants", ma.variants, "nobc, add, mult, hm, comp, s, d")->delimiter(',');
  mse_cmd->add_option("--B", ma.B, "Bootstrap replicates for m2")->check(CLI::PositiveNumber);
  mse_cmd->add_option("--B1", ma.B1, "First-stage replicates for s / d (default B)");
  mse_cmd->add_option("--B2", ma.B2, "Second-stage replicates for d")->check(CLI::PositiveNumber);
  mse_cmd->add_option("--L", ma.L, "Monte Carlo draws")->check(CLI::Range(std::size_t{2}, std::size_t{1} << 40));
  mse_cmd->add_option("--level", ma.level, "Interval level")->check(CLI::Range(0.0, 1.0));
  mse_cmd->add_option("--out", ma.out, "MSE CSV")->required();
  mse_cmd->add_option("--ci-out", ma.ci_out, "Interval CSV");

  DiagnoseArgs da;
  auto* diag_cmd = app.add_subcommand("diagnose", "Generalized residuals of a fitted model");
  add_data_options(diag_cmd, da.data);
  diag_cmd->add_option("--fit", da.fit, "Fit artifact")->required();
  diag_cmd->add_option("--uhat", da.uhat, "literal or posterior-mean")
      ->check(CLI::IsMember({"literal", "posterior-mean"}));
  diag_cmd->add_option("--out", da.out, "Residual CSV")->required();

  SimulateArgs sa;
  auto* sim_cmd = app.add_subcommand("simulate", "Run a simulation study");
  sim_cmd->add_option("--preset", sa.preset, "sim1-gg, sim1-glmm, sim2-mse, sim3-informative");
  sim_cmd->add_flag("--list-presets", sa.list, "Print the preset names");
  sim_cmd->add_option("--out-dir", sa.out_dir, "Directory for the metric tables");
  sim_cmd->add_option("--M", sa.M, "Replicates");
  sim_cmd->add_option("--L", sa.L, "Monte Carlo draws");
  sim_cmd->add_option("--B", sa.B, "Bootstrap replicates");
  sim_cmd->add_option("--B1", sa.B1, "Double-bootstrap first-stage replicates");
  sim_cmd->add_option("--time-budget", sa.time_budget, "Stop scheduling replicates after this many seconds");

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend() - 1);
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }
  sa.seed_given = seed_opt->count() > 0;

  try {
    if (*fit_cmd) return cmd_fit(fa, g);
    if (*pred_cmd) return cmd_predict(pa, g);
    if (*mse_cmd) return cmd_mse(ma, g);
    if (*diag_cmd) return cmd_diagnose(da, g);
    if (*sim_cmd) return cmd_simulate(sa, g);
  } catch (const NonConvergence& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const DomainError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  }
  return kExitUsage;
}

}  // namespace

int main(int argc, char** argv) { return run(argc, argv); }
