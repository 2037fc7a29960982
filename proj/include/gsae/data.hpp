#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "gsae/errors.hpp"

namespace gsae {

/// One population element. `x` always carries the leading intercept 1.
struct UnitRecord {
  std::string area_id;
  double y = 0.0;
  std::vector<double> x;
  std::optional<double> weight;
  bool sampled = true;
};

/// Sampled units of one area plus the covariates of its non-sampled units.
struct AreaFrame {
  std::string area_id;
  std::vector<UnitRecord> sampled_units;
  std::vector<std::vector<double>> nonsampled_covariates;
  std::size_t N = 0;

  std::size_t n() const noexcept { return sampled_units.size(); }
  std::size_t nonsampled_count() const noexcept { return N - n(); }
  /// True when every non-sampled unit has a covariate row.
  bool covariates_complete() const noexcept { return n() + nonsampled_covariates.size() == N; }

  std::vector<double> sampled_y() const {
    std::vector<double> v;
    v.reserve(sampled_units.size());
    for (const auto& u : sampled_units) v.push_back(u.y);
    return v;
  }

  /// Throws unless the non-sampled covariates needed for prediction are present.
  void require_nonsampled_covariates() const {
    if (!covariates_complete()) {
      throw DataError("area " + area_id + ": N=" + std::to_string(N) + " but only " +
                      std::to_string(nonsampled_covariates.size()) + " of " + std::to_string(N - n()) +
                      " non-sampled covariate rows are available; refusing to impute");
    }
  }
};

struct SurveyData {
  std::vector<AreaFrame> areas;
  std::size_t p = 0;  // covariates excluding the intercept

  std::size_t D() const noexcept { return areas.size(); }
  std::size_t total_sample_size() const noexcept {
    std::size_t t = 0;
    for (const auto& a : areas) t += a.n();
    return t;
  }
  bool all_weights_present() const {
    for (const auto& a : areas)
      for (const auto& u : a.sampled_units)
        if (!u.weight) return false;
    return total_sample_size() > 0;
  }
};

/// Column mapping for CSV ingestion. Empty optional names mean "absent".
struct CsvSchema {
  std::string area = "area";
  std::string y = "y";
  std::vector<std::string> x;  // empty: every column named x1, x2, ... in the header
  std::optional<std::string> weight = "weight";
  std::optional<std::string> sampled = "sampled";
  std::map<std::string, std::size_t> population_overrides;  // area id -> N

  /// Reads the sidecar JSON config: {"columns": {...}, "population_sizes": {...}}.
  static CsvSchema from_json(const nlohmann::json& j) {
    CsvSchema s;
    if (j.contains("columns")) {
      const auto& c = j.at("columns");
      if (c.contains("area")) s.area = c.at("area").get<std::string>();
      if (c.contains("y")) s.y = c.at("y").get<std::string>();
      if (c.contains("x")) s.x = c.at("x").get<std::vector<std::string>>();
      if (c.contains("weight")) {
        s.weight = c.at("weight").is_null() ? std::nullopt : std::optional(c.at("weight").get<std::string>());
      }
      if (c.contains("sampled")) {
        s.sampled = c.at("sampled").is_null() ? std::nullopt : std::optional(c.at("sampled").get<std::string>());
      }
    }
    if (j.contains("population_sizes")) {
      for (const auto& [k, v] : j.at("population_sizes").items()) s.population_overrides[k] = v.get<std::size_t>();
    }
    return s;
  }

  static CsvSchema from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open config file " + path);
    try {
      return from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::exception& e) {
      throw SchemaError("config " + path + ": " + e.what());
    }
  }
};

namespace detail {

inline std::vector<std::string> split_csv_line(std::string_view line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char ch = line[i];
    if (quoted) {
      if (ch == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur.push_back('"');
        ++i;
      } else if (ch == '"') {
        quoted = false;
      } else {
        cur.push_back(ch);
      }
    } else if (ch == '"') {
      quoted = true;
    } else if (ch == ',') {
      out.push_back(std::move(cur));
      cur.clear();
    } else if (ch != '\r') {
      cur.push_back(ch);
    }
  }
  out.push_back(std::move(cur));
  return out;
}

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t");
  return s.substr(b, e - b + 1);
}

inline bool is_missing(const std::string& s) { return s.empty() || s == "NA" || s == "na" || s == "NaN"; }

inline double parse_double(const std::string& s, std::size_t line, const std::string& column) {
  double v = 0.0;
  const char* first = s.data();
  const char* last = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last || !std::isfinite(v)) {
    throw ParseError("line " + std::to_string(line) + ": cannot parse '" + s + "' in column " + column, line);
  }
  return v;
}

inline bool parse_bool(const std::string& s, std::size_t line) {
  if (s == "1" || s == "true" || s == "TRUE" || s == "True" || s == "yes") return true;
  if (s == "0" || s == "false" || s == "FALSE" || s == "False" || s == "no") return false;
  throw ParseError("line " + std::to_string(line) + ": cannot parse '" + s + "' as a sampled flag", line);
}

// Integer-looking ids sort numerically, anything else lexicographically.
inline bool area_id_less(const std::string& a, const std::string& b) {
  long long ia = 0, ib = 0;
  const auto ra = std::from_chars(a.data(), a.data() + a.size(), ia);
  const auto rb = std::from_chars(b.data(), b.data() + b.size(), ib);
  const bool na = ra.ec == std::errc() && ra.ptr == a.data() + a.size();
  const bool nb = rb.ec == std::errc() && rb.ptr == b.data() + b.size();
  if (na && nb) return ia < ib;
  if (na != nb) return na;
  return a < b;
}

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace detail

/// Reads a header-first CSV stream. Rows with sampled=false contribute only
/// covariates; areas come out sorted by id, units keep file order.
inline SurveyData read_csv(std::istream& in, const CsvSchema& schema = {}) {
  std::string line;
  if (!std::getline(in, line)) throw SchemaError("empty CSV input: header required");
  auto header = detail::split_csv_line(line);
  for (auto& h : header) h = detail::trim(h);
  auto find_col = [&](const std::string& name) -> std::optional<std::size_t> {
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) return std::nullopt;
    return static_cast<std::size_t>(it - header.begin());
  };
  auto require_col = [&](const std::string& name) {
    const auto c = find_col(name);
    if (!c) throw SchemaError("missing required column '" + name + "'");
    return *c;
  };

  const std::size_t area_col = require_col(schema.area);
  const std::size_t y_col = require_col(schema.y);
  std::vector<std::size_t> x_cols;
  std::vector<std::string> x_names = schema.x;
  if (x_names.empty()) {
    for (int k = 1;; ++k) {
      const std::string nm = "x" + std::to_string(k);
      if (!find_col(nm)) break;
      x_names.push_back(nm);
    }
  }
  for (const auto& nm : x_names) x_cols.push_back(require_col(nm));
  const std::optional<std::size_t> w_col = schema.weight ? find_col(*schema.weight) : std::nullopt;
  const std::optional<std::size_t> s_col = schema.sampled ? find_col(*schema.sampled) : std::nullopt;

  std::map<std::string, AreaFrame, decltype(&detail::area_id_less)> by_area(&detail::area_id_less);
  std::vector<std::size_t> bad_y_rows;
  std::vector<std::size_t> bad_w_rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    auto f = detail::split_csv_line(line);
    if (f.size() != header.size()) {
      throw ParseError("line " + std::to_string(line_no) + ": expected " + std::to_string(header.size()) +
                           " fields, found " + std::to_string(f.size()),
                       line_no);
    }
    for (auto& s : f) s = detail::trim(s);
    UnitRecord u;
    u.area_id = f[area_col];
    u.sampled = s_col && !detail::is_missing(f[*s_col]) ? detail::parse_bool(f[*s_col], line_no) : true;
    u.x.reserve(x_cols.size() + 1);
    u.x.push_back(1.0);
    for (std::size_t k = 0; k < x_cols.size(); ++k) u.x.push_back(detail::parse_double(f[x_cols[k]], line_no, x_names[k]));
    if (w_col && !detail::is_missing(f[*w_col])) {
      u.weight = detail::parse_double(f[*w_col], line_no, *schema.weight);
      if (u.sampled && *u.weight < 1.0) bad_w_rows.push_back(line_no);
    }
    auto& area = by_area[u.area_id];
    area.area_id = u.area_id;
    ++area.N;
    if (u.sampled) {
      if (detail::is_missing(f[y_col])) {
        bad_y_rows.push_back(line_no);
        continue;
      }
      u.y = detail::parse_double(f[y_col], line_no, schema.y);
      if (!(u.y > 0.0)) {
        bad_y_rows.push_back(line_no);
        continue;
      }
      area.sampled_units.push_back(std::move(u));
    } else {
      area.nonsampled_covariates.push_back(std::move(u.x));
    }
  }
  auto list_rows = [](const std::vector<std::size_t>& rows) {
    std::string s;
    for (std::size_t k = 0; k < rows.size(); ++k) s += (k ? "," : "") + std::to_string(rows[k]);
    return s;
  };
  if (!bad_y_rows.empty()) {
    throw ValidationError("sampled rows need a positive response; offending lines: " + list_rows(bad_y_rows), bad_y_rows);
  }
  if (!bad_w_rows.empty()) {
    throw ValidationError("design weights must be >= 1; offending lines: " + list_rows(bad_w_rows), bad_w_rows);
  }

  SurveyData data;
  data.p = x_cols.size();
  for (auto& [id, area] : by_area) {
    if (const auto it = schema.population_overrides.find(id); it != schema.population_overrides.end()) {
      if (it->second < area.n() + area.nonsampled_covariates.size()) {
        throw ValidationError("area " + id + ": population override smaller than the rows supplied", {});
      }
      area.N = it->second;
    }
    data.areas.push_back(std::move(area));
  }
  for (const auto& [id, n_override] : schema.population_overrides) {
    if (by_area.find(id) == by_area.end()) {
      AreaFrame a;
      a.area_id = id;
      a.N = n_override;
      data.areas.push_back(std::move(a));
    }
  }
  std::sort(data.areas.begin(), data.areas.end(),
            [](const AreaFrame& a, const AreaFrame& b) { return detail::area_id_less(a.area_id, b.area_id); });
  if (data.areas.empty()) throw ValidationError("CSV contains no data rows", {});
  return data;
}

inline SurveyData load_csv(const std::string& path, const CsvSchema& schema = {}) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  return read_csv(in, schema);
}

/// Writes `area,y,x1..xp[,weight],sampled` with 17 significant digits;
/// non-sampled rows leave y empty.
inline void write_csv(std::ostream& out, const SurveyData& data) {
  bool any_weight = false;
  for (const auto& a : data.areas)
    for (const auto& u : a.sampled_units) any_weight = any_weight || u.weight.has_value();
  out << "area,y";
  for (std::size_t k = 1; k <= data.p; ++k) out << ",x" << k;
  if (any_weight) out << ",weight";
  out << ",sampled\n";
  for (const auto& a : data.areas) {
    for (const auto& u : a.sampled_units) {
      out << a.area_id << ',' << detail::format_double(u.y);
      for (std::size_t k = 1; k < u.x.size(); ++k) out << ',' << detail::format_double(u.x[k]);
      if (any_weight) out << ',' << (u.weight ? detail::format_double(*u.weight) : std::string());
      out << ",1\n";
    }
    for (const auto& x : a.nonsampled_covariates) {
      out << a.area_id << ',';
      for (std::size_t k = 1; k < x.size(); ++k) out << ',' << detail::format_double(x[k]);
      if (any_weight) out << ',';
      out << ",0\n";
    }
  }
}

enum class IssueKind { PredictionOnlyArea, ConstantCovariate, PartialWeights, MissingNonsampledCovariates };

struct ValidationIssue {
  IssueKind kind;
  std::string area_id;  // empty for dataset-wide issues
  std::string message;
};

struct ValidationReport {
  std::vector<ValidationIssue> issues;
  std::size_t units_with_weights = 0;
  std::size_t sampled_units = 0;

  bool informative_available() const { return sampled_units > 0 && units_with_weights == sampled_units; }

  bool has(IssueKind k) const {
    return std::any_of(issues.begin(), issues.end(), [k](const ValidationIssue& i) { return i.kind == k; });
  }
};

/// Read-only health report; never throws for data content.
inline ValidationReport validate(const SurveyData& data) {
  ValidationReport r;
  for (const auto& a : data.areas) {
    if (a.n() == 0) r.issues.push_back({IssueKind::PredictionOnlyArea, a.area_id, "area has no sampled units; prediction only"});
    if (!a.covariates_complete()) {
      r.issues.push_back({IssueKind::MissingNonsampledCovariates, a.area_id,
                          "non-sampled covariate rows missing; model predictions unavailable"});
    }
    for (const auto& u : a.sampled_units) {
      ++r.sampled_units;
      if (u.weight) ++r.units_with_weights;
    }
  }
  for (std::size_t k = 1; k <= data.p; ++k) {
    std::set<double> seen;
    for (const auto& a : data.areas) {
      for (const auto& u : a.sampled_units) seen.insert(u.x[k]);
      for (const auto& x : a.nonsampled_covariates) seen.insert(x[k]);
      if (seen.size() > 1) break;
    }
    if (seen.size() <= 1) {
      r.issues.push_back({IssueKind::ConstantCovariate, "", "covariate x" + std::to_string(k) + " is constant"});
    }
  }
  if (r.units_with_weights > 0 && r.units_with_weights < r.sampled_units) {
    r.issues.push_back({IssueKind::PartialWeights, "",
                        "weights present for " + std::to_string(r.units_with_weights) + " of " +
                            std::to_string(r.sampled_units) + " sampled units; informative analysis unavailable"});
  }
  return r;
}

}  // namespace gsae
