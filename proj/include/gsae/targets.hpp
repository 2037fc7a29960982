#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "gsae/data.hpp"
#include "gsae/errors.hpp"

namespace gsae {

/// Area parameter h(y_1, ..., y_N).
struct TargetParameter {
  enum class Kind { Mean, Quantile, Gini, ExceedProportion };

  Kind kind = Kind::Mean;
  double arg = 0.0;  // probability for Quantile, threshold for ExceedProportion
  std::string label = "mean";

  static TargetParameter mean() { return {Kind::Mean, 0.0, "mean"}; }
  static TargetParameter gini() { return {Kind::Gini, 0.0, "gini"}; }
  static TargetParameter quantile(double p) {
    if (!(p >= 0.0 && p <= 1.0)) throw DomainError("quantile probability must lie in [0, 1]");
    return {Kind::Quantile, p, "q:" + trimmed(p)};
  }
  static TargetParameter exceed(double t) {
    if (!(t > 0.0)) throw DomainError("exceedance threshold must be positive");
    return {Kind::ExceedProportion, t, "exceed:" + trimmed(t)};
  }

  /// Parses the CLI grammar: mean, q:<p>, gini, exceed:<t>.
  static TargetParameter parse(const std::string& text) {
    if (text == "mean") return mean();
    if (text == "gini") return gini();
    auto number_after = [&](std::size_t pos) {
      const std::string s = text.substr(pos);
      double v = 0.0;
      auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
      if (ec != std::errc() || ptr != s.data() + s.size()) throw DomainError("bad target '" + text + "'");
      return v;
    };
    if (text.rfind("q:", 0) == 0) {
      const double p = number_after(2);
      if (!(p > 0.0 && p < 1.0)) throw DomainError("quantile target needs p in (0,1): '" + text + "'");
      return quantile(p);
    }
    if (text.rfind("exceed:", 0) == 0) return exceed(number_after(7));
    throw DomainError("unknown target '" + text + "' (expected mean, q:<p>, gini, exceed:<t>)");
  }

  bool needs_sorting() const noexcept { return kind == Kind::Quantile || kind == Kind::Gini; }

 private:
  static std::string trimmed(double v) {
    std::string s = std::to_string(v);
    while (!s.empty() && s.back() == '0') s.pop_back();
    if (!s.empty() && s.back() == '.') s.pop_back();
    return s;
  }
};

/// Type-7 quantile of an ascending sequence.
inline double quantile_sorted(std::span<const double> sorted, double p) {
  const std::size_t n = sorted.size();
  if (n == 0) throw DomainError("quantile of empty input");
  const double h = static_cast<double>(n - 1) * p;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  if (lo + 1 >= n) return sorted[n - 1];
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[lo + 1] - sorted[lo]);
}

/// Gini with the 2 n^2 mean normalization, via the ordered-statistics identity
/// sum_k sum_l |v_k - v_l| = 2 sum_k (2k - n - 1) v_(k).
inline double gini_sorted(std::span<const double> sorted) {
  const std::size_t n = sorted.size();
  if (n == 0) throw DomainError("gini of empty input");
  double weighted = 0.0;
  double total = 0.0;
  const double nn = static_cast<double>(n);
  for (std::size_t k = 0; k < n; ++k) {
    weighted += (2.0 * static_cast<double>(k + 1) - nn - 1.0) * sorted[k];
    total += sorted[k];
  }
  if (!(total > 0.0)) throw DomainError("gini needs a positive mean");
  // 2 * weighted / (2 n^2 * total / n)
  return weighted / (nn * total);
}

/// Evaluates a target on values already sorted ascending.
inline double evaluate_sorted(const TargetParameter& t, std::span<const double> sorted) {
  if (sorted.empty()) throw DomainError("target evaluation on empty input");
  switch (t.kind) {
    case TargetParameter::Kind::Mean: {
      double s = 0.0;
      for (double v : sorted) s += v;
      return s / static_cast<double>(sorted.size());
    }
    case TargetParameter::Kind::Quantile:
      return quantile_sorted(sorted, t.arg);
    case TargetParameter::Kind::Gini:
      return gini_sorted(sorted);
    case TargetParameter::Kind::ExceedProportion: {
      // first element strictly above the threshold
      const auto it = std::upper_bound(sorted.begin(), sorted.end(), t.arg);
      return static_cast<double>(sorted.end() - it) / static_cast<double>(sorted.size());
    }
  }
  return 0.0;
}

inline double evaluate(const TargetParameter& t, std::span<const double> values) {
  if (values.empty()) throw DomainError("target evaluation on empty input");
  if (t.kind == TargetParameter::Kind::Mean) return evaluate_sorted(t, values);
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  return evaluate_sorted(t, sorted);
}

/// Evaluates several targets on one vector, sorting it in place at most once.
inline void evaluate_many(std::span<const TargetParameter> targets, std::vector<double>& values, std::span<double> out) {
  bool sorted = false;
  for (std::size_t k = 0; k < targets.size(); ++k) {
    if (!sorted && targets[k].kind != TargetParameter::Kind::Mean) {
      std::sort(values.begin(), values.end());
      sorted = true;
    }
    out[k] = evaluate_sorted(targets[k], values);
  }
}

/// Direct estimator: the target evaluated on the sampled responses only.
inline double direct_estimate(const TargetParameter& t, const AreaFrame& area) {
  if (area.n() == 0) throw DataError("direct estimate unavailable for area " + area.area_id + " (n = 0)");
  const auto y = area.sampled_y();
  return evaluate(t, y);
}

}  // namespace gsae
