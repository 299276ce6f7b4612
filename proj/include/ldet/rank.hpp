#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "ldet/lora.hpp"
#include "ldet/svd.hpp"

namespace ldet {

// One sweep point: rank, compressed parameter ratio p = r(d+k)/(dk), and the
// Frobenius truncation error (absolute and relative to ||W||_F).
struct RankCurvePoint {
  std::size_t r;
  double p;
  double error;
  double rel_error;
};

struct RankCurve {
  std::string tensor;
  std::size_t d, k;
  std::vector<RankCurvePoint> points;  // r ascending
};

struct RankCriterion {
  enum class Kind { kErrorTolerance, kParamBudget } kind;
  double value;  // epsilon (relative error) or p_max

  static RankCriterion error_tolerance(double eps) {
    return {Kind::kErrorTolerance, eps};
  }
  static RankCriterion param_budget(double p_max) {
    return {Kind::kParamBudget, p_max};
  }
};

struct RankSelection {
  std::string tensor;
  std::size_t chosen_r;
  RankCriterion criterion;
  double achieved_error;  // relative
  double achieved_p;
};

// Default sweep grid: powers of two plus min(d,k), capped at min(d,k).
inline std::vector<std::size_t> default_rank_sweep(std::size_t d, std::size_t k) {
  const std::size_t cap = std::min(d, k);
  std::vector<std::size_t> rs;
  for (std::size_t r = 1; r < cap; r *= 2) rs.push_back(r);
  rs.push_back(cap);
  return rs;
}

// One SVD per matrix; errors come from the tail singular values:
// error_r = sqrt(sum_{i >= r} sigma_i^2).
inline RankCurve analyze_matrix(const Matrix& w, std::vector<std::size_t> r_values,
                                const std::string& tensor_name = "") {
  const std::size_t cap = std::min(w.rows(), w.cols());
  std::sort(r_values.begin(), r_values.end());
  r_values.erase(std::unique(r_values.begin(), r_values.end()), r_values.end());
  for (std::size_t r : r_values)
    if (r < 1 || r > cap)
      throw ArgumentError("analyze_matrix: rank " + std::to_string(r) +
                          " outside [1, " + std::to_string(cap) + "]");
  const SvdResult s = svd(w);
  // suffix sums of squared singular values, tail_sq[i] = sum_{j >= i} sigma_j^2
  std::vector<double> tail_sq(s.sigma.size() + 1, 0.0);
  for (std::size_t i = s.sigma.size(); i-- > 0;)
    tail_sq[i] = tail_sq[i + 1] + s.sigma[i] * s.sigma[i];
  const double norm = std::sqrt(tail_sq[0]);

  RankCurve curve{tensor_name, w.rows(), w.cols(), {}};
  for (std::size_t r : r_values) {
    const double err = std::sqrt(tail_sq[r]);
    curve.points.push_back({r, param_budget(w.rows(), w.cols(), r).compressed_ratio,
                            err, norm > 0.0 ? err / norm : 0.0});
  }
  return curve;
}

// Extremal rank under the criterion: smallest r whose relative error is
// within epsilon, or largest r whose ratio p stays within the budget.
inline RankSelection select_rank(const RankCurve& curve, const RankCriterion& crit) {
  if (curve.points.empty()) throw ArgumentError("select_rank: empty curve");
  std::optional<RankCurvePoint> pick;
  if (crit.kind == RankCriterion::Kind::kErrorTolerance) {
    for (const auto& pt : curve.points)
      if (pt.rel_error <= crit.value) {
        pick = pt;
        break;
      }
    if (!pick)
      throw SelectionError("select_rank: no sampled rank meets error tolerance " +
                           std::to_string(crit.value) + " for " + curve.tensor);
  } else {
    for (const auto& pt : curve.points)
      if (pt.p <= crit.value) pick = pt;  // points ascend in r, keep the largest
    if (!pick)
      throw SelectionError("select_rank: no sampled rank fits parameter budget " +
                           std::to_string(crit.value) + " for " + curve.tensor);
  }
  return {curve.tensor, pick->r, crit, pick->rel_error, pick->p};
}

// ---- reports ---------------------------------------------------------------

namespace detail {

inline std::string fmt9(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

inline std::string csv_name(const std::string& tensor) {
  std::string out;
  for (char c : tensor)
    out += (std::isalnum(static_cast<unsigned char>(c)) != 0) ? c : '_';
  return out;
}

}  // namespace detail

inline std::string curve_to_csv(const RankCurve& c) {
  std::ostringstream os;
  os << "r,p,error,rel_error\n";
  for (const auto& pt : c.points)
    os << pt.r << ',' << detail::fmt9(pt.p) << ',' << detail::fmt9(pt.error) << ','
       << detail::fmt9(pt.rel_error) << '\n';
  return os.str();
}

inline std::vector<RankCurvePoint> parse_curve_csv(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  std::vector<RankCurvePoint> points;
  bool header = true;
  while (std::getline(is, line)) {
    if (header) {
      header = false;
      continue;
    }
    if (line.empty()) continue;
    RankCurvePoint pt{};
    char c1, c2, c3;
    std::istringstream ls(line);
    unsigned long r = 0;
    if (!(ls >> r >> c1 >> pt.p >> c2 >> pt.error >> c3 >> pt.rel_error))
      throw IoError("parse_curve_csv: malformed line '" + line + "'");
    pt.r = r;
    points.push_back(pt);
  }
  return points;
}

// One CSV per curve plus a JSON summary, byte-deterministic given inputs.
// Returns the list of files written.
inline std::vector<std::string> emit_report(const std::vector<RankCurve>& curves,
                                            const std::vector<RankSelection>& selections,
                                            const std::string& out_dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("emit_report: cannot create " + out_dir + ": " + ec.message());

  std::vector<std::string> written;
  auto write_file = [&](const std::string& path, const std::string& body) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("emit_report: cannot open " + path);
    f << body;
    if (!f) throw IoError("emit_report: write failed for " + path);
    written.push_back(path);
  };

  for (const auto& c : curves)
    write_file(out_dir + "/" + detail::csv_name(c.tensor) + ".csv", curve_to_csv(c));

  std::ostringstream js;
  js << "{\n  \"curves\": [";
  for (std::size_t i = 0; i < curves.size(); ++i) {
    const auto& c = curves[i];
    js << (i ? ",\n" : "\n") << "    {\"tensor\": \"" << c.tensor << "\", \"d\": "
       << c.d << ", \"k\": " << c.k << ", \"points\": " << c.points.size() << "}";
  }
  js << (curves.empty() ? "" : "\n  ") << "],\n  \"selections\": [";
  for (std::size_t i = 0; i < selections.size(); ++i) {
    const auto& s = selections[i];
    js << (i ? ",\n" : "\n") << "    {\"tensor\": \"" << s.tensor
       << "\", \"chosen_r\": " << s.chosen_r << ", \"criterion\": \""
       << (s.criterion.kind == RankCriterion::Kind::kErrorTolerance
               ? "error_tolerance"
               : "param_budget")
       << "\", \"criterion_value\": " << detail::fmt9(s.criterion.value)
       << ", \"achieved_error\": " << detail::fmt9(s.achieved_error)
       << ", \"achieved_p\": " << detail::fmt9(s.achieved_p) << "}";
  }
  js << (selections.empty() ? "" : "\n  ") << "]\n}\n";
  write_file(out_dir + "/summary.json", js.str());
  return written;
}

}  // namespace ldet
