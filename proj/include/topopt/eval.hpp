#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <deque>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "topopt/fem.hpp"
#include "topopt/nn/tensor.hpp"

namespace topopt::eval {

using BinaryGrid = Grid<std::uint8_t>;

/// Solid where value >= threshold.
inline BinaryGrid binarize(const Grid<double>& map, double threshold = 0.5) {
  BinaryGrid out(map.rows(), map.cols());
  for (std::size_t i = 0; i < map.size(); ++i) out.values()[i] = map.values()[i] >= threshold ? 1 : 0;
  return out;
}

inline Grid<double> to_density(const BinaryGrid& g, double void_value = kMinDensity) {
  Grid<double> out(g.rows(), g.cols());
  for (std::size_t i = 0; i < g.size(); ++i) out.values()[i] = g.values()[i] ? 1.0 : void_value;
  return out;
}

struct PixelMetrics {
  double pixel_values_error = 0.0;  // mean |pred - target|
  double pixel_accuracy = 0.0;      // share of agreeing binarized pixels
};

inline PixelMetrics pixel_metrics(const Grid<double>& pred, const Grid<double>& target, double threshold = 0.5) {
  if (!pred.same_shape(target) || pred.size() == 0) throw ShapeMismatch("pixel_metrics operands");
  double abs_sum = 0.0;
  std::size_t agree = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double p = pred.values()[i], t = target.values()[i];
    abs_sum += std::abs(p - t);
    agree += (p >= threshold) == (t >= threshold);
  }
  const auto n = static_cast<double>(pred.size());
  return {abs_sum / n, static_cast<double>(agree) / n};
}

/// |mean(pred) - mean(target)| / mean(target) on continuous values.
inline double volume_fraction_error(const Grid<double>& pred, const Grid<double>& target) {
  if (!pred.same_shape(target) || pred.size() == 0) throw ShapeMismatch("volume_fraction_error operands");
  double sp = 0.0, st = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    sp += pred.values()[i];
    st += target.values()[i];
  }
  return std::abs(sp - st) / st;
}

/// Elements touching a node with a fixed DOF.
inline BinaryGrid support_elements(const MeshSpec& mesh, const BoundaryCondition& bc) {
  BinaryGrid out(static_cast<std::size_t>(mesh.nely), static_cast<std::size_t>(mesh.nelx));
  for (int r = 0; r < mesh.nely; ++r)
    for (int c = 0; c < mesh.nelx; ++c)
      for (auto [dr, dc] : {std::pair{0, 0}, {0, 1}, {1, 0}, {1, 1}})
        if (bc.node_has_fixed_dof(mesh.node(r + dr, c + dc))) out(r, c) = 1;
  return out;
}

/// Up to four elements sharing node (row, col) of the node grid.
inline std::vector<std::pair<int, int>> elements_around_node(const MeshSpec& mesh, int node) {
  const int r = node % (mesh.nely + 1), c = node / (mesh.nely + 1);
  std::vector<std::pair<int, int>> out;
  for (int er : {r - 1, r})
    for (int ec : {c - 1, c})
      if (er >= 0 && er < mesh.nely && ec >= 0 && ec < mesh.nelx) out.emplace_back(er, ec);
  return out;
}

/// True unless one 4-connected solid component touches a support element
/// and, for every loaded node, contains an element adjacent to that node.
inline bool detect_disconnection(const BinaryGrid& solid, const MeshSpec& mesh, const BoundaryCondition& bc,
                                 const LoadCase& loads) {
  if (solid.rows() != static_cast<std::size_t>(mesh.nely) || solid.cols() != static_cast<std::size_t>(mesh.nelx))
    throw ShapeMismatch("disconnection grid vs mesh");
  const auto R = solid.rows(), C = solid.cols();
  Grid<int> label(R, C, -1);
  int next = 0;
  std::deque<std::pair<std::size_t, std::size_t>> queue;
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t c = 0; c < C; ++c) {
      if (!solid(r, c) || label(r, c) >= 0) continue;
      label(r, c) = next;
      queue.emplace_back(r, c);
      while (!queue.empty()) {
        const auto [y, x] = queue.front();
        queue.pop_front();
        auto visit = [&](std::size_t yy, std::size_t xx) {
          if (solid(yy, xx) && label(yy, xx) < 0) {
            label(yy, xx) = next;
            queue.emplace_back(yy, xx);
          }
        };
        if (y > 0) visit(y - 1, x);
        if (y + 1 < R) visit(y + 1, x);
        if (x > 0) visit(y, x - 1);
        if (x + 1 < C) visit(y, x + 1);
      }
      ++next;
    }

  const BinaryGrid supports = support_elements(mesh, bc);
  std::vector<std::uint8_t> touches_support(static_cast<std::size_t>(next), 0);
  for (std::size_t i = 0; i < label.size(); ++i)
    if (label.values()[i] >= 0 && supports.values()[i]) touches_support[static_cast<std::size_t>(label.values()[i])] = 1;

  for (int comp = 0; comp < next; ++comp) {
    if (!touches_support[static_cast<std::size_t>(comp)]) continue;
    bool all_loads = true;
    for (const auto& l : loads.loads) {
      bool reached = false;
      for (auto [er, ec] : elements_around_node(mesh, l.node))
        reached = reached || label(static_cast<std::size_t>(er), static_cast<std::size_t>(ec)) == comp;
      if (!reached) {
        all_loads = false;
        break;
      }
    }
    if (all_loads) return false;
  }
  return true;
}

/// Relative compliance difference of the binarized prediction against the
/// binarized target (void mapped to x_min). nullopt when the prediction is
/// disconnected.
inline std::optional<double> compliance_error(const Grid<double>& pred, const Grid<double>& target,
                                              const MeshSpec& mesh, const BoundaryCondition& bc,
                                              const LoadCase& loads, double penalty = 3.0, double threshold = 0.5) {
  if (!pred.same_shape(target)) throw ShapeMismatch("compliance_error operands");
  const BinaryGrid bp = binarize(pred, threshold);
  if (detect_disconnection(bp, mesh, bc, loads)) return std::nullopt;
  FeSolver solver(mesh, bc);
  const auto xp = to_density(bp), xt = to_density(binarize(target, threshold));
  const double cp = compliance(mesh, solver.solve(loads, xp, penalty), xp, penalty);
  const double ct = compliance(mesh, solver.solve(loads, xt, penalty), xt, penalty);
  return (cp - ct) / ct;
}

/// Same comparison on the continuous maps, clamped to [x_min, 1].
inline double compliance_error_continuous(const Grid<double>& pred, const Grid<double>& target, const MeshSpec& mesh,
                                          const BoundaryCondition& bc, const LoadCase& loads, double penalty = 3.0) {
  auto clamp = [](Grid<double> g) {
    for (auto& v : g.values()) v = std::clamp(v, kMinDensity, 1.0);
    return g;
  };
  FeSolver solver(mesh, bc);
  const auto xp = clamp(pred), xt = clamp(target);
  const double cp = compliance(mesh, solver.solve(loads, xp, penalty), xp, penalty);
  const double ct = compliance(mesh, solver.solve(loads, xt, penalty), xt, penalty);
  return (cp - ct) / ct;
}

struct MetricsRecord {
  std::size_t index = 0;
  double volume_fraction = 0.0;
  std::optional<double> compliance_error;  // empty when disconnected
  double pixel_values_error = 0.0;
  double pixel_accuracy = 0.0;
  double volume_fraction_error = 0.0;
  bool disconnected = false;
  double simp_seconds = std::numeric_limits<double>::quiet_NaN();
  double predict_seconds = 0.0;
};

/// A problem with its reference solution.
struct Problem {
  std::size_t index = 0;
  double volume_fraction = 0.0;
  LoadCase loads;
  nn::Tensor<float> input;  // (nely+1, nelx+1, C)
  Grid<double> target;      // (nely, nelx)
  double simp_seconds = std::numeric_limits<double>::quiet_NaN();
};

struct ThresholdRow {
  double threshold = 0.5;
  double pixel_accuracy = 0.0;
  double disconnected_percent = 0.0;
};

struct Summary {
  std::size_t samples = 0;
  std::size_t disconnected = 0;
  // means over connected samples
  double compliance_error = 0.0;
  double abs_compliance_error = 0.0;
  double pixel_values_error = 0.0;
  double volume_fraction_error = 0.0;
  // means over all samples
  double pixel_values_error_all = 0.0;
  double pixel_accuracy = 0.0;
  double baseline_accuracy = 0.0;  // mean of max(f, 1 - f)
  double mean_simp_seconds = std::numeric_limits<double>::quiet_NaN();
  double mean_predict_seconds = 0.0;
  std::vector<ThresholdRow> sensitivity;

  double disconnected_percent() const {
    return samples ? 100.0 * static_cast<double>(disconnected) / static_cast<double>(samples) : 0.0;
  }
};

struct Report {
  std::vector<MetricsRecord> records;
  Summary summary;
};

using Predictor = std::function<Grid<double>(const nn::Tensor<float>&)>;

inline void write_csv_header(std::ostream& os) {
  os << "index,volume_fraction,compliance_error,pixel_values_error,pixel_accuracy,volume_fraction_error,"
        "disconnected,simp_seconds,predict_seconds\n";
}

inline void write_csv_row(std::ostream& os, const MetricsRecord& r) {
  os << r.index << ',' << std::setprecision(9) << r.volume_fraction << ',';
  if (r.compliance_error) os << *r.compliance_error;
  os << ',' << r.pixel_values_error << ',' << r.pixel_accuracy << ',' << r.volume_fraction_error << ','
     << (r.disconnected ? 1 : 0) << ',';
  if (std::isfinite(r.simp_seconds)) os << r.simp_seconds;
  os << ',' << r.predict_seconds << '\n';
}

inline Summary summarize(const std::vector<MetricsRecord>& recs) {
  Summary s;
  s.samples = recs.size();
  std::size_t connected = 0, timed = 0;
  double simp_total = 0.0;
  for (const auto& r : recs) {
    s.pixel_values_error_all += r.pixel_values_error;
    s.pixel_accuracy += r.pixel_accuracy;
    s.baseline_accuracy += std::max(r.volume_fraction, 1.0 - r.volume_fraction);
    s.mean_predict_seconds += r.predict_seconds;
    if (std::isfinite(r.simp_seconds)) {
      simp_total += r.simp_seconds;
      ++timed;
    }
    if (r.disconnected) {
      ++s.disconnected;
      continue;
    }
    ++connected;
    s.compliance_error += r.compliance_error.value_or(0.0);
    s.abs_compliance_error += std::abs(r.compliance_error.value_or(0.0));
    s.pixel_values_error += r.pixel_values_error;
    s.volume_fraction_error += r.volume_fraction_error;
  }
  if (connected) {
    const auto n = static_cast<double>(connected);
    s.compliance_error /= n;
    s.abs_compliance_error /= n;
    s.pixel_values_error /= n;
    s.volume_fraction_error /= n;
  }
  if (s.samples) {
    const auto n = static_cast<double>(s.samples);
    s.pixel_values_error_all /= n;
    s.pixel_accuracy /= n;
    s.baseline_accuracy /= n;
    s.mean_predict_seconds /= n;
  }
  if (timed) s.mean_simp_seconds = simp_total / static_cast<double>(timed);
  return s;
}

/// Scores `predict` on every problem. Rows are streamed to `csv` (when
/// given) as they complete, so partial results survive a failure.
inline Report evaluate_set(const Predictor& predict, const std::vector<Problem>& problems, const MeshSpec& mesh,
                           const BoundaryCondition& bc, double penalty = 3.0, std::ostream* csv = nullptr,
                           const std::vector<double>& thresholds = {0.3, 0.5, 0.7}) {
  Report rep;
  if (csv) write_csv_header(*csv);
  std::vector<ThresholdRow> sens(thresholds.size());
  for (std::size_t k = 0; k < thresholds.size(); ++k) sens[k].threshold = thresholds[k];

  for (const auto& prob : problems) {
    const auto t0 = std::chrono::steady_clock::now();
    const Grid<double> pred = predict(prob.input);
    const auto t1 = std::chrono::steady_clock::now();
    if (!pred.same_shape(prob.target)) throw ShapeMismatch("prediction vs target");

    MetricsRecord r;
    r.index = prob.index;
    r.volume_fraction = prob.volume_fraction;
    r.predict_seconds = std::chrono::duration<double>(t1 - t0).count();
    r.simp_seconds = prob.simp_seconds;
    const auto pm = pixel_metrics(pred, prob.target);
    r.pixel_values_error = pm.pixel_values_error;
    r.pixel_accuracy = pm.pixel_accuracy;
    r.volume_fraction_error = volume_fraction_error(pred, prob.target);
    r.compliance_error = compliance_error(pred, prob.target, mesh, bc, prob.loads, penalty);
    r.disconnected = !r.compliance_error.has_value();

    for (auto& row : sens) {
      row.pixel_accuracy += pixel_metrics(pred, prob.target, row.threshold).pixel_accuracy;
      row.disconnected_percent += detect_disconnection(binarize(pred, row.threshold), mesh, bc, prob.loads) ? 1.0 : 0.0;
    }
    if (csv) {
      write_csv_row(*csv, r);
      csv->flush();
    }
    rep.records.push_back(r);
  }
  rep.summary = summarize(rep.records);
  for (auto& row : sens) {
    const double n = problems.empty() ? 1.0 : static_cast<double>(problems.size());
    row.pixel_accuracy /= n;
    row.disconnected_percent *= 100.0 / n;
  }
  rep.summary.sensitivity = std::move(sens);
  return rep;
}

inline std::string percent(double v) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2) << 100.0 * v << '%';
  return os.str();
}

/// Tab-separated summary: one row per boundary condition, then counts,
/// timings and the threshold sensitivity.
inline void write_summary_table(std::ostream& os, const std::string& condition, const Summary& s) {
  os << "Boundary condition\tCompliance error\tPixel values error\tVolume fraction error\t"
        "Percentage of structural disconnection\n";
  os << condition << '\t' << percent(s.abs_compliance_error) << '\t' << percent(s.pixel_values_error) << '\t'
     << percent(s.volume_fraction_error) << '\t' << percent(s.disconnected_percent() / 100.0) << '\n';
  os << "Samples with structural disconnection are not included in the error averages.\n";
  os << "samples " << s.samples << ", disconnected " << s.disconnected << ", signed compliance error "
     << percent(s.compliance_error) << ", pixel accuracy " << percent(s.pixel_accuracy) << " (baseline "
     << percent(s.baseline_accuracy) << ")\n";
  if (std::isfinite(s.mean_simp_seconds))
    os << "mean SIMP time " << s.mean_simp_seconds << " s, mean predict time " << s.mean_predict_seconds << " s\n";
  else
    os << "mean predict time " << s.mean_predict_seconds << " s\n";
  if (!s.sensitivity.empty()) {
    os << "threshold\tpixel accuracy\tdisconnected\n";
    for (const auto& r : s.sensitivity)
      os << r.threshold << '\t' << percent(r.pixel_accuracy) << '\t' << percent(r.disconnected_percent / 100.0) << '\n';
  }
}

/// 8-bit binary PGM, one pixel per element, value round(255 (1 - density)).
inline void write_pgm(const std::filesystem::path& path, const Grid<double>& map) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write image " + path.string());
  os << "P5\n" << map.cols() << ' ' << map.rows() << "\n255\n";
  for (double d : map.values()) {
    const auto v = static_cast<long>(std::lround(255.0 * (1.0 - std::clamp(d, 0.0, 1.0))));
    os.put(static_cast<char>(static_cast<unsigned char>(v)));
  }
  if (!os) throw IoError("write failed: " + path.string());
}

}  // namespace topopt::eval
