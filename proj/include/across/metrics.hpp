#pragma once

#include <Eigen/Dense>
#include <sstream>

#include "across/common.hpp"
#include "across/signal.hpp"

// Evaluation protocol: RMSE and mean Euclidean distance in micrometers over
// all vertices and over the deformation region (vertices displaced at least
// 10 um from the undeformed reference in the ground truth), reported as
// mean (std) tables plus the signal-space RMSE of the SVB.

namespace across::metrics {

inline constexpr double kDeformationThresholdUm = 10.0;
inline constexpr double kUmPerMm = 1000.0;

// ---------------------------------------------------------------------------
// Deformation mask
// ---------------------------------------------------------------------------

struct DeformationMask {
  std::vector<bool> selected;
  double threshold_um = kDeformationThresholdUm;

  int count() const {
    int n = 0;
    for (bool b : selected)
      if (b) ++n;
    return n;
  }
};

// Mask from ground truth only (inclusive at exactly the threshold), so the
// denominator is identical across compared networks.
inline DeformationMask deformation_mask(const Eigen::MatrixXd& ground_truth,
                                        const Eigen::MatrixXd& reference,
                                        double threshold_um = kDeformationThresholdUm) {
  require(ground_truth.rows() == reference.rows() && ground_truth.cols() == 3 &&
              reference.cols() == 3,
          Errc::topology_mismatch, "deformation_mask: meshes do not share a topology");
  DeformationMask m;
  m.threshold_um = threshold_um;
  m.selected.resize(static_cast<std::size_t>(ground_truth.rows()));
  for (Eigen::Index v = 0; v < ground_truth.rows(); ++v) {
    double um = (ground_truth.row(v) - reference.row(v)).norm() * kUmPerMm;
    m.selected[static_cast<std::size_t>(v)] = um >= threshold_um;
  }
  return m;
}

// ---------------------------------------------------------------------------
// Mesh metrics (micrometers; inputs are millimeter meshes)
// ---------------------------------------------------------------------------

// sqrt of the mean over selected vertices and the 3 coordinates of the
// squared per-coordinate error.
inline double mesh_rmse_um(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& target,
                           const std::vector<bool>* mask = nullptr) {
  require(pred.rows() == target.rows() && pred.cols() == 3 && target.cols() == 3,
          Errc::topology_mismatch, "mesh_rmse: meshes do not share a topology");
  if (mask)
    require(mask->size() == static_cast<std::size_t>(pred.rows()), Errc::topology_mismatch,
            "mesh_rmse: mask size mismatch");
  double total = 0.0;
  long long selected = 0;
  for (Eigen::Index v = 0; v < pred.rows(); ++v) {
    if (mask && !(*mask)[static_cast<std::size_t>(v)]) continue;
    total += (pred.row(v) - target.row(v)).squaredNorm();
    ++selected;
  }
  require(selected > 0, Errc::empty_mask, "mesh_rmse: no vertices selected");
  return std::sqrt(total / (3.0 * static_cast<double>(selected))) * kUmPerMm;
}

// Mean over selected vertices of the per-vertex Euclidean error.
inline double mesh_euclidean_um(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& target,
                                const std::vector<bool>* mask = nullptr) {
  require(pred.rows() == target.rows() && pred.cols() == 3 && target.cols() == 3,
          Errc::topology_mismatch, "mesh_euclidean: meshes do not share a topology");
  if (mask)
    require(mask->size() == static_cast<std::size_t>(pred.rows()), Errc::topology_mismatch,
            "mesh_euclidean: mask size mismatch");
  double total = 0.0;
  long long selected = 0;
  for (Eigen::Index v = 0; v < pred.rows(); ++v) {
    if (mask && !(*mask)[static_cast<std::size_t>(v)]) continue;
    total += (pred.row(v) - target.row(v)).norm();
    ++selected;
  }
  require(selected > 0, Errc::empty_mask, "mesh_euclidean: no vertices selected");
  return total / static_cast<double>(selected) * kUmPerMm;
}

// ---------------------------------------------------------------------------
// Signal metrics (dimensionless, normalized units)
// ---------------------------------------------------------------------------

// Per-frame RMSE over the 19 channels.
inline double frame_rmse(const signal::SignalFrame& pred, const signal::SignalFrame& target) {
  double total = 0.0;
  for (int c = 0; c < signal::kNumElectrodes; ++c) {
    double d = pred.electrodes[static_cast<std::size_t>(c)] -
               target.electrodes[static_cast<std::size_t>(c)];
    total += d * d;
  }
  return std::sqrt(total / signal::kNumElectrodes);
}

// Pooled RMSE over frames and channels.
inline double signal_rmse(const signal::FrameSeq& pred, const signal::FrameSeq& target) {
  require(pred.size() == target.size(), Errc::length_mismatch, "signal_rmse: length mismatch");
  require(!pred.empty(), Errc::empty_input, "signal_rmse: empty input");
  double total = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i)
    for (int c = 0; c < signal::kNumElectrodes; ++c) {
      double d = pred[i].electrodes[static_cast<std::size_t>(c)] -
                 target[i].electrodes[static_cast<std::size_t>(c)];
      total += d * d;
    }
  return std::sqrt(total / (static_cast<double>(pred.size()) * signal::kNumElectrodes));
}

inline std::vector<double> signal_rmse_per_frame(const signal::FrameSeq& pred,
                                                 const signal::FrameSeq& target) {
  require(pred.size() == target.size(), Errc::length_mismatch, "signal_rmse: length mismatch");
  std::vector<double> out;
  out.reserve(pred.size());
  for (std::size_t i = 0; i < pred.size(); ++i) out.push_back(frame_rmse(pred[i], target[i]));
  return out;
}

// ---------------------------------------------------------------------------
// Aggregation and report emission
// ---------------------------------------------------------------------------

struct Aggregate {
  double mean = 0.0;
  double std = 0.0;  // population std over per-sample values
  long long n = 0;
};

// Two-pass mean/std with a fixed reduction order.
inline Aggregate aggregate(const std::vector<double>& values) {
  require(!values.empty(), Errc::empty_input, "aggregate: no values");
  Aggregate a;
  a.n = static_cast<long long>(values.size());
  for (double v : values) a.mean += v;
  a.mean /= static_cast<double>(a.n);
  double ss = 0.0;
  for (double v : values) ss += (v - a.mean) * (v - a.mean);
  a.std = std::sqrt(ss / static_cast<double>(a.n));
  return a;
}

struct EvalRow {
  std::string network;
  Aggregate rmse_all, euc_all, rmse_region, euc_region;
};

struct EvalReport {
  std::vector<EvalRow> rows;
  bool has_signal_rmse = false;
  Aggregate signal_stats;       // per-frame RMSE mean/std
  double signal_pooled = 0.0;   // pooled over frames and channels
};

inline std::string format_cell(const Aggregate& a) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.2f (%.2f)", a.mean, a.std);
  return buf;
}

// Aligned text table in the layout of the paper's result table, preceded by
// a header documenting the exact metric definitions.
inline std::string report_to_text(const EvalReport& report) {
  require(!report.rows.empty() || report.has_signal_rmse, Errc::empty_input, "empty report");
  std::string out;
  out += "# rmse: sqrt(mean over selected vertices and 3 coordinates of squared per-coordinate error), um\n";
  out += "# euc:  mean over selected vertices of per-vertex Euclidean distance, um\n";
  out += "# cells: mean (std) of per-sample values over the test set; std is the population std\n";
  out += "# region: vertices displaced >= 10 um from the reference in the ground truth\n";
  char line[256];
  std::snprintf(line, sizeof(line), "%-10s %-18s %-18s %-18s %-18s\n", "network", "rmse_all",
                "euc_all", "rmse_region", "euc_region");
  out += line;
  for (const auto& r : report.rows) {
    std::snprintf(line, sizeof(line), "%-10s %-18s %-18s %-18s %-18s\n", r.network.c_str(),
                  format_cell(r.rmse_all).c_str(), format_cell(r.euc_all).c_str(),
                  format_cell(r.rmse_region).c_str(), format_cell(r.euc_region).c_str());
    out += line;
  }
  if (report.has_signal_rmse) {
    std::snprintf(line, sizeof(line), "SVB signal RMSE (normalized units): %s, pooled %.3f\n",
                  format_cell(report.signal_stats).c_str(), report.signal_pooled);
    out += line;
  }
  return out;
}

// Machine-readable companion: network,metric,scope,mean_um,std_um.
inline std::string report_to_csv(const EvalReport& report) {
  std::string out = "network,metric,scope,mean_um,std_um\n";
  auto row = [&](const std::string& network, const char* metric, const char* scope,
                 const Aggregate& a) {
    out += network + "," + metric + "," + scope + "," + format_double(a.mean) + "," +
           format_double(a.std) + "\n";
  };
  for (const auto& r : report.rows) {
    row(r.network, "rmse", "all", r.rmse_all);
    row(r.network, "euclidean", "all", r.euc_all);
    row(r.network, "rmse", "region", r.rmse_region);
    row(r.network, "euclidean", "region", r.euc_region);
  }
  if (report.has_signal_rmse) row("SVB", "rmse", "signal", report.signal_stats);
  return out;
}

}  // namespace across::metrics
