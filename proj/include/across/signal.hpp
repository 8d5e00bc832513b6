#pragma once

#include <array>
#include <cmath>
#include <numeric>
#include <sstream>

#include "across/common.hpp"

// Electrode signal ingestion: normalization to [-1, 1], linear drift
// correction toward the rest-state defaults, and contact/non-contact
// balancing. All operations are pure; randomized subsampling takes an
// explicit seed.

namespace across::signal {

inline constexpr int kNumElectrodes = 19;

struct SignalFrame {
  std::array<double, kNumElectrodes> electrodes{};
  std::int64_t timestamp_index = 0;
  bool contact = false;
};

using FrameSeq = std::vector<SignalFrame>;

// Per-electrode extrema plus the rest-state reading ("default value").
struct ChannelStats {
  std::vector<double> min, max, default_value;

  int channels() const { return static_cast<int>(min.size()); }

  void validate() const {
    require(min.size() == max.size() && min.size() == default_value.size(), Errc::stats_mismatch,
            "ChannelStats field sizes differ");
    for (std::size_t c = 0; c < min.size(); ++c) {
      require(min[c] < max[c], Errc::constant_channel,
              "channel " + std::to_string(c) + " has min == max");
      require(min[c] <= default_value[c] && default_value[c] <= max[c], Errc::stats_mismatch,
              "channel " + std::to_string(c) + " default outside [min, max]");
    }
  }
};

// Per-electrode linear trend v(t) = slope * t + intercept fitted on
// non-contact frames only.
struct DriftModel {
  std::vector<double> slope, intercept;

  int channels() const { return static_cast<int>(slope.size()); }
};

inline ChannelStats compute_channel_stats(const FrameSeq& frames) {
  require(frames.size() >= 2, Errc::empty_input, "compute_channel_stats: need at least 2 frames");
  ChannelStats s;
  s.min.assign(kNumElectrodes, std::numeric_limits<double>::infinity());
  s.max.assign(kNumElectrodes, -std::numeric_limits<double>::infinity());
  s.default_value.assign(kNumElectrodes, 0.0);
  std::size_t non_contact = 0;
  for (const auto& f : frames) {
    for (int c = 0; c < kNumElectrodes; ++c) {
      s.min[c] = std::min(s.min[c], f.electrodes[c]);
      s.max[c] = std::max(s.max[c], f.electrodes[c]);
    }
    if (!f.contact) {
      ++non_contact;
      for (int c = 0; c < kNumElectrodes; ++c) s.default_value[c] += f.electrodes[c];
    }
  }
  require(non_contact > 0, Errc::empty_input,
          "compute_channel_stats: need at least one non-contact frame");
  for (int c = 0; c < kNumElectrodes; ++c) {
    s.default_value[c] /= static_cast<double>(non_contact);
    require(s.min[c] < s.max[c], Errc::constant_channel,
            "channel " + std::to_string(c) + " is constant");
  }
  return s;
}

// Affine map sending [min, max] to [-1, 1]; inputs outside the recorded
// range are clamped so the downstream contract always holds.
inline SignalFrame normalize_frame(const SignalFrame& frame, const ChannelStats& stats) {
  require(stats.channels() == kNumElectrodes, Errc::stats_mismatch,
          "normalize_frame: stats cover " + std::to_string(stats.channels()) + " channels");
  SignalFrame out = frame;
  for (int c = 0; c < kNumElectrodes; ++c) {
    double v = 2.0 * (frame.electrodes[c] - stats.min[c]) / (stats.max[c] - stats.min[c]) - 1.0;
    out.electrodes[c] = std::clamp(v, -1.0, 1.0);
  }
  return out;
}

inline SignalFrame denormalize_frame(const SignalFrame& frame, const ChannelStats& stats) {
  require(stats.channels() == kNumElectrodes, Errc::stats_mismatch, "denormalize_frame: bad stats");
  SignalFrame out = frame;
  for (int c = 0; c < kNumElectrodes; ++c) {
    out.electrodes[c] =
        stats.min[c] + (frame.electrodes[c] + 1.0) * 0.5 * (stats.max[c] - stats.min[c]);
  }
  return out;
}

enum class DriftFitMethod { closed_form, gradient_descent };

// Least-squares line per channel over the non-contact frames. The closed
// form solves the normal equations directly; the gradient-descent path
// iterates on the same convex objective (time axis centered for
// conditioning) until the step size underflows.
inline DriftModel fit_drift(const FrameSeq& frames, const ChannelStats& stats,
                            DriftFitMethod method = DriftFitMethod::closed_form) {
  require(stats.channels() == kNumElectrodes, Errc::stats_mismatch, "fit_drift: bad stats");
  std::vector<const SignalFrame*> nc;
  for (const auto& f : frames)
    if (!f.contact) nc.push_back(&f);
  bool distinct = false;
  for (std::size_t i = 1; i < nc.size(); ++i)
    if (nc[i]->timestamp_index != nc[0]->timestamp_index) distinct = true;
  require(nc.size() >= 2 && distinct, Errc::insufficient_non_contact,
          "fit_drift: need >= 2 non-contact frames with distinct timestamps");

  const auto n = static_cast<double>(nc.size());
  double mean_t = 0.0;
  for (const auto* f : nc) mean_t += static_cast<double>(f->timestamp_index);
  mean_t /= n;
  double var_t = 0.0;
  for (const auto* f : nc) {
    double d = static_cast<double>(f->timestamp_index) - mean_t;
    var_t += d * d;
  }
  var_t /= n;

  DriftModel m;
  m.slope.assign(kNumElectrodes, 0.0);
  m.intercept.assign(kNumElectrodes, 0.0);
  for (int c = 0; c < kNumElectrodes; ++c) {
    double mean_v = 0.0;
    for (const auto* f : nc) mean_v += f->electrodes[c];
    mean_v /= n;
    if (method == DriftFitMethod::closed_form) {
      double cov = 0.0;
      for (const auto* f : nc) {
        cov += (static_cast<double>(f->timestamp_index) - mean_t) * (f->electrodes[c] - mean_v);
      }
      cov /= n;
      double slope = cov / var_t;
      m.slope[c] = slope;
      m.intercept[c] = mean_v - slope * mean_t;
    } else {
      // Minimize mean((a*tc + b - v)^2) over centered time tc = t - mean_t
      // by plain gradient descent with an exact line search.
      double a = 0.0, b = 0.0;
      for (int iter = 0; iter < 10000; ++iter) {
        double ga = 0.0, gb = 0.0;
        for (const auto* f : nc) {
          double tc = static_cast<double>(f->timestamp_index) - mean_t;
          double r = a * tc + b - f->electrodes[c];
          ga += 2.0 * r * tc;
          gb += 2.0 * r;
        }
        ga /= n;
        gb /= n;
        double gnorm2 = ga * ga + gb * gb;
        if (gnorm2 < 1e-26) break;
        // Exact step for a quadratic: alpha = g.g / (g.H.g), H = 2/n * [[sum tc^2,0],[0,n]].
        double h_aa = 0.0;
        for (const auto* f : nc) {
          double tc = static_cast<double>(f->timestamp_index) - mean_t;
          h_aa += 2.0 * tc * tc;
        }
        h_aa /= n;
        double gHg = ga * ga * h_aa + gb * gb * 2.0;
        double alpha = gnorm2 / gHg;
        a -= alpha * ga;
        b -= alpha * gb;
      }
      m.slope[c] = a;
      m.intercept[c] = b - a * mean_t;
    }
  }
  return m;
}

// v' = v - (slope*t + intercept) + default: non-contact frames move onto
// the rest-state defaults, contact frames keep their contact offset.
inline SignalFrame correct_drift(const SignalFrame& frame, const DriftModel& model,
                                 const ChannelStats& stats) {
  require(model.channels() == kNumElectrodes && stats.channels() == kNumElectrodes,
          Errc::stats_mismatch, "correct_drift: channel layout mismatch");
  SignalFrame out = frame;
  for (int c = 0; c < kNumElectrodes; ++c) {
    double trend = model.slope[c] * static_cast<double>(frame.timestamp_index) + model.intercept[c];
    out.electrodes[c] = frame.electrodes[c] - trend + stats.default_value[c];
  }
  return out;
}

// Keeps every contact frame; retains round(fraction * count) non-contact
// frames chosen uniformly without replacement. Order is preserved.
inline FrameSeq balance_dataset(const FrameSeq& frames, double keep_noncontact_fraction,
                                std::uint64_t seed) {
  require(keep_noncontact_fraction >= 0.0 && keep_noncontact_fraction <= 1.0, Errc::empty_input,
          "balance_dataset: fraction must be in [0, 1]");
  std::vector<std::size_t> nc_idx;
  for (std::size_t i = 0; i < frames.size(); ++i)
    if (!frames[i].contact) nc_idx.push_back(i);
  auto keep = static_cast<std::size_t>(
      std::llround(keep_noncontact_fraction * static_cast<double>(nc_idx.size())));
  Rng rng(seed);
  rng.shuffle(nc_idx);
  nc_idx.resize(keep);
  std::sort(nc_idx.begin(), nc_idx.end());
  std::vector<bool> keep_mask(frames.size(), false);
  for (std::size_t i : nc_idx) keep_mask[i] = true;
  FrameSeq out;
  out.reserve(frames.size());
  for (std::size_t i = 0; i < frames.size(); ++i) {
    if (frames[i].contact || keep_mask[i]) out.push_back(frames[i]);
  }
  return out;
}

// Labels a frame non-contact when every channel sits within
// tolerance_fraction of its full range from the default value. Used when a
// source file carries no explicit contact flags.
inline void infer_contact_flags(FrameSeq& frames, const ChannelStats& stats,
                                double tolerance_fraction = 0.01) {
  require(stats.channels() == kNumElectrodes, Errc::stats_mismatch, "infer_contact_flags");
  for (auto& f : frames) {
    bool contact = false;
    for (int c = 0; c < kNumElectrodes; ++c) {
      double tol = tolerance_fraction * (stats.max[c] - stats.min[c]);
      if (std::abs(f.electrodes[c] - stats.default_value[c]) > tol) {
        contact = true;
        break;
      }
    }
    f.contact = contact;
  }
}

// ---------------------------------------------------------------------------
// Signal dataset file: CSV with mandatory header "t,c,e00,...,e18".
// ---------------------------------------------------------------------------

inline std::string csv_header() {
  std::string h = "t,c";
  for (int c = 0; c < kNumElectrodes; ++c) {
    char buf[8];
    std::snprintf(buf, sizeof(buf), ",e%02d", c);
    h += buf;
  }
  return h;
}

inline std::string to_csv(const FrameSeq& frames) {
  std::string out = csv_header() + "\n";
  for (const auto& f : frames) {
    out += std::to_string(f.timestamp_index);
    out += f.contact ? ",1" : ",0";
    for (int c = 0; c < kNumElectrodes; ++c) {
      out += ",";
      out += format_double(f.electrodes[c]);
    }
    out += "\n";
  }
  return out;
}

inline FrameSeq from_csv(const std::string& text, const std::string& name = "signals") {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) fail(Errc::format_error, name + ": empty file");
  if (trim(line) != csv_header())
    fail(Errc::format_error, name + ": expected header '" + csv_header() + "'");
  FrameSeq frames;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    auto cells = split(trim(line), ',');
    if (cells.size() != 2 + kNumElectrodes)
      fail(Errc::format_error, name + ": line " + std::to_string(lineno) + " has " +
                                   std::to_string(cells.size()) + " columns");
    SignalFrame f;
    f.timestamp_index = parse_int(cells[0], name);
    require(f.timestamp_index >= 0, Errc::format_error, name + ": negative timestamp");
    long long c = parse_int(cells[1], name);
    require(c == 0 || c == 1, Errc::format_error, name + ": contact flag must be 0/1");
    f.contact = c == 1;
    for (int e = 0; e < kNumElectrodes; ++e) f.electrodes[e] = parse_double(cells[2 + e], name);
    frames.push_back(f);
  }
  return frames;
}

inline void save_csv(const std::filesystem::path& path, const FrameSeq& frames) {
  io::write_file(path, to_csv(frames));
}

inline FrameSeq load_csv(const std::filesystem::path& path) {
  return from_csv(io::read_file(path), path.string());
}

// Stats file: CSV "channel,min,max,default" (artifact-internal format).
inline std::string stats_to_csv(const ChannelStats& s) {
  std::string out = "channel,min,max,default\n";
  for (int c = 0; c < s.channels(); ++c) {
    out += std::to_string(c) + "," + format_double(s.min[c]) + "," + format_double(s.max[c]) +
           "," + format_double(s.default_value[c]) + "\n";
  }
  return out;
}

inline ChannelStats stats_from_csv(const std::string& text, const std::string& name = "stats") {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || trim(line) != "channel,min,max,default")
    fail(Errc::format_error, name + ": bad header");
  ChannelStats s;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    auto cells = split(trim(line), ',');
    if (cells.size() != 4) fail(Errc::format_error, name + ": bad row");
    s.min.push_back(parse_double(cells[1], name));
    s.max.push_back(parse_double(cells[2], name));
    s.default_value.push_back(parse_double(cells[3], name));
  }
  s.validate();
  return s;
}

}  // namespace across::signal
