#pragma once

// Pose-error metrics, report (de)serialization and heatmap export.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "xmodal/decoder.hpp"
#include "xmodal/imageio.hpp"
#include "xmodal/synthdata.hpp"

namespace xmodal {

struct SampleError {
  std::string id;
  double loc = 0;           ///< meters, Euclidean
  double ori = 0;           ///< degrees, circular
  double lateral = 0;       ///< meters, |error| across the true heading
  double longitudinal = 0;  ///< meters, |error| along the true heading

  friend bool operator==(const SampleError&, const SampleError&) = default;
};

struct EvalReport {
  double mean_loc_error = 0;
  double mean_ori_error = 0;
  double mean_lateral_error = 0;
  double mean_longitudinal_error = 0;
  std::map<double, double> recall_loc;  ///< threshold (m) -> fraction
  std::map<double, double> recall_ori;  ///< threshold (deg) -> fraction
  std::map<double, double> recall_lateral;
  std::map<double, double> recall_longitudinal;
  std::vector<SampleError> samples;

  friend bool operator==(const EvalReport&, const EvalReport&) = default;
};

/// min(|a - b|, 360 - |a - b|) on normalized angles.
inline double circular_error_deg(double a, double b) {
  const double d = std::abs(normalize_degrees(a) - normalize_degrees(b));
  return std::min(d, 360.0 - d);
}

inline SampleError pose_error(const Pose& est, const Pose& gt) {
  SampleError e;
  const double dx = est.x - gt.x, dy = est.y - gt.y;
  const double th = gt.theta * std::numbers::pi / 180.0;
  e.loc = std::hypot(dx, dy);
  e.ori = circular_error_deg(est.theta, gt.theta);
  e.longitudinal = std::abs(dx * std::cos(th) + dy * std::sin(th));
  e.lateral = std::abs(-dx * std::sin(th) + dy * std::cos(th));
  return e;
}

namespace detail {

inline std::map<double, double> recall_at(const std::vector<double>& errors, const std::vector<double>& thresholds) {
  std::map<double, double> out;
  for (double t : thresholds) {
    std::size_t hits = 0;
    for (double e : errors) hits += e <= t;
    out[t] = static_cast<double>(hits) / static_cast<double>(errors.size());
  }
  return out;
}

inline double mean_of(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

}  // namespace detail

inline EvalReport compute_metrics(const std::vector<Pose>& estimates, const std::vector<Pose>& truths,
                                  const std::vector<double>& thresholds_m = {1, 3, 5},
                                  const std::vector<double>& thresholds_deg = {1, 3, 5},
                                  const std::vector<std::string>& ids = {}) {
  if (estimates.empty()) throw ValidationError("compute_metrics: no samples");
  if (estimates.size() != truths.size()) throw ValidationError("compute_metrics: estimate and truth counts differ");
  if (!ids.empty() && ids.size() != estimates.size()) throw ValidationError("compute_metrics: id count differs");
  EvalReport r;
  std::vector<double> loc, ori, lat, lon;
  for (std::size_t i = 0; i < estimates.size(); ++i) {
    SampleError e = pose_error(estimates[i], truths[i]);
    e.id = ids.empty() ? sample_id(i) : ids[i];
    loc.push_back(e.loc);
    ori.push_back(e.ori);
    lat.push_back(e.lateral);
    lon.push_back(e.longitudinal);
    r.samples.push_back(std::move(e));
  }
  r.mean_loc_error = detail::mean_of(loc);
  r.mean_ori_error = detail::mean_of(ori);
  r.mean_lateral_error = detail::mean_of(lat);
  r.mean_longitudinal_error = detail::mean_of(lon);
  r.recall_loc = detail::recall_at(loc, thresholds_m);
  r.recall_ori = detail::recall_at(ori, thresholds_deg);
  r.recall_lateral = detail::recall_at(lat, thresholds_m);
  r.recall_longitudinal = detail::recall_at(lon, thresholds_m);
  return r;
}

inline EvalReport compute_metrics(const std::vector<PoseEstimate>& estimates, const std::vector<Pose>& truths,
                                  const std::vector<double>& thresholds_m = {1, 3, 5},
                                  const std::vector<double>& thresholds_deg = {1, 3, 5},
                                  const std::vector<std::string>& ids = {}) {
  std::vector<Pose> poses;
  for (const auto& e : estimates) poses.push_back(e.pose);
  return compute_metrics(poses, truths, thresholds_m, thresholds_deg, ids);
}

// ---------------------------------------------------------------------------
// CSV
//
// Summary: one header row and one value row. Columns are the four means, then
// recall_<kind>_<threshold><unit> for loc, ori, lat, long, then the sample count.
// Samples: sample_id,loc_error_m,ori_error_deg,lateral_error_m,longitudinal_error_m

namespace detail {

inline std::string fmt17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string threshold_label(double t) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", t);
  return buf;
}

inline std::vector<std::pair<std::string, double>> summary_columns(const EvalReport& r) {
  std::vector<std::pair<std::string, double>> cols{{"mean_loc_error_m", r.mean_loc_error},
                                                   {"mean_ori_error_deg", r.mean_ori_error},
                                                   {"mean_lateral_error_m", r.mean_lateral_error},
                                                   {"mean_longitudinal_error_m", r.mean_longitudinal_error}};
  auto add = [&](const char* kind, const char* unit, const std::map<double, double>& m) {
    for (const auto& [t, v] : m) cols.emplace_back(std::string("recall_") + kind + "_" + threshold_label(t) + unit, v);
  };
  add("loc", "m", r.recall_loc);
  add("ori", "deg", r.recall_ori);
  add("lat", "m", r.recall_lateral);
  add("long", "m", r.recall_longitudinal);
  cols.emplace_back("samples", static_cast<double>(r.samples.size()));
  return cols;
}

}  // namespace detail

inline std::string report_csv_header(const EvalReport& r) {
  std::string s;
  for (const auto& [name, v] : detail::summary_columns(r)) s += (s.empty() ? "" : ",") + name;
  return s;
}

inline std::string report_csv_values(const EvalReport& r) {
  std::string s;
  bool first = true;
  for (const auto& [name, v] : detail::summary_columns(r)) {
    s += (first ? "" : ",") + detail::fmt17(v);
    first = false;
  }
  return s;
}

inline void write_report_csv(const EvalReport& r, std::ostream& summary, std::ostream& samples) {
  summary << report_csv_header(r) << '\n' << report_csv_values(r) << '\n';
  samples << "sample_id,loc_error_m,ori_error_deg,lateral_error_m,longitudinal_error_m\n";
  for (const auto& e : r.samples)
    samples << e.id << ',' << detail::fmt17(e.loc) << ',' << detail::fmt17(e.ori) << ','
            << detail::fmt17(e.lateral) << ',' << detail::fmt17(e.longitudinal) << '\n';
}

inline EvalReport parse_report_csv(std::istream& summary, std::istream& samples) {
  std::string header, values;
  if (!std::getline(summary, header) || !std::getline(summary, values)) throw IoError("report summary is incomplete");
  const auto names = detail::split_csv(header);
  const auto vals = detail::split_csv(values);
  if (names.size() != vals.size()) throw IoError("report summary header and values differ in length");
  EvalReport r;
  for (std::size_t i = 0; i < names.size(); ++i) {
    const std::string& n = names[i];
    const double v = detail::parse_double(vals[i], "report column " + n);
    if (n == "mean_loc_error_m") r.mean_loc_error = v;
    else if (n == "mean_ori_error_deg") r.mean_ori_error = v;
    else if (n == "mean_lateral_error_m") r.mean_lateral_error = v;
    else if (n == "mean_longitudinal_error_m") r.mean_longitudinal_error = v;
    else if (n == "samples") continue;
    else if (n.rfind("recall_", 0) == 0) {
      const auto us = n.find('_', 7);
      if (us == std::string::npos) throw IoError("bad report column " + n);
      const std::string kind = n.substr(7, us - 7);
      std::string t = n.substr(us + 1);
      const std::size_t unit = kind == "ori" ? 3 : 1;
      if (t.size() <= unit) throw IoError("bad report column " + n);
      const double th = detail::parse_double(t.substr(0, t.size() - unit), "report column " + n);
      if (kind == "loc") r.recall_loc[th] = v;
      else if (kind == "ori") r.recall_ori[th] = v;
      else if (kind == "lat") r.recall_lateral[th] = v;
      else if (kind == "long") r.recall_longitudinal[th] = v;
      else throw IoError("unknown recall kind in column " + n);
    } else {
      throw IoError("unknown report column " + n);
    }
  }
  std::string line;
  std::getline(samples, line);
  while (std::getline(samples, line)) {
    if (line.empty()) continue;
    const auto f = detail::split_csv(line);
    if (f.size() != 5) throw IoError("bad sample row in report: " + line);
    SampleError e;
    e.id = f[0];
    e.loc = detail::parse_double(f[1], "report sample " + f[0]);
    e.ori = detail::parse_double(f[2], "report sample " + f[0]);
    e.lateral = detail::parse_double(f[3], "report sample " + f[0]);
    e.longitudinal = detail::parse_double(f[4], "report sample " + f[0]);
    r.samples.push_back(std::move(e));
  }
  return r;
}

/// Fixed-width table: mean errors, then location, lateral, longitudinal and
/// orientation recalls in percent.
inline std::string format_report_table(const EvalReport& r, const std::string& label = "model") {
  auto pad = [](std::string s, std::size_t w) { return s.size() < w ? s + std::string(w - s.size(), ' ') : s; };
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f / %.2f", r.mean_loc_error, r.mean_ori_error);
  std::string head = "| " + pad("config", 20) + " | " + pad("loc m / ori deg", 15) + " |";
  std::string row = "| " + pad(label, 20) + " | " + pad(buf, 15) + " |";
  auto group = [&](const char* name, const char* unit, const std::map<double, double>& m) {
    for (const auto& [t, v] : m) {
      std::snprintf(buf, sizeof buf, "%.2f", 100.0 * v);
      const std::string h = std::string(name) + "@" + detail::threshold_label(t) + unit;
      const std::size_t w = std::max<std::size_t>(h.size(), 7);
      head += " " + pad(h, w) + " |";
      row += " " + pad(buf, w) + " |";
    }
  };
  group("R", "m", r.recall_loc);
  group("Lat", "m", r.recall_lateral);
  group("Long", "m", r.recall_longitudinal);
  group("R", "deg", r.recall_ori);
  return head + "\n" + row + "\n";
}

// ---------------------------------------------------------------------------
// Heatmaps

struct HeatmapFiles {
  std::filesystem::path loc, ori, overlay;
};

namespace detail {

inline RawImage scaled_pgm(const double* v, std::size_t h, std::size_t w) {
  double mx = 0;
  for (std::size_t i = 0; i < h * w; ++i) mx = std::max(mx, v[i]);
  RawImage img{w, h, 1, 65535, std::vector<std::uint16_t>(h * w, 0)};
  if (mx > 0)
    for (std::size_t i = 0; i < h * w; ++i)
      img.samples[i] = static_cast<std::uint16_t>(std::lround(std::clamp(v[i] / mx, 0.0, 1.0) * 65535.0));
  return img;
}

/// Black -> red -> yellow -> white.
inline std::array<double, 3> heat_ramp(double v) {
  return {std::clamp(3 * v, 0.0, 1.0), std::clamp(3 * v - 1, 0.0, 1.0), std::clamp(3 * v - 2, 0.0, 1.0)};
}

}  // namespace detail

/// Writes <id>_loc.pgm, <id>_ori<bin>.pgm for the argmax bin, and
/// <id>_overlay.ppm (tile blended 50/50 with the max-normalized location map).
inline HeatmapFiles export_heatmap(const LikelihoodMaps& maps, const AerialTile& tile,
                                   const std::filesystem::path& out_dir, const std::string& id) {
  const std::size_t H = maps.height(), W = maps.width();
  if (tile.height != H || tile.width != W) throw ShapeError("export_heatmap: tile and map sizes differ");
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());
  const PoseEstimate est = extract_pose_argmax(maps, tile.pixels_per_meter);
  HeatmapFiles files{out_dir / (id + "_loc.pgm"), out_dir / (id + "_ori" + std::to_string(est.bin) + ".pgm"),
                     out_dir / (id + "_overlay.ppm")};
  try {
    write_pnm(files.loc.string(), detail::scaled_pgm(maps.loc.data(), H, W));
    write_pnm(files.ori.string(), detail::scaled_pgm(maps.ori.data() + est.bin * H * W, H, W));
    double mx = 0;
    for (double v : maps.loc.vec()) mx = std::max(mx, v);
    RawImage overlay{W, H, 3, 255, std::vector<std::uint16_t>(H * W * 3)};
    for (std::size_t i = 0; i < H; ++i)
      for (std::size_t j = 0; j < W; ++j) {
        const auto heat = detail::heat_ramp(mx > 0 ? maps.loc.at(i, j) / mx : 0.0);
        for (std::size_t c = 0; c < 3; ++c) {
          const double v = 0.5 * tile.values.at(c, i, j) + 0.5 * heat[c];
          overlay.samples[(i * W + j) * 3 + c] = static_cast<std::uint16_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255));
        }
      }
    write_pnm(files.overlay.string(), overlay);
  } catch (const IoError& e) {
    throw IoError(std::string("heatmap export for ") + id + ": " + e.what());
  }
  return files;
}

}  // namespace xmodal
