#pragma once

// Coordinate conventions
//
// Tile frame: x grows with the column index, y with the row index, both in
// meters; pixel (row, col) covers [col, col+1) x [row, row+1) / pixels_per_meter.
// Headings are degrees in [0, 360), measured from +x towards +y.
//
// Sensor frame: +x along the heading, +y at heading + 90 deg. BEV grids are
// ego-centred: sensor origin sits on the corner shared by cells
// (H/2 - 1, W/2 - 1) and (H/2, W/2), so a point at the origin lands in
// cell (H/2, W/2).

#include <cmath>
#include <cstdint>
#include <numbers>
#include <utility>
#include <vector>

#include "xmodal/error.hpp"
#include "xmodal/rng.hpp"
#include "xmodal/tensor.hpp"

namespace xmodal {

inline double normalize_degrees(double deg) {
  double d = std::fmod(deg, 360.0);
  if (d < 0) d += 360.0;
  if (d >= 360.0) d = 0.0;  // fmod of tiny negatives can round up to 360
  return d;
}

struct Pose {
  double x = 0;      ///< meters, tile frame
  double y = 0;      ///< meters, tile frame
  double theta = 0;  ///< degrees in [0, 360)

  Pose() = default;
  Pose(double x_, double y_, double theta_) : x(x_), y(y_), theta(normalize_degrees(theta_)) {
    if (!std::isfinite(x) || !std::isfinite(y) || !std::isfinite(theta_))
      throw ValidationError("pose has non-finite component");
  }

  friend bool operator==(const Pose&, const Pose&) = default;
};

struct Point3 {
  double x = 0, y = 0, z = 0;
  friend bool operator==(const Point3&, const Point3&) = default;
};

struct PointCloud {
  std::vector<Point3> points;
  std::size_t size() const { return points.size(); }
  friend bool operator==(const PointCloud&, const PointCloud&) = default;
};

/// Single-channel top-view occupancy raster, values in [0, 1].
struct BevGrid {
  std::size_t height = 0;
  std::size_t width = 0;
  double cell_size = 1.0;
  Tensor<float> values;  ///< {height, width}

  float at(std::size_t row, std::size_t col) const { return values.at(row, col); }
};

/// Overhead RGB raster, values in [0, 1], stored channel-first {3, H, W}.
struct AerialTile {
  std::size_t height = 0;
  std::size_t width = 0;
  double pixels_per_meter = 1.0;
  Tensor<float> values;

  AerialTile() = default;
  AerialTile(std::size_t h, std::size_t w, double ppm)
      : height(h), width(w), pixels_per_meter(ppm), values({3, h, w}) {}

  bool contains(double x, double y) const {
    const double c = x * pixels_per_meter, r = y * pixels_per_meter;
    return c >= 0 && r >= 0 && c < static_cast<double>(width) && r < static_cast<double>(height);
  }

  friend bool operator==(const AerialTile&, const AerialTile&) = default;
};

/// Pixel (row, col) containing a tile-frame position.
struct Cell {
  std::size_t row = 0;
  std::size_t col = 0;
  friend bool operator==(const Cell&, const Cell&) = default;
};

inline Cell cell_of(const Pose& pose, const AerialTile& tile) {
  if (!tile.contains(pose.x, pose.y)) throw ValidationError("pose lies outside the tile");
  return {static_cast<std::size_t>(std::floor(pose.y * tile.pixels_per_meter)),
          static_cast<std::size_t>(std::floor(pose.x * tile.pixels_per_meter))};
}

struct BevOptions {
  std::size_t height = 64;
  std::size_t width = 64;
  double cell_size = 1.0;
  double z_min = 0.3;
  double z_max = 3.0;
};

/// Binary occupancy rasterisation of a sensor-frame cloud.
inline BevGrid project_to_bev(const PointCloud& cloud, const BevOptions& opt) {
  if (opt.height == 0 || opt.width == 0) throw ValidationError("BEV grid dimensions must be positive");
  if (!(opt.cell_size > 0)) throw ValidationError("BEV cell size must be positive");
  if (!(opt.z_min < opt.z_max)) throw ValidationError("BEV z range is empty");
  for (const auto& p : cloud.points)
    if (!std::isfinite(p.x) || !std::isfinite(p.y) || !std::isfinite(p.z))
      throw ValidationError("point cloud contains a non-finite coordinate");

  BevGrid grid{opt.height, opt.width, opt.cell_size, Tensor<float>({opt.height, opt.width})};
  const double half_w = static_cast<double>(opt.width) / 2.0;
  const double half_h = static_cast<double>(opt.height) / 2.0;
  for (const auto& p : cloud.points) {
    if (p.z < opt.z_min || p.z > opt.z_max) continue;
    const double c = std::floor(p.x / opt.cell_size + half_w);
    const double r = std::floor(p.y / opt.cell_size + half_h);
    if (c < 0 || r < 0 || c >= static_cast<double>(opt.width) || r >= static_cast<double>(opt.height))
      continue;
    grid.values.at(static_cast<std::size_t>(r), static_cast<std::size_t>(c)) = 1.0f;
  }
  return grid;
}

inline constexpr double kMinLocationSigma = 0.2;

/// Isotropic Gaussian over the tile lattice centred on the pose's pixel.
/// Returns {H, W}, summing to one.
inline Tensor<double> make_location_target(const Pose& pose, const AerialTile& tile, double sigma_px) {
  if (!(sigma_px > 0)) throw ValidationError("location sigma must be positive");
  const Cell centre = cell_of(pose, tile);
  const double s = std::max(sigma_px, kMinLocationSigma);
  Tensor<double> t({tile.height, tile.width});
  double total = 0;
  for (std::size_t r = 0; r < tile.height; ++r)
    for (std::size_t c = 0; c < tile.width; ++c) {
      const double dr = static_cast<double>(r) - static_cast<double>(centre.row);
      const double dc = static_cast<double>(c) - static_cast<double>(centre.col);
      total += (t.at(r, c) = std::exp(-(dr * dr + dc * dc) / (2 * s * s)));
    }
  for (auto& v : t.vec()) v /= total;
  return t;
}

/// Bin index whose sector [k, k+1) * 360/K contains theta.
inline std::size_t orientation_bin(double theta_deg, std::size_t bins) {
  const double u = normalize_degrees(theta_deg) * static_cast<double>(bins) / 360.0;
  const auto k = static_cast<std::size_t>(std::floor(u + 1e-9));
  return k % bins;
}

inline double bin_center_degrees(std::size_t bin, std::size_t bins) {
  return (static_cast<double>(bin) + 0.5) * 360.0 / static_cast<double>(bins);
}

/// Wrapped Gaussian over K circular bins centred at theta's bin.
inline std::vector<double> make_orientation_target(double theta_deg, std::size_t bins, double sigma_bins) {
  if (bins < 2) throw ValidationError("orientation target needs at least two bins");
  if (!(sigma_bins > 0)) throw ValidationError("orientation sigma must be positive");
  const std::size_t centre = orientation_bin(theta_deg, bins);
  const long K = static_cast<long>(bins);
  const long wraps = static_cast<long>(std::ceil(8.0 * sigma_bins / static_cast<double>(bins))) + 1;
  std::vector<double> t(bins);
  double total = 0;
  for (long k = 0; k < K; ++k) {
    const long d = ((k - static_cast<long>(centre)) % K + K) % K;
    double v = 0;
    for (long m = -wraps; m <= wraps; ++m) {
      const double e = static_cast<double>(d + m * K);
      v += std::exp(-e * e / (2 * sigma_bins * sigma_bins));
    }
    total += (t[static_cast<std::size_t>(k)] = v);
  }
  for (auto& v : t) v /= total;
  return t;
}

struct AugmentOptions {
  double max_rot_deg = 60.0;
  double rot_prob = 0.7;
  double jitter_strength = 0.1;
};

namespace detail {

inline std::pair<double, double> exact_cos_sin(double deg) {
  const double d = normalize_degrees(deg);
  if (d == 0.0) return {1.0, 0.0};
  if (d == 90.0) return {0.0, 1.0};
  if (d == 180.0) return {-1.0, 0.0};
  if (d == 270.0) return {0.0, -1.0};
  const double r = d * std::numbers::pi / 180.0;
  return {std::cos(r), std::sin(r)};
}

}  // namespace detail

/// Rotates the tile content by `deg` about its centre (bilinear, zero fill)
/// and maps the pose through the same transform. Returns false and leaves the
/// inputs untouched when the rotated pose would leave the tile.
inline bool rotate_tile(AerialTile& tile, Pose& pose, double deg) {
  const auto [cs, sn] = detail::exact_cos_sin(deg);
  const double cx = static_cast<double>(tile.width) / 2.0;
  const double cy = static_cast<double>(tile.height) / 2.0;
  const double ppm = tile.pixels_per_meter;

  const double px = pose.x * ppm - cx, py = pose.y * ppm - cy;
  const double nx = (cs * px - sn * py + cx) / ppm;
  const double ny = (sn * px + cs * py + cy) / ppm;
  if (!tile.contains(nx, ny)) return false;

  Tensor<float> out({3, tile.height, tile.width});
  const long H = static_cast<long>(tile.height), W = static_cast<long>(tile.width);
  for (long r = 0; r < H; ++r)
    for (long c = 0; c < W; ++c) {
      const double qx = static_cast<double>(c) + 0.5 - cx;
      const double qy = static_cast<double>(r) + 0.5 - cy;
      // Inverse rotation gives the source position, in pixel-index coordinates.
      const double sx = cs * qx + sn * qy + cx - 0.5;
      const double sy = -sn * qx + cs * qy + cy - 0.5;
      const double fx = std::floor(sx), fy = std::floor(sy);
      const double ax = sx - fx, ay = sy - fy;
      const long x0 = static_cast<long>(fx), y0 = static_cast<long>(fy);
      for (std::size_t ch = 0; ch < 3; ++ch) {
        auto sample = [&](long yy, long xx) -> double {
          if (yy < 0 || xx < 0 || yy >= H || xx >= W) return 0.0;
          return tile.values.at(ch, static_cast<std::size_t>(yy), static_cast<std::size_t>(xx));
        };
        double v = (1 - ay) * ((1 - ax) * sample(y0, x0) + (ax > 0 ? ax * sample(y0, x0 + 1) : 0.0));
        if (ay > 0) v += ay * ((1 - ax) * sample(y0 + 1, x0) + (ax > 0 ? ax * sample(y0 + 1, x0 + 1) : 0.0));
        out.at(ch, static_cast<std::size_t>(r), static_cast<std::size_t>(c)) = static_cast<float>(v);
      }
    }
  tile.values = std::move(out);
  pose = Pose(nx, ny, pose.theta + deg);
  return true;
}

/// Random rotation plus per-channel multiplicative colour jitter.
inline std::pair<AerialTile, Pose> augment_tile(const AerialTile& tile, const Pose& pose, std::uint64_t seed,
                                                const AugmentOptions& opt) {
  if (opt.max_rot_deg < 0 || opt.max_rot_deg > 180) throw ValidationError("max rotation must lie in [0, 180]");
  if (opt.rot_prob < 0 || opt.rot_prob > 1) throw ValidationError("rotation probability must lie in [0, 1]");
  Philox rng(seed, 0xA06);
  AerialTile out_tile = tile;
  Pose out_pose = pose;
  const bool rotate = rng.bernoulli(opt.rot_prob);
  const double angle = rng.uniform(-opt.max_rot_deg, opt.max_rot_deg);
  if (rotate && angle != 0.0) rotate_tile(out_tile, out_pose, angle);

  const std::size_t plane = tile.height * tile.width;
  for (std::size_t ch = 0; ch < 3; ++ch) {
    const double f = 1.0 + opt.jitter_strength * rng.uniform(-1.0, 1.0);
    if (f == 1.0) continue;
    float* p = out_tile.values.data() + ch * plane;
    for (std::size_t i = 0; i < plane; ++i)
      p[i] = static_cast<float>(std::clamp(static_cast<double>(p[i]) * f, 0.0, 1.0));
  }
  return {std::move(out_tile), out_pose};
}

}  // namespace xmodal
