#pragma once

// Procedural aerial/LiDAR scene generator and the on-disk dataset layout.
//
//   <root>/manifest.csv            sample_id,seed,tile_size,pixels_per_meter
//   <root>/<sample_id>/aerial.ppm  8-bit RGB tile
//   <root>/<sample_id>/cloud.xyz   "px py pz" per line, 9 significant digits
//   <root>/<sample_id>/pose.csv    "x,y,theta"
//   <root>/<sample_id>/meta.csv    "pixels_per_meter,cell_size,z_min,z_max"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "xmodal/geometry.hpp"
#include "xmodal/imageio.hpp"

namespace xmodal {

struct SceneSpec {
  std::uint64_t seed = 0;
  std::size_t tile_size = 64;
  double pixels_per_meter = 1.0;
  std::size_t n_buildings = 8;
  std::size_t n_roads = 2;
  std::size_t lidar_rays = 360;
  double lidar_range = 32.0;
  double noise_sigma = 0.05;

  void validate() const {
    if (tile_size == 0 || tile_size % 32) throw ValidationError("tile_size must be a positive multiple of 32");
    if (!(pixels_per_meter > 0)) throw ValidationError("pixels_per_meter must be positive");
    if (!(lidar_range > 0)) throw ValidationError("lidar_range must be positive");
    if (lidar_rays == 0) throw ValidationError("lidar_rays must be at least 1");
    if (noise_sigma < 0) throw ValidationError("noise_sigma must be non-negative");
  }
};

/// Tile-resolution occupancy: 1 for buildings, 0 elsewhere.
struct ObstacleMap {
  std::size_t height = 0, width = 0;
  std::vector<std::uint8_t> cells;

  bool occupied(long row, long col) const {
    if (row < 0 || col < 0 || row >= static_cast<long>(height) || col >= static_cast<long>(width)) return false;
    return cells[static_cast<std::size_t>(row) * width + static_cast<std::size_t>(col)] != 0;
  }
  bool empty() const {
    for (auto c : cells)
      if (c) return false;
    return true;
  }
  friend bool operator==(const ObstacleMap&, const ObstacleMap&) = default;
};

struct Scene {
  SceneSpec spec;
  AerialTile tile;
  ObstacleMap obstacles;
  std::vector<std::uint8_t> road_mask;
  Pose gt_pose;
  PointCloud cloud;
};

/// Ray-casts equiangular beams from `pose` against the obstacle map. Beam k
/// leaves at heading + 360 k / rays; a hit yields a sensor-frame point at the
/// first occupied-cell boundary plus Gaussian range noise, with z uniform in
/// [0.5, 2.5] m.
inline PointCloud simulate_lidar(const ObstacleMap& map, const Pose& pose, double pixels_per_meter,
                                 std::size_t rays, double max_range, double noise_sigma, std::uint64_t seed) {
  if (rays == 0) throw ValidationError("simulate_lidar needs at least one ray");
  Philox rng(seed, 0x11DA);
  PointCloud cloud;
  const double ox = pose.x * pixels_per_meter, oy = pose.y * pixels_per_meter;
  const double range_px = max_range * pixels_per_meter;
  for (std::size_t k = 0; k < rays; ++k) {
    const double rel = 2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(rays);
    const double a = pose.theta * std::numbers::pi / 180.0 + rel;
    const double dx = std::cos(a), dy = std::sin(a);
    long col = static_cast<long>(std::floor(ox)), row = static_cast<long>(std::floor(oy));
    const long step_c = dx > 0 ? 1 : -1, step_r = dy > 0 ? 1 : -1;
    const double inf = std::numeric_limits<double>::infinity();
    double t_max_c = dx != 0 ? ((dx > 0 ? col + 1 - ox : ox - col) / std::abs(dx)) : inf;
    double t_max_r = dy != 0 ? ((dy > 0 ? row + 1 - oy : oy - row) / std::abs(dy)) : inf;
    const double t_delta_c = dx != 0 ? 1.0 / std::abs(dx) : inf;
    const double t_delta_r = dy != 0 ? 1.0 / std::abs(dy) : inf;
    double hit = -1;
    while (true) {
      double t;
      if (t_max_c < t_max_r) {
        t = t_max_c;
        col += step_c;
        t_max_c += t_delta_c;
      } else {
        t = t_max_r;
        row += step_r;
        t_max_r += t_delta_r;
      }
      if (t > range_px) break;
      if (row < 0 || col < 0 || row >= static_cast<long>(map.height) || col >= static_cast<long>(map.width)) break;
      if (map.occupied(row, col)) {
        hit = t;
        break;
      }
    }
    // Draw noise for every beam so the stream does not depend on hit pattern.
    const double noise = noise_sigma > 0 ? noise_sigma * rng.normal() : 0.0;
    const double z = rng.uniform(0.5, 2.5);
    if (hit < 0) continue;
    const double r = hit / pixels_per_meter + noise;
    cloud.points.push_back({r * std::cos(rel), r * std::sin(rel), z});
  }
  return cloud;
}

namespace detail {

inline float quantize255(double v) {
  return static_cast<float>(std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0);
}

}  // namespace detail

/// Builds a scene: road strips, rectangular buildings kept off the roads, a
/// rendered tile with texture noise, a pose on a road cell and its scan.
inline Scene generate_scene(const SceneSpec& spec) {
  spec.validate();
  Philox rng(spec.seed, 0x5CE7E);
  const std::size_t N = spec.tile_size;
  const double n = static_cast<double>(N);
  Scene scene;
  scene.spec = spec;
  scene.obstacles = {N, N, std::vector<std::uint8_t>(N * N, 0)};
  scene.road_mask.assign(N * N, 0);

  for (std::size_t r = 0; r < spec.n_roads; ++r) {
    double angle = rng.bernoulli(0.5) ? (rng.bernoulli(0.5) ? 0.0 : 90.0) : rng.uniform(0.0, 180.0);
    angle *= std::numbers::pi / 180.0;
    const double px = rng.uniform(0.2 * n, 0.8 * n), py = rng.uniform(0.2 * n, 0.8 * n);
    const double half_width = rng.uniform(2.0, 3.5) * spec.pixels_per_meter;
    const double nx = -std::sin(angle), ny = std::cos(angle);
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t j = 0; j < N; ++j) {
        const double d = (static_cast<double>(j) + 0.5 - px) * nx + (static_cast<double>(i) + 0.5 - py) * ny;
        if (std::abs(d) <= half_width) scene.road_mask[i * N + j] = 1;
      }
  }

  for (std::size_t b = 0; b < spec.n_buildings; ++b) {
    for (int attempt = 0; attempt < 50; ++attempt) {
      const double cx = rng.uniform(0.0, n), cy = rng.uniform(0.0, n);
      const double hw = rng.uniform(2.0, 7.0) * spec.pixels_per_meter;
      const double hh = rng.uniform(2.0, 7.0) * spec.pixels_per_meter;
      const double angle = rng.bernoulli(0.5) ? 0.0 : rng.uniform(0.0, std::numbers::pi / 2);
      const double cs = std::cos(angle), sn = std::sin(angle);
      std::vector<std::size_t> cells;
      bool blocked = false;
      for (std::size_t i = 0; i < N && !blocked; ++i)
        for (std::size_t j = 0; j < N; ++j) {
          const double qx = static_cast<double>(j) + 0.5 - cx, qy = static_cast<double>(i) + 0.5 - cy;
          const double u = cs * qx + sn * qy, v = -sn * qx + cs * qy;
          if (std::abs(u) > hw || std::abs(v) > hh) continue;
          if (scene.road_mask[i * N + j]) {
            blocked = true;
            break;
          }
          cells.push_back(i * N + j);
        }
      if (blocked || cells.empty()) continue;
      for (auto c : cells) scene.obstacles.cells[c] = 1;
      break;
    }
  }

  scene.tile = AerialTile(N, N, spec.pixels_per_meter);
  const double ground[3] = {0.62, 0.70, 0.52};
  const double road[3] = {0.18, 0.18, 0.20};
  const double building[3] = {0.45, 0.40, 0.42};
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t j = 0; j < N; ++j) {
      const std::size_t idx = i * N + j;
      const double* base = scene.obstacles.cells[idx] ? building : scene.road_mask[idx] ? road : ground;
      const double shade = rng.uniform(-0.04, 0.04);
      for (std::size_t ch = 0; ch < 3; ++ch)
        scene.tile.values.at(ch, i, j) = detail::quantize255(base[ch] + shade + rng.uniform(-0.02, 0.02));
    }

  std::vector<std::size_t> candidates;
  for (std::size_t idx = 0; idx < N * N; ++idx)
    if (!scene.obstacles.cells[idx] && (spec.n_roads == 0 || scene.road_mask[idx])) candidates.push_back(idx);
  if (candidates.empty()) throw Error("scene generation: no free cell for the vehicle pose");
  const std::size_t cell = candidates[rng.below(candidates.size())];
  const double x = (static_cast<double>(cell % N) + rng.uniform(0.05, 0.95)) / spec.pixels_per_meter;
  const double y = (static_cast<double>(cell / N) + rng.uniform(0.05, 0.95)) / spec.pixels_per_meter;
  scene.gt_pose = Pose(x, y, rng.uniform(0.0, 360.0));

  scene.cloud = simulate_lidar(scene.obstacles, scene.gt_pose, spec.pixels_per_meter, spec.lidar_rays,
                               spec.lidar_range, spec.noise_sigma, Philox::mix(spec.seed, 0x11DA));
  return scene;
}

/// Seed of sample `index` in a dataset generated from `base_seed`.
inline std::uint64_t sample_seed(std::uint64_t base_seed, std::size_t index) { return Philox::mix(base_seed, index); }

inline std::string sample_id(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "sample_%05zu", index);
  return buf;
}

/// One sample as stored on disk.
struct Sample {
  std::string id;
  std::uint64_t seed = 0;
  AerialTile tile;
  PointCloud cloud;
  Pose pose;
  BevOptions bev;
};

namespace detail {

inline std::string fmt9(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string field;
  while (std::getline(ss, field, ',')) out.push_back(field);
  return out;
}

inline double parse_double(const std::string& s, const std::string& context) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size() && s.find_first_not_of(" \t\r", used) != std::string::npos) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw IoError("cannot parse number '" + s + "' in " + context);
  }
}

inline void write_tile(const std::string& path, const AerialTile& tile) {
  RawImage img{tile.width, tile.height, 3, 255, {}};
  img.samples.resize(tile.width * tile.height * 3);
  for (std::size_t i = 0; i < tile.height; ++i)
    for (std::size_t j = 0; j < tile.width; ++j)
      for (std::size_t ch = 0; ch < 3; ++ch)
        img.samples[(i * tile.width + j) * 3 + ch] =
            static_cast<std::uint16_t>(std::lround(std::clamp(tile.values.at(ch, i, j), 0.0f, 1.0f) * 255.0f));
  write_pnm(path, img);
}

inline AerialTile read_tile(const std::string& path, double ppm) {
  const RawImage img = read_pnm(path);
  AerialTile tile(img.height, img.width, ppm);
  for (std::size_t i = 0; i < img.height; ++i)
    for (std::size_t j = 0; j < img.width; ++j)
      for (std::size_t ch = 0; ch < 3; ++ch) {
        const std::size_t src = img.channels == 3 ? (i * img.width + j) * 3 + ch : i * img.width + j;
        tile.values.at(ch, i, j) = static_cast<float>(img.samples[src] / static_cast<double>(img.maxval));
      }
  return tile;
}

}  // namespace detail

inline void write_sample(const Sample& s, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  detail::write_tile((dir / "aerial.ppm").string(), s.tile);
  {
    std::ofstream os(dir / "cloud.xyz");
    for (const auto& p : s.cloud.points)
      os << detail::fmt9(p.x) << ' ' << detail::fmt9(p.y) << ' ' << detail::fmt9(p.z) << '\n';
    if (!os) throw IoError("failed writing " + (dir / "cloud.xyz").string());
  }
  {
    std::ofstream os(dir / "pose.csv");
    os << detail::fmt9(s.pose.x) << ',' << detail::fmt9(s.pose.y) << ',' << detail::fmt9(s.pose.theta) << '\n';
  }
  {
    std::ofstream os(dir / "meta.csv");
    os << detail::fmt9(s.tile.pixels_per_meter) << ',' << detail::fmt9(s.bev.cell_size) << ','
       << detail::fmt9(s.bev.z_min) << ',' << detail::fmt9(s.bev.z_max) << '\n';
    if (!os) throw IoError("failed writing " + (dir / "meta.csv").string());
  }
}

inline Sample read_sample(const std::filesystem::path& dir, const std::string& id, std::uint64_t seed) {
  const std::string ctx = "sample " + id;
  auto read_line = [&](const char* name) {
    std::ifstream is(dir / name);
    if (!is) throw IoError(ctx + ": missing " + name);
    std::string line;
    if (!std::getline(is, line)) throw IoError(ctx + ": empty " + name);
    return line;
  };
  Sample s;
  s.id = id;
  s.seed = seed;
  const auto meta = detail::split_csv(read_line("meta.csv"));
  if (meta.size() != 4) throw IoError(ctx + ": meta.csv needs 4 fields");
  const double ppm = detail::parse_double(meta[0], ctx + " meta.csv");
  s.bev.cell_size = detail::parse_double(meta[1], ctx + " meta.csv");
  s.bev.z_min = detail::parse_double(meta[2], ctx + " meta.csv");
  s.bev.z_max = detail::parse_double(meta[3], ctx + " meta.csv");

  const auto pose = detail::split_csv(read_line("pose.csv"));
  if (pose.size() != 3) throw IoError(ctx + ": pose.csv needs x,y,theta");
  s.pose = Pose(detail::parse_double(pose[0], ctx + " pose.csv"), detail::parse_double(pose[1], ctx + " pose.csv"),
                detail::parse_double(pose[2], ctx + " pose.csv"));

  const auto ppm_path = dir / "aerial.ppm";
  const auto pgm_path = dir / "aerial.pgm";
  try {
    s.tile = detail::read_tile((std::filesystem::exists(ppm_path) ? ppm_path : pgm_path).string(), ppm);
  } catch (const IoError& e) {
    throw IoError(ctx + ": " + e.what());
  }
  s.bev.height = s.tile.height;
  s.bev.width = s.tile.width;

  std::ifstream is(dir / "cloud.xyz");
  if (!is) throw IoError(ctx + ": missing cloud.xyz");
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream ls(line);
    Point3 p;
    if (!(ls >> p.x >> p.y >> p.z)) throw IoError(ctx + ": malformed cloud.xyz line " + std::to_string(lineno));
    s.cloud.points.push_back(p);
  }
  return s;
}

inline Sample to_sample(const Scene& scene, std::size_t index) {
  Sample s;
  s.id = sample_id(index);
  s.seed = scene.spec.seed;
  s.tile = scene.tile;
  s.cloud = scene.cloud;
  s.pose = scene.gt_pose;
  s.bev = BevOptions{scene.tile.height, scene.tile.width, 1.0 / scene.spec.pixels_per_meter, 0.3, 3.0};
  return s;
}

/// Scenes first_index .. first_index + count - 1 of the dataset seeded by base_seed.
inline std::vector<Scene> generate_scenes(const SceneSpec& base, std::uint64_t base_seed, std::size_t count,
                                          std::size_t first_index = 0) {
  base.validate();
  std::vector<Scene> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    SceneSpec sp = base;
    sp.seed = sample_seed(base_seed, first_index + i);
    out.push_back(generate_scene(sp));
  }
  return out;
}

inline std::vector<Sample> to_samples(const std::vector<Scene>& scenes, std::size_t first_index = 0) {
  std::vector<Sample> out;
  out.reserve(scenes.size());
  for (std::size_t i = 0; i < scenes.size(); ++i) out.push_back(to_sample(scenes[i], first_index + i));
  return out;
}

/// Writes every scene plus manifest.csv; returns the manifest rows written.
inline std::size_t write_dataset(const std::vector<Scene>& scenes, const std::filesystem::path& root,
                                 std::size_t first_index = 0) {
  std::filesystem::create_directories(root);
  std::ofstream manifest(root / "manifest.csv");
  if (!manifest) throw IoError("cannot write " + (root / "manifest.csv").string());
  manifest << "sample_id,seed,tile_size,pixels_per_meter\n";
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    const Sample s = to_sample(scenes[i], first_index + i);
    write_sample(s, root / s.id);
    manifest << s.id << ',' << s.seed << ',' << scenes[i].spec.tile_size << ','
             << detail::fmt9(scenes[i].spec.pixels_per_meter) << '\n';
  }
  if (!manifest) throw IoError("failed writing manifest in " + root.string());
  return scenes.size();
}

inline std::vector<Sample> read_dataset(const std::filesystem::path& root) {
  std::ifstream manifest(root / "manifest.csv");
  if (!manifest) throw IoError("dataset has no manifest.csv: " + root.string());
  std::string line;
  std::getline(manifest, line);
  if (line.rfind("sample_id,seed", 0) != 0) throw IoError("bad manifest header in " + root.string());
  std::vector<Sample> out;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    const auto f = detail::split_csv(line);
    if (f.size() != 4) throw IoError("bad manifest row: " + line);
    std::uint64_t seed = 0;
    try {
      seed = std::stoull(f[1]);
    } catch (const std::exception&) {
      throw IoError("bad seed in manifest row: " + line);
    }
    out.push_back(read_sample(root / f[0], f[0], seed));
  }
  return out;
}

}  // namespace xmodal
