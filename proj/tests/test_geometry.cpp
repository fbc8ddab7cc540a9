#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "support.hpp"
#include "xmodal/geometry.hpp"

using namespace xmodal;

namespace {

PointCloud random_cloud(std::uint64_t seed, std::size_t n, double extent) {
  Philox rng(seed, 3);
  PointCloud c;
  for (std::size_t i = 0; i < n; ++i)
    c.points.push_back({rng.uniform(-extent, extent), rng.uniform(-extent, extent), rng.uniform(0.0, 3.5)});
  return c;
}

// Independent per-point binning in long double.
Tensor<float> bin_oracle(const PointCloud& cloud, const BevOptions& o) {
  Tensor<float> g({o.height, o.width});
  for (const auto& p : cloud.points) {
    if (p.z < o.z_min || p.z > o.z_max) continue;
    const long double col = std::floor(static_cast<long double>(p.x) / o.cell_size) + o.width / 2;
    const long double row = std::floor(static_cast<long double>(p.y) / o.cell_size) + o.height / 2;
    if (col < 0 || row < 0 || col >= o.width || row >= o.height) continue;
    g.at(static_cast<std::size_t>(row), static_cast<std::size_t>(col)) = 1.0f;
  }
  return g;
}

AerialTile gradient_tile(std::size_t n) {
  AerialTile t(n, n, 1.0);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) t.values.at(c, i, j) = static_cast<float>((i * 7 + j * 3 + c * 11) % 17) / 16.f;
  return t;
}

}  // namespace

TEST(Pose, ThetaIsNormalized) {
  EXPECT_DOUBLE_EQ(Pose(0, 0, -90).theta, 270.0);
  EXPECT_DOUBLE_EQ(Pose(0, 0, 720).theta, 0.0);
  EXPECT_DOUBLE_EQ(Pose(0, 0, -1e-18).theta, 0.0);
  EXPECT_THROW(Pose(std::nan(""), 0, 0), ValidationError);
}

TEST(ProjectToBev, EmptyCloudGivesZeroGrid) {
  const auto g = project_to_bev(PointCloud{}, {64, 64, 0.5, 0.3, 3.0});
  EXPECT_EQ(g.values.dim(0), 64u);
  EXPECT_EQ(g.values.dim(1), 64u);
  EXPECT_EQ(g.values.sum(), 0.0f);
}

TEST(ProjectToBev, OriginLandsAtCenterCell) {
  PointCloud c;
  c.points.push_back({0, 0, 1.0});
  const auto g = project_to_bev(c, {64, 64, 1.0, 0.2, 3.0});
  EXPECT_EQ(g.values.sum(), 1.0f);
  EXPECT_EQ(g.at(32, 32), 1.0f);
}

TEST(ProjectToBev, MatchesPerPointBinning) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    const auto cloud = random_cloud(s, 100, 20.0);
    const BevOptions o{64, 64, 1.0, 0.3, 3.0};
    EXPECT_EQ(project_to_bev(cloud, o).values, bin_oracle(cloud, o)) << "seed " << s;
  }
}

TEST(ProjectToBev, PermutationInvariant) {
  auto cloud = random_cloud(5, 300, 30.0);
  const BevOptions o{64, 48, 0.7, 0.3, 3.0};
  const auto a = project_to_bev(cloud, o);
  std::reverse(cloud.points.begin(), cloud.points.end());
  std::rotate(cloud.points.begin(), cloud.points.begin() + 37, cloud.points.end());
  EXPECT_EQ(project_to_bev(cloud, o).values, a.values);
}

TEST(ProjectToBev, OutOfRangeHeightsAreDropped) {
  PointCloud c;
  c.points.push_back({1, 1, 0.1});
  c.points.push_back({2, -3, 3.5});
  EXPECT_EQ(project_to_bev(c, {}).values, project_to_bev(PointCloud{}, {}).values);
}

TEST(ProjectToBev, RejectsBadInput) {
  PointCloud c;
  c.points.push_back({std::nan(""), 0, 1});
  EXPECT_THROW(project_to_bev(c, {}), ValidationError);
  EXPECT_THROW(project_to_bev(PointCloud{}, {64, 64, 0.0, 0.3, 3.0}), ValidationError);
  EXPECT_THROW(project_to_bev(PointCloud{}, {64, 64, 1.0, 3.0, 0.3}), ValidationError);
}

TEST(LocationTarget, NarrowSigmaConcentratesInTrueCell) {
  const AerialTile tile(64, 64, 1.0);
  const auto t = make_location_target(Pose(10.4, 20.9, 0), tile, 1e-6);
  EXPECT_GE(t.at(20, 10), 0.999);
}

TEST(LocationTarget, CenterTargetIsRotationSymmetric) {
  const AerialTile tile(64, 64, 1.0);
  // Pixel (32, 32) is the rotation centre of the lattice {0..64} only up to a
  // half-pixel shift, so compare the window centred on the target cell.
  const auto t = make_location_target(Pose(32.5, 32.5, 0), tile, 2.0);
  for (long di = -10; di <= 10; ++di)
    for (long dj = -10; dj <= 10; ++dj)
      EXPECT_NEAR(t.at(static_cast<std::size_t>(32 + di), static_cast<std::size_t>(32 + dj)),
                  t.at(static_cast<std::size_t>(32 - dj), static_cast<std::size_t>(32 + di)), 1e-6);
}

TEST(LocationTarget, MatchesDirectLatticeSum) {
  const AerialTile tile(64, 64, 1.0);
  const auto t = make_location_target(Pose(10.0, 20.0, 0), tile, 2.0);
  long double z = 0;
  for (int r = 0; r < 64; ++r)
    for (int c = 0; c < 64; ++c) z += std::exp(-static_cast<long double>((r - 20) * (r - 20) + (c - 10) * (c - 10)) / 8.0L);
  for (int r = 0; r < 64; ++r)
    for (int c = 0; c < 64; ++c) {
      const long double v = std::exp(-static_cast<long double>((r - 20) * (r - 20) + (c - 10) * (c - 10)) / 8.0L) / z;
      ASSERT_NEAR(t.at(static_cast<std::size_t>(r), static_cast<std::size_t>(c)), static_cast<double>(v), 1e-15);
    }
  // frozen value of the peak cell
  EXPECT_NEAR(t.at(20, 10), 0.039788738041923052, 1e-15);
}

TEST(LocationTarget, SumsToOneAndIsNonNegative) {
  Philox rng(9, 1);
  for (int i = 0; i < 50; ++i) {
    const AerialTile tile(32, 64, 1.0 + rng.uniform());
    const Pose p(rng.uniform(0, 31.0), rng.uniform(0, 15.0), 0);
    const auto t = make_location_target(p, tile, rng.uniform(0.1, 5));
    EXPECT_NEAR(t.sum(), 1.0, 1e-6);
    EXPECT_TRUE(std::all_of(t.vec().begin(), t.vec().end(), [](double v) { return v >= 0; }));
  }
}

TEST(LocationTarget, PoseOutsideTileThrows) {
  EXPECT_THROW(make_location_target(Pose(70, 3, 0), AerialTile(64, 64, 1), 2), ValidationError);
}

TEST(OrientationTarget, WrapSymmetryAtZero) {
  const auto t = make_orientation_target(0, 36, 1);
  EXPECT_EQ(std::max_element(t.begin(), t.end()) - t.begin(), 0);
  EXPECT_NEAR(t[1], t[35], 1e-9);
}

TEST(OrientationTarget, HalfTurnIsShiftByHalfTheBins) {
  const auto a = make_orientation_target(0, 36, 2);
  const auto b = make_orientation_target(180, 36, 2);
  for (std::size_t k = 0; k < 36; ++k) EXPECT_NEAR(b[(k + 18) % 36], a[k], 1e-12);
}

TEST(OrientationTarget, MatchesBruteForceWrappedGaussian) {
  const auto t = make_orientation_target(47.3, 36, 2);
  // bin of 47.3 deg with 10 deg bins is 4
  long double z = 0;
  std::vector<long double> v(36);
  for (int k = 0; k < 36; ++k) {
    for (int m = -20; m <= 20; ++m) {
      const long double d = static_cast<long double>(k - 4 + 36 * m);
      v[static_cast<std::size_t>(k)] += std::exp(-d * d / 8.0L);
    }
    z += v[static_cast<std::size_t>(k)];
  }
  for (std::size_t k = 0; k < 36; ++k) EXPECT_NEAR(t[k], static_cast<double>(v[k] / z), 1e-15);
  EXPECT_NEAR(t[4], 0.19947114020071635, 1e-15);
}

TEST(OrientationTarget, ShiftEquivariance) {
  Philox rng(4, 4);
  for (int i = 0; i < 30; ++i) {
    const double th = rng.uniform(0, 360);
    const long m = static_cast<long>(rng.below(36));
    const auto a = make_orientation_target(th, 36, 2);
    const auto b = make_orientation_target(th + 10.0 * static_cast<double>(m), 36, 2);
    for (long k = 0; k < 36; ++k) EXPECT_NEAR(b[static_cast<std::size_t>((k + m) % 36)], a[static_cast<std::size_t>(k)], 1e-9);
    EXPECT_NEAR(std::accumulate(a.begin(), a.end(), 0.0), 1.0, 1e-6);
  }
}

TEST(Augment, IdentityConfigurationIsNoOp) {
  const auto tile = gradient_tile(64);
  const Pose p(12.3, 40.1, 77);
  const auto [t2, p2] = augment_tile(tile, p, 123, {60, 0, 0});
  EXPECT_EQ(t2, tile);
  EXPECT_EQ(p2, p);
}

TEST(Augment, QuarterTurnIsExact) {
  auto tile = gradient_tile(64);
  const auto orig = tile;
  Pose p(10.5, 20.5, 350);
  ASSERT_TRUE(rotate_tile(tile, p, 90));
  // (x, y) -> (cx - (y - cy), cy + (x - cx)) about (32, 32)
  EXPECT_DOUBLE_EQ(p.x, 32 - (20.5 - 32));
  EXPECT_DOUBLE_EQ(p.y, 32 + (10.5 - 32));
  EXPECT_DOUBLE_EQ(p.theta, 80.0);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t r = 0; r < 64; ++r)
      for (std::size_t q = 0; q < 64; ++q)
        ASSERT_EQ(tile.values.at(c, r, q), orig.values.at(c, 63 - q, r));
}

TEST(Augment, SameSeedIsBitIdentical) {
  const auto tile = gradient_tile(64);
  const Pose p(30, 33, 5);
  const AugmentOptions o{60, 1.0, 0.1};
  const auto a = augment_tile(tile, p, 99, o);
  const auto b = augment_tile(tile, p, 99, o);
  EXPECT_EQ(a.first, b.first);
  EXPECT_EQ(a.second, b.second);
  const auto c = augment_tile(tile, p, 100, o);
  EXPECT_FALSE(c.first == a.first);
}

TEST(Augment, RotationKeepsPoseInsideTile) {
  const auto tile = gradient_tile(64);
  for (std::uint64_t s = 0; s < 40; ++s) {
    const Pose p(1.0 + static_cast<double>(s), 62.5, 0);
    const auto [t2, p2] = augment_tile(tile, p, s, {60, 1.0, 0});
    EXPECT_TRUE(t2.contains(p2.x, p2.y));
  }
}
