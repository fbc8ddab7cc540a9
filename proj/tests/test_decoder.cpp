#include <gtest/gtest.h>

#include <cmath>

#include "support.hpp"
#include "xmodal/decoder.hpp"

using namespace xmodal;
using xmodal::testing::random_tensor;

namespace {

using LD = long double;

DecoderConfig small_cfg(std::size_t bins = 6) {
  DecoderConfig c;
  c.bins = bins;
  c.channels = {5, 4, 4, 3, 3};
  return c;
}

const std::array<std::size_t, 5> kSkips{3, 2, 2, 1, 3};

std::array<Var<double>, 5> random_skips(std::size_t base, std::uint64_t seed) {
  std::array<Var<double>, 5> s;
  for (std::size_t l = 0; l < 5; ++l)
    s[l] = constant(random_tensor<double>({kSkips[l], base << (l + 1), base << (l + 1)}, seed + l, 0, 1));
  return s;
}

void randomize(ParamStore<double>& ps, std::uint64_t seed) {
  std::uint64_t k = 0;
  for (const auto& e : ps.entries()) {
    Philox rng(seed, ++k);
    for (auto& v : e.var->value.vec()) v += 0.3 * rng.uniform(-1, 1);
  }
}

Tensor<LD> to_ld(const Tensor<double>& t) { return t.cast<LD>(); }

Tensor<LD> conv_ref(const Tensor<LD>& x, const Tensor<double>& w, const Tensor<double>& b) {
  const std::size_t O = w.dim(0), C = w.dim(1), k = w.dim(2);
  const long H = static_cast<long>(x.dim(1)), W = static_cast<long>(x.dim(2)), r = static_cast<long>(k / 2);
  Tensor<LD> y({O, x.dim(1), x.dim(2)});
  for (std::size_t o = 0; o < O; ++o)
    for (long i = 0; i < H; ++i)
      for (long j = 0; j < W; ++j) {
        LD s = b[o];
        for (std::size_t c = 0; c < C; ++c)
          for (long di = -r; di <= r; ++di)
            for (long dj = -r; dj <= r; ++dj) {
              if (i + di < 0 || j + dj < 0 || i + di >= H || j + dj >= W) continue;
              s += static_cast<LD>(w[((o * C + c) * k + static_cast<std::size_t>(di + r)) * k + static_cast<std::size_t>(dj + r)]) *
                   x.at(c, static_cast<std::size_t>(i + di), static_cast<std::size_t>(j + dj));
            }
        y.at(o, static_cast<std::size_t>(i), static_cast<std::size_t>(j)) = s;
      }
  return y;
}

LD silu_ref(LD v) { return v / (1 + std::exp(-v)); }

LikelihoodMaps maps_from(const Tensor<double>& loc, const Tensor<double>& ori) { return {loc, ori, 0.5}; }

LikelihoodMaps random_maps(std::uint64_t seed, std::size_t H, std::size_t W, std::size_t K) {
  auto loc = random_tensor<double>({H, W}, seed, 0, 1);
  loc[Philox(seed).below(H * W)] += 0.5;  // mostly unique maxima, ties still possible
  const double s = loc.sum();
  for (auto& v : loc.vec()) v /= s;
  auto ori = random_tensor<double>({K, H, W}, seed + 1, 0, 1);
  for (std::size_t p = 0; p < H * W; ++p) {
    double z = 0;
    for (std::size_t k = 0; k < K; ++k) z += ori[k * H * W + p];
    for (std::size_t k = 0; k < K; ++k) ori[k * H * W + p] /= z;
  }
  return maps_from(loc, ori);
}

}  // namespace

TEST(Decoder, OutputsAreNormalized) {
  ParamStore<double> ps(1);
  Decoder<double> dec(ps, "d", 4, small_cfg(), kSkips);
  for (std::uint64_t s = 0; s < 5; ++s) {
    const auto out = dec.decode(constant(random_tensor<double>({4, 1, 1}, s, -5, 5)), random_skips(1, s));
    EXPECT_EQ(out.loc->shape(), (Shape{32, 32}));
    EXPECT_NEAR(out.loc->value.sum(), 1.0, 1e-5);
    for (double v : out.loc->value.vec()) ASSERT_GE(v, 0.0);
    for (std::size_t p = 0; p < 32 * 32; ++p) {
      double z = 0;
      for (std::size_t k = 0; k < 6; ++k) z += out.ori->value[k * 1024 + p];
      ASSERT_NEAR(z, 1.0, 1e-5);
    }
    const double c = out.confidence->value[0];
    EXPECT_GE(c, 0.0);
    EXPECT_LE(c, 1.0);
  }
}

TEST(Decoder, ConstantInputsGiveUniformInterior) {
  ParamStore<double> ps(2);
  Decoder<double> dec(ps, "d", 4, small_cfg(), kSkips);
  Tensor<double> fused({4, 4, 4});
  fused.fill(0.7);
  std::array<Var<double>, 5> skips;
  for (std::size_t l = 0; l < 5; ++l) {
    Tensor<double> t({kSkips[l], std::size_t{8} << l, std::size_t{8} << l});
    t.fill(0.25 * static_cast<double>(l + 1));
    skips[l] = constant(t);
  }
  const auto loc = dec.decode(constant(fused), skips).loc->value;
  // Border influence of the five zero-padded 3x3 convs stays within 31 pixels.
  const double ref = loc.at(40, 40);
  for (std::size_t i = 31; i <= 96; ++i)
    for (std::size_t j = 31; j <= 96; ++j) ASSERT_NEAR(loc.at(i, j), ref, 1e-6);
}

TEST(Decoder, MatchesLayerwiseOracle) {
  ParamStore<double> ps(3);
  Decoder<double> dec(ps, "d", 4, small_cfg(), kSkips);
  randomize(ps, 4);
  const auto fused = random_tensor<double>({4, 1, 1}, 5);
  const auto skips = random_skips(1, 6);
  const auto out = dec.decode(constant(fused), skips);

  Tensor<LD> x = to_ld(fused);
  for (std::size_t l = 0; l < 5; ++l) {
    const std::size_t C = x.dim(0), h = x.dim(1) * 2;
    Tensor<LD> up({C + kSkips[l], h, h});
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < h; ++j) up.at(c, i, j) = x.at(c, i / 2, j / 2);
    for (std::size_t c = 0; c < kSkips[l]; ++c)
      for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < h; ++j) up.at(C + c, i, j) = skips[l]->value.at(c, i, j);
    const std::string n = "d.up" + std::to_string(l + 1);
    x = conv_ref(up, ps.get(n + ".w")->value, ps.get(n + ".b")->value);
    for (auto& v : x.vec()) v = silu_ref(v);
  }
  const auto lh = conv_ref(x, ps.get("d.loc_head.w")->value, ps.get("d.loc_head.b")->value);
  LD z = 0;
  for (auto v : lh.vec()) z += std::exp(v);
  for (std::size_t i = 0; i < 32 * 32; ++i) ASSERT_NEAR(out.loc->value[i], static_cast<double>(std::exp(lh[i]) / z), 1e-10);
  const auto oh = conv_ref(x, ps.get("d.ori_head.w")->value, ps.get("d.ori_head.b")->value);
  for (std::size_t p = 0; p < 32 * 32; ++p) {
    LD s = 0;
    for (std::size_t k = 0; k < 6; ++k) s += std::exp(oh[k * 1024 + p]);
    for (std::size_t k = 0; k < 6; ++k)
      ASSERT_NEAR(out.ori->value[k * 1024 + p], static_cast<double>(std::exp(oh[k * 1024 + p]) / s), 1e-10);
  }
  // confidence: pooled fused -> fc1 -> act -> fc2 -> sigmoid
  const auto& w1 = ps.get("d.conf_fc1.w")->value;
  const auto& b1 = ps.get("d.conf_fc1.b")->value;
  const auto& w2 = ps.get("d.conf_fc2.w")->value;
  LD c = ps.get("d.conf_fc2.b")->value[0];
  for (std::size_t i = 0; i < w1.dim(0); ++i) {
    LD h = b1[i];
    for (std::size_t j = 0; j < 4; ++j) h += static_cast<LD>(w1[i * 4 + j]) * fused[j];
    c += static_cast<LD>(w2[i]) * silu_ref(h);
  }
  EXPECT_NEAR(out.confidence->value[0], static_cast<double>(1 / (1 + std::exp(-c))), 1e-12);
}

TEST(Decoder, HalfTurnEquivarianceWithSymmetricWeights) {
  ParamStore<double> ps(7);
  Decoder<double> dec(ps, "d", 4, small_cfg(), kSkips);
  randomize(ps, 8);
  for (const auto& e : ps.entries()) {
    auto& t = e.var->value;
    if (t.rank() != 4 || t.dim(2) != 3) continue;
    for (std::size_t oc = 0; oc < t.dim(0) * t.dim(1); ++oc) {
      double* k = t.data() + oc * 9;
      for (std::size_t i = 0; i < 4; ++i) k[8 - i] = k[i];
    }
  }
  auto rot180 = [](const Tensor<double>& x) {
    Tensor<double> y(x.shape());
    const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < H; ++i)
        for (std::size_t j = 0; j < W; ++j) y.at(c, H - 1 - i, W - 1 - j) = x.at(c, i, j);
    return y;
  };
  const auto fused = random_tensor<double>({4, 2, 2}, 9);
  const auto skips = random_skips(2, 10);
  std::array<Var<double>, 5> rskips;
  for (std::size_t l = 0; l < 5; ++l) rskips[l] = constant(rot180(skips[l]->value));
  const auto a = dec.decode(constant(fused), skips).loc->value;
  const auto b = dec.decode(constant(rot180(fused)), rskips).loc->value;
  for (std::size_t i = 0; i < 64; ++i)
    for (std::size_t j = 0; j < 64; ++j) ASSERT_NEAR(b.at(63 - i, 63 - j), a.at(i, j), 1e-5);
}

TEST(Decoder, RegressionHeadRanges) {
  ParamStore<double> ps(4);
  auto c = small_cfg();
  c.mode = DecoderMode::kRegression;
  Decoder<double> dec(ps, "d", 4, c, {0, 0, 0, 0, 0});
  const auto r = dec.regress(constant(random_tensor<double>({4, 2, 2}, 1, -3, 3)));
  for (double v : r.xy->value.vec()) {
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
  EXPECT_NEAR(std::hypot(r.direction->value[0], r.direction->value[1]), 1.0, 1e-9);
  EXPECT_THROW(dec.decode(constant(Tensor<double>({4, 2, 2})), {}), ValidationError);
}

TEST(ExtractPose, OneHotMaps) {
  Tensor<double> loc({16, 16}), ori({36, 16, 16});
  loc.at(5, 9) = 1;
  ori.at(3, 5, 9) = 1;
  const auto e = extract_pose_argmax(maps_from(loc, ori), 1.0);
  EXPECT_EQ(e.cell, (Cell{5, 9}));
  EXPECT_EQ(e.bin, 3u);
  EXPECT_DOUBLE_EQ(e.pose.theta, 35.0);
  EXPECT_DOUBLE_EQ(e.pose.x, 9.5);
  EXPECT_DOUBLE_EQ(e.pose.y, 5.5);
}

TEST(ExtractPose, UniformMapBreaksTieAtOrigin) {
  Tensor<double> loc({8, 8}), ori({4, 8, 8});
  loc.fill(1.0 / 64);
  ori.fill(0.25);
  const auto e = extract_pose_argmax(maps_from(loc, ori), 2.0);
  EXPECT_EQ(e.cell, (Cell{0, 0}));
  EXPECT_EQ(e.bin, 0u);
  EXPECT_DOUBLE_EQ(e.pose.x, 0.25);
}

TEST(ExtractPose, MatchesExhaustiveScan) {
  for (std::uint64_t s = 0; s < 100; ++s) {
    const auto m = random_maps(s, 12, 10, 8);
    std::size_t bi = 0, bj = 0;
    for (std::size_t i = 0; i < 12; ++i)
      for (std::size_t j = 0; j < 10; ++j)
        if (m.loc.at(i, j) > m.loc.at(bi, bj)) bi = i, bj = j;
    std::size_t bk = 0;
    for (std::size_t k = 0; k < 8; ++k)
      if (m.ori.at(k, bi, bj) > m.ori.at(bk, bi, bj)) bk = k;
    const auto e = extract_pose_argmax(m, 1.0);
    ASSERT_EQ(e.cell, (Cell{bi, bj}));
    ASSERT_EQ(e.bin, bk);
  }
}

TEST(ExtractPose, InvariantUnderMonotoneTransform) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    auto m = random_maps(s, 9, 9, 6);
    const auto a = extract_pose_argmax(m, 1.0);
    double z = 0;
    for (auto& v : m.loc.vec()) z += (v = std::exp(3 * v) + v * v);
    for (auto& v : m.loc.vec()) v /= z;
    EXPECT_EQ(extract_pose_argmax(m, 1.0).cell, a.cell);
  }
}

TEST(SoftArgmax, OneHotGivesTheHotCell) {
  Tensor<double> loc({6, 7});
  loc.at(4, 2) = 1;
  for (double t : {0.01, 1.0}) {
    const auto v = soft_argmax(constant(loc), t)->value;
    EXPECT_DOUBLE_EQ(v[0], 2.0);
    EXPECT_DOUBLE_EQ(v[1], 4.0);
  }
}

TEST(SoftArgmax, UniformGivesCentroid) {
  Tensor<double> loc({6, 7});
  loc.fill(1.0 / 42);
  const auto v = soft_argmax(constant(loc), 1.0)->value;
  EXPECT_NEAR(v[0], 3.0, 1e-12);
  EXPECT_NEAR(v[1], 2.5, 1e-12);
}

TEST(SoftArgmax, TwoCellExpectation) {
  Tensor<double> loc({1, 5});
  loc[0] = 0.75;
  loc[4] = 0.25;
  EXPECT_NEAR(soft_argmax(constant(loc), 1.0)->value[0], 1.0, 1e-12);
}

TEST(SoftArgmax, LowTemperatureApproachesArgmax) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    const auto m = random_maps(s, 16, 16, 2);
    const auto e = extract_pose_argmax(m, 1.0);
    const auto v = soft_argmax(constant(m.loc), 1e-6)->value;
    EXPECT_LE(std::abs(v[0] - static_cast<double>(e.cell.col)), 1.0);
    EXPECT_LE(std::abs(v[1] - static_cast<double>(e.cell.row)), 1.0);
  }
}
