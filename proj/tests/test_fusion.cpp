#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "support.hpp"
#include "xmodal/fusion.hpp"

using namespace xmodal;
using xmodal::testing::random_tensor;

namespace {

using LD = long double;

void randomize(ParamStore<double>& ps, std::uint64_t seed, double amp = 0.3) {
  std::uint64_t k = 0;
  for (const auto& e : ps.entries()) {
    Philox rng(seed, ++k);
    for (auto& v : e.var->value.vec()) v += amp * rng.uniform(-1, 1);
  }
}

// 1x1 convolution as an explicit matrix product, {O} bias optional.
std::vector<LD> pointwise(const Tensor<double>& x, const Conv<double>& layer) {
  const std::size_t O = layer.weight->shape()[0], C = layer.weight->shape()[1];
  const std::size_t P = x.size() / C;
  std::vector<LD> y(O * P);
  for (std::size_t o = 0; o < O; ++o)
    for (std::size_t p = 0; p < P; ++p) {
      LD s = layer.bias ? layer.bias->value[o] : 0;
      for (std::size_t c = 0; c < C; ++c) s += static_cast<LD>(layer.weight->value[o * C + c]) * x[c * P + p];
      y[o * P + p] = s;
    }
  return y;
}

std::vector<LD> pointwise(const std::vector<LD>& x, const Conv<double>& layer) {
  Tensor<double> t({x.size()});
  for (std::size_t i = 0; i < x.size(); ++i) t[i] = static_cast<double>(x[i]);
  return pointwise(t, layer);
}

// Dense loop attention: explicit scores, softmax and weighted values.
std::vector<LD> attention_oracle(const CrossAttention<double>& att, const Tensor<double>& query,
                                 const Tensor<double>& context, std::size_t h, std::size_t w) {
  const std::size_t D = query.dim(0), N = h * w, heads = att.heads, dk = D / heads;
  const auto q = pointwise(query, att.to_q), k = pointwise(context, att.to_k), v = pointwise(context, att.to_v);
  const auto& table = att.rel_pos->value;
  const long side = static_cast<long>(table.dim(1)), win = side / 2;
  std::vector<LD> out(D * N);
  for (std::size_t hd = 0; hd < heads; ++hd)
    for (std::size_t i = 0; i < N; ++i) {
      std::vector<LD> s(N);
      for (std::size_t j = 0; j < N; ++j) {
        LD dot = 0;
        for (std::size_t d = hd * dk; d < (hd + 1) * dk; ++d) dot += q[d * N + i] * k[d * N + j];
        const long di = std::clamp(static_cast<long>(j / w) - static_cast<long>(i / w), -win, win);
        const long dj = std::clamp(static_cast<long>(j % w) - static_cast<long>(i % w), -win, win);
        s[j] = dot / std::sqrt(static_cast<LD>(dk)) +
               table[(hd * static_cast<std::size_t>(side) + static_cast<std::size_t>(di + win)) * static_cast<std::size_t>(side) +
                     static_cast<std::size_t>(dj + win)];
      }
      LD z = 0;
      for (auto& e : s) z += (e = std::exp(e));
      for (std::size_t d = hd * dk; d < (hd + 1) * dk; ++d) {
        LD acc = 0;
        for (std::size_t j = 0; j < N; ++j) acc += s[j] / z * v[d * N + j];
        out[d * N + i] = acc;
      }
    }
  return pointwise(out, att.to_out);
}

AttentionConfig cfg(std::size_t heads, std::size_t window, FusionMode mode = FusionMode::kCrossAttention,
                    bool bidirectional = true) {
  return {heads, window, mode, bidirectional};
}

}  // namespace

TEST(CrossAttention, SingleTokenIgnoresScores) {
  ParamStore<double> ps(1);
  CrossAttention<double> att(ps, "a", 8, cfg(2, 1));
  randomize(ps, 2);
  const auto q = random_tensor<double>({8, 1, 1}, 3), c = random_tensor<double>({8, 1, 1}, 4);
  const auto base = att(constant(q), constant(c)).output->value;
  for (auto& v : att.to_q.weight->value.vec()) v *= 1000;
  const auto big = att(constant(q), constant(c)).output->value;
  const auto want = pointwise(pointwise(c, att.to_v), att.to_out);
  for (std::size_t d = 0; d < 8; ++d) {
    EXPECT_NEAR(base[d], static_cast<double>(want[d]), 1e-12);
    EXPECT_NEAR(big[d], static_cast<double>(want[d]), 1e-12);
  }
}

TEST(CrossAttention, IdenticalContextGivesUniformRows) {
  ParamStore<double> ps(5);
  CrossAttention<double> att(ps, "a", 8, cfg(4, 2));
  const auto q = random_tensor<double>({8, 3, 3}, 6);
  Tensor<double> c({8, 3, 3});
  for (std::size_t d = 0; d < 8; ++d)
    for (std::size_t p = 0; p < 9; ++p) c[d * 9 + p] = 0.1 * static_cast<double>(d) - 0.3;
  const auto r = att(constant(q), constant(c));
  for (double a : r.weights.vec()) EXPECT_NEAR(a, 1.0 / 9, 1e-12);
  for (std::size_t d = 0; d < 8; ++d)
    for (std::size_t p = 1; p < 9; ++p) EXPECT_NEAR(r.output->value[d * 9 + p], r.output->value[d * 9], 1e-12);
}

TEST(CrossAttention, MatchesDenseLoopOracle) {
  for (std::size_t window : {0u, 1u, 7u}) {
    ParamStore<double> ps(7 + window);
    CrossAttention<double> att(ps, "a", 8, cfg(2, window));
    randomize(ps, 8, 0.5);
    const auto q = random_tensor<double>({8, 2, 2}, 9), c = random_tensor<double>({8, 2, 2}, 10);
    const auto got = att(constant(q), constant(c)).output->value;
    const auto want = attention_oracle(att, q, c, 2, 2);
    for (std::size_t i = 0; i < got.size(); ++i) ASSERT_NEAR(got[i], static_cast<double>(want[i]), 1e-10);
  }
}

TEST(CrossAttention, RowsSumToOne) {
  for (std::uint64_t s = 0; s < 100; ++s) {
    ParamStore<float> ps(s);
    CrossAttention<float> att(ps, "a", 16, cfg(4, 3));
    Philox rng(s, 99);
    for (auto& v : att.rel_pos->value.vec()) v = static_cast<float>(rng.uniform(-5, 5));
    const auto r = att(constant(random_tensor<float>({16, 3, 2}, s, -3, 3)),
                       constant(random_tensor<float>({16, 3, 2}, s + 1000, -3, 3)));
    for (std::size_t row = 0; row < r.weights.size() / 6; ++row) {
      double sum = 0;
      for (std::size_t j = 0; j < 6; ++j) sum += r.weights[row * 6 + j];
      ASSERT_NEAR(sum, 1.0, 1e-6);
    }
  }
}

TEST(CrossAttention, ConstantScoreShiftInvariance) {
  ParamStore<float> ps(3);
  CrossAttention<float> att(ps, "a", 16, cfg(4, 2));
  const auto q = constant(random_tensor<float>({16, 2, 2}, 1)), c = constant(random_tensor<float>({16, 2, 2}, 2));
  const auto a = att(q, c).output->value;
  for (auto& v : att.rel_pos->value.vec()) v += 3.75f;
  EXPECT_LE(max_abs_diff(a, att(q, c).output->value), 1e-5f);
}

TEST(CrossAttention, ContextPermutationInvariance) {
  ParamStore<double> ps(4);
  CrossAttention<double> att(ps, "a", 8, cfg(2, 2));
  const auto q = random_tensor<double>({8, 2, 3}, 1), c = random_tensor<double>({8, 2, 3}, 2);
  const std::vector<std::size_t> perm{4, 0, 5, 2, 1, 3};
  Tensor<double> pc(c.shape());
  for (std::size_t d = 0; d < 8; ++d)
    for (std::size_t j = 0; j < 6; ++j) pc[d * 6 + j] = c[d * 6 + perm[j]];
  EXPECT_LE(max_abs_diff(att(constant(q), constant(c)).output->value, att(constant(q), constant(pc)).output->value),
            1e-6);
}

TEST(CrossAttention, ShapeMismatchThrows) {
  ParamStore<double> ps(4);
  CrossAttention<double> att(ps, "a", 8, cfg(2, 2));
  EXPECT_THROW(att(constant(Tensor<double>({8, 2, 2})), constant(Tensor<double>({8, 2, 3}))), ShapeError);
  EXPECT_THROW(att(constant(Tensor<double>({4, 2, 2})), constant(Tensor<double>({4, 2, 2}))), ShapeError);
  EXPECT_THROW(CrossAttention<double>(ps, "b", 6, cfg(4, 1)), ValidationError);
}

TEST(Fusion, ConcatWithIdentityProjectionPassesAerial) {
  ParamStore<double> ps(1);
  Fusion<double> f(ps, "f", 4, cfg(2, 1, FusionMode::kConcat));
  auto& w = f.projection().weight->value;
  w.fill(0);
  for (std::size_t o = 0; o < 4; ++o) w[o * 8 + o] = 1;
  const auto a = random_tensor<double>({4, 2, 2}, 1), b = random_tensor<double>({4, 2, 2}, 2);
  const auto out = f(constant(a), constant(b))->value;
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_DOUBLE_EQ(out[i], a[i] / (1 + std::exp(-a[i])));
}

TEST(Fusion, ZeroBevCollapsesAerialToBevAttention) {
  for (bool bidirectional : {false, true}) {
    ParamStore<double> ps(2);
    Fusion<double> f(ps, "f", 8, cfg(2, 1, FusionMode::kCrossAttention, bidirectional));
    const auto a = random_tensor<double>({8, 2, 2}, 3);
    const Tensor<double> zero({8, 2, 2});
    EXPECT_EQ(f.a2b()(constant(a), constant(zero)).output->value, zero);
    // proj over [aerial, 0, (0, b2a)]
    std::vector<Tensor<double>> blocks{a, zero};
    if (bidirectional) {
      blocks.push_back(zero);
      blocks.push_back(f.b2a()(constant(zero), constant(a)).output->value);
    }
    Tensor<double> cat({8 * blocks.size(), 2, 2});
    for (std::size_t b = 0; b < blocks.size(); ++b)
      std::copy(blocks[b].vec().begin(), blocks[b].vec().end(), cat.vec().begin() + static_cast<long>(b * 32));
    const auto lin = pointwise(cat, f.projection());
    const auto out = f(constant(a), constant(zero))->value;
    for (std::size_t i = 0; i < out.size(); ++i)
      EXPECT_NEAR(out[i], static_cast<double>(lin[i] / (1 + std::exp(-lin[i]))), 1e-12);
  }
}

TEST(Fusion, MatchesComposedOracles) {
  ParamStore<double> ps(6);
  Fusion<double> f(ps, "f", 8, cfg(4, 7));
  randomize(ps, 3);
  const auto a = random_tensor<double>({8, 2, 2}, 11), b = random_tensor<double>({8, 2, 2}, 12);
  const auto a2b = attention_oracle(f.a2b(), a, b, 2, 2), b2a = attention_oracle(f.b2a(), b, a, 2, 2);
  std::vector<LD> cat;
  for (double v : a.vec()) cat.push_back(v);
  cat.insert(cat.end(), a2b.begin(), a2b.end());
  for (double v : b.vec()) cat.push_back(v);
  cat.insert(cat.end(), b2a.begin(), b2a.end());
  const auto lin = pointwise(cat, f.projection());
  const auto out = f(constant(a), constant(b))->value;
  for (std::size_t i = 0; i < out.size(); ++i)
    ASSERT_NEAR(out[i], static_cast<double>(lin[i] / (1 + std::exp(-lin[i]))), 1e-10);
}
