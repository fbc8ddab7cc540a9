#include <gtest/gtest.h>

#include <cmath>
#include <complex>

#include "support.hpp"
#include "xmodal/fft.hpp"
#include "xmodal/gradcheck.hpp"
#include "xmodal/ops.hpp"

using namespace xmodal;
using xmodal::testing::random_tensor;

namespace {

Tensor<float> rot90(const Tensor<float>& x) {
  const std::size_t C = x.dim(0), n = x.dim(1);
  Tensor<float> out(x.shape());
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) out.at(c, i, j) = x.at(c, j, n - 1 - i);
  return out;
}

// rot90 of a centred spectrum about its DC cell (n/2, n/2).
Tensor<float> rot90_about_dc(const Tensor<float>& x) {
  const std::size_t C = x.dim(0), n = x.dim(1);
  Tensor<float> out(x.shape());
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) out.at(c, i, j) = x.at(c, j, (2 * n - i) % n);
  return out;
}

}  // namespace

TEST(Philox, DeterministicAndStreamSeparated) {
  Philox a(42, 1), b(42, 1), c(42, 2);
  for (int i = 0; i < 100; ++i) {
    const auto va = a.next_u64();
    EXPECT_EQ(va, b.next_u64());
    EXPECT_NE(va, c.next_u64());
  }
  Philox u(7);
  for (int i = 0; i < 1000; ++i) {
    const double v = u.uniform();
    ASSERT_GE(v, 0.0);
    ASSERT_LT(v, 1.0);
    ASSERT_LT(u.below(13), 13u);
  }
}

TEST(Autodiff, ChainAndFanOutAccumulate) {
  auto x = leaf(Tensor<double>({2}, {1.5, -2.0}));
  auto y = mul(x, x);           // x^2
  auto z = add(y, scale(x, 3.0));  // x^2 + 3x
  backward(weighted_sum(z, Tensor<double>({2}, {1.0, 1.0})));
  EXPECT_DOUBLE_EQ(x->grad[0], 2 * 1.5 + 3);
  EXPECT_DOUBLE_EQ(x->grad[1], 2 * -2.0 + 3);
}

TEST(Autodiff, NoGradGuardBuildsNoGraph) {
  auto x = leaf(Tensor<double>({1}, {2.0}));
  NoGradGuard guard;
  auto y = mul(x, x);
  EXPECT_TRUE(y->parents.empty());
  EXPECT_FALSE(y->requires_grad);
}

TEST(Ops, ConvolutionMatchesNaiveLoops) {
  const auto x = random_tensor<double>({3, 7, 6}, 1);
  const auto w = random_tensor<double>({4, 3, 3, 3}, 2);
  const auto b = random_tensor<double>({4}, 3);
  const auto y = conv2d(constant(x), constant(w), constant(b))->value;
  for (std::size_t o = 0; o < 4; ++o)
    for (long i = 0; i < 7; ++i)
      for (long j = 0; j < 6; ++j) {
        long double s = b[o];
        for (std::size_t c = 0; c < 3; ++c)
          for (long di = -1; di <= 1; ++di)
            for (long dj = -1; dj <= 1; ++dj) {
              const long ii = i + di, jj = j + dj;
              if (ii < 0 || jj < 0 || ii >= 7 || jj >= 6) continue;
              s += static_cast<long double>(w[((o * 3 + c) * 3 + static_cast<std::size_t>(di + 1)) * 3 +
                                              static_cast<std::size_t>(dj + 1)]) *
                   x.at(c, static_cast<std::size_t>(ii), static_cast<std::size_t>(jj));
            }
        ASSERT_NEAR(y.at(o, static_cast<std::size_t>(i), static_cast<std::size_t>(j)), static_cast<double>(s), 1e-12);
      }
}

TEST(Ops, ConvolutionWithoutBias) {
  const auto x = random_tensor<double>({2, 4, 4}, 4);
  const auto w = random_tensor<double>({3, 2, 1, 1}, 5);
  const auto y = conv2d(constant(x), constant(w), Var<double>{})->value;
  EXPECT_NEAR(y.at(1, 2, 3), w[2] * x.at(0, 2, 3) + w[3] * x.at(1, 2, 3), 1e-15);
}

TEST(Ops, SoftmaxVariantsNormalize) {
  const auto x = random_tensor<double>({5, 3, 4}, 6, -30, 30);
  const auto a = softmax_all(constant(x))->value;
  EXPECT_NEAR(a.sum(), 1.0, 1e-12);
  const auto c = softmax_channels(constant(x))->value;
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 4; ++j) {
      double s = 0;
      for (std::size_t k = 0; k < 5; ++k) s += c.at(k, i, j);
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
}

TEST(Ops, SiluIsSmoothAndBoundedSlope) {
  const auto x = random_tensor<double>({200}, 7, -50, 50);
  const auto y = silu(constant(x))->value;
  for (std::size_t i = 0; i < 200; ++i) {
    ASSERT_TRUE(std::isfinite(y[i]));
    ASSERT_NEAR(y[i], x[i] / (1 + std::exp(-x[i])), 1e-12);
  }
}

TEST(Ops, ShapeErrorsNameTheAxis) {
  auto x = constant(Tensor<double>({2, 5, 4}));
  try {
    avg_pool(x, 2);
    FAIL();
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("height"), std::string::npos);
  }
}

TEST(Fft, ConstantPlaneHasOnlyDc) {
  Tensor<double> x({1, 8, 6});
  x.fill(0.25);
  const auto y = fft_log_magnitude(x);
  for (std::size_t i = 0; i < 8; ++i)
    for (std::size_t j = 0; j < 6; ++j) {
      if (i == 4 && j == 3)
        EXPECT_NEAR(y.at(0, i, j), std::log(1 + 0.25 * 48), 1e-12);
      else
        EXPECT_NEAR(y.at(0, i, j), 0.0, 1e-12);
    }
}

TEST(Fft, MatchesDirectDftSum) {
  const auto x = random_tensor<double>({2, 5, 4}, 8);
  const auto y = fft_log_magnitude(x);
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t u = 0; u < 5; ++u)
      for (std::size_t v = 0; v < 4; ++v) {
        std::complex<long double> s = 0;
        for (std::size_t i = 0; i < 5; ++i)
          for (std::size_t j = 0; j < 4; ++j) {
            const long double ang = -2 * std::numbers::pi_v<long double> * (static_cast<long double>(u * i) / 5 +
                                                                           static_cast<long double>(v * j) / 4);
            s += static_cast<long double>(x.at(c, i, j)) * std::complex<long double>(std::cos(ang), std::sin(ang));
          }
        EXPECT_NEAR(y.at(c, (u + 2) % 5, (v + 2) % 4), static_cast<double>(std::log1p(std::abs(s))), 1e-12);
      }
}

TEST(Fft, ShiftAndHalfTurnInvariance) {
  const auto x = random_tensor<float>({3, 16, 16}, 9, 0, 1);
  Tensor<float> shifted(x.shape()), half(x.shape());
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < 16; ++i)
      for (std::size_t j = 0; j < 16; ++j) {
        shifted.at(c, (i + 3) % 16, (j + 5) % 16) = x.at(c, i, j);
        half.at(c, 15 - i, 15 - j) = x.at(c, i, j);
      }
  const auto a = fft_log_magnitude(x);
  EXPECT_LE(max_abs_diff(a, fft_log_magnitude(shifted)), 1e-5f);
  EXPECT_LE(max_abs_diff(a, fft_log_magnitude(half)), 1e-5f);
}

TEST(Fft, QuarterTurnEquivariance) {
  const auto x = random_tensor<float>({2, 16, 16}, 10, 0, 1);
  const auto lhs = fft_log_magnitude(rot90(x));
  const auto rhs = rot90_about_dc(fft_log_magnitude(x));
  EXPECT_LE(max_abs_diff(lhs, rhs), 1e-5f);
}

TEST(GradCheck, LinearIsExact) {
  const auto r = gradient_check("linear", 0);
  EXPECT_GE(r.coordinates, 200u);
  EXPECT_LT(r.max_rel_error, 1e-9);
}

TEST(GradCheck, CorruptedBackwardIsDetected) {
  EXPECT_GT(gradient_check("corrupted", 0).max_rel_error, 1e-2);
}

TEST(GradCheck, FastModulesPass) {
  for (const char* m : {"fft", "attention", "projection", "soft_argmax", "loss_loc", "loss_ori", "loss_reg",
                        "loss_contrastive", "loss_conf"}) {
    const auto r = gradient_check(m, 1);
    EXPECT_GE(r.coordinates, 200u) << m;
    EXPECT_LT(r.max_rel_error, 1e-4) << m << " worst " << r.worst;
  }
}

TEST(GradCheck, UnknownModuleThrows) { EXPECT_THROW(gradient_check("nope", 0), ValidationError); }
