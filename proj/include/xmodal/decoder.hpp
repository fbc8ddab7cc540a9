#pragma once

// U-Net style likelihood decoder, pose extraction and soft-argmax.

#include <cmath>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

#include "xmodal/geometry.hpp"
#include "xmodal/layers.hpp"

namespace xmodal {

enum class DecoderMode { kLikelihood, kRegression };

struct DecoderConfig {
  std::size_t bins = 36;
  DecoderMode mode = DecoderMode::kLikelihood;
  /// Output channels of the five upsampling levels (1/16 .. 1/1).
  std::array<std::size_t, 5> channels{32, 32, 16, 16, 16};

  void validate() const {
    if (bins < 2) throw ValidationError("decoder needs at least two orientation bins");
    for (auto c : channels)
      if (c == 0) throw ValidationError("decoder channels must be positive");
  }
};

/// Normalised decoder outputs, as graph nodes.
template <typename T>
struct LikelihoodVars {
  Var<T> loc;         ///< {H, W}, sums to 1
  Var<T> ori;         ///< {K, H, W}, each column sums to 1
  Var<T> confidence;  ///< {1}, in [0, 1]
};

/// Direct regression outputs: position as tile fractions, unit heading vector.
template <typename T>
struct RegressionVars {
  Var<T> xy;          ///< {2}, (x / width, y / height) in (0, 1)
  Var<T> direction;   ///< {2}, (cos, sin)
  Var<T> confidence;  ///< {1}
};

/// Plain-value likelihood maps for pose extraction and export.
struct LikelihoodMaps {
  Tensor<double> loc;  ///< {H, W}
  Tensor<double> ori;  ///< {K, H, W}
  double confidence = 0;

  std::size_t height() const { return loc.dim(0); }
  std::size_t width() const { return loc.dim(1); }
  std::size_t bins() const { return ori.dim(0); }
};

template <typename T>
LikelihoodMaps to_maps(const LikelihoodVars<T>& v) {
  return {v.loc->value.template cast<double>(), v.ori->value.template cast<double>(),
          static_cast<double>(v.confidence->value[0])};
}

struct PoseEstimate {
  Pose pose;
  Cell cell;
  std::size_t bin = 0;
  double confidence = 0;
  Tensor<double> loc_map;
  std::vector<double> ori_slice;
};

template <typename T>
class Decoder {
 public:
  Decoder() = default;
  /// `skip_channels[l]` is the channel count of the skip map concatenated at
  /// level l (1/16, 1/8, 1/4, 1/2, 1/1), 0 when that level has none.
  Decoder(ParamStore<T>& ps, const std::string& name, std::size_t dim, const DecoderConfig& cfg,
          const std::array<std::size_t, 5>& skip_channels)
      : cfg_(cfg), skip_channels_(skip_channels) {
    cfg.validate();
    const std::size_t hidden = std::max<std::size_t>(dim / 2, 1);
    conf_fc1_ = Dense<T>(ps, name + ".conf_fc1", dim, hidden);
    conf_fc2_ = Dense<T>(ps, name + ".conf_fc2", hidden, 1);
    if (cfg.mode == DecoderMode::kRegression) {
      reg_fc1_ = Dense<T>(ps, name + ".reg_fc1", dim, dim);
      reg_fc2_ = Dense<T>(ps, name + ".reg_fc2", dim, 4);
      return;
    }
    std::size_t in = dim;
    for (std::size_t l = 0; l < 5; ++l) {
      ups_[l] = Conv<T>(ps, name + ".up" + std::to_string(l + 1), in + skip_channels[l], cfg.channels[l], 3);
      in = cfg.channels[l];
    }
    loc_head_ = Conv<T>(ps, name + ".loc_head", in, 1, 1);
    ori_head_ = Conv<T>(ps, name + ".ori_head", in, cfg.bins, 1);
  }

  const DecoderConfig& config() const { return cfg_; }

  /// fused: D x h x w at 1/32. skips[l] may be null where no skip exists.
  LikelihoodVars<T> decode(const Var<T>& fused, const std::array<Var<T>, 5>& skips) const {
    if (cfg_.mode != DecoderMode::kLikelihood) throw ValidationError("decoder is in regression mode");
    Var<T> x = fused;
    for (std::size_t l = 0; l < 5; ++l) {
      x = upsample2(x);
      if (skip_channels_[l]) {
        if (!skips[l]) throw ShapeError("decoder: missing skip map at level " + std::to_string(l + 1));
        const auto& ss = skips[l]->shape();
        if (ss[0] != skip_channels_[l]) throw ShapeError("decoder: skip channel axis mismatch at level " + std::to_string(l + 1));
        if (ss[1] != x->shape()[1]) throw ShapeError("decoder: skip height axis mismatch at level " + std::to_string(l + 1));
        if (ss[2] != x->shape()[2]) throw ShapeError("decoder: skip width axis mismatch at level " + std::to_string(l + 1));
        x = concat<T>({x, skips[l]});
      }
      x = silu(ups_[l](x));
    }
    const std::size_t H = x->shape()[1], W = x->shape()[2];
    LikelihoodVars<T> out;
    out.loc = reshape(softmax_all(loc_head_(x)), {H, W});
    out.ori = softmax_channels(ori_head_(x));
    out.confidence = confidence(fused);
    return out;
  }

  RegressionVars<T> regress(const Var<T>& fused) const {
    if (cfg_.mode != DecoderMode::kRegression) throw ValidationError("decoder is in likelihood mode");
    auto o = reg_fc2_(silu(reg_fc1_(global_avg_pool(fused))));
    return {sigmoid(slice(o, 0, 2)), l2_normalize(slice(o, 2, 2)), confidence(fused)};
  }

  Var<T> confidence(const Var<T>& fused) const {
    return sigmoid(conf_fc2_(silu(conf_fc1_(global_avg_pool(fused)))));
  }

 private:
  DecoderConfig cfg_;
  std::array<std::size_t, 5> skip_channels_{};
  std::array<Conv<T>, 5> ups_;
  Conv<T> loc_head_, ori_head_;
  Dense<T> conf_fc1_, conf_fc2_;
  Dense<T> reg_fc1_, reg_fc2_;
};

/// Hard argmax over the location map, then over the orientation column at
/// that cell. Ties resolve to the first row-major cell, then the lowest bin.
inline PoseEstimate extract_pose_argmax(const LikelihoodMaps& maps, double pixels_per_meter) {
  const std::size_t H = maps.height(), W = maps.width(), K = maps.bins();
  std::size_t best = 0;
  for (std::size_t i = 1; i < H * W; ++i)
    if (maps.loc[i] > maps.loc[best]) best = i;
  const Cell cell{best / W, best % W};
  std::vector<double> slice(K);
  std::size_t bin = 0;
  for (std::size_t k = 0; k < K; ++k) {
    slice[k] = maps.ori.at(k, cell.row, cell.col);
    if (slice[k] > slice[bin]) bin = k;
  }
  PoseEstimate est;
  est.pose = Pose((static_cast<double>(cell.col) + 0.5) / pixels_per_meter,
                  (static_cast<double>(cell.row) + 0.5) / pixels_per_meter, bin_center_degrees(bin, K));
  est.cell = cell;
  est.bin = bin;
  est.confidence = maps.confidence;
  est.loc_map = maps.loc;
  est.ori_slice = std::move(slice);
  return est;
}

/// Expected (col, row) cell-index coordinates under loc^(1/temperature),
/// renormalised. Returns {2} = (x_soft, y_soft).
template <typename T>
Var<T> soft_argmax(const Var<T>& loc, T temperature) {
  detail::expect_rank(loc->shape(), 2, "soft_argmax");
  if (!(temperature > 0)) throw ValidationError("soft_argmax temperature must be positive");
  const std::size_t H = loc->shape()[0], W = loc->shape()[1];
  const T a = T(1) / temperature;
  const T floor = std::numeric_limits<T>::min();
  std::vector<T> q(H * W);
  T mx = -std::numeric_limits<T>::infinity();
  for (std::size_t i = 0; i < H * W; ++i) mx = std::max(mx, q[i] = a * std::log(std::max(loc->value[i], floor)));
  T z = 0;
  for (auto& v : q) z += (v = std::exp(v - mx));
  T ex = 0, ey = 0;
  for (std::size_t i = 0; i < H * W; ++i) {
    q[i] /= z;
    ex += q[i] * static_cast<T>(i % W);
    ey += q[i] * static_cast<T>(i / W);
  }
  return make_op<T>(Tensor<T>({2}, std::vector<T>{ex, ey}), {loc},
                    [=, q = std::move(q)](Node<T>& n) {
    auto& p = n.parents[0];
    auto& g = p->grad_buffer();
    const T gx = n.grad[0], gy = n.grad[1];
    const T ex = n.value[0], ey = n.value[1];
    for (std::size_t i = 0; i < H * W; ++i) {
      const T pv = p->value[i];
      if (pv <= floor) continue;  // clamped region: locally constant
      // d out / d l_i = q_i (coord_i - E[coord]); d l_i / d p_i = a / p_i
      const T dl = q[i] * (gx * (static_cast<T>(i % W) - ex) + gy * (static_cast<T>(i / W) - ey));
      g[i] += dl * a / pv;
    }
  });
}

}  // namespace xmodal
