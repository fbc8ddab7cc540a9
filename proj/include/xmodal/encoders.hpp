#pragma once

// Convolutional backbone shared (architecturally) by the BEV and aerial
// branches. Two stride-2 stem stages reach 1/4, then three residual stages
// each end in a stride-2 pool, giving features at 1/8, 1/16 and 1/32.

#include <array>
#include <string>
#include <vector>

#include "xmodal/fft.hpp"
#include "xmodal/layers.hpp"

namespace xmodal {

struct BackboneConfig {
  std::size_t in_channels = 3;
  std::size_t stem_channels = 8;
  std::array<std::size_t, 3> stage_channels{16, 32, 64};
  std::size_t feature_dim = 32;
  bool use_multiscale = true;
  bool use_fourier = false;
  bool use_refine_attention = true;

  static constexpr std::size_t kTotalStride = 32;

  void validate() const {
    if (feature_dim == 0) throw ValidationError("feature_dim must be positive");
    if (stem_channels == 0) throw ValidationError("stem_channels must be positive");
    for (auto c : stage_channels)
      if (c == 0) throw ValidationError("stage channels must be positive");
  }
};

/// Backbone outputs. `features` is D x H/32 x W/32; the remaining maps are
/// the intermediate scales, exposed as decoder skip connections.
template <typename T>
struct EncoderOutput {
  Var<T> features;
  Var<T> s2, s4, s8, s16, s32;
};

/// Pools the 1/8 and 1/16 maps to 1/32, concatenates with the 1/32 map and
/// projects with a 1x1 convolution. Requires a 4:2:1 spatial ratio.
template <typename T>
Var<T> multiscale_fuse(const Var<T>& s8, const Var<T>& s16, const Var<T>& s32, const Conv<T>& proj) {
  for (std::size_t axis = 1; axis <= 2; ++axis) {
    const char* name = axis == 1 ? "height" : "width";
    if (s16->shape().at(axis) != 2 * s32->shape().at(axis) || s8->shape().at(axis) != 4 * s32->shape().at(axis))
      throw ShapeError(std::string("multiscale_fuse: ") + name + " axis is not in 4:2:1 ratio");
  }
  return proj(concat<T>({avg_pool(s8, 4), avg_pool(s16, 2), s32}));
}

template <typename T>
struct ResidualStage {
  Conv<T> conv1, conv2, skip;
  Affine<T> norm;
  bool project_skip = false;

  ResidualStage() = default;
  ResidualStage(ParamStore<T>& ps, const std::string& name, std::size_t in, std::size_t out)
      : conv1(ps, name + ".conv1", in, out, 3, false),  // a bias here is cancelled by the norm
        conv2(ps, name + ".conv2", out, out, 3),
        norm(ps, name + ".norm", out),
        project_skip(in != out) {
    if (project_skip) skip = Conv<T>(ps, name + ".skip", in, out, 1);
  }

  /// conv -> norm -> act -> conv -> residual add -> 2x pool
  Var<T> operator()(const Var<T>& x) const {
    auto h = silu(channel_norm(conv1(x), norm.gamma, norm.beta));
    h = add(conv2(h), project_skip ? skip(x) : x);
    return avg_pool(h, 2);
  }
};

template <typename T>
class Encoder {
 public:
  Encoder() = default;
  Encoder(ParamStore<T>& ps, const std::string& name, const BackboneConfig& cfg) : cfg_(cfg) {
    cfg.validate();
    const auto& sc = cfg.stage_channels;
    const std::size_t D = cfg.feature_dim;
    stem1_ = Conv<T>(ps, name + ".stem1", cfg.in_channels, cfg.stem_channels, 3);
    stem2_ = Conv<T>(ps, name + ".stem2", cfg.stem_channels, cfg.stem_channels * 2, 3);
    stages_[0] = ResidualStage<T>(ps, name + ".stage1", cfg.stem_channels * 2, sc[0]);
    stages_[1] = ResidualStage<T>(ps, name + ".stage2", sc[0], sc[1]);
    stages_[2] = ResidualStage<T>(ps, name + ".stage3", sc[1], sc[2]);
    const std::size_t fuse_in = cfg.use_multiscale ? sc[0] + sc[1] + sc[2] : sc[2];
    fuse_ = Conv<T>(ps, name + ".fuse", fuse_in, D, 1);
    if (cfg.use_refine_attention) {
      spatial_gate_ = Conv<T>(ps, name + ".spatial_gate", 2, 1, 3);
      const std::size_t hidden = std::max<std::size_t>(D / 4, 1);
      channel_fc1_ = Dense<T>(ps, name + ".channel_fc1", D, hidden);
      channel_fc2_ = Dense<T>(ps, name + ".channel_fc2", hidden, D);
    }
    if (cfg.use_fourier) fourier_proj_ = Conv<T>(ps, name + ".fourier_proj", 2 * D, D, 1);
  }

  const BackboneConfig& config() const { return cfg_; }

  EncoderOutput<T> operator()(const Var<T>& input) const {
    const auto& s = input->shape();
    if (s.size() != 3) throw ShapeError("encoder input must be {C,H,W}, got " + shape_str(s));
    if (s[0] != cfg_.in_channels)
      throw ShapeError("encoder channel axis: expected " + std::to_string(cfg_.in_channels) + ", got " +
                       std::to_string(s[0]));
    if (s[1] % BackboneConfig::kTotalStride)
      throw ShapeError("encoder height axis: " + std::to_string(s[1]) + " is not divisible by 32");
    if (s[2] % BackboneConfig::kTotalStride)
      throw ShapeError("encoder width axis: " + std::to_string(s[2]) + " is not divisible by 32");

    EncoderOutput<T> out;
    out.s2 = avg_pool(silu(stem1_(input)), 2);
    out.s4 = avg_pool(silu(stem2_(out.s2)), 2);
    out.s8 = stages_[0](out.s4);
    out.s16 = stages_[1](out.s8);
    out.s32 = stages_[2](out.s16);
    out.features = cfg_.use_multiscale ? multiscale_fuse(out.s8, out.s16, out.s32, fuse_) : fuse_(out.s32);
    if (cfg_.use_refine_attention) out.features = refine(out.features);
    if (cfg_.use_fourier)
      out.features = fourier_proj_(concat<T>({out.features, fft_log_magnitude(out.features)}));
    return out;
  }

  /// Spatial gate from channel statistics, then channel gate from pooled features.
  Var<T> refine(const Var<T>& x) const {
    auto h = gate_spatial(x, sigmoid(spatial_gate_(channel_stats(x))));
    auto g = sigmoid(channel_fc2_(silu(channel_fc1_(global_avg_pool(h)))));
    return gate_channel(h, g);
  }

 private:
  BackboneConfig cfg_;
  Conv<T> stem1_, stem2_;
  std::array<ResidualStage<T>, 3> stages_;
  Conv<T> fuse_;
  Conv<T> spatial_gate_;
  Dense<T> channel_fc1_, channel_fc2_;
  Conv<T> fourier_proj_;
};

}  // namespace xmodal
