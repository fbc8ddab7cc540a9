#pragma once

// End-to-end network: BEV and aerial encoders, cross-modal fusion, likelihood
// (or regression) decoder and the two contrastive projection heads.

#include <map>
#include <sstream>
#include <string>

#include "xmodal/decoder.hpp"
#include "xmodal/encoders.hpp"
#include "xmodal/fusion.hpp"
#include "xmodal/objectives.hpp"

namespace xmodal {

struct ModelConfig {
  std::size_t tile_size = 64;
  std::size_t feature_dim = 32;
  std::size_t embed_dim = 64;
  std::size_t stem_channels = 8;
  std::array<std::size_t, 3> stage_channels{16, 32, 64};
  std::array<std::size_t, 5> decoder_channels{32, 32, 16, 16, 16};
  std::size_t bins = 36;
  std::size_t heads = 4;
  std::size_t rel_pos_window = 7;
  FusionMode fusion_mode = FusionMode::kCrossAttention;
  bool bidirectional = true;
  bool use_multiscale = true;  ///< BEV branch
  bool use_fourier = true;     ///< BEV branch
  bool use_refine_attention = true;
  DecoderMode decoder_mode = DecoderMode::kLikelihood;
  std::uint64_t init_seed = 0;

  BackboneConfig backbone(std::size_t in_channels, bool bev) const {
    BackboneConfig b;
    b.in_channels = in_channels;
    b.stem_channels = stem_channels;
    b.stage_channels = stage_channels;
    b.feature_dim = feature_dim;
    b.use_multiscale = bev ? use_multiscale : true;
    b.use_fourier = bev && use_fourier;
    b.use_refine_attention = use_refine_attention;
    return b;
  }

  AttentionConfig attention() const { return {heads, rel_pos_window, fusion_mode, bidirectional}; }

  DecoderConfig decoder() const { return {bins, decoder_mode, decoder_channels}; }
};

inline std::string to_string(FusionMode m) { return m == FusionMode::kConcat ? "concat" : "cross_attn"; }
inline std::string to_string(DecoderMode m) { return m == DecoderMode::kRegression ? "regression" : "likelihood"; }

inline FusionMode parse_fusion_mode(const std::string& s) {
  if (s == "cross_attn") return FusionMode::kCrossAttention;
  if (s == "concat") return FusionMode::kConcat;
  throw ValidationError("unknown fusion_mode '" + s + "' (expected cross_attn or concat)");
}

inline DecoderMode parse_decoder_mode(const std::string& s) {
  if (s == "likelihood") return DecoderMode::kLikelihood;
  if (s == "regression") return DecoderMode::kRegression;
  throw ValidationError("unknown decoder mode '" + s + "' (expected likelihood or regression)");
}

/// Network inputs for one sample.
template <typename T>
struct ModelInput {
  Tensor<T> aerial;  ///< {3, H, W}
  Tensor<T> bev;     ///< {1, H, W}
};

template <typename T>
ModelInput<T> make_input(const AerialTile& tile, const BevGrid& bev) {
  return {tile.values.template cast<T>(), bev.values.template cast<T>().reshaped({1, bev.height, bev.width})};
}

template <typename T>
class Model {
 public:
  explicit Model(const ModelConfig& cfg) : cfg_(cfg), params_(cfg.init_seed) {
    if (cfg.tile_size % BackboneConfig::kTotalStride)
      throw ValidationError("tile_size must be divisible by 32");
    bev_encoder_ = Encoder<T>(params_, "bev_enc", cfg.backbone(1, true));
    aerial_encoder_ = Encoder<T>(params_, "aer_enc", cfg.backbone(3, false));
    fusion_ = Fusion<T>(params_, "fusion", cfg.feature_dim, cfg.attention());
    const std::size_t stem = cfg.stem_channels;
    const std::array<std::size_t, 5> skips{cfg.stage_channels[1], cfg.stage_channels[0], 2 * stem, stem, 3};
    decoder_ = Decoder<T>(params_, "decoder", cfg.feature_dim, cfg.decoder(), skips);
    head_aerial_ = ProjectionHead<T>(params_, "proj_aerial", cfg.feature_dim, cfg.embed_dim);
    head_bev_ = ProjectionHead<T>(params_, "proj_bev", cfg.feature_dim, cfg.embed_dim);
  }

  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const ModelConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }
  const Encoder<T>& bev_encoder() const { return bev_encoder_; }
  const Encoder<T>& aerial_encoder() const { return aerial_encoder_; }
  const Fusion<T>& fusion() const { return fusion_; }
  const Decoder<T>& decoder() const { return decoder_; }

  SampleOutputs<T> forward(const ModelInput<T>& in) const { return forward(constant(in.aerial), constant(in.bev)); }

  SampleOutputs<T> forward(const Var<T>& aerial, const Var<T>& bev) const {
    const auto a = aerial_encoder_(aerial);
    const auto b = bev_encoder_(bev);
    const auto fused = fusion_(a.features, b.features);
    SampleOutputs<T> out;
    if (cfg_.decoder_mode == DecoderMode::kLikelihood)
      out.maps = decoder_.decode(fused, {a.s16, a.s8, a.s4, a.s2, aerial});
    else
      out.regression = decoder_.regress(fused);
    out.z_aerial = head_aerial_(a.features);
    out.z_bev = head_bev_(b.features);
    return out;
  }

 private:
  ModelConfig cfg_;
  ParamStore<T> params_;
  Encoder<T> bev_encoder_, aerial_encoder_;
  Fusion<T> fusion_;
  Decoder<T> decoder_;
  ProjectionHead<T> head_aerial_, head_bev_;
};

/// Pose from a regression-mode output.
template <typename T>
Pose regression_pose(const RegressionVars<T>& r, std::size_t height, std::size_t width, double ppm) {
  const double x = static_cast<double>(r.xy->value[0]) * static_cast<double>(width) / ppm;
  const double y = static_cast<double>(r.xy->value[1]) * static_cast<double>(height) / ppm;
  const double th = std::atan2(static_cast<double>(r.direction->value[1]), static_cast<double>(r.direction->value[0]));
  return Pose(x, y, th * 180.0 / std::numbers::pi);
}

}  // namespace xmodal
