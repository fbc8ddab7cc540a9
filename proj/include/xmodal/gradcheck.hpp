#pragma once

// Central finite-difference verification of the hand-written backward passes.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "xmodal/model.hpp"
#include "xmodal/synthdata.hpp"

namespace xmodal {

struct GradCheckReport {
  std::string module;
  std::size_t coordinates = 0;
  double max_rel_error = 0;
  std::string worst;  ///< "<tensor>[<index>]" of the largest error
};

struct GradCheckOptions {
  std::size_t coordinates = 256;
  double h = 1e-5;
  double denominator_floor = 1e-8;
};

/// Named leaves plus a scalar objective built from them.
template <typename T>
struct Fixture {
  std::vector<std::pair<std::string, Var<T>>> leaves;
  std::function<Var<T>()> objective;
};

using GradCheckFixture = Fixture<double>;

/// Compares the 64-bit backward() of `fx` against (f(x+h) - f(x-h)) / 2h on
/// distinct randomly chosen coordinates across all leaves. Relative error is
/// |a - n| / max(|a|, |n|, floor).
///
/// The difference quotient is taken on `reference`, the same fixture built
/// in extended precision: in 64-bit, rounding of f alone contributes about
/// 1e-16 |f| / h to the quotient, which swamps small but genuine gradient
/// components.
template <typename R>
GradCheckReport check_gradients(const std::string& name, const Fixture<double>& fx, const Fixture<R>& reference,
                                std::uint64_t seed, const GradCheckOptions& opt = {}) {
  if (reference.leaves.size() != fx.leaves.size()) throw ValidationError("gradient check: fixture mismatch");
  for (const auto& [n, v] : fx.leaves) {
    v->requires_grad = true;
    v->zero_grad();
  }
  backward(fx.objective());

  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t l = 0; l < fx.leaves.size(); ++l)
    for (std::size_t i = 0; i < fx.leaves[l].second->value.size(); ++i) coords.emplace_back(l, i);
  Philox rng(seed, 0x6C);
  const std::size_t count = std::min(opt.coordinates, coords.size());
  for (std::size_t i = 0; i < count; ++i) std::swap(coords[i], coords[i + rng.below(coords.size() - i)]);

  GradCheckReport rep;
  rep.module = name;
  rep.coordinates = count;
  NoGradGuard guard;
  for (std::size_t c = 0; c < count; ++c) {
    const auto [l, i] = coords[c];
    const auto& node = *fx.leaves[l].second;
    auto& ref = *reference.leaves[l].second;
    const double analytic = node.grad.size() ? node.grad[i] : 0.0;
    const R x0 = ref.value[i];
    ref.value[i] = x0 + static_cast<R>(opt.h);
    const R fp = reference.objective()->value[0];
    ref.value[i] = x0 - static_cast<R>(opt.h);
    const R fm = reference.objective()->value[0];
    ref.value[i] = x0;
    const double numeric = static_cast<double>((fp - fm) / (2 * static_cast<R>(opt.h)));
    const double denom = std::max({std::abs(analytic), std::abs(numeric), opt.denominator_floor});
    const double err = std::abs(analytic - numeric) / denom;
    if (err > rep.max_rel_error || rep.worst.empty()) {
      rep.max_rel_error = std::max(rep.max_rel_error, err);
      rep.worst = fx.leaves[l].first + "[" + std::to_string(i) + "]";
    }
  }
  for (const auto& [n, v] : fx.leaves) v->zero_grad();
  return rep;
}

/// Same, with the difference quotient evaluated on `fx` itself.
inline GradCheckReport check_gradients(const std::string& name, const Fixture<double>& fx, std::uint64_t seed,
                                       const GradCheckOptions& opt = {}) {
  return check_gradients(name, fx, fx, seed, opt);
}

namespace detail {

template <typename T>
Var<T> random_leaf(Philox& rng, Shape shape, double lo = -1, double hi = 1) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.vec()) v = static_cast<T>(rng.uniform(lo, hi));
  return leaf(std::move(t), true);
}

/// Scalarizes a set of outputs with fixed random projections.
template <typename T>
struct Scalarizer {
  std::vector<Tensor<T>> weights;

  Var<T> operator()(Philox* rng, const std::vector<Var<T>>& outs) {
    if (weights.empty())
      for (const auto& o : outs) {
        Tensor<T> w(o->shape());
        for (auto& v : w.vec()) v = static_cast<T>(rng->uniform(-1, 1));
        weights.push_back(std::move(w));
      }
    std::vector<Var<T>> parts;
    for (std::size_t i = 0; i < outs.size(); ++i) parts.push_back(weighted_sum(outs[i], weights[i]));
    return combine(parts, std::vector<T>(parts.size(), T(1)));
  }
};

/// Reduced network used by the module fixtures.
inline ModelConfig gradcheck_model_config() {
  ModelConfig c;
  c.tile_size = 32;
  c.feature_dim = 8;
  c.embed_dim = 8;
  c.stem_channels = 3;
  c.stage_channels = {4, 6, 8};
  c.decoder_channels = {6, 6, 4, 4, 3};
  c.bins = 8;
  c.heads = 2;
  c.rel_pos_window = 2;
  return c;
}

/// Keeps whatever owns the fixture's layers alive inside its objective.
template <typename T, typename Owner>
Fixture<T> own(std::shared_ptr<Owner> owner, Fixture<T> fx) {
  auto inner = std::move(fx.objective);
  fx.objective = [owner, inner] { return inner(); };
  return fx;
}

template <typename T>
void add_params(Fixture<T>& fx, const ParamStore<T>& ps) {
  for (const auto& e : ps.entries()) fx.leaves.emplace_back(e.name, e.var);
}

}  // namespace detail

/// Selectors accepted by gradient_check.
inline std::vector<std::string> gradcheck_modules() {
  return {"linear",         "fft",           "bev_encoder",  "aerial_encoder",    "attention",
          "fusion",         "fusion_concat", "decoder",      "decoder_regression", "projection",
          "soft_argmax",    "loss_loc",      "loss_ori",     "loss_reg",          "loss_contrastive",
          "loss_conf",      "loss_regression_mode",          "pipeline",          "pipeline_regression"};
}

/// Builds the fixture for one selector. "corrupted" is the fault-injection
/// fixture: a linear map whose backward pass is deliberately scaled wrong.
template <typename T>
Fixture<T> make_gradcheck_fixture(const std::string& module, std::uint64_t seed) {
  auto random_leaf = [](Philox& r, Shape shape, double lo = -1, double hi = 1) {
    return detail::random_leaf<T>(r, std::move(shape), lo, hi);
  };
  Philox rng(seed, 0x6F);
  auto scal = std::make_shared<detail::Scalarizer<T>>();
  auto rng_ptr = std::make_shared<Philox>(Philox::mix(seed, 1), 0x70);
  auto scalarize = [scal, rng_ptr](const std::vector<Var<T>>& outs) { return (*scal)(rng_ptr.get(), outs); };
  Fixture<T> fx;
  const ModelConfig mc = detail::gradcheck_model_config();

  if (module == "linear" || module == "corrupted") {
    auto ps = std::make_shared<ParamStore<T>>(seed);
    auto fc = std::make_shared<Dense<T>>(*ps, "toy", 16, 12);
    auto x = random_leaf(rng, {16});
    fx.leaves = {{"x", x}};
    detail::add_params(fx, *ps);
    const bool corrupt = module == "corrupted";
    fx.objective = [=] {
      auto y = (*fc)(x);
      if (corrupt)
        y = make_op<T>(y->value, {y}, [](Node<T>& n) {
          auto& g = n.parents[0]->grad_buffer();
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += T(1.5) * n.grad[i];
        });
      return scalarize({y});
    };
    return detail::own(ps, fx);
  }
  if (module == "fft") {
    auto x = random_leaf(rng, {4, 8, 8});
    fx.leaves = {{"x", x}};
    fx.objective = [=] { return scalarize({fft_log_magnitude(x)}); };
    return fx;
  }
  if (module == "bev_encoder" || module == "aerial_encoder") {
    const bool bev = module == "bev_encoder";
    auto ps = std::make_shared<ParamStore<T>>(seed);
    auto enc = std::make_shared<Encoder<T>>(*ps, module, mc.backbone(bev ? 1 : 3, bev));
    auto x = random_leaf(rng, {bev ? 1u : 3u, 32, 32}, 0, 1);
    fx.leaves = {{"input", x}};
    detail::add_params(fx, *ps);
    fx.objective = [=] {
      const auto o = (*enc)(x);
      if (bev) return scalarize({o.features});
      return scalarize({o.features, o.s16, o.s8, o.s4, o.s2});
    };
    return detail::own(enc, detail::own(ps, fx));
  }
  if (module == "attention") {
    const std::size_t D = 8, heads = 2, w = 2;
    auto q = random_leaf(rng, {D, 3, 3}), k = random_leaf(rng, {D, 3, 3}), v = random_leaf(rng, {D, 3, 3});
    auto table = random_leaf(rng, {heads, 2 * w + 1, 2 * w + 1});
    fx.leaves = {{"q", q}, {"k", k}, {"v", v}, {"rel_pos", table}};
    fx.objective = [=] { return scalarize({attention_core(q, k, v, table, heads).output}); };
    return fx;
  }
  if (module == "fusion" || module == "fusion_concat") {
    auto ps = std::make_shared<ParamStore<T>>(seed);
    auto cfg = mc.attention();
    if (module == "fusion_concat") cfg.fusion_mode = FusionMode::kConcat;
    auto fusion = std::make_shared<Fusion<T>>(*ps, "fusion", mc.feature_dim, cfg);
    // Nonzero relative-position tables so their gradient paths are exercised.
    for (const auto& e : ps->entries())
      if (e.name.find("rel_pos") != std::string::npos)
        for (auto& val : e.var->value.vec()) val = static_cast<T>(rng.uniform(-0.5, 0.5));
    auto a = random_leaf(rng, {mc.feature_dim, 3, 3}), b = random_leaf(rng, {mc.feature_dim, 3, 3});
    fx.leaves = {{"aerial", a}, {"bev", b}};
    detail::add_params(fx, *ps);
    fx.objective = [=] { return scalarize({(*fusion)(a, b)}); };
    return detail::own(fusion, detail::own(ps, fx));
  }
  if (module == "decoder" || module == "decoder_regression") {
    auto ps = std::make_shared<ParamStore<T>>(seed);
    auto dcfg = mc.decoder();
    if (module == "decoder_regression") dcfg.mode = DecoderMode::kRegression;
    const std::array<std::size_t, 5> skips{6, 4, 6, 3, 3};
    auto dec = std::make_shared<Decoder<T>>(*ps, "decoder", mc.feature_dim, dcfg, skips);
    // 4x4 fused grid for regression (global pooled), 1x1 for the U-Net path.
    const std::size_t side0 = dcfg.mode == DecoderMode::kRegression ? 4 : 1;
    auto fused = random_leaf(rng, {mc.feature_dim, side0, side0});
    std::array<Var<T>, 5> sk;
    for (std::size_t l = 0; l < 5; ++l) {
      const std::size_t side = std::size_t{2} << l;
      sk[l] = random_leaf(rng, {skips[l], side, side});
    }
    fx.leaves = {{"fused", fused}};
    if (dcfg.mode == DecoderMode::kLikelihood)
      for (std::size_t l = 0; l < 5; ++l) fx.leaves.emplace_back("skip" + std::to_string(l), sk[l]);
    detail::add_params(fx, *ps);
    fx.objective = [=] {
      if (dcfg.mode == DecoderMode::kRegression) {
        const auto r = dec->regress(fused);
        return scalarize({r.xy, r.direction, r.confidence});
      }
      const auto m = dec->decode(fused, sk);
      // Scale the location map up so its entries are not negligible.
      return scalarize({scale(m.loc, T(1000)), m.ori, m.confidence});
    };
    return detail::own(dec, detail::own(ps, fx));
  }
  if (module == "projection") {
    auto ps = std::make_shared<ParamStore<T>>(seed);
    auto head = std::make_shared<ProjectionHead<T>>(*ps, "proj", mc.feature_dim, mc.embed_dim);
    auto f = random_leaf(rng, {mc.feature_dim, 4, 4});
    fx.leaves = {{"features", f}};
    detail::add_params(fx, *ps);
    fx.objective = [=] { return scalarize({(*head)(f)}); };
    return detail::own(head, detail::own(ps, fx));
  }
  if (module == "soft_argmax") {
    auto logits = random_leaf(rng, {1, 16, 16}, -3, 3);
    fx.leaves = {{"logits", logits}};
    fx.objective = [=] {
      auto p = reshape(softmax_all(logits), {16, 16});
      return scalarize({soft_argmax(p, T(0.5))});
    };
    return fx;
  }
  if (module == "loss_loc") {
    auto logits = random_leaf(rng, {1, 16, 16}, -2, 2);
    AerialTile tile(16, 16, 1.0);
    const auto target =
        make_location_target(Pose(rng.uniform(2, 14), rng.uniform(2, 14), 0), tile, 1.5).template cast<T>();
    fx.leaves = {{"logits", logits}};
    fx.objective = [=] { return kl_divergence_loss(reshape(softmax_all(logits), {16, 16}), target); };
    return fx;
  }
  if (module == "loss_reg") {
    auto logits = random_leaf(rng, {1, 16, 16}, -2, 2);
    fx.leaves = {{"logits", logits}};
    // Near-uniform maps put the estimate near (8, 8): the x residual falls in
    // the quadratic branch, the y residual in the linear one.
    fx.objective = [=] {
      auto xy = soft_argmax(reshape(softmax_all(logits), {16, 16}), T(1));
      auto offset = constant(Tensor<T>({2}, std::vector<T>{T(0.5), T(0.5)}));
      return huber_regression_loss(add(xy, offset), std::vector<T>{T(7.75), T(10.9)}, T(1));
    };
    return fx;
  }
  if (module == "loss_ori") {
    auto logits = random_leaf(rng, {8, 5, 5}, -2, 2);
    std::vector<Tensor<T>> targets;
    for (std::size_t i = 0; i < 25; ++i) {
      const auto t = make_orientation_target(rng.uniform(0, 360), 8, 1.0);
      targets.emplace_back(Shape{8}, std::vector<T>(t.begin(), t.end()));
    }
    fx.leaves = {{"logits", logits}};
    fx.objective = [=] {
      auto probs = softmax_channels(logits);
      std::vector<Var<T>> terms;
      for (std::size_t i = 0; i < 25; ++i) terms.push_back(kl_divergence_loss(column_at(probs, i / 5, i % 5), targets[i]));
      return combine(terms, std::vector<T>(terms.size(), T(1)));
    };
    return fx;
  }
  if (module == "loss_contrastive") {
    const std::size_t B = 6, dim = 40;
    std::vector<Var<T>> ra, rb;
    for (std::size_t i = 0; i < B; ++i) {
      ra.push_back(random_leaf(rng, {dim}));
      rb.push_back(random_leaf(rng, {dim}));
      fx.leaves.emplace_back("za" + std::to_string(i), ra.back());
      fx.leaves.emplace_back("zb" + std::to_string(i), rb.back());
    }
    fx.objective = [=] {
      std::vector<Var<T>> za, zb;
      for (std::size_t i = 0; i < B; ++i) {
        za.push_back(l2_normalize(ra[i]));
        zb.push_back(l2_normalize(rb[i]));
      }
      return infonce_loss(za, zb, 0.5, 3, true);
    };
    return fx;
  }
  if (module == "loss_conf") {
    auto logits = random_leaf(rng, {256}, -3, 3);
    std::vector<T> labels(256);
    for (auto& l : labels) l = rng.bernoulli(0.5) ? T(1) : T(0);
    fx.leaves = {{"logits", logits}};
    fx.objective = [=] {
      auto p = sigmoid(logits);
      std::vector<Var<T>> terms;
      for (std::size_t i = 0; i < 256; ++i) terms.push_back(bce_loss(slice(p, i, 1), labels[i]));
      return combine(terms, std::vector<T>(terms.size(), T(1) / 256));
    };
    return fx;
  }
  if (module == "loss_regression_mode") {
    const std::size_t B = 48;
    std::vector<SampleOutputs<T>> raw(B);
    std::vector<SampleTargets<T>> targets;
    AerialTile tile(32, 32, 1.0);
    for (std::size_t b = 0; b < B; ++b) {
      raw[b].regression = RegressionVars<T>{random_leaf(rng, {2}), random_leaf(rng, {2}), random_leaf(rng, {1})};
      fx.leaves.emplace_back("xy" + std::to_string(b), raw[b].regression->xy);
      fx.leaves.emplace_back("dir" + std::to_string(b), raw[b].regression->direction);
      fx.leaves.emplace_back("conf" + std::to_string(b), raw[b].regression->confidence);
      targets.push_back(make_targets<T>(Pose(rng.uniform(0, 32), rng.uniform(0, 32), rng.uniform(0, 360)), tile,
                                             8, 2.0, 1.0));
    }
    LossWeights w;
    w.use_contrastive = false;
    fx.objective = [=] {
      std::vector<SampleOutputs<T>> outs(B);
      for (std::size_t b = 0; b < B; ++b) {
        const auto& r = *raw[b].regression;
        outs[b].regression = RegressionVars<T>{sigmoid(r.xy), l2_normalize(r.direction), sigmoid(r.confidence)};
      }
      return total_loss(outs, targets, w).value;
    };
    return fx;
  }
  if (module == "pipeline" || module == "pipeline_regression") {
    ModelConfig cfg = mc;
    cfg.init_seed = seed;
    if (module != "pipeline") cfg.decoder_mode = DecoderMode::kRegression;
    auto model = std::make_shared<Model<T>>(cfg);
    std::vector<Var<T>> aer, bev;
    std::vector<SampleTargets<T>> targets;
    for (std::size_t b = 0; b < 3; ++b) {
      SceneSpec sp;
      sp.seed = Philox::mix(seed, 100 + b);
      sp.tile_size = 32;
      sp.n_buildings = 3;
      sp.n_roads = 1;
      const Scene scene = generate_scene(sp);
      const BevGrid grid = project_to_bev(scene.cloud, BevOptions{32, 32, 1.0, 0.3, 3.0});
      const auto in = make_input<T>(scene.tile, grid);
      aer.push_back(leaf(in.aerial, true));
      bev.push_back(leaf(in.bev, true));
      fx.leaves.emplace_back("aerial" + std::to_string(b), aer.back());
      fx.leaves.emplace_back("bev" + std::to_string(b), bev.back());
      targets.push_back(make_targets<T>(scene.gt_pose, scene.tile, cfg.bins, 2.0, 1.0));
    }
    detail::add_params(fx, model->params());
    LossWeights w;
    w.tau = 0.5;
    fx.objective = [=] {
      std::vector<SampleOutputs<T>> outs;
      for (std::size_t b = 0; b < aer.size(); ++b) outs.push_back(model->forward(aer[b], bev[b]));
      return total_loss(outs, targets, w).value;
    };
    return detail::own(model, fx);
  }
  throw ValidationError("unknown gradient-check module '" + module + "'");
}

inline GradCheckReport gradient_check(const std::string& module, std::uint64_t seed,
                                      const GradCheckOptions& opt = {}) {
  return check_gradients(module, make_gradcheck_fixture<double>(module, seed),
                         make_gradcheck_fixture<long double>(module, seed), seed, opt);
}

}  // namespace xmodal
