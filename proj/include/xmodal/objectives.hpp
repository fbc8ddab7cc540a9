#pragma once

// Loss terms, contrastive projection heads and the weighted total objective.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "xmodal/decoder.hpp"
#include "xmodal/layers.hpp"

namespace xmodal {

struct LossWeights {
  double lambda1 = 2.0;      ///< direct regression
  double lambda2 = 0.1;      ///< contrastive
  double tau = 0.07;
  double conf_weight = 0.1;
  double huber_delta = 1.0;  ///< meters
  std::size_t hard_k = 8;    ///< negatives kept per row, capped at B-1
  double softargmax_temperature = 1.0;
  double conf_radius_m = 3.0;  ///< confidence target: argmax error within this radius
  double kl_epsilon = 1e-9;
  bool use_reg = true;
  bool use_contrastive = true;
  bool symmetric_infonce = true;
  bool kl_literal_order = false;  ///< KL(pred || target) instead of KL(target || pred)

  void validate() const {
    if (!(tau > 0)) throw ValidationError("tau must be positive");
    if (lambda1 < 0 || lambda2 < 0 || conf_weight < 0) throw ValidationError("loss weights must be non-negative");
    if (!(huber_delta > 0)) throw ValidationError("huber delta must be positive");
  }
};

/// GlobalPool -> affine -> layer norm -> act -> affine -> unit length.
template <typename T>
struct ProjectionHead {
  Dense<T> fc1, fc2;
  Affine<T> norm;

  ProjectionHead() = default;
  ProjectionHead(ParamStore<T>& ps, const std::string& name, std::size_t dim, std::size_t embed_dim)
      : fc1(ps, name + ".fc1", dim, dim), fc2(ps, name + ".fc2", dim, embed_dim), norm(ps, name + ".norm", dim) {}

  Var<T> operator()(const Var<T>& features) const {
    auto h = silu(layer_norm(fc1(global_avg_pool(features)), norm.gamma, norm.beta));
    return l2_normalize(fc2(h));
  }
};

namespace detail {

template <typename T>
void check_distribution(const Tensor<T>& d, const char* what) {
  double s = 0;
  for (T v : d.vec()) {
    if (!(v >= T(0))) throw ValidationError(std::string(what) + " has a negative or non-finite entry");
    s += static_cast<double>(v);
  }
  if (std::abs(s - 1.0) > 1e-5)
    throw ValidationError(std::string(what) + " sums to " + std::to_string(s) + ", expected 1");
}

}  // namespace detail

/// Sum target * (log(target + eps) - log(pred + eps)); the literal flag swaps
/// the roles of pred and target.
template <typename T>
Var<T> kl_divergence_loss(const Var<T>& pred, const Tensor<T>& target, double eps = 1e-9, bool literal = false) {
  if (pred->value.size() != target.size()) throw ShapeError("kl_divergence_loss: size mismatch");
  detail::check_distribution(pred->value, "predicted distribution");
  detail::check_distribution(target, "target distribution");
  double loss = 0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    const double p = pred->value[i], t = target[i];
    loss += literal ? p * (std::log(p + eps) - std::log(t + eps)) : t * (std::log(t + eps) - std::log(p + eps));
  }
  return make_op<T>(Tensor<T>({1}, std::vector<T>{static_cast<T>(loss)}), {pred},
                    [target, eps, literal](Node<T>& n) {
    auto& p = n.parents[0];
    auto& g = p->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double pv = p->value[i], t = target[i];
      const double d = literal ? std::log(pv + eps) - std::log(t + eps) + pv / (pv + eps) : -t / (pv + eps);
      g[i] += n.grad[0] * static_cast<T>(d);
    }
  });
}

/// Per-coordinate Huber, summed over the coordinates.
template <typename T>
Var<T> huber_regression_loss(const Var<T>& pred, const std::vector<T>& gt, T delta = T(1)) {
  if (pred->value.size() != gt.size()) throw ShapeError("huber_regression_loss: size mismatch");
  if (!(delta > 0)) throw ValidationError("huber delta must be positive");
  T loss = 0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    const T r = pred->value[i] - gt[i];
    loss += std::abs(r) <= delta ? T(0.5) * r * r : delta * (std::abs(r) - T(0.5) * delta);
  }
  return make_op<T>(Tensor<T>({1}, std::vector<T>{loss}), {pred}, [gt, delta](Node<T>& n) {
    auto& p = n.parents[0];
    auto& g = p->grad_buffer();
    for (std::size_t i = 0; i < gt.size(); ++i) {
      const T r = p->value[i] - gt[i];
      g[i] += n.grad[0] * (std::abs(r) <= delta ? r : delta * (r > 0 ? T(1) : T(-1)));
    }
  });
}

/// Binary cross-entropy of a probability against a 0/1 label.
template <typename T>
Var<T> bce_loss(const Var<T>& prob, T label, T eps = T(1e-7)) {
  const T c = prob->value[0];
  const T loss = -(label * std::log(c + eps) + (T(1) - label) * std::log(T(1) - c + eps));
  return make_op<T>(Tensor<T>({1}, std::vector<T>{loss}), {prob}, [label, eps](Node<T>& n) {
    auto& p = n.parents[0];
    const T c = p->value[0];
    p->grad_buffer()[0] += n.grad[0] * (-label / (c + eps) + (T(1) - label) / (T(1) - c + eps));
  });
}

/// Indices of the k largest entries of `row` excluding `skip`; ties resolve to
/// the lower index.
inline std::vector<std::size_t> hardest_negatives(const std::vector<double>& row, std::size_t skip, std::size_t k) {
  std::vector<std::size_t> idx;
  for (std::size_t j = 0; j < row.size(); ++j)
    if (j != skip) idx.push_back(j);
  k = std::min(k, idx.size());
  std::partial_sort(idx.begin(), idx.begin() + static_cast<long>(k), idx.end(), [&](std::size_t a, std::size_t b) {
    return row[a] != row[b] ? row[a] > row[b] : a < b;
  });
  idx.resize(k);
  return idx;
}

/// InfoNCE with top-k hard-negative mining. The denominator holds the positive
/// plus the min(hard_k, B-1) most similar negatives of its row. With
/// `symmetric`, the aerial->BEV and BEV->aerial directions are averaged.
template <typename T>
Var<T> infonce_loss(const std::vector<Var<T>>& z_aerial, const std::vector<Var<T>>& z_bev, double tau,
                    std::size_t hard_k, bool symmetric = true) {
  const std::size_t B = z_aerial.size();
  if (B == 0 || z_bev.size() != B) throw ValidationError("infonce_loss needs two equal, non-empty batches");
  if (!(tau > 0)) throw ValidationError("tau must be positive");
  const std::size_t dim = z_aerial[0]->value.size();
  for (const auto* batch : {&z_aerial, &z_bev})
    for (const auto& z : *batch) {
      if (z->value.size() != dim) throw ShapeError("infonce_loss: embedding length mismatch");
      double n2 = 0;
      for (T v : z->value.vec()) n2 += static_cast<double>(v) * v;
      if (std::abs(std::sqrt(n2) - 1.0) > 1e-4) throw ValidationError("infonce_loss: embedding is not unit length");
    }

  // sim[i][j] = z_aerial[i] . z_bev[j] / tau
  std::vector<std::vector<double>> sim(B, std::vector<double>(B));
  for (std::size_t i = 0; i < B; ++i)
    for (std::size_t j = 0; j < B; ++j) {
      double s = 0;
      for (std::size_t d = 0; d < dim; ++d) s += static_cast<double>(z_aerial[i]->value[d]) * z_bev[j]->value[d];
      sim[i][j] = s / tau;
    }

  // One row term: anchor a, candidates c (positive first). Stores softmax
  // weights over the candidates for the backward pass.
  struct RowTerm {
    bool aerial_anchor;
    std::size_t anchor;
    std::vector<std::size_t> cands;
    std::vector<double> probs;
  };
  std::vector<RowTerm> terms;
  const int directions = symmetric ? 2 : 1;
  const double weight = 1.0 / (static_cast<double>(B) * directions);
  double loss = 0;
  for (int dir = 0; dir < directions; ++dir)
    for (std::size_t i = 0; i < B; ++i) {
      std::vector<double> row(B);
      for (std::size_t j = 0; j < B; ++j) row[j] = dir == 0 ? sim[i][j] : sim[j][i];
      RowTerm term{dir == 0, i, {i}, {}};
      for (auto j : hardest_negatives(row, i, hard_k)) term.cands.push_back(j);
      double mx = -std::numeric_limits<double>::infinity();
      for (auto j : term.cands) mx = std::max(mx, row[j]);
      double z = 0;
      for (auto j : term.cands) z += std::exp(row[j] - mx);
      loss += weight * (mx + std::log(z) - row[i]);
      for (auto j : term.cands) term.probs.push_back(std::exp(row[j] - mx) / z);
      terms.push_back(std::move(term));
    }

  std::vector<Var<T>> parents(z_aerial);
  parents.insert(parents.end(), z_bev.begin(), z_bev.end());
  return make_op<T>(Tensor<T>({1}, std::vector<T>{static_cast<T>(loss)}), std::move(parents),
                    [terms = std::move(terms), B, dim, tau, weight](Node<T>& n) {
    const double g = static_cast<double>(n.grad[0]) * weight / tau;
    for (const auto& t : terms) {
      // Anchor and candidates live in opposite halves of the parent list.
      auto& anchor = n.parents[t.aerial_anchor ? t.anchor : B + t.anchor];
      for (std::size_t c = 0; c < t.cands.size(); ++c) {
        auto& other = n.parents[t.aerial_anchor ? B + t.cands[c] : t.cands[c]];
        const double coeff = g * (t.probs[c] - (c == 0 ? 1.0 : 0.0));
        if (anchor->requires_grad) {
          auto& ga = anchor->grad_buffer();
          for (std::size_t d = 0; d < dim; ++d) ga[d] += static_cast<T>(coeff * other->value[d]);
        }
        if (other->requires_grad) {
          auto& go = other->grad_buffer();
          for (std::size_t d = 0; d < dim; ++d) go[d] += static_cast<T>(coeff * anchor->value[d]);
        }
      }
    }
  });
}

/// Ground truth for one training sample.
template <typename T>
struct SampleTargets {
  Tensor<T> loc;            ///< {H, W}
  std::vector<T> ori;       ///< {K} at the true cell
  Cell cell;
  Pose pose;
  double pixels_per_meter = 1.0;
  std::size_t height = 0, width = 0;
};

template <typename T>
SampleTargets<T> make_targets(const Pose& pose, const AerialTile& tile, std::size_t bins, double sigma_loc,
                              double sigma_ori) {
  SampleTargets<T> t;
  t.loc = make_location_target(pose, tile, sigma_loc).template cast<T>();
  const auto ori = make_orientation_target(pose.theta, bins, sigma_ori);
  t.ori.assign(ori.begin(), ori.end());
  t.cell = cell_of(pose, tile);
  t.pose = pose;
  t.pixels_per_meter = tile.pixels_per_meter;
  t.height = tile.height;
  t.width = tile.width;
  return t;
}

/// Network outputs for one sample, in whichever decoder mode is active.
template <typename T>
struct SampleOutputs {
  std::optional<LikelihoodVars<T>> maps;
  std::optional<RegressionVars<T>> regression;
  Var<T> z_aerial;
  Var<T> z_bev;
};

struct LossBreakdown {
  double total = 0, loc = 0, ori = 0, reg = 0, contrastive = 0, conf = 0;
};

template <typename T>
struct TotalLoss {
  Var<T> value;
  LossBreakdown terms;
};

/// Batch-mean of L_loc + L_ori + lambda1 L_reg + conf_weight L_conf, plus
/// lambda2 times the batch InfoNCE. Disabled toggles drop their term.
template <typename T>
TotalLoss<T> total_loss(const std::vector<SampleOutputs<T>>& outputs, const std::vector<SampleTargets<T>>& targets,
                        const LossWeights& w) {
  w.validate();
  const std::size_t B = outputs.size();
  if (B == 0 || targets.size() != B) throw ValidationError("total_loss: batch sizes differ or are empty");
  std::vector<Var<T>> terms;
  std::vector<T> coeffs;
  LossBreakdown br;
  const T inv_b = T(1) / static_cast<T>(B);
  auto push = [&](const Var<T>& term, double coeff, double& slot) {
    slot += static_cast<double>(term->value[0]) / static_cast<double>(B);
    if (coeff == 0) return;
    terms.push_back(term);
    coeffs.push_back(static_cast<T>(coeff) * inv_b);
  };

  for (std::size_t b = 0; b < B; ++b) {
    const auto& out = outputs[b];
    const auto& tg = targets[b];
    const T ppm = static_cast<T>(tg.pixels_per_meter);
    const std::vector<T> gt_xy{static_cast<T>(tg.pose.x), static_cast<T>(tg.pose.y)};
    Var<T> conf;
    double loc_error = 0;
    if (out.maps) {
      const auto& m = *out.maps;
      push(kl_divergence_loss(m.loc, tg.loc, w.kl_epsilon, w.kl_literal_order), 1.0, br.loc);
      Tensor<T> ori_t({tg.ori.size()}, tg.ori);
      push(kl_divergence_loss(column_at(m.ori, tg.cell.row, tg.cell.col), ori_t, w.kl_epsilon, w.kl_literal_order),
           1.0, br.ori);
      if (w.use_reg) {
        // Cell-index coordinates -> meters (cell centres).
        auto xy = scale(soft_argmax(m.loc, static_cast<T>(w.softargmax_temperature)), T(1) / ppm);
        auto offset = constant(Tensor<T>({2}, std::vector<T>{T(0.5) / ppm, T(0.5) / ppm}));
        push(huber_regression_loss(add(xy, offset), gt_xy, static_cast<T>(w.huber_delta)), w.lambda1, br.reg);
      }
      std::size_t best = 0;
      for (std::size_t i = 1; i < m.loc->value.size(); ++i)
        if (m.loc->value[i] > m.loc->value[best]) best = i;
      const std::size_t Wd = m.loc->shape()[1];
      const double ex = (static_cast<double>(best % Wd) + 0.5) / tg.pixels_per_meter;
      const double ey = (static_cast<double>(best / Wd) + 0.5) / tg.pixels_per_meter;
      loc_error = std::hypot(ex - tg.pose.x, ey - tg.pose.y);
      conf = m.confidence;
    } else if (out.regression) {
      const auto& r = *out.regression;
      const T sx = static_cast<T>(tg.width) / ppm, sy = static_cast<T>(tg.height) / ppm;
      auto xy_m = mul(r.xy, constant(Tensor<T>({2}, std::vector<T>{sx, sy})));
      push(huber_regression_loss(xy_m, gt_xy, static_cast<T>(w.huber_delta)), 1.0, br.loc);
      const double th = tg.pose.theta * std::numbers::pi / 180.0;
      const Tensor<T> u({2}, std::vector<T>{static_cast<T>(std::cos(th)), static_cast<T>(std::sin(th))});
      // |d - u|^2 = 2 - 2 d.u for unit vectors
      auto one = constant(Tensor<T>({1}, std::vector<T>{T(1)}));
      push(combine<T>({weighted_sum(r.direction, u), one}, {T(-2), T(2)}), 1.0, br.ori);
      loc_error = std::hypot(static_cast<double>(xy_m->value[0]) - tg.pose.x,
                             static_cast<double>(xy_m->value[1]) - tg.pose.y);
      conf = r.confidence;
    } else {
      throw ValidationError("total_loss: sample has no decoder output");
    }
    if (w.conf_weight > 0) {
      const T label = loc_error <= w.conf_radius_m ? T(1) : T(0);
      push(bce_loss(conf, label), w.conf_weight, br.conf);
    }
  }

  if (w.use_contrastive && w.lambda2 > 0) {
    std::vector<Var<T>> za, zb;
    for (const auto& o : outputs) {
      za.push_back(o.z_aerial);
      zb.push_back(o.z_bev);
    }
    auto con = infonce_loss(za, zb, w.tau, std::min(w.hard_k, B - 1), w.symmetric_infonce);
    br.contrastive = static_cast<double>(con->value[0]);
    terms.push_back(con);
    coeffs.push_back(static_cast<T>(w.lambda2));
  }

  TotalLoss<T> result;
  result.value = combine(terms, coeffs);
  br.total = static_cast<double>(result.value->value[0]);
  result.terms = br;
  return result;
}

}  // namespace xmodal
