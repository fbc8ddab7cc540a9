#pragma once

// Cross-modal multi-head attention with a learnable relative-position bias,
// and the fusion head that merges aerial and BEV features.

#include <cmath>
#include <string>

#include "xmodal/layers.hpp"

namespace xmodal {

enum class FusionMode { kCrossAttention, kConcat };

struct AttentionConfig {
  std::size_t heads = 4;
  std::size_t rel_pos_window = 7;
  FusionMode fusion_mode = FusionMode::kCrossAttention;
  bool bidirectional = true;  ///< false: only aerial->BEV attention feeds the fusion

  void validate(std::size_t feature_dim) const {
    if (heads == 0 || feature_dim % heads)
      throw ValidationError("feature dim " + std::to_string(feature_dim) + " is not divisible by " +
                            std::to_string(heads) + " heads");
  }
};

/// Attention output plus the row-stochastic weights {heads, Nq, Nk}.
template <typename T>
struct AttentionResult {
  Var<T> output;
  Tensor<T> weights;
};

/// Scaled dot-product attention over flattened grids.
/// q {D,hq,wq}, k and v {D,hk,wk}, bias table {heads, 2w+1, 2w+1}.
/// Offsets are (context cell - query cell), clamped to the window.
template <typename T>
AttentionResult<T> attention_core(const Var<T>& q, const Var<T>& k, const Var<T>& v, const Var<T>& table,
                                  std::size_t heads) {
  detail::expect_rank(q->shape(), 3, "attention query");
  detail::expect_rank(k->shape(), 3, "attention key");
  detail::expect_same(k->shape(), v->shape(), "attention key/value");
  detail::expect_rank(table->shape(), 3, "relative position table");
  const std::size_t D = q->shape()[0];
  if (k->shape()[0] != D) throw ShapeError("attention: channel axis mismatch between query and context");
  if (D % heads) throw ShapeError("attention: channels not divisible by heads");
  if (table->shape()[0] != heads || table->shape()[1] != table->shape()[2] || table->shape()[1] % 2 == 0)
    throw ShapeError("attention: bad relative position table " + shape_str(table->shape()));
  const std::size_t wq = q->shape()[2], wk = k->shape()[2];
  const std::size_t Nq = q->shape()[1] * wq, Nk = k->shape()[1] * wk;
  const std::size_t dk = D / heads;
  const std::size_t side = table->shape()[1];
  const long win = static_cast<long>(side / 2);
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dk));

  std::vector<std::size_t> bias_index(Nq * Nk);
  for (std::size_t i = 0; i < Nq; ++i)
    for (std::size_t j = 0; j < Nk; ++j) {
      const long di = std::clamp(static_cast<long>(j / wk) - static_cast<long>(i / wq), -win, win);
      const long dj = std::clamp(static_cast<long>(j % wk) - static_cast<long>(i % wq), -win, win);
      bias_index[i * Nk + j] = static_cast<std::size_t>((di + win) * static_cast<long>(side) + dj + win);
    }

  Tensor<T> A({heads, Nq, Nk});
  Tensor<T> out({D, q->shape()[1], wq});
  const T* Q = q->value.data();
  const T* K = k->value.data();
  const T* V = v->value.data();
  for (std::size_t h = 0; h < heads; ++h) {
    const T* tb = table->value.data() + h * side * side;
    for (std::size_t i = 0; i < Nq; ++i) {
      T* row = A.data() + (h * Nq + i) * Nk;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < Nk; ++j) {
        T s = 0;
        for (std::size_t d = h * dk; d < (h + 1) * dk; ++d) s += Q[d * Nq + i] * K[d * Nk + j];
        row[j] = s * inv_sqrt + tb[bias_index[i * Nk + j]];
        mx = std::max(mx, row[j]);
      }
      T z = 0;
      for (std::size_t j = 0; j < Nk; ++j) z += (row[j] = std::exp(row[j] - mx));
      for (std::size_t j = 0; j < Nk; ++j) row[j] /= z;
      for (std::size_t d = h * dk; d < (h + 1) * dk; ++d) {
        T s = 0;
        for (std::size_t j = 0; j < Nk; ++j) s += row[j] * V[d * Nk + j];
        out[d * Nq + i] = s;
      }
    }
  }

  Tensor<T> weights = A;
  auto node = make_op<T>(std::move(out), {q, k, v, table},
                         [=, A = std::move(A), bias_index = std::move(bias_index)](Node<T>& n) {
    auto& pq = n.parents[0];
    auto& pk = n.parents[1];
    auto& pv = n.parents[2];
    auto& pt = n.parents[3];
    const T* Q = pq->value.data();
    const T* K = pk->value.data();
    const T* V = pv->value.data();
    const T* G = n.grad.data();
    T* gQ = pq->requires_grad ? pq->grad_buffer().data() : nullptr;
    T* gK = pk->requires_grad ? pk->grad_buffer().data() : nullptr;
    T* gV = pv->requires_grad ? pv->grad_buffer().data() : nullptr;
    T* gT = pt->requires_grad ? pt->grad_buffer().data() : nullptr;
    std::vector<T> gS(Nk);
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < Nq; ++i) {
        const T* row = A.data() + (h * Nq + i) * Nk;
        T dot = 0;
        for (std::size_t j = 0; j < Nk; ++j) {
          T ga = 0;
          for (std::size_t d = h * dk; d < (h + 1) * dk; ++d) {
            ga += G[d * Nq + i] * V[d * Nk + j];
            if (gV) gV[d * Nk + j] += row[j] * G[d * Nq + i];
          }
          gS[j] = ga;
          dot += row[j] * ga;
        }
        for (std::size_t j = 0; j < Nk; ++j) {
          const T gs = row[j] * (gS[j] - dot);
          if (gT) gT[h * side * side + bias_index[i * Nk + j]] += gs;
          for (std::size_t d = h * dk; d < (h + 1) * dk; ++d) {
            if (gQ) gQ[d * Nq + i] += gs * K[d * Nk + j] * inv_sqrt;
            if (gK) gK[d * Nk + j] += gs * Q[d * Nq + i] * inv_sqrt;
          }
        }
      }
    }
  });
  return {node, std::move(weights)};
}

/// One attention direction: queries from one modality, keys/values from the other.
template <typename T>
struct CrossAttention {
  Conv<T> to_q, to_k, to_v, to_out;
  Var<T> rel_pos;  ///< {heads, 2w+1, 2w+1}
  std::size_t heads = 4;

  CrossAttention() = default;
  CrossAttention(ParamStore<T>& ps, const std::string& name, std::size_t dim, const AttentionConfig& cfg)
      : to_q(ps, name + ".q", dim, dim, 1),
        to_k(ps, name + ".k", dim, dim, 1, false),  // softmax cancels a key bias
        to_v(ps, name + ".v", dim, dim, 1),
        to_out(ps, name + ".out", dim, dim, 1),
        rel_pos(ps.add(name + ".rel_pos", {cfg.heads, 2 * cfg.rel_pos_window + 1, 2 * cfg.rel_pos_window + 1},
                       Init::kZeros)),
        heads(cfg.heads) {
    cfg.validate(dim);
  }

  AttentionResult<T> operator()(const Var<T>& query_map, const Var<T>& context_map) const {
    const auto& qs = query_map->shape();
    const auto& cs = context_map->shape();
    detail::expect_rank(qs, 3, "cross_attention query");
    detail::expect_rank(cs, 3, "cross_attention context");
    const std::size_t D = to_q.weight->shape()[1];
    if (qs[0] != D || cs[0] != D)
      throw ShapeError("cross_attention: channel axis must be " + std::to_string(D));
    if (qs[1] != cs[1]) throw ShapeError("cross_attention: height axis mismatch between query and context");
    if (qs[2] != cs[2]) throw ShapeError("cross_attention: width axis mismatch between query and context");
    auto r = attention_core(to_q(query_map), to_k(context_map), to_v(context_map), rel_pos, heads);
    r.output = to_out(r.output);
    return r;
  }
};

template <typename T>
class Fusion {
 public:
  Fusion() = default;
  Fusion(ParamStore<T>& ps, const std::string& name, std::size_t dim, const AttentionConfig& cfg) : cfg_(cfg) {
    cfg.validate(dim);
    std::size_t blocks = 2;
    if (cfg.fusion_mode == FusionMode::kCrossAttention) {
      a2b_ = CrossAttention<T>(ps, name + ".a2b", dim, cfg);
      if (cfg.bidirectional) {
        b2a_ = CrossAttention<T>(ps, name + ".b2a", dim, cfg);
        blocks = 4;
      }
    }
    proj_ = Conv<T>(ps, name + ".proj", blocks * dim, dim, 1);
  }

  const AttentionConfig& config() const { return cfg_; }
  const CrossAttention<T>& a2b() const { return a2b_; }
  const CrossAttention<T>& b2a() const { return b2a_; }
  const Conv<T>& projection() const { return proj_; }

  /// cross_attn: act(proj([aerial, attn_a2b, bev, attn_b2a])); concat: act(proj([aerial, bev])).
  Var<T> operator()(const Var<T>& aerial, const Var<T>& bev) const {
    detail::expect_same(aerial->shape(), bev->shape(), "fuse_features");
    if (cfg_.fusion_mode == FusionMode::kConcat) return silu(proj_(concat<T>({aerial, bev})));
    auto a2b = a2b_(aerial, bev).output;
    if (!cfg_.bidirectional) return silu(proj_(concat<T>({aerial, a2b})));
    auto b2a = b2a_(bev, aerial).output;
    return silu(proj_(concat<T>({aerial, a2b, bev, b2a})));
  }

 private:
  AttentionConfig cfg_;
  CrossAttention<T> a2b_, b2a_;
  Conv<T> proj_;
};

}  // namespace xmodal
