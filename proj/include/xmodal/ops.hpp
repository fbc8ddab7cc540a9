#pragma once

// Differentiable tensor operations. Feature maps are {C, H, W}; vectors {n}.

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "xmodal/autodiff.hpp"

namespace xmodal {

namespace detail {

inline void expect_rank(const Shape& s, std::size_t rank, const char* what) {
  if (s.size() != rank)
    throw ShapeError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(s));
}

inline void expect_same(const Shape& a, const Shape& b, const char* what) {
  if (a != b) throw ShapeError(std::string(what) + ": shape " + shape_str(a) + " vs " + shape_str(b));
}

template <typename T>
void accumulate(Tensor<T>& dst, const Tensor<T>& src) {
  T* d = dst.data();
  const T* s = src.data();
  for (std::size_t i = 0; i < src.size(); ++i) d[i] += s[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::expect_same(a->shape(), b->shape(), "add");
  Tensor<T> out = a->value;
  detail::accumulate(out, b->value);
  return make_op<T>(std::move(out), {a, b}, [](Node<T>& n) {
    for (auto& p : n.parents)
      if (p->requires_grad) detail::accumulate(p->grad_buffer(), n.grad);
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
  Tensor<T> out = a->value;
  for (auto& v : out.vec()) v *= s;
  return make_op<T>(std::move(out), {a}, [s](Node<T>& n) {
    auto& g = n.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * n.grad[i];
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::expect_same(a->shape(), b->shape(), "mul");
  Tensor<T> out = a->value;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b->value[i];
  return make_op<T>(std::move(out), {a, b}, [](Node<T>& n) {
    auto& pa = n.parents[0];
    auto& pb = n.parents[1];
    if (pa->requires_grad) {
      auto& g = pa->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * pb->value[i];
    }
    if (pb->requires_grad) {
      auto& g = pb->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * pa->value[i];
    }
  });
}

template <typename T>
T silu_value(T x) {
  return x / (T(1) + std::exp(-x));
}

/// x * sigmoid(x): smooth everywhere, slope bounded in about [-0.1, 1.1].
template <typename T>
Var<T> silu(const Var<T>& a) {
  Tensor<T> out = a->value;
  for (auto& v : out.vec()) v = silu_value(v);
  return make_op<T>(std::move(out), {a}, [](Node<T>& n) {
    auto& p = n.parents[0];
    auto& g = p->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T x = p->value[i];
      const T s = T(1) / (T(1) + std::exp(-x));
      g[i] += n.grad[i] * s * (T(1) + x * (T(1) - s));
    }
  });
}

template <typename T>
Var<T> sigmoid(const Var<T>& a) {
  Tensor<T> out = a->value;
  for (auto& v : out.vec()) v = T(1) / (T(1) + std::exp(-v));
  return make_op<T>(std::move(out), {a}, [](Node<T>& n) {
    auto& g = n.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T s = n.value[i];
      g[i] += n.grad[i] * s * (T(1) - s);
    }
  });
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <typename T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  Tensor<T> out = a->value.reshaped(std::move(shape));
  return make_op<T>(std::move(out), {a}, [](Node<T>& n) {
    detail::accumulate(n.parents[0]->grad_buffer(), n.grad);
  });
}

/// Concatenates along axis 0 (channels for feature maps).
template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  Shape shape = parts[0]->shape();
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p->shape().size() != shape.size() ||
        !std::equal(shape.begin() + 1, shape.end(), p->shape().begin() + 1))
      throw ShapeError("concat: trailing dims " + shape_str(p->shape()) + " vs " + shape_str(shape));
    total += p->shape()[0];
  }
  shape[0] = total;
  Tensor<T> out(shape);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    std::copy(p->value.vec().begin(), p->value.vec().end(), out.vec().begin() + offset);
    offset += p->value.size();
  }
  return make_op<T>(std::move(out), parts, [](Node<T>& n) {
    std::size_t off = 0;
    for (auto& p : n.parents) {
      if (p->requires_grad) {
        auto& g = p->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[off + i];
      }
      off += p->value.size();
    }
  });
}

/// Elements [begin, begin + count) of a vector.
template <typename T>
Var<T> slice(const Var<T>& a, std::size_t begin, std::size_t count) {
  if (begin + count > a->value.size()) throw ShapeError("slice: range out of bounds");
  Tensor<T> out({count});
  std::copy_n(a->value.data() + begin, count, out.data());
  return make_op<T>(std::move(out), {a}, [begin](Node<T>& n) {
    auto& g = n.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < n.grad.size(); ++i) g[begin + i] += n.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Convolution and resampling

/// Same-padded stride-1 2-D convolution. x {C,H,W}, w {O,C,k,k}, b {O} or null.
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  detail::expect_rank(x->shape(), 3, "conv2d input");
  detail::expect_rank(w->shape(), 4, "conv2d weight");
  const std::size_t C = x->shape()[0], H = x->shape()[1], W = x->shape()[2];
  const std::size_t O = w->shape()[0], k = w->shape()[2];
  if (w->shape()[1] != C)
    throw ShapeError("conv2d: channel axis mismatch, input has " + std::to_string(C) +
                     ", weight expects " + std::to_string(w->shape()[1]));
  if (b && b->value.size() != O) throw ShapeError("conv2d: bias length mismatch");
  const long pad = static_cast<long>(k / 2);
  const long Hl = static_cast<long>(H), Wl = static_cast<long>(W);

  Tensor<T> out({O, H, W});
  const T* in = x->value.data();
  const T* wt = w->value.data();
  for (std::size_t o = 0; o < O; ++o) {
    T* op = out.data() + o * H * W;
    std::fill(op, op + H * W, b ? b->value[o] : T(0));
    for (std::size_t c = 0; c < C; ++c) {
      const T* ip = in + c * H * W;
      for (std::size_t ky = 0; ky < k; ++ky) {
        const long dy = static_cast<long>(ky) - pad;
        const long y0 = std::max(0L, -dy), y1 = std::min(Hl, Hl - dy);
        for (std::size_t kx = 0; kx < k; ++kx) {
          const long dx = static_cast<long>(kx) - pad;
          const long x0 = std::max(0L, -dx), x1 = std::min(Wl, Wl - dx);
          const T wv = wt[((o * C + c) * k + ky) * k + kx];
          for (long y = y0; y < y1; ++y) {
            T* orow = op + y * Wl;
            const T* irow = ip + (y + dy) * Wl + dx;
            for (long xx = x0; xx < x1; ++xx) orow[xx] += wv * irow[xx];
          }
        }
      }
    }
  }

  std::vector<Var<T>> parents{x, w};
  if (b) parents.push_back(b);
  return make_op<T>(std::move(out), std::move(parents), [=](Node<T>& n) {
    auto& px = n.parents[0];
    auto& pw = n.parents[1];
    const T* go = n.grad.data();
    if (n.parents.size() > 2 && n.parents[2]->requires_grad) {
      auto& pb = n.parents[2];
      auto& gb = pb->grad_buffer();
      for (std::size_t o = 0; o < O; ++o) {
        T s = 0;
        for (std::size_t i = 0; i < H * W; ++i) s += go[o * H * W + i];
        gb[o] += s;
      }
    }
    const T* in = px->value.data();
    const T* wt = pw->value.data();
    T* gx = px->requires_grad ? px->grad_buffer().data() : nullptr;
    T* gw = pw->requires_grad ? pw->grad_buffer().data() : nullptr;
    for (std::size_t o = 0; o < O; ++o) {
      const T* gop = go + o * H * W;
      for (std::size_t c = 0; c < C; ++c) {
        const T* ip = in + c * H * W;
        for (std::size_t ky = 0; ky < k; ++ky) {
          const long dy = static_cast<long>(ky) - pad;
          const long y0 = std::max(0L, -dy), y1 = std::min(Hl, Hl - dy);
          for (std::size_t kx = 0; kx < k; ++kx) {
            const long dx = static_cast<long>(kx) - pad;
            const long x0 = std::max(0L, -dx), x1 = std::min(Wl, Wl - dx);
            const std::size_t widx = ((o * C + c) * k + ky) * k + kx;
            const T wv = wt[widx];
            T acc = 0;
            for (long y = y0; y < y1; ++y) {
              const T* grow = gop + y * Wl;
              const long base = (y + dy) * Wl + dx;
              if (gx) {
                T* gxrow = gx + c * H * W + base;
                for (long xx = x0; xx < x1; ++xx) gxrow[xx] += wv * grow[xx];
              }
              if (gw) {
                const T* irow = ip + base;
                for (long xx = x0; xx < x1; ++xx) acc += grow[xx] * irow[xx];
              }
            }
            if (gw) gw[widx] += acc;
          }
        }
      }
    }
  });
}

/// Non-overlapping average pooling by an integer factor.
template <typename T>
Var<T> avg_pool(const Var<T>& x, std::size_t f) {
  detail::expect_rank(x->shape(), 3, "avg_pool");
  const std::size_t C = x->shape()[0], H = x->shape()[1], W = x->shape()[2];
  if (H % f) throw ShapeError("avg_pool: height " + std::to_string(H) + " not divisible by " + std::to_string(f));
  if (W % f) throw ShapeError("avg_pool: width " + std::to_string(W) + " not divisible by " + std::to_string(f));
  const std::size_t h = H / f, w = W / f;
  const T inv = T(1) / static_cast<T>(f * f);
  Tensor<T> out({C, h, w});
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t xx = 0; xx < W; ++xx) out.at(c, y / f, xx / f) += x->value.at(c, y, xx) * inv;
  return make_op<T>(std::move(out), {x}, [=](Node<T>& n) {
    auto& g = n.parents[0]->grad_buffer();
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t xx = 0; xx < W; ++xx) g.at(c, y, xx) += n.grad.at(c, y / f, xx / f) * inv;
  });
}

/// Nearest-neighbour upsampling by 2 in both spatial axes.
template <typename T>
Var<T> upsample2(const Var<T>& x) {
  detail::expect_rank(x->shape(), 3, "upsample2");
  const std::size_t C = x->shape()[0], h = x->shape()[1], w = x->shape()[2];
  Tensor<T> out({C, 2 * h, 2 * w});
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y = 0; y < 2 * h; ++y)
      for (std::size_t xx = 0; xx < 2 * w; ++xx) out.at(c, y, xx) = x->value.at(c, y / 2, xx / 2);
  return make_op<T>(std::move(out), {x}, [=](Node<T>& n) {
    auto& g = n.parents[0]->grad_buffer();
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t y = 0; y < 2 * h; ++y)
        for (std::size_t xx = 0; xx < 2 * w; ++xx) g.at(c, y / 2, xx / 2) += n.grad.at(c, y, xx);
  });
}

// ---------------------------------------------------------------------------
// Normalisation and gating

/// Per-channel normalisation over spatial positions with learned affine.
template <typename T>
Var<T> channel_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5)) {
  detail::expect_rank(x->shape(), 3, "channel_norm");
  const std::size_t C = x->shape()[0], P = x->shape()[1] * x->shape()[2];
  if (gamma->value.size() != C || beta->value.size() != C)
    throw ShapeError("channel_norm: affine length must equal channel count");
  Tensor<T> out(x->shape());
  std::vector<T> inv_std(C);
  Tensor<T> xhat(x->shape());
  for (std::size_t c = 0; c < C; ++c) {
    const T* xp = x->value.data() + c * P;
    T mean = 0;
    for (std::size_t i = 0; i < P; ++i) mean += xp[i];
    mean /= static_cast<T>(P);
    T var = 0;
    for (std::size_t i = 0; i < P; ++i) var += (xp[i] - mean) * (xp[i] - mean);
    var /= static_cast<T>(P);
    inv_std[c] = T(1) / std::sqrt(var + eps);
    for (std::size_t i = 0; i < P; ++i) {
      xhat[c * P + i] = (xp[i] - mean) * inv_std[c];
      out[c * P + i] = gamma->value[c] * xhat[c * P + i] + beta->value[c];
    }
  }
  return make_op<T>(std::move(out), {x, gamma, beta},
                    [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& n) {
    auto& px = n.parents[0];
    auto& pg = n.parents[1];
    auto& pb = n.parents[2];
    for (std::size_t c = 0; c < C; ++c) {
      const T* go = n.grad.data() + c * P;
      const T* xh = xhat.data() + c * P;
      T sum_g = 0, sum_gx = 0;
      for (std::size_t i = 0; i < P; ++i) {
        sum_g += go[i];
        sum_gx += go[i] * xh[i];
      }
      if (pg->requires_grad) pg->grad_buffer()[c] += sum_gx;
      if (pb->requires_grad) pb->grad_buffer()[c] += sum_g;
      if (px->requires_grad) {
        T* gx = px->grad_buffer().data() + c * P;
        const T k = pg->value[c] * inv_std[c] / static_cast<T>(P);
        for (std::size_t i = 0; i < P; ++i)
          gx[i] += k * (static_cast<T>(P) * go[i] - sum_g - xh[i] * sum_gx);
      }
    }
  });
}

/// Channel mean and mean-of-squares at each location: {2, H, W}.
template <typename T>
Var<T> channel_stats(const Var<T>& x) {
  detail::expect_rank(x->shape(), 3, "channel_stats");
  const std::size_t C = x->shape()[0], P = x->shape()[1] * x->shape()[2];
  Tensor<T> out({2, x->shape()[1], x->shape()[2]});
  const T inv = T(1) / static_cast<T>(C);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < P; ++i) {
      const T v = x->value[c * P + i];
      out[i] += v * inv;
      out[P + i] += v * v * inv;
    }
  return make_op<T>(std::move(out), {x}, [=](Node<T>& n) {
    auto& p = n.parents[0];
    auto& g = p->grad_buffer();
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < P; ++i)
        g[c * P + i] += inv * (n.grad[i] + T(2) * p->value[c * P + i] * n.grad[P + i]);
  });
}

/// x {C,H,W} scaled by a per-location gate g {1,H,W}.
template <typename T>
Var<T> gate_spatial(const Var<T>& x, const Var<T>& g) {
  const std::size_t C = x->shape()[0], P = x->shape()[1] * x->shape()[2];
  if (g->value.size() != P) throw ShapeError("gate_spatial: gate must be {1,H,W}");
  Tensor<T> out = x->value;
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < P; ++i) out[c * P + i] *= g->value[i];
  return make_op<T>(std::move(out), {x, g}, [=](Node<T>& n) {
    auto& px = n.parents[0];
    auto& pg = n.parents[1];
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < P; ++i) {
        const T go = n.grad[c * P + i];
        if (px->requires_grad) px->grad_buffer()[c * P + i] += go * pg->value[i];
        if (pg->requires_grad) pg->grad_buffer()[i] += go * px->value[c * P + i];
      }
  });
}

/// x {C,H,W} scaled by a per-channel gate g {C}.
template <typename T>
Var<T> gate_channel(const Var<T>& x, const Var<T>& g) {
  const std::size_t C = x->shape()[0], P = x->shape()[1] * x->shape()[2];
  if (g->value.size() != C) throw ShapeError("gate_channel: gate must be {C}");
  Tensor<T> out = x->value;
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < P; ++i) out[c * P + i] *= g->value[c];
  return make_op<T>(std::move(out), {x, g}, [=](Node<T>& n) {
    auto& px = n.parents[0];
    auto& pg = n.parents[1];
    for (std::size_t c = 0; c < C; ++c) {
      T acc = 0;
      for (std::size_t i = 0; i < P; ++i) {
        const T go = n.grad[c * P + i];
        if (px->requires_grad) px->grad_buffer()[c * P + i] += go * pg->value[c];
        acc += go * px->value[c * P + i];
      }
      if (pg->requires_grad) pg->grad_buffer()[c] += acc;
    }
  });
}

/// Mean over spatial positions: {C,H,W} -> {C}.
template <typename T>
Var<T> global_avg_pool(const Var<T>& x) {
  detail::expect_rank(x->shape(), 3, "global_avg_pool");
  const std::size_t C = x->shape()[0], P = x->shape()[1] * x->shape()[2];
  Tensor<T> out({C});
  const T inv = T(1) / static_cast<T>(P);
  for (std::size_t c = 0; c < C; ++c) {
    T s = 0;
    for (std::size_t i = 0; i < P; ++i) s += x->value[c * P + i];
    out[c] = s * inv;
  }
  return make_op<T>(std::move(out), {x}, [=](Node<T>& n) {
    auto& g = n.parents[0]->grad_buffer();
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < P; ++i) g[c * P + i] += n.grad[c] * inv;
  });
}

// ---------------------------------------------------------------------------
// Vector ops

/// Affine map: W {m,n} * v {n} + b {m}.
template <typename T>
Var<T> linear(const Var<T>& v, const Var<T>& w, const Var<T>& b) {
  detail::expect_rank(w->shape(), 2, "linear weight");
  const std::size_t m = w->shape()[0], n_in = w->shape()[1];
  if (v->value.size() != n_in)
    throw ShapeError("linear: input length " + std::to_string(v->value.size()) + ", weight expects " +
                     std::to_string(n_in));
  Tensor<T> out({m});
  for (std::size_t i = 0; i < m; ++i) {
    T s = b->value[i];
    for (std::size_t j = 0; j < n_in; ++j) s += w->value[i * n_in + j] * v->value[j];
    out[i] = s;
  }
  return make_op<T>(std::move(out), {v, w, b}, [=](Node<T>& n) {
    auto& pv = n.parents[0];
    auto& pw = n.parents[1];
    auto& pb = n.parents[2];
    for (std::size_t i = 0; i < m; ++i) {
      const T go = n.grad[i];
      if (pb->requires_grad) pb->grad_buffer()[i] += go;
      if (pw->requires_grad) {
        auto& gw = pw->grad_buffer();
        for (std::size_t j = 0; j < n_in; ++j) gw[i * n_in + j] += go * pv->value[j];
      }
      if (pv->requires_grad) {
        auto& gv = pv->grad_buffer();
        for (std::size_t j = 0; j < n_in; ++j) gv[j] += go * pw->value[i * n_in + j];
      }
    }
  });
}

/// Normalises a vector to zero mean / unit variance, then applies gain and bias.
template <typename T>
Var<T> layer_norm(const Var<T>& v, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5)) {
  const std::size_t n_el = v->value.size();
  T mean = 0;
  for (auto x : v->value.vec()) mean += x;
  mean /= static_cast<T>(n_el);
  T var = 0;
  for (auto x : v->value.vec()) var += (x - mean) * (x - mean);
  var /= static_cast<T>(n_el);
  const T inv_std = T(1) / std::sqrt(var + eps);
  Tensor<T> xhat({n_el}), out({n_el});
  for (std::size_t i = 0; i < n_el; ++i) {
    xhat[i] = (v->value[i] - mean) * inv_std;
    out[i] = gamma->value[i] * xhat[i] + beta->value[i];
  }
  return make_op<T>(std::move(out), {v, gamma, beta}, [=, xhat = std::move(xhat)](Node<T>& n) {
    auto& pv = n.parents[0];
    auto& pg = n.parents[1];
    auto& pb = n.parents[2];
    T sum_g = 0, sum_gx = 0;
    std::vector<T> gh(n_el);
    for (std::size_t i = 0; i < n_el; ++i) {
      gh[i] = n.grad[i] * pg->value[i];
      sum_g += gh[i];
      sum_gx += gh[i] * xhat[i];
      if (pg->requires_grad) pg->grad_buffer()[i] += n.grad[i] * xhat[i];
      if (pb->requires_grad) pb->grad_buffer()[i] += n.grad[i];
    }
    if (pv->requires_grad) {
      auto& g = pv->grad_buffer();
      const T N = static_cast<T>(n_el);
      for (std::size_t i = 0; i < n_el; ++i) g[i] += inv_std / N * (N * gh[i] - sum_g - xhat[i] * sum_gx);
    }
  });
}

template <typename T>
Var<T> l2_normalize(const Var<T>& v, T eps = T(1e-12)) {
  T ss = 0;
  for (auto x : v->value.vec()) ss += x * x;
  const T norm = std::sqrt(ss + eps);
  Tensor<T> out = v->value;
  for (auto& x : out.vec()) x /= norm;
  return make_op<T>(std::move(out), {v}, [norm](Node<T>& n) {
    auto& g = n.parents[0]->grad_buffer();
    T dot = 0;
    for (std::size_t i = 0; i < g.size(); ++i) dot += n.grad[i] * n.value[i];
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += (n.grad[i] - n.value[i] * dot) / norm;
  });
}

// ---------------------------------------------------------------------------
// Softmax variants

/// Softmax over every element of the tensor (global spatial softmax).
template <typename T>
Var<T> softmax_all(const Var<T>& x) {
  Tensor<T> out = x->value;
  const T mx = *std::max_element(out.vec().begin(), out.vec().end());
  double s = 0;
  for (auto& v : out.vec()) s += (v = std::exp(v - mx));
  for (auto& v : out.vec()) v = static_cast<T>(v / s);
  return make_op<T>(std::move(out), {x}, [](Node<T>& n) {
    T dot = 0;
    for (std::size_t i = 0; i < n.value.size(); ++i) dot += n.grad[i] * n.value[i];
    auto& g = n.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.value[i] * (n.grad[i] - dot);
  });
}

/// Softmax over axis 0 independently at each position of {K,H,W}.
template <typename T>
Var<T> softmax_channels(const Var<T>& x) {
  detail::expect_rank(x->shape(), 3, "softmax_channels");
  const std::size_t K = x->shape()[0], P = x->shape()[1] * x->shape()[2];
  Tensor<T> out = x->value;
  for (std::size_t i = 0; i < P; ++i) {
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t k = 0; k < K; ++k) mx = std::max(mx, out[k * P + i]);
    T s = 0;
    for (std::size_t k = 0; k < K; ++k) s += (out[k * P + i] = std::exp(out[k * P + i] - mx));
    for (std::size_t k = 0; k < K; ++k) out[k * P + i] /= s;
  }
  return make_op<T>(std::move(out), {x}, [=](Node<T>& n) {
    auto& g = n.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < P; ++i) {
      T dot = 0;
      for (std::size_t k = 0; k < K; ++k) dot += n.grad[k * P + i] * n.value[k * P + i];
      for (std::size_t k = 0; k < K; ++k) g[k * P + i] += n.value[k * P + i] * (n.grad[k * P + i] - dot);
    }
  });
}

/// Column {K} of a {K,H,W} tensor at spatial cell (row, col).
template <typename T>
Var<T> column_at(const Var<T>& x, std::size_t row, std::size_t col) {
  detail::expect_rank(x->shape(), 3, "column_at");
  const std::size_t K = x->shape()[0], H = x->shape()[1], W = x->shape()[2];
  if (row >= H || col >= W) throw ShapeError("column_at: cell out of range");
  Tensor<T> out({K});
  for (std::size_t k = 0; k < K; ++k) out[k] = x->value.at(k, row, col);
  return make_op<T>(std::move(out), {x}, [=](Node<T>& n) {
    auto& g = n.parents[0]->grad_buffer();
    for (std::size_t k = 0; k < K; ++k) g.at(k, row, col) += n.grad[k];
  });
}

// ---------------------------------------------------------------------------
// Reductions to scalars

/// Sum_i r_i x_i for a constant weighting r; used to scalarise outputs.
template <typename T>
Var<T> weighted_sum(const Var<T>& x, const Tensor<T>& r) {
  if (r.size() != x->value.size()) throw ShapeError("weighted_sum: weight length mismatch");
  T s = 0;
  for (std::size_t i = 0; i < r.size(); ++i) s += r[i] * x->value[i];
  return make_op<T>(Tensor<T>({1}, std::vector<T>{s}), {x}, [r](Node<T>& n) {
    auto& g = n.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < r.size(); ++i) g[i] += n.grad[0] * r[i];
  });
}

/// Weighted sum of scalar nodes.
template <typename T>
Var<T> combine(const std::vector<Var<T>>& scalars, const std::vector<T>& weights) {
  if (scalars.size() != weights.size()) throw ShapeError("combine: weight count mismatch");
  T s = 0;
  for (std::size_t i = 0; i < scalars.size(); ++i) s += weights[i] * scalars[i]->value[0];
  return make_op<T>(Tensor<T>({1}, std::vector<T>{s}), scalars, [weights](Node<T>& n) {
    for (std::size_t i = 0; i < n.parents.size(); ++i)
      if (n.parents[i]->requires_grad) n.parents[i]->grad_buffer()[0] += weights[i] * n.grad[0];
  });
}

}  // namespace xmodal
