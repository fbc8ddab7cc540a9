#pragma once

// Log-amplitude Fourier spectrum of feature planes.
//
// Planes at the 1/32 scale are tiny (2x2 .. 8x8 at desk scale), so the
// transform is a separable direct DFT with precomputed twiddles.

#include <cmath>
#include <complex>
#include <numbers>
#include <vector>

#include "xmodal/ops.hpp"

namespace xmodal {

namespace detail {

template <typename T>
std::vector<std::complex<T>> twiddles(std::size_t n, int sign) {
  std::vector<std::complex<T>> tw(n);
  for (std::size_t k = 0; k < n; ++k) {
    const long double a = sign * 2.0L * std::numbers::pi_v<long double> * static_cast<long double>(k) /
                          static_cast<long double>(n);
    tw[k] = {static_cast<T>(std::cos(a)), static_cast<T>(std::sin(a))};
  }
  return tw;
}

/// 2-D DFT of an h x w complex plane; sign -1 forward, +1 unnormalised inverse.
template <typename T>
std::vector<std::complex<T>> dft2(const std::vector<std::complex<T>>& in, std::size_t h, std::size_t w, int sign) {
  const auto tw_w = twiddles<T>(w, sign);
  const auto tw_h = twiddles<T>(h, sign);
  std::vector<std::complex<T>> rows(h * w), out(h * w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t v = 0; v < w; ++v) {
      std::complex<T> s = 0;
      for (std::size_t x = 0; x < w; ++x) s += in[y * w + x] * tw_w[(v * x) % w];
      rows[y * w + v] = s;
    }
  for (std::size_t u = 0; u < h; ++u)
    for (std::size_t v = 0; v < w; ++v) {
      std::complex<T> s = 0;
      for (std::size_t y = 0; y < h; ++y) s += rows[y * w + v] * tw_h[(u * y) % h];
      out[u * w + v] = s;
    }
  return out;
}

}  // namespace detail

/// Array index of frequency k after centring the zero frequency (half shift).
inline std::size_t centered_index(std::size_t k, std::size_t n) { return (k + n / 2) % n; }

/// Per channel: log(1 + |DFT2(plane)|), zero frequency moved to (h/2, w/2).
template <typename T>
Var<T> fft_log_magnitude(const Var<T>& x) {
  detail::expect_rank(x->shape(), 3, "fft_log_magnitude");
  const std::size_t C = x->shape()[0], h = x->shape()[1], w = x->shape()[2];
  const std::size_t P = h * w;
  Tensor<T> out(x->shape());
  // Spectra kept for the backward pass, in natural (unshifted) order.
  std::vector<std::complex<T>> spectra(C * P);
  for (std::size_t c = 0; c < C; ++c) {
    std::vector<std::complex<T>> plane(P);
    for (std::size_t i = 0; i < P; ++i) plane[i] = x->value[c * P + i];
    const auto F = detail::dft2(plane, h, w, -1);
    for (std::size_t u = 0; u < h; ++u)
      for (std::size_t v = 0; v < w; ++v) {
        spectra[c * P + u * w + v] = F[u * w + v];
        out.at(c, centered_index(u, h), centered_index(v, w)) = std::log1p(std::abs(F[u * w + v]));
      }
  }
  return make_op<T>(std::move(out), {x}, [=, spectra = std::move(spectra)](Node<T>& n) {
    auto& g = n.parents[0]->grad_buffer();
    for (std::size_t c = 0; c < C; ++c) {
      std::vector<std::complex<T>> G(P);
      for (std::size_t u = 0; u < h; ++u)
        for (std::size_t v = 0; v < w; ++v) {
          const auto F = spectra[c * P + u * w + v];
          const T mag = std::abs(F);
          // |F| has no derivative at 0; the subgradient 0 is used there.
          if (mag <= std::numeric_limits<T>::min()) continue;
          const T go = n.grad.at(c, centered_index(u, h), centered_index(v, w));
          G[u * w + v] = F * (go / ((T(1) + mag) * mag));
        }
      const auto back = detail::dft2(G, h, w, +1);
      for (std::size_t i = 0; i < P; ++i) g[c * P + i] += back[i].real();
    }
  });
}

/// Convenience overload for plain tensors (no graph).
template <typename T>
Tensor<T> fft_log_magnitude(const Tensor<T>& x) {
  NoGradGuard guard;
  return fft_log_magnitude(constant(x))->value;
}

}  // namespace xmodal
