#pragma once

// Parameterised building blocks shared by the encoders, fusion and decoder.

#include <string>

#include "xmodal/ops.hpp"
#include "xmodal/params.hpp"

namespace xmodal {

template <typename T>
struct Conv {
  Var<T> weight;  ///< {out, in, k, k}
  Var<T> bias;    ///< {out}, null when the layer has none

  Conv() = default;
  Conv(ParamStore<T>& ps, const std::string& name, std::size_t in, std::size_t out, std::size_t k,
       bool with_bias = true)
      : weight(ps.add(name + ".w", {out, in, k, k}, Init::kFanIn, in * k * k)) {
    if (with_bias) bias = ps.add(name + ".b", {out}, Init::kZeros);
  }

  Var<T> operator()(const Var<T>& x) const { return conv2d(x, weight, bias); }
  std::size_t out_channels() const { return weight->shape()[0]; }
};

template <typename T>
struct Dense {
  Var<T> weight;  ///< {out, in}
  Var<T> bias;

  Dense() = default;
  Dense(ParamStore<T>& ps, const std::string& name, std::size_t in, std::size_t out)
      : weight(ps.add(name + ".w", {out, in}, Init::kFanIn, in)), bias(ps.add(name + ".b", {out}, Init::kZeros)) {}

  Var<T> operator()(const Var<T>& v) const { return linear(v, weight, bias); }
};

template <typename T>
struct Affine {
  Var<T> gamma;
  Var<T> beta;

  Affine() = default;
  Affine(ParamStore<T>& ps, const std::string& name, std::size_t n)
      : gamma(ps.add(name + ".gamma", {n}, Init::kOnes)), beta(ps.add(name + ".beta", {n}, Init::kZeros)) {}
};

}  // namespace xmodal
