#pragma once

#include "tmx/config.hpp"
#include "tmx/rng.hpp"
#include "tmx/tape.hpp"

namespace tmx {

// Bias-free gated feed-forward weights for one token position.
// up/gate: [in, hidden], down: [hidden, out].
template <typename T>
struct SwigluParams {
  Tensor<T> up, gate, down;
};

struct SwigluVars {
  Var up, gate, down;
};

// Bias-free two-layer feed-forward (the non-gated ablation variant).
template <typename T>
struct FfnParams {
  Tensor<T> in, out;
};

struct FfnVars {
  Var in, out;
};

// Xavier-normal with the role scale multiplying the standard deviation:
// W ~ Normal(0, (scale * sqrt(2/(n_in+n_out)))^2). Lowering the down-matrix
// scale to 0.01 keeps a pre-norm block within a few percent of the identity
// at init regardless of width.
template <typename T>
Tensor<T> xavier_normal(int n_in, int n_out, double scale, Rng& rng) {
  Tensor<T> w(Shape{n_in, n_out});
  const double stddev = scale * std::sqrt(2.0 / (n_in + n_out));
  for (int64_t i = 0; i < w.numel(); ++i)
    w[i] = static_cast<T>(rng.normal() * stddev);
  return w;
}

// W ~ Normal(0, 1/n_in): preserves unit activation scale through the
// tokenizer projections, keeping the residual stream near unit rms at init.
template <typename T>
Tensor<T> lecun_normal(int n_in, int n_out, Rng& rng) {
  Tensor<T> w(Shape{n_in, n_out});
  const double stddev = std::sqrt(1.0 / n_in);
  for (int64_t i = 0; i < w.numel(); ++i)
    w[i] = static_cast<T>(rng.normal() * stddev);
  return w;
}

template <typename T>
SwigluParams<T> init_swiglu(int in, int hidden, int out, const InitConfig& init,
                            Rng& rng, double variance_boost = 1.0) {
  const double boost = std::sqrt(variance_boost);
  SwigluParams<T> p;
  p.up = xavier_normal<T>(in, hidden, init.scale_up * boost, rng);
  p.gate = xavier_normal<T>(in, hidden, init.scale_gate * boost, rng);
  p.down = xavier_normal<T>(hidden, out, init.scale_down * boost, rng);
  return p;
}

template <typename T>
FfnParams<T> init_ffn(int in, int hidden, int out, const InitConfig& init, Rng& rng) {
  FfnParams<T> p;
  p.in = xavier_normal<T>(in, hidden, init.scale_up, rng);
  p.out = xavier_normal<T>(hidden, out, init.scale_down, rng);
  return p;
}

// FC_down(Swish(FC_gate(x)) * FC_up(x))
template <typename T>
Var pswiglu(Tape<T>& t, Var x, const SwigluVars& w) {
  Var g = t.swish(t.matmul(x, w.gate));
  Var u = t.matmul(x, w.up);
  return t.matmul(t.mul(g, u), w.down);
}

template <typename T>
Var pffn(Tape<T>& t, Var x, const FfnVars& w) {
  return t.matmul(t.swish(t.matmul(x, w.in)), w.out);
}

// Value-level twins of the tape builders, shared by the device simulator and
// the quantized inference path.
template <typename T>
Tensor<T> pswiglu_value(const Tensor<T>& x, const SwigluParams<T>& w) {
  Tensor<T> g = kern::swish(kern::matmul(x, w.gate));
  Tensor<T> u = kern::matmul(x, w.up);
  return kern::matmul(kern::mul(g, u), w.down);
}

template <typename T>
Tensor<T> pffn_value(const Tensor<T>& x, const FfnParams<T>& w) {
  return kern::matmul(kern::swish(kern::matmul(x, w.in)), w.out);
}

}  // namespace tmx
