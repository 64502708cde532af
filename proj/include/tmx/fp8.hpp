#pragma once

#include <cstdint>

#include "tmx/data.hpp"
#include "tmx/model.hpp"

namespace tmx::fp8 {

// 8-bit float: 1 sign, 4 exponent (bias 7), 3 mantissa. No infinities;
// exponent and mantissa all ones is NaN. Max finite 448, smallest positive
// subnormal 2^-9.
inline constexpr double kMaxFinite = 448.0;
inline constexpr uint8_t kNaN = 0x7f;

// Round-to-nearest-even onto the representable grid, saturating at +-448.
// NaN encodes to the canonical NaN code.
uint8_t encode(double v);

// Exact decode of any code; the two NaN codes decode to quiet NaN.
double decode(uint8_t code);

inline bool is_nan_code(uint8_t code) { return (code & 0x7f) == 0x7f; }

// Per-tensor absmax-scaled code buffer.
struct QuantTensor {
  std::vector<uint8_t> codes;
  double scale = 1.0;
  Shape shape;
};

QuantTensor quantize(const Tensor<double>& x);
Tensor<double> dequantize(const QuantTensor& q);

// dequantize(quantize(x)): the simulated 8-bit storage of an activation.
Tensor<double> roundtrip(const Tensor<double>& x);

// Activation hooks for the quantized inference dataflow.
QuantHooks<double> act_hooks();

// Copy of the model with every position-net GEMM kernel (SwiGLU/FFN/expert
// up, gate, down) stored through the 8-bit codec. Routers, norm gains,
// tokenizer projections and heads stay in full precision.
ModelParams<double> quantize_weights(const ModelParams<double>& m);

struct Fp8Report {
  std::vector<double> layer_max_rel;  // per block, vs the full-precision path
  double score_max_abs_dev = 0.0;
  double auc_fp32 = 0.0, auc_fp8 = 0.0;
  double logloss_fp32 = 0.0, logloss_fp8 = 0.0;
  double auc_delta() const { return auc_fp8 - auc_fp32; }
};

// Paired evaluation of the quantized and full-precision inference paths on a
// held-out dataset.
Fp8Report fp8_eval(const ModelParams<double>& m, const ExperimentConfig& cfg,
                   const Dataset& eval, int batch_size = 256);

}  // namespace tmx::fp8
