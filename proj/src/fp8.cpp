#include "tmx/fp8.hpp"

#include <cmath>

#include "tmx/metrics.hpp"

namespace tmx::fp8 {

namespace {

// Round a non-negative value with an exactly-representable fraction to the
// nearest integer, ties to even.
int round_half_even(double f) {
  const double fl = std::floor(f);
  const double frac = f - fl;
  const int k = static_cast<int>(fl);
  if (frac > 0.5) return k + 1;
  if (frac < 0.5) return k;
  return (k % 2 == 0) ? k : k + 1;
}

}  // namespace

uint8_t encode(double v) {
  if (std::isnan(v)) return kNaN;
  const uint8_t sign = std::signbit(v) ? 0x80 : 0x00;
  double a = std::abs(v);
  if (a > kMaxFinite) a = kMaxFinite;  // saturate (covers infinities too)
  if (a == 0.0) return sign;

  if (a < 0x1.0p-6) {  // subnormal range: steps of 2^-9
    const int q = round_half_even(a * 512.0);
    if (q == 0) return sign;
    if (q < 8) return sign | static_cast<uint8_t>(q);
    return sign | (1 << 3);  // rounds up to the smallest normal
  }

  int e2;
  const double m = std::frexp(a, &e2);  // a = m * 2^e2, m in [0.5, 1)
  int e = e2 - 1;                       // a = (2m) * 2^e, 2m in [1, 2)
  int q = round_half_even((2.0 * m - 1.0) * 8.0);
  if (q == 8) {
    q = 0;
    ++e;
  }
  if (e > 8 || (e == 8 && q == 7)) {  // cannot exceed 448 after clamping
    e = 8;
    q = 6;
  }
  return sign | static_cast<uint8_t>((e + 7) << 3) | static_cast<uint8_t>(q);
}

double decode(uint8_t code) {
  if (is_nan_code(code)) return std::nan("");
  const double sign = (code & 0x80) ? -1.0 : 1.0;
  const int exp = (code >> 3) & 0xf;
  const int mant = code & 0x7;
  if (exp == 0) return sign * mant * 0x1.0p-9;
  return sign * (1.0 + mant / 8.0) * std::ldexp(1.0, exp - 7);
}

QuantTensor quantize(const Tensor<double>& x) {
  if (!x.all_finite()) throw NumericError("quantize: non-finite input");
  double amax = 0.0;
  for (int64_t i = 0; i < x.numel(); ++i) amax = std::max(amax, std::abs(x[i]));
  QuantTensor q;
  q.shape = x.shape();
  q.scale = amax == 0.0 ? 1.0 : amax / kMaxFinite;
  q.codes.resize(static_cast<size_t>(x.numel()));
  for (int64_t i = 0; i < x.numel(); ++i)
    q.codes[static_cast<size_t>(i)] = encode(x[i] / q.scale);
  return q;
}

Tensor<double> dequantize(const QuantTensor& q) {
  Tensor<double> x(q.shape);
  for (int64_t i = 0; i < x.numel(); ++i)
    x[i] = decode(q.codes[static_cast<size_t>(i)]) * q.scale;
  return x;
}

Tensor<double> roundtrip(const Tensor<double>& x) { return dequantize(quantize(x)); }

QuantHooks<double> act_hooks() {
  QuantHooks<double> h;
  h.act = [](const Tensor<double>& x) { return roundtrip(x); };
  return h;
}

namespace {

void quantize_swiglu(SwigluParams<double>& w) {
  w.up = roundtrip(w.up);
  w.gate = roundtrip(w.gate);
  w.down = roundtrip(w.down);
}

void quantize_stage(StageParams<double>& s) {
  for (auto& w : s.swiglu) quantize_swiglu(w);
  for (auto& w : s.ffn) {
    w.in = roundtrip(w.in);
    w.out = roundtrip(w.out);
  }
  for (auto& m : s.moe)
    for (auto& e : m.experts) quantize_swiglu(e);
}

}  // namespace

ModelParams<double> quantize_weights(const ModelParams<double>& m) {
  ModelParams<double> q = m;
  for (auto& b : q.blocks) {
    quantize_stage(b.stage1);
    quantize_stage(b.stage2);
  }
  return q;
}

Fp8Report fp8_eval(const ModelParams<double>& m, const ExperimentConfig& cfg,
                   const Dataset& eval, int batch_size) {
  const ModelParams<double> mq = quantize_weights(m);
  const QuantHooks<double> hooks = act_hooks();

  Fp8Report r;
  r.layer_max_rel.assign(static_cast<size_t>(cfg.model.layers), 0.0);
  std::vector<double> s32, s8;
  const int n = eval.size();
  for (int start = 0; start < n; start += batch_size) {
    const int count = std::min(batch_size, n - start);
    Batch b = eval.batch_range(start, count);
    std::vector<Tensor<double>> l32, l8;
    Tensor<double> z32 = model_scores_value(m, b, cfg, nullptr, nullptr, nullptr, &l32);
    Tensor<double> z8 =
        model_scores_value(mq, b, cfg, &hooks, nullptr, nullptr, &l8);
    for (size_t layer = 0; layer < l32.size(); ++layer) {
      double amax = 0.0, dmax = 0.0;
      for (int64_t i = 0; i < l32[layer].numel(); ++i) {
        amax = std::max(amax, std::abs(l32[layer][i]));
        dmax = std::max(dmax, std::abs(l32[layer][i] - l8[layer][i]));
      }
      r.layer_max_rel[layer] =
          std::max(r.layer_max_rel[layer], dmax / (amax + 1e-12));
    }
    for (int i = 0; i < count; ++i) {
      s32.push_back(z32[i]);
      s8.push_back(z8[i]);
      r.score_max_abs_dev = std::max(r.score_max_abs_dev, std::abs(z32[i] - z8[i]));
    }
  }
  r.auc_fp32 = auc(s32, eval.labels);
  r.auc_fp8 = auc(s8, eval.labels);
  r.logloss_fp32 = logloss(s32, eval.labels);
  r.logloss_fp8 = logloss(s8, eval.labels);
  return r;
}

}  // namespace tmx::fp8
