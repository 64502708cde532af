#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <numeric>
#include <span>
#include <string>

#include "tmx/tensor.hpp"

// Plain forward math on tensors. Every reduction accumulates strictly
// left-to-right in the contraction index so that re-partitioned execution
// (the device simulator, grouped expert dispatch) reproduces serial results
// bit for bit. Keep it that way.
namespace tmx::kern {

template <typename T>
inline void require(bool ok, const char* op, const std::string& detail) {
  if (!ok) throw ShapeError(std::string(op) + ": " + detail);
}

template <typename T>
inline void check_finite(const Tensor<T>& t, const char* op) {
  if (!t.all_finite())
    throw NumericError(std::string(op) + ": non-finite value in output of shape " +
                       shape_str(t.shape()));
}

// c[m,n] += a[m,k] * b[k,n]; k accumulates in ascending order per element.
template <typename T>
inline void matmul_acc(const T* a, const T* b, T* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const T* ai = a + static_cast<size_t>(i) * k;
    T* ci = c + static_cast<size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const T av = ai[p];
      const T* bp = b + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

template <typename T>
inline Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require<T>(a.rank() == 2 && b.rank() == 2, "matmul",
             "expects rank-2 operands, got " + shape_str(a.shape()) + " x " +
                 shape_str(b.shape()));
  require<T>(a.dim(1) == b.dim(0), "matmul",
             "inner extents differ: " + shape_str(a.shape()) + " x " +
                 shape_str(b.shape()));
  Tensor<T> c(Shape{a.dim(0), b.dim(1)});
  matmul_acc(a.data(), b.data(), c.data(), a.dim(0), a.dim(1), b.dim(1));
  return c;
}

// a[m,k] * b[n,k]^T -> [m,n]; transposes b once so the contraction runs
// through the same row-major kernel.
template <typename T>
inline Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  require<T>(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(1), "matmul_nt",
             shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const int k = a.dim(1), n = b.dim(0);
  Tensor<T> bt(Shape{k, n});
  for (int j = 0; j < n; ++j)
    for (int p = 0; p < k; ++p) bt.at(p, j) = b.at(j, p);
  Tensor<T> c(Shape{a.dim(0), n});
  matmul_acc(a.data(), bt.data(), c.data(), a.dim(0), k, n);
  return c;
}

// a[k,m]^T * b[k,n] -> [m,n]
template <typename T>
inline Tensor<T> matmul_tn(const Tensor<T>& a, const Tensor<T>& b) {
  require<T>(a.rank() == 2 && b.rank() == 2 && a.dim(0) == b.dim(0), "matmul_tn",
             shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const int k = a.dim(0), m = a.dim(1), n = b.dim(1);
  Tensor<T> c(Shape{m, n});
  for (int p = 0; p < k; ++p) {
    const T* ap = a.data() + static_cast<size_t>(p) * m;
    const T* bp = b.data() + static_cast<size_t>(p) * n;
    for (int i = 0; i < m; ++i) {
      const T av = ap[i];
      T* ci = c.data() + static_cast<size_t>(i) * n;
      for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
  return c;
}

template <typename T>
inline Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require<T>(a.same_shape(b), "add",
             shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<T> c = a;
  for (int64_t i = 0; i < c.numel(); ++i) c[i] += b[i];
  return c;
}

template <typename T>
inline Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require<T>(a.same_shape(b), "sub",
             shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<T> c = a;
  for (int64_t i = 0; i < c.numel(); ++i) c[i] -= b[i];
  return c;
}

template <typename T>
inline Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require<T>(a.same_shape(b), "mul",
             shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<T> c = a;
  for (int64_t i = 0; i < c.numel(); ++i) c[i] *= b[i];
  return c;
}

template <typename T>
inline Tensor<T> scale(const Tensor<T>& a, T c) {
  Tensor<T> out = a;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] *= c;
  return out;
}

// Cephes-style polynomial exp for binary32; ~1 ulp, pure float arithmetic so
// the activation loops vectorize. 64-bit paths keep libm's exp.
inline float exp_approx(float x) {
  constexpr float kLog2e = 1.44269504088896341f;
  constexpr float kLn2Hi = 0.693359375f;
  constexpr float kLn2Lo = -2.12194440e-4f;
  x = std::min(x, 88.3762626647950f);
  x = std::max(x, -87.3365478515625f);
  const float fx = std::floor(x * kLog2e + 0.5f);
  x -= fx * kLn2Hi;
  x -= fx * kLn2Lo;
  float p = 1.9875691500e-4f;
  p = p * x + 1.3981999507e-3f;
  p = p * x + 8.3334519073e-3f;
  p = p * x + 4.1665795894e-2f;
  p = p * x + 1.6666665459e-1f;
  p = p * x + 5.0000001201e-1f;
  p = p * (x * x) + x + 1.0f;
  const int n = static_cast<int>(fx);
  const float pow2n = std::bit_cast<float>((n + 127) << 23);
  return p * pow2n;
}

template <typename T>
inline T sigmoid_scalar(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

inline float sigmoid_scalar(float x) {
  const float e = exp_approx(-std::abs(x));
  const float s = 1.0f / (1.0f + e);
  return x >= 0.0f ? s : 1.0f - s;
}

template <typename T>
inline Tensor<T> sigmoid(const Tensor<T>& a) {
  Tensor<T> c = a;
  for (int64_t i = 0; i < c.numel(); ++i) c[i] = sigmoid_scalar(c[i]);
  return c;
}

// Swish(x) = x * sigmoid(x)
template <typename T>
inline Tensor<T> swish(const Tensor<T>& a) {
  Tensor<T> c = a;
  for (int64_t i = 0; i < c.numel(); ++i) c[i] = c[i] * sigmoid_scalar(c[i]);
  return c;
}

// Softmax along the last axis, max-subtracted.
template <typename T>
inline Tensor<T> softmax_rows(const Tensor<T>& a) {
  require<T>(a.rank() >= 1, "softmax", "rank-0 input");
  const int w = a.dim(a.rank() - 1);
  const int64_t rows = a.numel() / w;
  Tensor<T> c = a;
  for (int64_t r = 0; r < rows; ++r) {
    T* p = c.data() + r * w;
    T mx = p[0];
    for (int j = 1; j < w; ++j) mx = std::max(mx, p[j]);
    T sum = T(0);
    for (int j = 0; j < w; ++j) {
      p[j] = std::exp(p[j] - mx);
      sum += p[j];
    }
    for (int j = 0; j < w; ++j) p[j] /= sum;
  }
  return c;
}

// y_i = x_i * gamma_i / sqrt(mean(x^2) + eps), over the last axis.
template <typename T>
inline Tensor<T> rmsnorm_rows(const Tensor<T>& x, const Tensor<T>& gamma, T eps) {
  const int w = x.dim(x.rank() - 1);
  require<T>(gamma.numel() == w, "rmsnorm",
             "gain width " + std::to_string(gamma.numel()) +
                 " vs feature width " + std::to_string(w));
  const int64_t rows = x.numel() / w;
  Tensor<T> y = x;
  for (int64_t r = 0; r < rows; ++r) {
    T* p = y.data() + r * w;
    T ss = T(0);
    for (int j = 0; j < w; ++j) ss += p[j] * p[j];
    const T inv = T(1) / std::sqrt(ss / T(w) + eps);
    for (int j = 0; j < w; ++j) p[j] = p[j] * gamma[j] * inv;
  }
  return y;
}

// Per-row scalar gather over the flattened non-leading axes:
// out[r, j] = in[r, slot_src[j]].
template <typename T>
inline Tensor<T> gather_slots(const Tensor<T>& x, std::span<const int> slot_src,
                              Shape out_shape) {
  const int64_t in_w = x.row_width();
  const int64_t out_w = static_cast<int64_t>(slot_src.size());
  require<T>(!out_shape.empty() && out_shape[0] == x.rows() &&
                 shape_numel(out_shape) == x.rows() * out_w,
             "gather_slots", "map size vs output shape " + shape_str(out_shape));
  for (int s : slot_src)
    require<T>(s >= 0 && s < in_w, "gather_slots",
               "slot " + std::to_string(s) + " out of width " + std::to_string(in_w));
  Tensor<T> y(std::move(out_shape));
  for (int r = 0; r < x.rows(); ++r) {
    const T* in = x.data() + static_cast<size_t>(r) * in_w;
    T* out = y.data() + static_cast<size_t>(r) * out_w;
    for (int64_t j = 0; j < out_w; ++j) out[j] = in[slot_src[static_cast<size_t>(j)]];
  }
  return y;
}

// Accumulating inverse of gather_slots (duplicate sources add).
template <typename T>
inline void scatter_slots_add(Tensor<T>& dst, const Tensor<T>& src,
                              std::span<const int> slot_src) {
  const int64_t dst_w = dst.row_width();
  const int64_t src_w = src.row_width();
  for (int r = 0; r < src.rows(); ++r) {
    T* out = dst.data() + static_cast<size_t>(r) * dst_w;
    const T* in = src.data() + static_cast<size_t>(r) * src_w;
    for (int64_t j = 0; j < src_w; ++j) out[slot_src[static_cast<size_t>(j)]] += in[j];
  }
}

template <typename T>
inline Tensor<T> gather_rows(const Tensor<T>& x, std::span<const int> rows) {
  const int64_t w = x.row_width();
  for (int r : rows)
    require<T>(r >= 0 && r < x.rows(), "gather_rows",
               "row " + std::to_string(r) + " out of " + std::to_string(x.rows()));
  Shape s = x.shape();
  s[0] = static_cast<int>(rows.size());
  Tensor<T> y(std::move(s));
  for (size_t i = 0; i < rows.size(); ++i)
    std::memcpy(y.data() + i * w, x.data() + static_cast<size_t>(rows[i]) * w,
                sizeof(T) * static_cast<size_t>(w));
  return y;
}

template <typename T>
inline void scatter_rows_add(Tensor<T>& dst, const Tensor<T>& src,
                             std::span<const int> rows) {
  const int64_t w = dst.row_width();
  for (size_t i = 0; i < rows.size(); ++i) {
    T* out = dst.data() + static_cast<size_t>(rows[i]) * w;
    const T* in = src.data() + i * w;
    for (int64_t j = 0; j < w; ++j) out[j] += in[j];
  }
}

// out[i, j] = x[i, idx(i, j)] for a rank-2 x and rank-2 integer index.
template <typename T>
inline Tensor<T> gather_cols(const Tensor<T>& x, const Tensor<int>& idx) {
  require<T>(x.rank() == 2 && idx.rank() == 2 && idx.dim(0) == x.dim(0),
             "gather_cols", shape_str(x.shape()) + " with " + shape_str(idx.shape()));
  const int n = x.dim(0), w = x.dim(1), k = idx.dim(1);
  Tensor<T> y(Shape{n, k});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < k; ++j) {
      const int c = idx.at(i, j);
      require<T>(c >= 0 && c < w, "gather_cols", "column " + std::to_string(c));
      y.at(i, j) = x.at(i, c);
    }
  return y;
}

template <typename T>
inline Tensor<T> scale_rows(const Tensor<T>& x, const Tensor<T>& s) {
  require<T>(s.numel() == x.rows(), "scale_rows",
             "scale count " + std::to_string(s.numel()) + " vs rows " +
                 std::to_string(x.rows()));
  Tensor<T> y = x;
  const int64_t w = y.row_width();
  for (int r = 0; r < y.rows(); ++r) {
    T* p = y.data() + static_cast<size_t>(r) * w;
    const T f = s[r];
    for (int64_t j = 0; j < w; ++j) p[j] *= f;
  }
  return y;
}

template <typename T>
inline Tensor<T> mean_axis(const Tensor<T>& x, int axis) {
  require<T>(axis >= 0 && axis < x.rank(), "mean_axis",
             "axis " + std::to_string(axis) + " of " + shape_str(x.shape()));
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= x.dim(i);
  for (int i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const int n = x.dim(axis);
  Shape s;
  for (int i = 0; i < x.rank(); ++i)
    if (i != axis) s.push_back(x.dim(i));
  if (s.empty()) s.push_back(1);
  Tensor<T> y(std::move(s));
  for (int64_t o = 0; o < outer; ++o) {
    const T* base = x.data() + o * n * inner;
    T* out = y.data() + o * inner;
    for (int a = 0; a < n; ++a)
      for (int64_t i = 0; i < inner; ++i) out[i] += base[a * inner + i];
    for (int64_t i = 0; i < inner; ++i) out[i] /= T(n);
  }
  return y;
}

template <typename T>
inline T sum_all(const Tensor<T>& x) {
  T s = T(0);
  for (int64_t i = 0; i < x.numel(); ++i) s += x[i];
  return s;
}

template <typename T>
inline Tensor<T> transpose2d(const Tensor<T>& x) {
  require<T>(x.rank() == 2, "transpose", shape_str(x.shape()));
  const int m = x.dim(0), n = x.dim(1);
  Tensor<T> y(Shape{n, m});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) y.at(j, i) = x.at(i, j);
  return y;
}

template <typename T>
inline Tensor<T> concat_axis(std::span<const Tensor<T>> parts, int axis) {
  require<T>(!parts.empty(), "concat", "no operands");
  const Tensor<T>& head = parts[0];
  require<T>(axis >= 0 && axis < head.rank(), "concat",
             "axis " + std::to_string(axis));
  int total = 0;
  for (const auto& p : parts) {
    require<T>(p.rank() == head.rank(), "concat", "rank mismatch");
    for (int i = 0; i < head.rank(); ++i)
      if (i != axis)
        require<T>(p.dim(i) == head.dim(i), "concat",
                   "extent mismatch at axis " + std::to_string(i) + ": " +
                       shape_str(p.shape()) + " vs " + shape_str(head.shape()));
    total += p.dim(axis);
  }
  Shape s = head.shape();
  s[static_cast<size_t>(axis)] = total;
  Tensor<T> y(std::move(s));
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= head.dim(i);
  for (int i = axis + 1; i < head.rank(); ++i) inner *= head.dim(i);
  int64_t off = 0;
  for (const auto& p : parts) {
    const int64_t chunk = p.dim(axis) * inner;
    for (int64_t o = 0; o < outer; ++o)
      std::memcpy(y.data() + o * total * inner + off, p.data() + o * chunk,
                  sizeof(T) * static_cast<size_t>(chunk));
    off += chunk;
  }
  return y;
}

template <typename T>
inline std::vector<Tensor<T>> split_axis(const Tensor<T>& x, int axis,
                                         std::span<const int> sizes) {
  require<T>(axis >= 0 && axis < x.rank(), "split", "axis " + std::to_string(axis));
  int total = 0;
  for (int s : sizes) {
    require<T>(s > 0, "split", "non-positive piece");
    total += s;
  }
  require<T>(total == x.dim(axis), "split",
             "pieces sum to " + std::to_string(total) + " but axis extent is " +
                 std::to_string(x.dim(axis)));
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= x.dim(i);
  for (int i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  std::vector<Tensor<T>> out;
  out.reserve(sizes.size());
  int64_t off = 0;
  for (int sz : sizes) {
    Shape s = x.shape();
    s[static_cast<size_t>(axis)] = sz;
    Tensor<T> piece(std::move(s));
    const int64_t chunk = sz * inner;
    for (int64_t o = 0; o < outer; ++o)
      std::memcpy(piece.data() + o * chunk,
                  x.data() + o * x.dim(axis) * inner + off,
                  sizeof(T) * static_cast<size_t>(chunk));
    off += chunk;
    out.push_back(std::move(piece));
  }
  return out;
}

// Row indices of the k largest entries per row, descending by value,
// ties broken toward the lowest index.
template <typename T>
inline Tensor<int> topk_indices(const Tensor<T>& scores, int k) {
  require<T>(scores.rank() == 2, "topk", shape_str(scores.shape()));
  const int n = scores.dim(0), w = scores.dim(1);
  require<T>(k >= 1 && k <= w, "topk",
             "k=" + std::to_string(k) + " of width " + std::to_string(w));
  Tensor<int> idx(Shape{n, k});
  std::vector<int> order(static_cast<size_t>(w));
  for (int i = 0; i < n; ++i) {
    const T* row = scores.data() + static_cast<size_t>(i) * w;
    for (int j = 0; j < w; ++j) order[static_cast<size_t>(j)] = j;
    std::stable_sort(order.begin(), order.end(),
                     [row](int a, int b) { return row[a] > row[b]; });
    for (int j = 0; j < k; ++j) idx.at(i, j) = order[static_cast<size_t>(j)];
  }
  return idx;
}

// Stable mean binary cross-entropy over logits.
template <typename T>
inline T bce_with_logits_value(const Tensor<T>& z, const Tensor<T>& y) {
  require<T>(z.numel() == y.numel(), "bce",
             "logits " + shape_str(z.shape()) + " vs labels " + shape_str(y.shape()));
  T loss = T(0);
  for (int64_t i = 0; i < z.numel(); ++i) {
    const T zi = z[i];
    loss += std::max(zi, T(0)) - zi * y[i] + std::log1p(std::exp(-std::abs(zi)));
  }
  return loss / T(z.numel());
}

}  // namespace tmx::kern
