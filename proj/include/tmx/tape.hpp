#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "tmx/kernels.hpp"

namespace tmx {

// Handle to a node on a tape. Only meaningful for the tape that created it.
struct Var {
  int32_t id = -1;
  bool valid() const { return id >= 0; }
};

// Reverse-mode differentiation tape over a fixed primitive set.
//
// Nodes are appended in execution order, so creation order is a topological
// order: every node's inputs precede it. backward() walks the tape once in
// reverse. A tape is single-threaded; independent tapes may run on separate
// threads.
//
// Forward values are computed by the kernels in kern::, which fix the
// reduction order (left-to-right in the contraction index). The device
// simulator and the quantized inference path call the same kernels, which is
// what makes their equivalence checks tight.
template <typename T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // ---- leaves ----

  Var leaf(Tensor<T> value, bool requires_grad = false) {
    return push(std::move(value), {}, requires_grad, nullptr, "leaf");
  }

  Var constant(Tensor<T> value) { return leaf(std::move(value), false); }

  // ---- primitives ----

  Var matmul(Var a, Var b) {
    Tensor<T> out = kern::matmul(val(a), val(b));
    gemm_macs_ += static_cast<uint64_t>(val(a).dim(0)) * val(a).dim(1) *
                  val(b).dim(1);
    return push(std::move(out), {a, b}, false,
                [a, b](Tape& t, const Node& n) {
                  if (t.needs(a))
                    t.acc(a, kern::matmul_nt(n.grad, t.val(b)));
                  if (t.needs(b))
                    t.acc(b, kern::matmul_tn(t.val(a), n.grad));
                },
                "matmul");
  }

  Var add(Var a, Var b) {
    return push(kern::add(val(a), val(b)), {a, b}, false,
                [a, b](Tape& t, const Node& n) {
                  if (t.needs(a)) t.acc(a, n.grad);
                  if (t.needs(b)) t.acc(b, n.grad);
                },
                "add");
  }

  Var sub(Var a, Var b) {
    return push(kern::sub(val(a), val(b)), {a, b}, false,
                [a, b](Tape& t, const Node& n) {
                  if (t.needs(a)) t.acc(a, n.grad);
                  if (t.needs(b)) t.acc(b, kern::scale(n.grad, T(-1)));
                },
                "sub");
  }

  Var mul(Var a, Var b) {
    return push(kern::mul(val(a), val(b)), {a, b}, false,
                [a, b](Tape& t, const Node& n) {
                  if (t.needs(a)) t.acc(a, kern::mul(n.grad, t.val(b)));
                  if (t.needs(b)) t.acc(b, kern::mul(n.grad, t.val(a)));
                },
                "mul");
  }

  Var scale(Var a, T c) {
    return push(kern::scale(val(a), c), {a}, false,
                [a, c](Tape& t, const Node& n) {
                  if (t.needs(a)) t.acc(a, kern::scale(n.grad, c));
                },
                "scale");
  }

  Var sigmoid(Var a) {
    return push(kern::sigmoid(val(a)), {a}, false,
                [a](Tape& t, const Node& n) {
                  if (!t.needs(a)) return;
                  Tensor<T> g = n.grad;
                  for (int64_t i = 0; i < g.numel(); ++i) {
                    const T s = n.value[i];
                    g[i] *= s * (T(1) - s);
                  }
                  t.acc(a, g);
                },
                "sigmoid");
  }

  // Keeps the forward sigmoid for the backward rule.
  Var swish(Var a) {
    Tensor<T> sig = kern::sigmoid(val(a));
    Var v = push(kern::mul(val(a), sig), {a}, false,
                 [a](Tape& t, const Node& n) {
                   if (!t.needs(a)) return;
                   const Tensor<T>& x = t.val(a);
                   Tensor<T> g = n.grad;
                   for (int64_t i = 0; i < g.numel(); ++i) {
                     const T s = n.aux[i];
                     g[i] *= s + x[i] * s * (T(1) - s);
                   }
                   t.acc(a, g);
                 },
                 "swish");
    if (node(v).needs_grad) node(v).aux = std::move(sig);
    return v;
  }

  // Softmax along the last axis.
  Var softmax(Var a) {
    return push(kern::softmax_rows(val(a)), {a}, false,
                [a](Tape& t, const Node& n) {
                  if (!t.needs(a)) return;
                  const int w = n.value.dim(n.value.rank() - 1);
                  const int64_t rows = n.value.numel() / w;
                  Tensor<T> g(n.value.shape());
                  for (int64_t r = 0; r < rows; ++r) {
                    const T* s = n.value.data() + r * w;
                    const T* dy = n.grad.data() + r * w;
                    T dot = T(0);
                    for (int j = 0; j < w; ++j) dot += dy[j] * s[j];
                    T* dx = g.data() + r * w;
                    for (int j = 0; j < w; ++j) dx[j] = s[j] * (dy[j] - dot);
                  }
                  t.acc(a, g);
                },
                "softmax");
  }

  // RMS normalization over the last axis with a learned gain.
  Var rmsnorm(Var x, Var gamma, T eps) {
    return push(kern::rmsnorm_rows(val(x), val(gamma), eps), {x, gamma}, false,
                [x, gamma, eps](Tape& t, const Node& n) {
                  const Tensor<T>& xv = t.val(x);
                  const Tensor<T>& gv = t.val(gamma);
                  const int w = xv.dim(xv.rank() - 1);
                  const int64_t rows = xv.numel() / w;
                  Tensor<T> dx(xv.shape());
                  Tensor<T> dgamma(gv.shape());
                  for (int64_t r = 0; r < rows; ++r) {
                    const T* xp = xv.data() + r * w;
                    const T* dy = n.grad.data() + r * w;
                    T ss = T(0);
                    for (int j = 0; j < w; ++j) ss += xp[j] * xp[j];
                    const T inv = T(1) / std::sqrt(ss / T(w) + eps);
                    T proj = T(0);
                    for (int j = 0; j < w; ++j) proj += dy[j] * gv[j] * xp[j];
                    const T c = proj * inv * inv * inv / T(w);
                    T* dxp = dx.data() + r * w;
                    for (int j = 0; j < w; ++j) {
                      dxp[j] = gv[j] * inv * dy[j] - xp[j] * c;
                      dgamma[j] += dy[j] * xp[j] * inv;
                    }
                  }
                  if (t.needs(x)) t.acc(x, dx);
                  if (t.needs(gamma)) t.acc(gamma, dgamma);
                },
                "rmsnorm");
  }

  Var concat(std::span<const Var> parts, int axis) {
    std::vector<Tensor<T>> vals;
    vals.reserve(parts.size());
    for (Var p : parts) vals.push_back(val(p));
    Tensor<T> out = kern::concat_axis(std::span<const Tensor<T>>(vals), axis);
    std::vector<Var> ps(parts.begin(), parts.end());
    return push(std::move(out), ps, false,
                [ps, axis](Tape& t, const Node& n) {
                  std::vector<int> sizes;
                  sizes.reserve(ps.size());
                  for (Var p : ps) sizes.push_back(t.val(p).dim(axis));
                  auto pieces = kern::split_axis(n.grad, axis, std::span<const int>(sizes));
                  for (size_t i = 0; i < ps.size(); ++i)
                    if (t.needs(ps[i])) t.acc(ps[i], pieces[i]);
                },
                "concat");
  }

  std::vector<Var> split(Var x, int axis, std::span<const int> sizes) {
    auto pieces = kern::split_axis(val(x), axis, sizes);
    std::vector<Var> out;
    out.reserve(pieces.size());
    int64_t inner = 1;
    const Tensor<T>& xv = val(x);
    for (int i = axis + 1; i < xv.rank(); ++i) inner *= xv.dim(i);
    const int64_t axis_extent = xv.dim(axis);
    int64_t off = 0;
    for (size_t i = 0; i < pieces.size(); ++i) {
      const int64_t piece_axis = sizes[i];
      const int64_t start = off;
      out.push_back(push(
          std::move(pieces[i]), {x}, false,
          [x, axis, start, piece_axis, inner, axis_extent](Tape& t, const Node& n) {
            if (!t.needs(x)) return;
            Tensor<T>& gx = t.grad_buf(x);
            const int64_t outer = n.grad.numel() / (piece_axis * inner);
            for (int64_t o = 0; o < outer; ++o) {
              T* dst = gx.data() + (o * axis_extent + start) * inner;
              const T* src = n.grad.data() + o * piece_axis * inner;
              for (int64_t j = 0; j < piece_axis * inner; ++j) dst[j] += src[j];
            }
          },
          "split"));
      off += piece_axis;
    }
    return out;
  }

  std::vector<Var> split_even(Var x, int axis, int parts) {
    const int extent = val(x).dim(axis);
    if (parts <= 0 || extent % parts != 0)
      throw ShapeError("split: axis extent " + std::to_string(extent) +
                       " not divisible into " + std::to_string(parts) + " parts");
    std::vector<int> sizes(static_cast<size_t>(parts), extent / parts);
    return split(x, axis, sizes);
  }

  Var reshape(Var x, Shape s) {
    return push(val(x).reshaped(std::move(s)), {x}, false,
                [x](Tape& t, const Node& n) {
                  if (t.needs(x)) t.acc(x, n.grad.reshaped(t.val(x).shape()));
                },
                "reshape");
  }

  Var transpose(Var x) {
    return push(kern::transpose2d(val(x)), {x}, false,
                [x](Tape& t, const Node& n) {
                  if (t.needs(x)) t.acc(x, kern::transpose2d(n.grad));
                },
                "transpose");
  }

  // Per-row scalar rearrangement (see kern::gather_slots). Duplicated sources
  // accumulate in the backward pass.
  Var gather_slots(Var x, std::vector<int> slot_src, Shape out_shape) {
    Tensor<T> out = kern::gather_slots(val(x), std::span<const int>(slot_src),
                                       std::move(out_shape));
    return push(std::move(out), {x}, false,
                [x, slot_src = std::move(slot_src)](Tape& t, const Node& n) {
                  if (!t.needs(x)) return;
                  kern::scatter_slots_add(t.grad_buf(x), n.grad,
                                          std::span<const int>(slot_src));
                },
                "gather_slots");
  }

  Var gather_rows(Var x, std::vector<int> rows) {
    Tensor<T> out = kern::gather_rows(val(x), std::span<const int>(rows));
    return push(std::move(out), {x}, false,
                [x, rows = std::move(rows)](Tape& t, const Node& n) {
                  if (!t.needs(x)) return;
                  kern::scatter_rows_add(t.grad_buf(x), n.grad,
                                         std::span<const int>(rows));
                },
                "gather_rows");
  }

  Var scatter_add_rows(Var x, std::vector<int> rows, int out_rows) {
    const Tensor<T>& xv = val(x);
    if (static_cast<int>(rows.size()) != xv.rows())
      throw ShapeError("scatter_add_rows: " + std::to_string(rows.size()) +
                       " indices for " + std::to_string(xv.rows()) + " rows");
    Shape s = xv.shape();
    s[0] = out_rows;
    Tensor<T> out(std::move(s));
    kern::scatter_rows_add(out, xv, std::span<const int>(rows));
    return push(std::move(out), {x}, false,
                [x, rows = std::move(rows)](Tape& t, const Node& n) {
                  if (!t.needs(x)) return;
                  t.acc(x, kern::gather_rows(n.grad, std::span<const int>(rows)));
                },
                "scatter_add_rows");
  }

  // out[i, j] = x[i, idx(i, j)]. The index is data (not differentiated);
  // gradients flow only through the selected entries.
  Var gather_cols(Var x, Tensor<int> idx) {
    Tensor<T> out = kern::gather_cols(val(x), idx);
    return push(std::move(out), {x}, false,
                [x, idx = std::move(idx)](Tape& t, const Node& n) {
                  if (!t.needs(x)) return;
                  Tensor<T>& gx = t.grad_buf(x);
                  for (int i = 0; i < idx.dim(0); ++i)
                    for (int j = 0; j < idx.dim(1); ++j)
                      gx.at(i, idx.at(i, j)) += n.grad.at(i, j);
                },
                "gather_cols");
  }

  Var scale_rows(Var x, Var s) {
    return push(kern::scale_rows(val(x), val(s)), {x, s}, false,
                [x, s](Tape& t, const Node& n) {
                  const Tensor<T>& xv = t.val(x);
                  const Tensor<T>& sv = t.val(s);
                  const int64_t w = xv.row_width();
                  if (t.needs(x)) t.acc(x, kern::scale_rows(n.grad, sv));
                  if (t.needs(s)) {
                    Tensor<T> ds(sv.shape());
                    for (int r = 0; r < xv.rows(); ++r) {
                      T dot = T(0);
                      const T* gp = n.grad.data() + r * w;
                      const T* xp = xv.data() + r * w;
                      for (int64_t j = 0; j < w; ++j) dot += gp[j] * xp[j];
                      ds[r] = dot;
                    }
                    t.acc(s, ds);
                  }
                },
                "scale_rows");
  }

  // y = x + b[0] for a single-element bias Var.
  Var add_bias(Var x, Var b) {
    if (val(b).numel() != 1)
      throw ShapeError("add_bias: bias must be a single scalar, got shape " +
                       shape_str(val(b).shape()));
    Tensor<T> out = val(x);
    const T bias = val(b)[0];
    for (int64_t i = 0; i < out.numel(); ++i) out[i] += bias;
    return push(std::move(out), {x, b}, false,
                [x, b](Tape& t, const Node& n) {
                  if (t.needs(x)) t.acc(x, n.grad);
                  if (t.needs(b))
                    t.acc(b, Tensor<T>::scalar(kern::sum_all(n.grad)));
                },
                "add_bias");
  }

  Var mean_axis(Var x, int axis) {
    return push(kern::mean_axis(val(x), axis), {x, }, false,
                [x, axis](Tape& t, const Node& n) {
                  if (!t.needs(x)) return;
                  const Tensor<T>& xv = t.val(x);
                  const int nn = xv.dim(axis);
                  int64_t outer = 1, inner = 1;
                  for (int i = 0; i < axis; ++i) outer *= xv.dim(i);
                  for (int i = axis + 1; i < xv.rank(); ++i) inner *= xv.dim(i);
                  Tensor<T>& gx = t.grad_buf(x);
                  for (int64_t o = 0; o < outer; ++o) {
                    const T* gsrc = n.grad.data() + o * inner;
                    T* gdst = gx.data() + o * nn * inner;
                    for (int a = 0; a < nn; ++a)
                      for (int64_t i = 0; i < inner; ++i)
                        gdst[a * inner + i] += gsrc[i] / T(nn);
                  }
                },
                "mean_axis");
  }

  Var sum(Var x) {
    return push(Tensor<T>::scalar(kern::sum_all(val(x))), {x}, false,
                [x](Tape& t, const Node& n) {
                  if (!t.needs(x)) return;
                  t.acc(x, Tensor<T>(t.val(x).shape(), n.grad[0]));
                },
                "sum");
  }

  Var mean(Var x) {
    const int64_t n = val(x).numel();
    return push(Tensor<T>::scalar(kern::sum_all(val(x)) / T(n)), {x}, false,
                [x, n](Tape& t, const Node& nd) {
                  if (!t.needs(x)) return;
                  t.acc(x, Tensor<T>(t.val(x).shape(), nd.grad[0] / T(n)));
                },
                "mean");
  }

  // Mean binary cross-entropy against constant {0,1} labels, on logits.
  Var bce_with_logits(Var z, Tensor<T> labels) {
    const T loss = kern::bce_with_logits_value(val(z), labels);
    return push(Tensor<T>::scalar(loss), {z}, false,
                [z, labels = std::move(labels)](Tape& t, const Node& n) {
                  if (!t.needs(z)) return;
                  const Tensor<T>& zv = t.val(z);
                  Tensor<T> dz(zv.shape());
                  const T up = n.grad[0] / T(zv.numel());
                  for (int64_t i = 0; i < zv.numel(); ++i)
                    dz[i] = (kern::sigmoid_scalar(zv[i]) - labels[i]) * up;
                  t.acc(z, dz);
                },
                "bce_with_logits");
  }

  // ---- queries / backward ----

  const Tensor<T>& val(Var v) const { return node(v).value; }

  bool needs(Var v) const { return node(v).needs_grad; }

  const Tensor<T>& grad(Var v) const {
    const Node& n = node(v);
    if (n.grad.empty())
      throw ShapeError("grad: no gradient recorded for this node (op '" +
                       std::string(n.op) + "'); run backward first");
    return n.grad;
  }

  // Runs one reverse sweep from a scalar loss. Every node is visited at most
  // once; requires_grad leaves that the loss does not depend on end up with
  // zero gradients.
  void backward(Var loss) {
    Node& ln = node(loss);
    if (ln.value.numel() != 1)
      throw ShapeError("backward: loss must be scalar, got shape " +
                       shape_str(ln.value.shape()));
    for (Node& n : nodes_)
      if (n.is_leaf_requires && n.grad.empty()) n.grad = Tensor<T>(n.value.shape());
    grad_buf(loss)[0] += T(1);
    for (int32_t id = loss.id; id >= 0; --id) {
      Node& n = nodes_[static_cast<size_t>(id)];
      if (!n.needs_grad || !n.back || n.grad.empty()) continue;
      n.back(*this, n);
    }
  }

  size_t size() const { return nodes_.size(); }
  uint64_t gemm_macs() const { return gemm_macs_; }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    Tensor<T> aux;  // op-specific forward byproduct kept for backward
    std::function<void(Tape&, const Node&)> back;
    const char* op = "";
    bool needs_grad = false;
    bool is_leaf_requires = false;
  };

  const Node& node(Var v) const {
    if (!v.valid() || static_cast<size_t>(v.id) >= nodes_.size())
      throw ShapeError("invalid tape handle");
    return nodes_[static_cast<size_t>(v.id)];
  }
  Node& node(Var v) {
    if (!v.valid() || static_cast<size_t>(v.id) >= nodes_.size())
      throw ShapeError("invalid tape handle");
    return nodes_[static_cast<size_t>(v.id)];
  }

  Tensor<T>& grad_buf(Var v) {
    Node& n = node(v);
    if (n.grad.empty()) n.grad = Tensor<T>(n.value.shape());
    return n.grad;
  }

  void acc(Var v, const Tensor<T>& g) {
    Tensor<T>& buf = grad_buf(v);
    for (int64_t i = 0; i < buf.numel(); ++i) buf[i] += g[i];
  }

  Var push(Tensor<T> value, std::vector<Var> parents, bool leaf_requires,
           std::function<void(Tape&, const Node&)> back, const char* op) {
    kern::check_finite(value, op);
    bool needs = leaf_requires;
    for (Var p : parents) needs = needs || node(p).needs_grad;
    Node n;
    n.value = std::move(value);
    n.op = op;
    n.needs_grad = needs;
    n.is_leaf_requires = leaf_requires;
    if (needs) n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int32_t>(nodes_.size() - 1)};
  }

  std::vector<Node> nodes_;
  uint64_t gemm_macs_ = 0;

  friend struct TapeTestAccess;
};

}  // namespace tmx
