#pragma once

#include <type_traits>
#include <functional>
#include <optional>
#include <span>

#include "tmx/swiglu.hpp"

namespace tmx {

// Activation transform applied along the quantized inference dataflow.
// Identity when absent; the fp8 path plugs encode/decode round-trips in here.
template <typename T>
struct QuantHooks {
  std::function<Tensor<T>(const Tensor<T>&)> act;
};

inline double default_alpha(int experts_total, int k_active) {
  if (k_active <= 0) throw ConfigError("default_alpha: no active experts");
  return static_cast<double>(experts_total) / k_active;
}

// Expert bank for one token position. Routed experts come first; when
// shared_last is set the final expert bypasses routing and is always active.
template <typename T>
struct SpMoeParams {
  std::vector<SwigluParams<T>> experts;
  Tensor<T> router;  // [width, routed_count]
  int k_active = 1;
  bool shared_last = false;
  double alpha = 1.0;

  int total_count() const { return static_cast<int>(experts.size()); }
  int routed_count() const { return total_count() - (shared_last ? 1 : 0); }
  int k_routed() const { return k_active - (shared_last ? 1 : 0); }
};

struct SpMoeVars {
  std::vector<SwigluVars> experts;
  Var router;
  int k_active = 1;
  bool shared_last = false;
  double alpha = 1.0;
  int routed_count() const { return static_cast<int>(experts.size()) - (shared_last ? 1 : 0); }
  int k_routed() const { return k_active - (shared_last ? 1 : 0); }
};

// Routed-expert activation counts over a sample window, per token position.
// Routed experts occupy indices 0..routed-1; the shared expert, when present,
// is reported at index routed.
struct LoadStats {
  int positions = 0;
  int routed = 0;
  bool shared = false;
  int64_t window = 0;
  std::vector<int64_t> counts;

  void init(int pos, int routed_experts, bool has_shared) {
    positions = pos;
    routed = routed_experts;
    shared = has_shared;
    window = 0;
    counts.assign(static_cast<size_t>(pos) * (routed + (has_shared ? 1 : 0)), 0);
  }
  int lanes() const { return routed + (shared ? 1 : 0); }
  int64_t count(int pos, int e) const {
    return counts[static_cast<size_t>(pos) * lanes() + e];
  }
  double frequency(int pos, int e) const {
    return window == 0 ? 0.0 : static_cast<double>(count(pos, e)) / window;
  }
  int64_t routed_total(int pos) const {
    int64_t s = 0;
    for (int e = 0; e < routed; ++e) s += count(pos, e);
    return s;
  }
  // Coefficient of variation of routed-expert frequencies at one position.
  double cv(int pos) const {
    if (routed == 0) return 0.0;
    double mean = 0.0;
    for (int e = 0; e < routed; ++e) mean += frequency(pos, e);
    mean /= routed;
    if (mean == 0.0) return 0.0;
    double var = 0.0;
    for (int e = 0; e < routed; ++e) {
      const double d = frequency(pos, e) - mean;
      var += d * d;
    }
    return std::sqrt(var / routed) / mean;
  }
};

class LoadRecorder {
 public:
  LoadRecorder(int positions, int routed, bool shared) {
    stats_.init(positions, routed, shared);
  }
  void observe(int position, const Tensor<int>& routed_idx) {
    const int lanes = stats_.lanes();
    int64_t* row = stats_.counts.data() + static_cast<size_t>(position) * lanes;
    for (int64_t i = 0; i < routed_idx.numel(); ++i) row[routed_idx[i]] += 1;
    if (stats_.shared) row[stats_.routed] += routed_idx.dim(0);
    if (position == 0) stats_.window += routed_idx.dim(0);
  }
  void observe_shared_only(int position, int batch) {
    if (stats_.shared)
      stats_.counts[static_cast<size_t>(position) * stats_.lanes() + stats_.routed] +=
          batch;
    if (position == 0) stats_.window += batch;
  }
  const LoadStats& stats() const { return stats_; }

 private:
  LoadStats stats_;
};

// Route one input vector: top-k scores by the router, ties toward the lowest
// index, gates softmax-normalized over the selected scores only.
template <typename T>
struct RouteResult {
  std::vector<int> indices;
  std::vector<T> gates;
};

template <typename T>
RouteResult<T> route(const Tensor<T>& x, const Tensor<T>& router, int k_routed) {
  if (k_routed > router.dim(1))
    throw ShapeError("route: k=" + std::to_string(k_routed) + " exceeds " +
                     std::to_string(router.dim(1)) + " routed experts");
  Tensor<T> scores = kern::matmul(x.reshaped({1, router.dim(0)}), router);
  Tensor<int> idx = kern::topk_indices(scores, k_routed);
  Tensor<T> sel = kern::gather_cols(scores, idx);
  Tensor<T> gates = kern::softmax_rows(sel);
  RouteResult<T> r;
  for (int j = 0; j < k_routed; ++j) {
    r.indices.push_back(idx.at(0, j));
    r.gates.push_back(gates.at(0, j));
  }
  return r;
}

namespace detail {

// Row lists per expert from a [B, k] selection, rows ascending; also the flat
// offsets into the gate matrix for those rows.
struct ExpertGroups {
  std::vector<std::vector<int>> rows;
  std::vector<std::vector<int>> gate_slots;
};

inline ExpertGroups group_by_expert(const Tensor<int>& idx, int routed) {
  ExpertGroups g;
  g.rows.resize(static_cast<size_t>(routed));
  g.gate_slots.resize(static_cast<size_t>(routed));
  const int batch = idx.dim(0), k = idx.dim(1);
  for (int i = 0; i < batch; ++i)
    for (int j = 0; j < k; ++j) {
      const int e = idx.at(i, j);
      g.rows[static_cast<size_t>(e)].push_back(i);
      g.gate_slots[static_cast<size_t>(e)].push_back(i * k + j);
    }
  return g;
}

}  // namespace detail

// Grouped evaluation on the tape: scores -> top-k -> per-expert batched
// SwiGLU -> gate-weighted scatter, accumulated in expert order, scaled by
// alpha, plus the always-on shared expert. Unselected experts contribute no
// nodes, so their weights receive exactly zero gradient.
template <typename T>
Var sp_moe(Tape<T>& t, Var x, const SpMoeVars& m, LoadRecorder* rec = nullptr,
           int position = 0) {
  const int batch = t.val(x).dim(0);
  const int routed = m.routed_count();
  const int k_routed = m.k_routed();
  if (k_routed < 0 || m.k_active > static_cast<int>(m.experts.size()))
    throw ConfigError("sp_moe: inconsistent expert activation counts");
  Var out;
  if (k_routed > 0) {
    if (k_routed > routed)
      throw ShapeError("route: k=" + std::to_string(k_routed) + " exceeds " +
                       std::to_string(routed) + " routed experts");
    Var scores = t.matmul(x, m.router);
    Tensor<int> idx = kern::topk_indices(t.val(scores), k_routed);
    if (rec) rec->observe(position, idx);
    Var gates = t.softmax(t.gather_cols(scores, idx));
    Var gates_flat = t.reshape(gates, {1, batch * k_routed});
    auto groups = detail::group_by_expert(idx, routed);
    for (int e = 0; e < routed; ++e) {
      const auto& rows = groups.rows[static_cast<size_t>(e)];
      if (rows.empty()) continue;
      const int n = static_cast<int>(rows.size());
      Var xe = t.gather_rows(x, rows);
      Var ye = pswiglu(t, xe, m.experts[static_cast<size_t>(e)]);
      Var ge = t.reshape(
          t.gather_slots(gates_flat, groups.gate_slots[static_cast<size_t>(e)], {1, n}),
          {n});
      Var contrib = t.scatter_add_rows(t.scale_rows(ye, ge), rows, batch);
      out = out.valid() ? t.add(out, contrib) : contrib;
    }
    out = t.scale(out, static_cast<T>(m.alpha));
  } else if (rec) {
    rec->observe_shared_only(position, batch);
  }
  if (m.shared_last) {
    Var sh = pswiglu(t, x, m.experts.back());
    out = out.valid() ? t.add(out, sh) : sh;
  }
  if (!out.valid()) throw ConfigError("sp_moe: no experts evaluated");
  return out;
}

// SwiGLU on a pre-quantized input, with the fused hidden-activation
// quantization of the grouped kernel path.
template <typename T>
Tensor<T> swiglu_grouped_value(const Tensor<T>& xq, const SwigluParams<T>& w,
                               const QuantHooks<std::type_identity_t<T>>* q) {
  Tensor<T> g = kern::swish(kern::matmul(xq, w.gate));
  Tensor<T> u = kern::matmul(xq, w.up);
  Tensor<T> h = kern::mul(g, u);
  if (q) h = q->act(h);
  return kern::matmul(h, w.down);
}

// Value-level twin of sp_moe; identical kernels in identical order. The
// router consumes the raw activation, experts the (optionally quantized) one.
template <typename T>
Tensor<T> sp_moe_value(const Tensor<T>& x, const SpMoeParams<T>& m,
                       const QuantHooks<std::type_identity_t<T>>* q = nullptr,
                       LoadRecorder* rec = nullptr, int position = 0,
                       uint64_t* macs = nullptr) {
  const int batch = x.dim(0);
  const int routed = m.routed_count();
  const int k_routed = m.k_routed();
  Tensor<T> xq = q ? q->act(x) : x;
  std::optional<Tensor<T>> out;
  if (k_routed > 0) {
    if (k_routed > routed)
      throw ShapeError("route: k=" + std::to_string(k_routed) + " exceeds " +
                       std::to_string(routed) + " routed experts");
    Tensor<T> scores = kern::matmul(x, m.router);
    if (macs) *macs += static_cast<uint64_t>(batch) * m.router.dim(0) * routed;
    Tensor<int> idx = kern::topk_indices(scores, k_routed);
    if (rec) rec->observe(position, idx);
    Tensor<T> gates = kern::softmax_rows(kern::gather_cols(scores, idx));
    auto groups = detail::group_by_expert(idx, routed);
    for (int e = 0; e < routed; ++e) {
      const auto& rows = groups.rows[static_cast<size_t>(e)];
      if (rows.empty()) continue;
      Tensor<T> xe = kern::gather_rows(xq, std::span<const int>(rows));
      const auto& w = m.experts[static_cast<size_t>(e)];
      Tensor<T> ye = swiglu_grouped_value(xe, w, q);
      if (macs)
        *macs += static_cast<uint64_t>(rows.size()) *
                 (2ull * w.up.dim(0) * w.up.dim(1) +
                  static_cast<uint64_t>(w.down.dim(0)) * w.down.dim(1));
      Tensor<T> ge(Shape{static_cast<int>(rows.size())});
      for (size_t i = 0; i < rows.size(); ++i)
        ge[static_cast<int64_t>(i)] =
            gates[groups.gate_slots[static_cast<size_t>(e)][i]];
      Tensor<T> scaled = kern::scale_rows(ye, ge);
      if (!out) out = Tensor<T>(Shape{batch, m.experts[0].down.dim(1)});
      kern::scatter_rows_add(*out, scaled, std::span<const int>(rows));
    }
    if (out) *out = kern::scale(*out, static_cast<T>(m.alpha));
  } else if (rec) {
    rec->observe_shared_only(position, batch);
  }
  if (m.shared_last) {
    const auto& w = m.experts.back();
    Tensor<T> sh = swiglu_grouped_value(xq, w, q);
    if (macs)
      *macs += static_cast<uint64_t>(batch) *
               (2ull * w.up.dim(0) * w.up.dim(1) +
                static_cast<uint64_t>(w.down.dim(0)) * w.down.dim(1));
    out = out ? kern::add(*out, sh) : sh;
  }
  if (!out) throw ConfigError("sp_moe: no experts evaluated");
  return *out;
}

// Naive per-example dispatch; the correctness oracle for the grouped path.
template <typename T>
Tensor<T> sp_moe_reference(const Tensor<T>& x, const SpMoeParams<T>& m) {
  const int batch = x.dim(0);
  const int width = x.dim(1);
  const int out_w = m.experts[0].down.dim(1);
  Tensor<T> y(Shape{batch, out_w});
  for (int i = 0; i < batch; ++i) {
    Tensor<T> xi(Shape{1, width});
    for (int j = 0; j < width; ++j) xi.at(0, j) = x.at(i, j);
    Tensor<T> acc(Shape{1, out_w});
    if (m.k_routed() > 0) {
      auto r = route(xi.reshaped({width}), m.router, m.k_routed());
      for (size_t s = 0; s < r.indices.size(); ++s) {
        Tensor<T> ye = pswiglu_value(xi, m.experts[static_cast<size_t>(r.indices[s])]);
        for (int j = 0; j < out_w; ++j) acc.at(0, j) += r.gates[s] * ye.at(0, j);
      }
      acc = kern::scale(acc, static_cast<T>(m.alpha));
    }
    if (m.shared_last) acc = kern::add(acc, pswiglu_value(xi, m.experts.back()));
    for (int j = 0; j < out_w; ++j) y.at(i, j) = acc.at(0, j);
  }
  return y;
}

// Partition a dense per-token SwiGLU into contiguous hidden-dimension slabs.
// With every expert active at unit gate the slab outputs sum back to the
// dense output (block decomposition of the down projection).
template <typename T>
std::vector<SwigluParams<T>> split_dense(const SwigluParams<T>& dense, int experts) {
  const int hidden = dense.up.dim(1);
  if (experts <= 0 || hidden % experts != 0)
    throw ShapeError("split_dense: hidden width " + std::to_string(hidden) +
                     " not divisible into " + std::to_string(experts) + " experts");
  const int slab = hidden / experts;
  std::vector<int> sizes(static_cast<size_t>(experts), slab);
  auto ups = kern::split_axis(dense.up, 1, std::span<const int>(sizes));
  auto gates = kern::split_axis(dense.gate, 1, std::span<const int>(sizes));
  auto downs = kern::split_axis(dense.down, 0, std::span<const int>(sizes));
  std::vector<SwigluParams<T>> out(static_cast<size_t>(experts));
  for (int e = 0; e < experts; ++e) {
    out[static_cast<size_t>(e)].up = std::move(ups[static_cast<size_t>(e)]);
    out[static_cast<size_t>(e)].gate = std::move(gates[static_cast<size_t>(e)]);
    out[static_cast<size_t>(e)].down = std::move(downs[static_cast<size_t>(e)]);
  }
  return out;
}

// Sum of all slab experts at unit gates; equals the parent dense SwiGLU.
template <typename T>
Tensor<T> all_experts_unit_gate_value(const Tensor<T>& x,
                                      const std::vector<SwigluParams<T>>& experts) {
  Tensor<T> acc = pswiglu_value(x, experts[0]);
  for (size_t e = 1; e < experts.size(); ++e)
    acc = kern::add(acc, pswiglu_value(x, experts[e]));
  return acc;
}

template <typename T>
SpMoeParams<T> init_sp_moe(int width, int hidden, const MoeConfig& moe,
                           const InitConfig& init, Rng& rng) {
  if (moe.experts < 1 || moe.k_active < 1 || moe.k_active > moe.experts)
    throw ConfigError("moe: need 1 <= k_active <= experts");
  if (hidden % moe.experts != 0)
    throw ConfigError("moe: hidden width " + std::to_string(hidden) +
                      " not divisible by " + std::to_string(moe.experts) + " experts");
  if (moe.shared_expert && moe.experts < 2)
    throw ConfigError("moe: shared expert requires at least two experts");
  SpMoeParams<T> p;
  p.k_active = moe.k_active;
  p.shared_last = moe.shared_expert;
  p.alpha = moe.alpha > 0.0 ? moe.alpha : default_alpha(moe.experts, moe.k_active);
  const int slab = hidden / moe.experts;
  for (int e = 0; e < moe.experts; ++e)
    p.experts.push_back(
        init_swiglu<T>(width, slab, width, init, rng, moe.variance_boost));
  p.router = xavier_normal<T>(width, p.routed_count(), 1.0, rng);
  return p;
}

}  // namespace tmx
