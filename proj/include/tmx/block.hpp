#pragma once

#include <type_traits>
#include "tmx/mixing.hpp"
#include "tmx/moe.hpp"

namespace tmx {

// Per-position networks plus norm gains for one stage of a block. Positions
// are mixed positions (stage 1) or tokens (stage 2). kSharedSwiglu keeps a
// single parameter set applied at every position.
template <typename T>
struct StageParams {
  StageNetKind kind = StageNetKind::kPerTokenSwiglu;
  std::vector<SwigluParams<T>> swiglu;
  std::vector<FfnParams<T>> ffn;
  std::vector<SpMoeParams<T>> moe;
  std::vector<Tensor<T>> gamma;   // one gain per position
  std::vector<Tensor<T>> gamma2;  // second site, sandwich placement only

  int positions() const { return static_cast<int>(gamma.size()); }
};

template <typename T>
struct BlockParams {
  StageParams<T> stage1;  // mixed positions, width T*D/H
  StageParams<T> stage2;  // tokens, width D
};

struct StageVars {
  StageNetKind kind = StageNetKind::kPerTokenSwiglu;
  std::vector<SwigluVars> swiglu;
  std::vector<FfnVars> ffn;
  std::vector<SpMoeVars> moe;
  std::vector<Var> gamma;
  std::vector<Var> gamma2;
};

struct BlockVars {
  StageVars stage1, stage2;
};

struct BlockGeom {
  int tokens = 0, dim = 0;
  MixConfig mix;
  NormPlacement norm = NormPlacement::kPre;
  double eps = 1e-6;
  bool residual = true;
};

namespace detail {

template <typename T>
Var stage_net(Tape<T>& t, Var x, const StageVars& s, int position,
              LoadRecorder* rec) {
  switch (s.kind) {
    case StageNetKind::kPerTokenSwiglu:
      return pswiglu(t, x, s.swiglu[static_cast<size_t>(position)]);
    case StageNetKind::kSharedSwiglu:
      return pswiglu(t, x, s.swiglu[0]);
    case StageNetKind::kPerTokenFfn:
      return pffn(t, x, s.ffn[static_cast<size_t>(position)]);
    case StageNetKind::kMoe: {
      const size_t i = s.moe.size() == 1 ? 0 : static_cast<size_t>(position);
      return sp_moe(t, x, s.moe[i], rec, position);
    }
  }
  throw ConfigError("stage_net: unknown kind");
}

template <typename T>
Tensor<T> stage_net_value(const Tensor<T>& x, const StageParams<T>& s, int position,
                          const QuantHooks<std::type_identity_t<T>>* q, LoadRecorder* rec,
                          uint64_t* macs) {
  auto count = [&](const SwigluParams<T>& w) {
    if (macs)
      *macs += static_cast<uint64_t>(x.dim(0)) *
               (2ull * w.up.dim(0) * w.up.dim(1) +
                static_cast<uint64_t>(w.down.dim(0)) * w.down.dim(1));
  };
  switch (s.kind) {
    case StageNetKind::kPerTokenSwiglu: {
      const auto& w = s.swiglu[static_cast<size_t>(position)];
      count(w);
      return swiglu_grouped_value(q ? q->act(x) : x, w, q);
    }
    case StageNetKind::kSharedSwiglu: {
      count(s.swiglu[0]);
      return swiglu_grouped_value(q ? q->act(x) : x, s.swiglu[0], q);
    }
    case StageNetKind::kPerTokenFfn: {
      const auto& w = s.ffn[static_cast<size_t>(position)];
      if (macs)
        *macs += static_cast<uint64_t>(x.dim(0)) *
                 (static_cast<uint64_t>(w.in.dim(0)) * w.in.dim(1) +
                  static_cast<uint64_t>(w.out.dim(0)) * w.out.dim(1));
      Tensor<T> xi = q ? q->act(x) : x;
      Tensor<T> h = kern::swish(kern::matmul(xi, w.in));
      if (q) h = q->act(h);
      return kern::matmul(h, w.out);
    }
    case StageNetKind::kMoe: {
      const size_t i = s.moe.size() == 1 ? 0 : static_cast<size_t>(position);
      return sp_moe_value(x, s.moe[i], q, rec, position, macs);
    }
  }
  throw ConfigError("stage_net: unknown kind");
}

// One position through norm/net/residual under the selected placement.
// residual_src is the tensor added back (the mixed position itself in stage 1,
// the block's original token in stage 2).
template <typename T>
Var position_forward(Tape<T>& t, Var x, Var residual_src, const StageVars& s,
                     int position, NormPlacement norm, T eps, bool residual,
                     LoadRecorder* rec) {
  const Var g1 = s.gamma[static_cast<size_t>(position)];
  switch (norm) {
    case NormPlacement::kPre: {
      Var f = stage_net(t, t.rmsnorm(x, g1, eps), s, position, rec);
      return residual ? t.add(residual_src, f) : f;
    }
    case NormPlacement::kPost: {
      Var f = stage_net(t, x, s, position, rec);
      return t.rmsnorm(residual ? t.add(f, residual_src) : f, g1, eps);
    }
    case NormPlacement::kSandwich: {
      Var f = stage_net(t, t.rmsnorm(x, g1, eps), s, position, rec);
      Var inner = residual ? t.add(residual_src, f) : f;
      return t.rmsnorm(inner, s.gamma2[static_cast<size_t>(position)], eps);
    }
  }
  throw ConfigError("unknown norm placement");
}

template <typename T>
Tensor<T> position_forward_value(const Tensor<T>& x, const Tensor<T>& residual_src,
                                 const StageParams<T>& s, int position,
                                 NormPlacement norm, T eps, bool residual,
                                 const QuantHooks<std::type_identity_t<T>>* q, LoadRecorder* rec,
                                 uint64_t* macs) {
  const Tensor<T>& g1 = s.gamma[static_cast<size_t>(position)];
  switch (norm) {
    case NormPlacement::kPre: {
      Tensor<T> f =
          stage_net_value(kern::rmsnorm_rows(x, g1, eps), s, position, q, rec, macs);
      return residual ? kern::add(residual_src, f) : f;
    }
    case NormPlacement::kPost: {
      Tensor<T> f = stage_net_value(x, s, position, q, rec, macs);
      return kern::rmsnorm_rows(residual ? kern::add(f, residual_src) : f, g1, eps);
    }
    case NormPlacement::kSandwich: {
      Tensor<T> f =
          stage_net_value(kern::rmsnorm_rows(x, g1, eps), s, position, q, rec, macs);
      Tensor<T> inner = residual ? kern::add(residual_src, f) : f;
      return kern::rmsnorm_rows(inner, s.gamma2[static_cast<size_t>(position)], eps);
    }
  }
  throw ConfigError("unknown norm placement");
}

}  // namespace detail

// The two-stage block: mix the tokens into H positions, run the per-position
// nets, revert to token layout, run the per-token nets. Both residuals stay
// aligned with their operand's semantics: stage 1 adds the mixed position
// back onto itself, stage 2 adds the block's original input token.
template <typename T>
Var block_forward(Tape<T>& t, Var x, const BlockVars& b, const BlockGeom& geom,
                  LoadRecorder* rec1 = nullptr, LoadRecorder* rec2 = nullptr) {
  const MixIndexer ix(geom.tokens, geom.dim, geom.mix);
  const int batch = t.val(x).dim(0);
  const int heads = ix.heads(), width = ix.width();

  Var mixed = t.gather_slots(x, ix.mix_map(), {batch, heads, width});
  auto m_parts = t.split_even(mixed, 1, heads);
  std::vector<Var> h_parts;
  h_parts.reserve(static_cast<size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    Var mh = t.reshape(m_parts[static_cast<size_t>(h)], {batch, width});
    h_parts.push_back(detail::position_forward(t, mh, mh, b.stage1, h, geom.norm,
                                               static_cast<T>(geom.eps),
                                               geom.residual, rec1));
  }
  Var hidden = t.reshape(t.concat(h_parts, 1), {batch, heads, width});

  Var reverted = t.gather_slots(hidden, ix.revert_map(),
                                {batch, geom.tokens, geom.dim});
  auto r_parts = t.split_even(reverted, 1, geom.tokens);
  auto x_parts = t.split_even(x, 1, geom.tokens);
  std::vector<Var> out_parts;
  out_parts.reserve(static_cast<size_t>(geom.tokens));
  for (int tok = 0; tok < geom.tokens; ++tok) {
    Var rt = t.reshape(r_parts[static_cast<size_t>(tok)], {batch, geom.dim});
    Var xt = t.reshape(x_parts[static_cast<size_t>(tok)], {batch, geom.dim});
    out_parts.push_back(detail::position_forward(t, rt, xt, b.stage2, tok,
                                                 geom.norm, static_cast<T>(geom.eps),
                                                 geom.residual, rec2));
  }
  return t.reshape(t.concat(out_parts, 1), {batch, geom.tokens, geom.dim});
}

// Value-level twin; same kernels in the same order as the tape builder.
template <typename T>
Tensor<T> block_forward_value(const Tensor<T>& x, const BlockParams<T>& b,
                              const BlockGeom& geom, const QuantHooks<std::type_identity_t<T>>* q = nullptr,
                              LoadRecorder* rec1 = nullptr,
                              LoadRecorder* rec2 = nullptr,
                              uint64_t* macs = nullptr) {
  const MixIndexer ix(geom.tokens, geom.dim, geom.mix);
  const int batch = x.dim(0);
  const int heads = ix.heads(), width = ix.width();

  Tensor<T> mixed =
      kern::gather_slots(x, std::span<const int>(ix.mix_map()), {batch, heads, width});
  std::vector<Tensor<T>> h_parts;
  h_parts.reserve(static_cast<size_t>(heads));
  std::vector<int> ones_h(static_cast<size_t>(heads), 1);
  auto m_parts = kern::split_axis(mixed, 1, std::span<const int>(ones_h));
  for (int h = 0; h < heads; ++h) {
    Tensor<T> mh = m_parts[static_cast<size_t>(h)].reshaped({batch, width});
    h_parts.push_back(detail::position_forward_value(
        mh, mh, b.stage1, h, geom.norm, static_cast<T>(geom.eps), geom.residual, q,
        rec1, macs));
    h_parts.back() = h_parts.back().reshaped({batch, 1, width});
  }
  Tensor<T> hidden = kern::concat_axis(std::span<const Tensor<T>>(h_parts), 1);

  Tensor<T> reverted = kern::gather_slots(hidden, std::span<const int>(ix.revert_map()),
                                          {batch, geom.tokens, geom.dim});
  std::vector<int> ones_t(static_cast<size_t>(geom.tokens), 1);
  auto r_parts = kern::split_axis(reverted, 1, std::span<const int>(ones_t));
  auto x_parts = kern::split_axis(x, 1, std::span<const int>(ones_t));
  std::vector<Tensor<T>> out_parts;
  out_parts.reserve(static_cast<size_t>(geom.tokens));
  for (int tok = 0; tok < geom.tokens; ++tok) {
    Tensor<T> rt = r_parts[static_cast<size_t>(tok)].reshaped({batch, geom.dim});
    Tensor<T> xt = x_parts[static_cast<size_t>(tok)].reshaped({batch, geom.dim});
    out_parts.push_back(detail::position_forward_value(
        rt, xt, b.stage2, tok, geom.norm, static_cast<T>(geom.eps), geom.residual, q,
        rec2, macs));
    out_parts.back() = out_parts.back().reshaped({batch, 1, geom.dim});
  }
  return kern::concat_axis(std::span<const Tensor<T>>(out_parts), 1);
}

// The baseline single-stage block: Norm(pSwiGLU(mix(X)) + mix(X)), post-norm,
// output stays in mixed-position layout [B, H, T*D/H]. The residual adds the
// mixed tokens, not the originals, which is the semantic misalignment the
// two-stage block removes.
template <typename T>
Var rankmixer_block_forward(Tape<T>& t, Var x, const StageVars& nets,
                            const BlockGeom& geom, LoadRecorder* rec = nullptr) {
  const MixIndexer ix(geom.tokens, geom.dim, geom.mix);
  const int batch = t.val(x).dim(0);
  const int heads = ix.heads(), width = ix.width();
  Var mixed = t.gather_slots(x, ix.mix_map(), {batch, heads, width});
  auto parts = t.split_even(mixed, 1, heads);
  std::vector<Var> out_parts;
  out_parts.reserve(static_cast<size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    Var mh = t.reshape(parts[static_cast<size_t>(h)], {batch, width});
    Var f = detail::stage_net(t, mh, nets, h, rec);
    Var inner = geom.residual ? t.add(f, mh) : f;
    out_parts.push_back(t.rmsnorm(inner, nets.gamma[static_cast<size_t>(h)],
                                  static_cast<T>(geom.eps)));
  }
  return t.reshape(t.concat(out_parts, 1), {batch, heads, width});
}

// ---- initialization ----

template <typename T>
StageParams<T> init_stage(int positions, int width, int hidden_mult,
                          const StageConfig& stage, NormPlacement norm,
                          const InitConfig& init, Rng& rng) {
  StageParams<T> s;
  s.kind = stage.kind;
  const int hidden = hidden_mult * width;
  switch (stage.kind) {
    case StageNetKind::kPerTokenSwiglu:
      for (int p = 0; p < positions; ++p)
        s.swiglu.push_back(init_swiglu<T>(width, hidden, width, init, rng));
      break;
    case StageNetKind::kSharedSwiglu:
      s.swiglu.push_back(init_swiglu<T>(width, hidden, width, init, rng));
      break;
    case StageNetKind::kPerTokenFfn:
      for (int p = 0; p < positions; ++p)
        s.ffn.push_back(init_ffn<T>(width, hidden, width, init, rng));
      break;
    case StageNetKind::kMoe:
      if (stage.moe.shared_bank) {
        s.moe.push_back(init_sp_moe<T>(width, hidden, stage.moe, init, rng));
      } else {
        for (int p = 0; p < positions; ++p)
          s.moe.push_back(init_sp_moe<T>(width, hidden, stage.moe, init, rng));
      }
      break;
  }
  for (int p = 0; p < positions; ++p) s.gamma.push_back(Tensor<T>(Shape{width}, T(1)));
  if (norm == NormPlacement::kSandwich)
    for (int p = 0; p < positions; ++p)
      s.gamma2.push_back(Tensor<T>(Shape{width}, T(1)));
  return s;
}

}  // namespace tmx
