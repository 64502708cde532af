#pragma once

#include <string>
#include <type_traits>

#include "tmx/block.hpp"
#include "tmx/data.hpp"

namespace tmx {

template <typename T>
struct HeadParams {
  Tensor<T> w;  // [dim, 1]
  Tensor<T> b;  // [1]
};

struct HeadVars {
  Var w, b;
};

template <typename T>
struct ModelParams {
  std::vector<Tensor<T>> emb_tables;               // per feature
  std::vector<std::vector<Tensor<T>>> group_proj;  // per group, 1 or 2 layers
  std::vector<Tensor<T>> global_proj;              // empty when global token off
  std::vector<BlockParams<T>> blocks;
  std::vector<HeadParams<T>> aux_heads;            // one per aux site
  HeadParams<T> head;

  template <typename U>
  ModelParams<U> cast() const {
    ModelParams<U> o;
    for (const auto& t : emb_tables) o.emb_tables.push_back(t.template cast<U>());
    for (const auto& g : group_proj) {
      o.group_proj.emplace_back();
      for (const auto& t : g) o.group_proj.back().push_back(t.template cast<U>());
    }
    for (const auto& t : global_proj) o.global_proj.push_back(t.template cast<U>());
    for (const auto& b : blocks) {
      BlockParams<U> nb;
      nb.stage1 = cast_stage<U>(b.stage1);
      nb.stage2 = cast_stage<U>(b.stage2);
      o.blocks.push_back(std::move(nb));
    }
    for (const auto& h : aux_heads)
      o.aux_heads.push_back({h.w.template cast<U>(), h.b.template cast<U>()});
    o.head = {head.w.template cast<U>(), head.b.template cast<U>()};
    return o;
  }

 private:
  template <typename U>
  static StageParams<U> cast_stage(const StageParams<T>& s) {
    StageParams<U> o;
    o.kind = s.kind;
    for (const auto& w : s.swiglu)
      o.swiglu.push_back({w.up.template cast<U>(), w.gate.template cast<U>(),
                          w.down.template cast<U>()});
    for (const auto& w : s.ffn)
      o.ffn.push_back({w.in.template cast<U>(), w.out.template cast<U>()});
    for (const auto& m : s.moe) {
      SpMoeParams<U> nm;
      for (const auto& e : m.experts)
        nm.experts.push_back({e.up.template cast<U>(), e.gate.template cast<U>(),
                              e.down.template cast<U>()});
      nm.router = m.router.template cast<U>();
      nm.k_active = m.k_active;
      nm.shared_last = m.shared_last;
      nm.alpha = m.alpha;
      o.moe.push_back(std::move(nm));
    }
    for (const auto& g : s.gamma) o.gamma.push_back(g.template cast<U>());
    for (const auto& g : s.gamma2) o.gamma2.push_back(g.template cast<U>());
    return o;
  }
};

struct ModelVars {
  std::vector<Var> emb_tables;
  std::vector<std::vector<Var>> group_proj;
  std::vector<Var> global_proj;
  std::vector<BlockVars> blocks;
  std::vector<HeadVars> aux_heads;
  HeadVars head;
};

// ---- parameter traversal ----
//
// One structural walk defines the canonical parameter order shared by the
// optimizer, checkpoints and the flat-vector binding used in gradient checks.
// The binder sees (name, tensor, sparse) and returns the Var mirror.

template <typename T, typename Binder>
SwigluVars walk_swiglu(const std::string& prefix, SwigluParams<T>& w, Binder& bind) {
  SwigluVars v;
  v.up = bind(prefix + ".up", w.up, false);
  v.gate = bind(prefix + ".gate", w.gate, false);
  v.down = bind(prefix + ".down", w.down, false);
  return v;
}

template <typename T, typename Binder>
StageVars walk_stage(const std::string& prefix, StageParams<T>& s, Binder& bind) {
  StageVars v;
  v.kind = s.kind;
  for (size_t i = 0; i < s.swiglu.size(); ++i)
    v.swiglu.push_back(
        walk_swiglu(prefix + ".net" + std::to_string(i), s.swiglu[i], bind));
  for (size_t i = 0; i < s.ffn.size(); ++i) {
    FfnVars f;
    f.in = bind(prefix + ".net" + std::to_string(i) + ".in", s.ffn[i].in, false);
    f.out = bind(prefix + ".net" + std::to_string(i) + ".out", s.ffn[i].out, false);
    v.ffn.push_back(f);
  }
  for (size_t i = 0; i < s.moe.size(); ++i) {
    SpMoeVars m;
    const std::string mp = prefix + ".moe" + std::to_string(i);
    for (size_t e = 0; e < s.moe[i].experts.size(); ++e)
      m.experts.push_back(walk_swiglu(mp + ".expert" + std::to_string(e),
                                      s.moe[i].experts[e], bind));
    m.router = bind(mp + ".router", s.moe[i].router, false);
    m.k_active = s.moe[i].k_active;
    m.shared_last = s.moe[i].shared_last;
    m.alpha = s.moe[i].alpha;
    v.moe.push_back(std::move(m));
  }
  for (size_t i = 0; i < s.gamma.size(); ++i)
    v.gamma.push_back(bind(prefix + ".gamma" + std::to_string(i), s.gamma[i], false));
  for (size_t i = 0; i < s.gamma2.size(); ++i)
    v.gamma2.push_back(
        bind(prefix + ".gamma2_" + std::to_string(i), s.gamma2[i], false));
  return v;
}

template <typename T, typename Binder>
ModelVars walk_model(ModelParams<T>& m, Binder& bind) {
  ModelVars v;
  for (size_t f = 0; f < m.emb_tables.size(); ++f)
    v.emb_tables.push_back(bind("emb" + std::to_string(f), m.emb_tables[f], true));
  for (size_t g = 0; g < m.group_proj.size(); ++g) {
    v.group_proj.emplace_back();
    for (size_t l = 0; l < m.group_proj[g].size(); ++l)
      v.group_proj.back().push_back(
          bind("tok.g" + std::to_string(g) + ".l" + std::to_string(l),
               m.group_proj[g][l], false));
  }
  for (size_t l = 0; l < m.global_proj.size(); ++l)
    v.global_proj.push_back(
        bind("tok.global.l" + std::to_string(l), m.global_proj[l], false));
  for (size_t b = 0; b < m.blocks.size(); ++b) {
    BlockVars bv;
    const std::string p = "blk" + std::to_string(b);
    bv.stage1 = walk_stage(p + ".s1", m.blocks[b].stage1, bind);
    bv.stage2 = walk_stage(p + ".s2", m.blocks[b].stage2, bind);
    v.blocks.push_back(bv);
  }
  for (size_t a = 0; a < m.aux_heads.size(); ++a) {
    HeadVars h;
    h.w = bind("aux" + std::to_string(a) + ".w", m.aux_heads[a].w, false);
    h.b = bind("aux" + std::to_string(a) + ".b", m.aux_heads[a].b, false);
    v.aux_heads.push_back(h);
  }
  v.head.w = bind("head.w", m.head.w, false);
  v.head.b = bind("head.b", m.head.b, false);
  return v;
}

template <typename T, typename Fn>
void for_each_param(ModelParams<T>& m, Fn&& fn) {
  auto binder = [&](const std::string& name, Tensor<T>& t, bool sparse) {
    fn(name, t, sparse);
    return Var{};
  };
  walk_model(m, binder);
}

// Bind every parameter as its own tape leaf.
template <typename T>
ModelVars bind_model(Tape<T>& tape, ModelParams<T>& m, bool requires_grad) {
  auto binder = [&](const std::string&, Tensor<T>& t, bool) {
    return tape.leaf(t, requires_grad);
  };
  return walk_model(m, binder);
}

// Bind every parameter as a slice of one flat vector leaf (for whole-model
// finite-difference checks). Returns the vars and writes the flat init.
template <typename T>
ModelVars bind_model_flat(Tape<T>& tape, ModelParams<T>& m, Var flat) {
  std::vector<int> sizes;
  for_each_param(m, [&](const std::string&, Tensor<T>& t, bool) {
    sizes.push_back(static_cast<int>(t.numel()));
  });
  auto pieces = tape.split(flat, 0, sizes);
  size_t next = 0;
  auto binder = [&](const std::string&, Tensor<T>& t, bool) {
    return tape.reshape(pieces[next++], t.shape());
  };
  return walk_model(m, binder);
}

template <typename T>
Tensor<T> flatten_params(ModelParams<T>& m) {
  int64_t total = 0;
  for_each_param(m, [&](const std::string&, Tensor<T>& t, bool) { total += t.numel(); });
  Tensor<T> flat(Shape{static_cast<int>(total)});
  int64_t off = 0;
  for_each_param(m, [&](const std::string&, Tensor<T>& t, bool) {
    for (int64_t i = 0; i < t.numel(); ++i) flat[off + i] = t[i];
    off += t.numel();
  });
  return flat;
}

// ---- initialization ----

template <typename T>
ModelParams<T> init_model(const ExperimentConfig& cfg) {
  validate(cfg);
  const ModelConfig& mc = cfg.model;
  Rng rng(mc.init.seed);
  ModelParams<T> m;

  // Unit-normal embeddings and 1/fan-in projections keep the token matrix
  // near unit rms, so the small-init blocks start close to the identity.
  for (const auto& f : cfg.features) {
    Tensor<T> table(Shape{f.cardinality, f.emb_dim});
    for (int64_t i = 0; i < table.numel(); ++i)
      table[i] = static_cast<T>(rng.normal());
    m.emb_tables.push_back(std::move(table));
  }

  const auto groups = features_by_group(cfg.features);
  int total_in = 0;
  for (const auto& g : groups) {
    int in = 0;
    for (int f : g) in += cfg.features[static_cast<size_t>(f)].emb_dim;
    total_in += in;
    std::vector<Tensor<T>> layers;
    layers.push_back(lecun_normal<T>(in, mc.dim, rng));
    if (mc.tokenizer_layers == 2)
      layers.push_back(lecun_normal<T>(mc.dim, mc.dim, rng));
    m.group_proj.push_back(std::move(layers));
  }
  if (mc.global_token) {
    m.global_proj.push_back(lecun_normal<T>(total_in, mc.dim, rng));
    if (mc.tokenizer_layers == 2)
      m.global_proj.push_back(lecun_normal<T>(mc.dim, mc.dim, rng));
  }

  const int tokens0 = token_count(cfg);
  const auto dims = layer_dims(mc, tokens0, mc.dim);
  for (const auto& d : dims) {
    BlockParams<T> b;
    b.stage1 = init_stage<T>(d.heads, d.mixed_width, mc.hidden_mult, mc.stage1,
                             mc.norm, mc.init, rng);
    if (mc.block == BlockKind::kTokenMixer)
      b.stage2 = init_stage<T>(d.tokens_in, d.dim_in, mc.hidden_mult, mc.stage2,
                               mc.norm, mc.init, rng);
    m.blocks.push_back(std::move(b));
  }

  for (int site : aux_site_layers(mc)) {
    const auto& d = dims[static_cast<size_t>(site - 1)];
    HeadParams<T> h;
    h.w = xavier_normal<T>(d.dim_out, 1, 1.0, rng);
    h.b = Tensor<T>(Shape{1});
    m.aux_heads.push_back(std::move(h));
  }
  m.head.w = xavier_normal<T>(dims.back().dim_out, 1, 1.0, rng);
  m.head.b = Tensor<T>(Shape{1});
  return m;
}

// ---- forward ----

struct MoeTelemetry {
  std::vector<LoadRecorder> stage1, stage2;  // one per layer when that stage is MoE
};

MoeTelemetry make_telemetry(const ExperimentConfig& cfg);

template <typename T>
std::vector<Var> embed(Tape<T>& t, const Batch& batch, const ModelVars& v,
                       const std::vector<FeatureSpec>& features) {
  std::vector<Var> out;
  out.reserve(features.size());
  for (size_t f = 0; f < features.size(); ++f) {
    std::vector<int> rows(static_cast<size_t>(batch.size));
    for (int i = 0; i < batch.size; ++i) {
      const int id = batch.id(i, static_cast<int>(f));
      if (id < 0 || id >= features[f].cardinality)
        throw LookupError("feature '" + features[f].name + "': id " +
                          std::to_string(id) + " out of range [0, " +
                          std::to_string(features[f].cardinality) + ")");
      rows[static_cast<size_t>(i)] = id;
    }
    out.push_back(t.gather_rows(v.emb_tables[f], rows));
  }
  return out;
}

template <typename T>
Var project(Tape<T>& t, Var x, const std::vector<Var>& layers) {
  Var h = t.matmul(x, layers[0]);
  for (size_t l = 1; l < layers.size(); ++l) h = t.matmul(t.swish(h), layers[l]);
  return h;
}

// Token 0 is the global token (when enabled), then one token per group.
template <typename T>
Var tokenize(Tape<T>& t, const std::vector<Var>& embeds, const ModelVars& v,
             const ExperimentConfig& cfg) {
  const auto groups = features_by_group(cfg.features);
  const int batch = t.val(embeds[0]).dim(0);
  std::vector<Var> group_in;
  group_in.reserve(groups.size());
  for (const auto& g : groups) {
    std::vector<Var> parts;
    for (int f : g) parts.push_back(embeds[static_cast<size_t>(f)]);
    group_in.push_back(parts.size() == 1 ? parts[0] : t.concat(parts, 1));
  }
  std::vector<Var> tokens;
  if (cfg.model.global_token) {
    Var all = group_in.size() == 1 ? group_in[0] : t.concat(group_in, 1);
    tokens.push_back(project(t, all, v.global_proj));
  }
  for (size_t g = 0; g < groups.size(); ++g)
    tokens.push_back(project(t, group_in[g], v.group_proj[g]));
  for (auto& tok : tokens) tok = t.reshape(tok, {batch, 1, cfg.model.dim});
  Var x = tokens.size() == 1 ? tokens[0] : t.concat(tokens, 1);
  return t.reshape(x, {batch, static_cast<int>(tokens.size()), cfg.model.dim});
}

template <typename T>
Var mean_pool(Tape<T>& t, Var x) {
  return t.mean_axis(x, 1);
}

template <typename T>
Var head_logit(Tape<T>& t, Var pooled, const HeadVars& h) {
  const int batch = t.val(pooled).dim(0);
  return t.add_bias(t.reshape(t.matmul(pooled, h.w), {batch}), h.b);
}

struct ModelOutput {
  Var logits;                  // [B]
  std::vector<Var> aux_logits; // [B] each, at the configured sites
  Var pooled;
  std::vector<Var> layer_out;  // block outputs, post interval residual
};

template <typename T>
ModelOutput model_forward(Tape<T>& t, const Batch& batch, const ModelVars& v,
                          const ExperimentConfig& cfg,
                          MoeTelemetry* telemetry = nullptr) {
  const ModelConfig& mc = cfg.model;
  auto embeds = embed(t, batch, v, cfg.features);
  Var x = tokenize(t, embeds, v, cfg);

  const auto dims = layer_dims(mc, token_count(cfg), mc.dim);
  const auto junctions = interval_junctions(mc.layers, mc.interval);
  const auto sites = aux_site_layers(mc);

  ModelOutput out;
  std::vector<Var> inputs;  // inputs[i] = input of layer i+1
  inputs.push_back(x);
  for (int layer = 1; layer <= mc.layers; ++layer) {
    const auto& d = dims[static_cast<size_t>(layer - 1)];
    BlockGeom geom{d.tokens_in, d.dim_in,
                   MixConfig{d.heads, mc.mix.strategy, mc.mix.seed},
                   mc.norm, mc.norm_eps, mc.standard_residual};
    const BlockVars& bv = v.blocks[static_cast<size_t>(layer - 1)];
    LoadRecorder* r1 = telemetry && !telemetry->stage1.empty()
                           ? &telemetry->stage1[static_cast<size_t>(layer - 1)]
                           : nullptr;
    LoadRecorder* r2 = telemetry && !telemetry->stage2.empty()
                           ? &telemetry->stage2[static_cast<size_t>(layer - 1)]
                           : nullptr;
    Var y;
    if (mc.block == BlockKind::kRankMixer) {
      y = rankmixer_block_forward(t, x, bv.stage1, geom, r1);
    } else {
      y = block_forward(t, x, bv, geom, r1, r2);
    }
    for (int j : junctions)
      if (j == layer) y = t.add(y, inputs[static_cast<size_t>(layer - mc.interval - 1)]);
    x = y;
    inputs.push_back(x);
    out.layer_out.push_back(x);
    for (size_t s = 0; s < sites.size(); ++s)
      if (sites[s] == layer)
        out.aux_logits.push_back(
            head_logit(t, mean_pool(t, x), v.aux_heads[s]));
  }
  out.pooled = mean_pool(t, x);
  out.logits = head_logit(t, out.pooled, v.head);
  return out;
}

// Total loss: BCE on the final logits plus aux_weight times the summed BCE of
// the auxiliary heads.
template <typename T>
Var model_loss(Tape<T>& t, const ModelOutput& out, const Tensor<T>& labels,
               double aux_weight) {
  Var total = t.bce_with_logits(out.logits, labels);
  if (aux_weight != 0.0 && !out.aux_logits.empty()) {
    Var aux;
    for (Var l : out.aux_logits) {
      Var b = t.bce_with_logits(l, labels);
      aux = aux.valid() ? t.add(aux, b) : b;
    }
    total = t.add(total, t.scale(aux, static_cast<T>(aux_weight)));
  }
  return total;
}

template <typename T>
Tensor<T> batch_labels(const Batch& b) {
  Tensor<T> y(Shape{b.size});
  for (int i = 0; i < b.size; ++i) y[i] = static_cast<T>(b.labels[static_cast<size_t>(i)]);
  return y;
}

// ---- value-level forward (no tape, shared by eval / simulator / fp8) ----

template <typename T>
Tensor<T> tokenize_value(const Batch& batch, const ModelParams<T>& m,
                         const ExperimentConfig& cfg) {
  const auto groups = features_by_group(cfg.features);
  std::vector<Tensor<T>> embeds;
  for (size_t f = 0; f < cfg.features.size(); ++f) {
    std::vector<int> rows(static_cast<size_t>(batch.size));
    for (int i = 0; i < batch.size; ++i) {
      const int id = batch.id(i, static_cast<int>(f));
      if (id < 0 || id >= cfg.features[f].cardinality)
        throw LookupError("feature '" + cfg.features[f].name + "': id " +
                          std::to_string(id) + " out of range [0, " +
                          std::to_string(cfg.features[f].cardinality) + ")");
      rows[static_cast<size_t>(i)] = id;
    }
    embeds.push_back(kern::gather_rows(m.emb_tables[f], std::span<const int>(rows)));
  }
  auto project_v = [](const Tensor<T>& x, const std::vector<Tensor<T>>& layers) {
    Tensor<T> h = kern::matmul(x, layers[0]);
    for (size_t l = 1; l < layers.size(); ++l)
      h = kern::matmul(kern::swish(h), layers[l]);
    return h;
  };
  std::vector<Tensor<T>> group_in;
  for (const auto& g : groups) {
    std::vector<Tensor<T>> parts;
    for (int f : g) parts.push_back(embeds[static_cast<size_t>(f)]);
    group_in.push_back(parts.size() == 1
                           ? parts[0]
                           : kern::concat_axis(std::span<const Tensor<T>>(parts), 1));
  }
  std::vector<Tensor<T>> tokens;
  if (cfg.model.global_token) {
    Tensor<T> all = group_in.size() == 1
                        ? group_in[0]
                        : kern::concat_axis(std::span<const Tensor<T>>(group_in), 1);
    tokens.push_back(project_v(all, m.global_proj));
  }
  for (size_t g = 0; g < groups.size(); ++g)
    tokens.push_back(project_v(group_in[g], m.group_proj[g]));
  for (auto& tok : tokens) tok = tok.reshaped({batch.size, 1, cfg.model.dim});
  Tensor<T> x = tokens.size() == 1
                    ? tokens[0]
                    : kern::concat_axis(std::span<const Tensor<T>>(tokens), 1);
  return x.reshaped({batch.size, static_cast<int>(tokens.size()), cfg.model.dim});
}

// Runs the block stack on an existing token matrix.
template <typename T>
std::vector<Tensor<T>> blocks_forward_value(
    const Tensor<T>& x0, const ModelParams<T>& m, const ExperimentConfig& cfg,
    const QuantHooks<std::type_identity_t<T>>* q = nullptr,
    MoeTelemetry* telemetry = nullptr, uint64_t* macs = nullptr) {
  const ModelConfig& mc = cfg.model;
  const auto dims = layer_dims(mc, x0.dim(1), x0.dim(2));
  const auto junctions = interval_junctions(mc.layers, mc.interval);
  std::vector<Tensor<T>> inputs{x0};
  std::vector<Tensor<T>> outs;
  Tensor<T> x = x0;
  for (int layer = 1; layer <= mc.layers; ++layer) {
    const auto& d = dims[static_cast<size_t>(layer - 1)];
    BlockGeom geom{d.tokens_in, d.dim_in,
                   MixConfig{d.heads, mc.mix.strategy, mc.mix.seed},
                   mc.norm, mc.norm_eps, mc.standard_residual};
    LoadRecorder* r1 = telemetry && !telemetry->stage1.empty()
                           ? &telemetry->stage1[static_cast<size_t>(layer - 1)]
                           : nullptr;
    LoadRecorder* r2 = telemetry && !telemetry->stage2.empty()
                           ? &telemetry->stage2[static_cast<size_t>(layer - 1)]
                           : nullptr;
    const BlockParams<T>& bp = m.blocks[static_cast<size_t>(layer - 1)];
    Tensor<T> y;
    if (mc.block == BlockKind::kRankMixer) {
      // value twin of rankmixer_block_forward
      const MixIndexer ix(geom.tokens, geom.dim, geom.mix);
      const int batch = x.dim(0);
      Tensor<T> mixed = kern::gather_slots(x, std::span<const int>(ix.mix_map()),
                                           {batch, ix.heads(), ix.width()});
      std::vector<int> ones(static_cast<size_t>(ix.heads()), 1);
      auto parts = kern::split_axis(mixed, 1, std::span<const int>(ones));
      std::vector<Tensor<T>> outp;
      for (int h = 0; h < ix.heads(); ++h) {
        Tensor<T> mh = parts[static_cast<size_t>(h)].reshaped({batch, ix.width()});
        Tensor<T> f = detail::stage_net_value(mh, bp.stage1, h, q, r1, macs);
        Tensor<T> inner = geom.residual ? kern::add(f, mh) : f;
        outp.push_back(kern::rmsnorm_rows(inner, bp.stage1.gamma[static_cast<size_t>(h)],
                                          static_cast<T>(geom.eps))
                           .reshaped({batch, 1, ix.width()}));
      }
      y = kern::concat_axis(std::span<const Tensor<T>>(outp), 1);
    } else {
      y = block_forward_value(x, bp, geom, q, r1, r2, macs);
    }
    for (int j : junctions)
      if (j == layer)
        y = kern::add(y, inputs[static_cast<size_t>(layer - mc.interval - 1)]);
    x = y;
    inputs.push_back(x);
    outs.push_back(x);
  }
  return outs;
}

template <typename T>
Tensor<T> head_logit_value(const Tensor<T>& pooled, const HeadParams<T>& h) {
  Tensor<T> z = kern::matmul(pooled, h.w).reshaped({pooled.dim(0)});
  for (int64_t i = 0; i < z.numel(); ++i) z[i] += h.b[0];
  return z;
}

struct EvalExtras {
  std::vector<double> layer_norm;  // rms of each block output
};

template <typename T>
Tensor<T> model_scores_value(
    const ModelParams<T>& m, const Batch& batch, const ExperimentConfig& cfg,
    const QuantHooks<std::type_identity_t<T>>* q = nullptr,
    MoeTelemetry* telemetry = nullptr, uint64_t* macs = nullptr,
    std::vector<Tensor<std::type_identity_t<T>>>* layer_out = nullptr) {
  Tensor<T> x0 = tokenize_value(batch, m, cfg);
  if (macs) {
    for (size_t g = 0; g < m.group_proj.size(); ++g)
      for (const auto& w : m.group_proj[g])
        *macs += static_cast<uint64_t>(batch.size) * w.dim(0) * w.dim(1);
    for (const auto& w : m.global_proj)
      *macs += static_cast<uint64_t>(batch.size) * w.dim(0) * w.dim(1);
  }
  auto outs = blocks_forward_value(x0, m, cfg, q, telemetry, macs);
  if (layer_out) *layer_out = outs;
  Tensor<T> pooled = kern::mean_axis(outs.back(), 1);
  if (macs) *macs += static_cast<uint64_t>(batch.size) * pooled.dim(1);
  return head_logit_value(pooled, m.head);
}

// Value-level twin of model_forward + model_loss (final BCE plus weighted aux
// BCEs); used by the finite-difference oracle.
template <typename T>
T model_loss_value(const ModelParams<T>& m, const Batch& batch,
                   const ExperimentConfig& cfg) {
  Tensor<T> x0 = tokenize_value(batch, m, cfg);
  auto outs = blocks_forward_value(x0, m, cfg);
  Tensor<T> labels = batch_labels<T>(batch);
  Tensor<T> logits = head_logit_value(kern::mean_axis(outs.back(), 1), m.head);
  T total = kern::bce_with_logits_value(logits, labels);
  const auto sites = aux_site_layers(cfg.model);
  if (cfg.model.aux_weight != 0.0 && !sites.empty()) {
    T aux = T(0);
    for (size_t s = 0; s < sites.size(); ++s) {
      Tensor<T> z = head_logit_value(
          kern::mean_axis(outs[static_cast<size_t>(sites[s] - 1)], 1),
          m.aux_heads[s]);
      aux += kern::bce_with_logits_value(z, labels);
    }
    total += static_cast<T>(cfg.model.aux_weight) * aux;
  }
  return total;
}

// ---- parameter accounting ----

struct ParamCounts {
  int64_t embedding = 0;
  int64_t dense_total = 0;      // everything except embedding tables
  int64_t dense_activated = 0;  // dense_total minus inactive expert slabs
};

ParamCounts count_params(const ExperimentConfig& cfg);

template <typename T>
int64_t total_numel(ModelParams<T>& m) {
  int64_t n = 0;
  for_each_param(m, [&](const std::string&, Tensor<T>& t, bool) { n += t.numel(); });
  return n;
}

}  // namespace tmx
