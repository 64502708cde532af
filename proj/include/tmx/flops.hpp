#pragma once

#include "tmx/config.hpp"

namespace tmx {

struct FlopsBreakdown {
  double tokenizer = 0;
  double stage_nets = 0;
  double routers = 0;
  double heads = 0;
  double total() const { return tokenizer + stage_nets + routers + heads; }
};

// Analytic GEMM cost of one forward pass over a batch: 2 x multiply-adds of
// every projection, per-position network, router and head. Mirrors the
// matmuls the graph actually executes (sparse banks count activated experts
// only); norms and activations are excluded on both sides of the comparison
// with the instrumented count.
inline FlopsBreakdown flops_breakdown(const ExperimentConfig& cfg, int batch) {
  const ModelConfig& mc = cfg.model;
  FlopsBreakdown f;
  const double b = batch;

  int total_in = 0;
  for (const auto& g : features_by_group(cfg.features)) {
    int in = 0;
    for (int fi : g) in += cfg.features[static_cast<size_t>(fi)].emb_dim;
    total_in += in;
    f.tokenizer += b * in * mc.dim;
    if (mc.tokenizer_layers == 2) f.tokenizer += b * mc.dim * mc.dim;
  }
  if (mc.global_token) {
    f.tokenizer += b * total_in * mc.dim;
    if (mc.tokenizer_layers == 2) f.tokenizer += b * mc.dim * mc.dim;
  }

  auto stage_macs = [&](const StageConfig& sc, int positions, int width) {
    const double hidden = static_cast<double>(mc.hidden_mult) * width;
    switch (sc.kind) {
      case StageNetKind::kPerTokenSwiglu:
      case StageNetKind::kSharedSwiglu:
        f.stage_nets += positions * b * 3.0 * width * hidden;
        break;
      case StageNetKind::kPerTokenFfn:
        f.stage_nets += positions * b * 2.0 * width * hidden;
        break;
      case StageNetKind::kMoe: {
        const MoeConfig& m = sc.moe;
        const double slab = hidden / m.experts;
        const int routed = m.experts - (m.shared_expert ? 1 : 0);
        const int k_routed = m.k_active - (m.shared_expert ? 1 : 0);
        f.routers += positions * b * static_cast<double>(width) * routed;
        f.stage_nets += positions * b *
                        (k_routed + (m.shared_expert ? 1 : 0)) * 3.0 * width * slab;
        break;
      }
    }
  };

  const auto dims = layer_dims(mc, token_count(cfg), mc.dim);
  for (const auto& d : dims) {
    stage_macs(mc.stage1, d.heads, d.mixed_width);
    if (mc.block == BlockKind::kTokenMixer)
      stage_macs(mc.stage2, d.tokens_in, d.dim_in);
  }

  for (int site : aux_site_layers(mc))
    f.heads += b * dims[static_cast<size_t>(site - 1)].dim_out;
  f.heads += b * dims.back().dim_out;

  f.tokenizer *= 2.0;
  f.stage_nets *= 2.0;
  f.routers *= 2.0;
  f.heads *= 2.0;
  return f;
}

inline double flops_count(const ExperimentConfig& cfg, int batch) {
  return flops_breakdown(cfg, batch).total();
}

}  // namespace tmx
