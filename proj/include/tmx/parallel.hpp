#pragma once

#include <string>

#include "tmx/model.hpp"

namespace tmx {

// A logical tensor split into equal slices along one axis, one per device.
// Devices execute in fixed round-robin order on one thread; determinism is
// the contract.
template <typename T>
struct ShardedTensor {
  Shape global_shape;
  int shard_dim = 0;
  std::vector<Tensor<T>> slices;

  int devices() const { return static_cast<int>(slices.size()); }

  static ShardedTensor shard(const Tensor<T>& x, int dim, int n) {
    if (dim < 0 || dim >= x.rank())
      throw ShapeError("shard: axis " + std::to_string(dim) + " of " +
                       shape_str(x.shape()));
    if (n <= 0 || x.dim(dim) % n != 0)
      throw ShapeError("shard: extent " + std::to_string(x.dim(dim)) +
                       " not divisible by " + std::to_string(n) + " devices");
    ShardedTensor s;
    s.global_shape = x.shape();
    s.shard_dim = dim;
    std::vector<int> sizes(static_cast<size_t>(n), x.dim(dim) / n);
    s.slices = kern::split_axis(x, dim, std::span<const int>(sizes));
    return s;
  }

  Tensor<T> unshard() const {
    return kern::concat_axis(std::span<const Tensor<T>>(slices), shard_dim);
  }
};

struct CommEvent {
  std::string label;
  uint64_t bytes = 0;  // bytes that cross device boundaries
  std::string src_layout, dst_layout;
};

struct CommLog {
  std::vector<CommEvent> events;
  int count() const { return static_cast<int>(events.size()); }
  uint64_t total_bytes() const {
    uint64_t b = 0;
    for (const auto& e : events) b += e.bytes;
    return b;
  }
};

// Re-shard so each device holds the full previous axis but 1/N of new_dim.
// Moves (N-1)/N of the tensor's bytes; one logged event per call.
template <typename T>
ShardedTensor<T> all2all(const ShardedTensor<T>& x, int new_dim, CommLog& log,
                         const std::string& label) {
  const int n = x.devices();
  if (new_dim < 0 || new_dim >= static_cast<int>(x.global_shape.size()))
    throw ShapeError("all2all: bad target axis " + std::to_string(new_dim));
  if (x.global_shape[static_cast<size_t>(new_dim)] % n != 0)
    throw ShapeError("all2all: axis extent " +
                     std::to_string(x.global_shape[static_cast<size_t>(new_dim)]) +
                     " not divisible by " + std::to_string(n) + " devices");
  const uint64_t total =
      static_cast<uint64_t>(shape_numel(x.global_shape)) * sizeof(T);
  log.events.push_back(CommEvent{label, total * static_cast<uint64_t>(n - 1) / n,
                                 "Shard(" + std::to_string(x.shard_dim) + ")",
                                 "Shard(" + std::to_string(new_dim) + ")"});
  return ShardedTensor<T>::shard(x.unshard(), new_dim, n);
}

namespace detail {

// Canonical chunk layout: [H, B, T, D/H], entry (h, b, t) holding the chunk
// of token t that feeds mixed position h. Assembled per device from whichever
// slice of the block input it owns.
template <typename T>
Tensor<T> chunks_from_tokens(const Tensor<T>& x_slice, const MixIndexer& ix,
                             int token_offset) {
  const int batch = x_slice.dim(0), tokens = x_slice.dim(1);
  const int dh = ix.chunk();
  Tensor<T> c(Shape{ix.heads(), batch, tokens, dh});
  for (int h = 0; h < ix.heads(); ++h)
    for (int b = 0; b < batch; ++b)
      for (int t = 0; t < tokens; ++t) {
        const int chunk = ix.chunk_of(token_offset + t, h);
        const T* src = x_slice.data() +
                       (static_cast<size_t>(b) * tokens + t) * ix.dim() + chunk * dh;
        T* dst = c.data() + ((static_cast<size_t>(h) * batch + b) * tokens + t) * dh;
        for (int d = 0; d < dh; ++d) dst[d] = src[d];
      }
  return c;
}

// Rebuild the token slab [B, tokens, D] owned by a device from a chunk slice
// [H, B, tokens, D/H * lanes]; lane 0 carries the payload, lane 1 (when
// present) the block input forwarded for the stage-2 residual.
template <typename T>
Tensor<T> tokens_from_chunks(const Tensor<T>& chunk_slice, const MixIndexer& ix,
                             int token_offset, int lane, int lanes) {
  const int batch = chunk_slice.dim(1), tokens = chunk_slice.dim(2);
  const int dh = ix.chunk();
  Tensor<T> x(Shape{batch, tokens, ix.dim()});
  for (int t = 0; t < tokens; ++t)
    for (int c = 0; c < ix.heads(); ++c) {
      const int h = ix.head_of(token_offset + t, c);
      for (int b = 0; b < batch; ++b) {
        const T* src = chunk_slice.data() +
                       ((static_cast<size_t>(h) * batch + b) * tokens + t) * dh * lanes +
                       static_cast<size_t>(lane) * dh;
        T* dst = x.data() + (static_cast<size_t>(b) * tokens + t) * ix.dim() + c * dh;
        for (int d = 0; d < dh; ++d) dst[d] = src[d];
      }
    }
  return x;
}

template <typename T>
void check_parallel_geom(const BlockGeom& geom, int devices) {
  if (geom.mix.strategy != MixStrategy::kVertical &&
      geom.mix.strategy != MixStrategy::kDiagonal &&
      geom.mix.strategy != MixStrategy::kRandom)
    throw ConfigError("device simulator supports the vertical, diagonal and "
                      "random strategies only");
  if (geom.mix.heads % devices != 0 || geom.tokens % devices != 0)
    throw ShapeError("device simulator: heads " + std::to_string(geom.mix.heads) +
                     " and tokens " + std::to_string(geom.tokens) +
                     " must both divide by " + std::to_string(devices) +
                     " devices");
}

// Stage-1 on owned heads: slice [H/N, B, T, Dh] -> same shape.
template <typename T>
Tensor<T> stage1_on_slice(const Tensor<T>& c_slice, const BlockParams<T>& bp,
                          const BlockGeom& geom, int head_offset) {
  const int local_heads = c_slice.dim(0), batch = c_slice.dim(1);
  const int tokens = c_slice.dim(2), dh = c_slice.dim(3);
  Tensor<T> out(c_slice.shape());
  std::vector<int> one{1};
  for (int hl = 0; hl < local_heads; ++hl) {
    Tensor<T> m(Shape{batch, tokens * dh});
    std::memcpy(m.data(), c_slice.data() + static_cast<size_t>(hl) * batch * tokens * dh,
                sizeof(T) * static_cast<size_t>(batch) * tokens * dh);
    Tensor<T> y = detail::position_forward_value(
        m, m, bp.stage1, head_offset + hl, geom.norm, static_cast<T>(geom.eps),
        geom.residual, nullptr, nullptr, nullptr);
    std::memcpy(out.data() + static_cast<size_t>(hl) * batch * tokens * dh, y.data(),
                sizeof(T) * static_cast<size_t>(batch) * tokens * dh);
  }
  return out;
}

}  // namespace detail

// One block under token parallelism. Input is sharded on batch (first block)
// or tokens (later blocks); output is sharded on tokens either way. Exactly
// two exchanges: chunks to their head owners, processed chunks to their token
// owners. A batch-sharded input lacks the stage-2 residual at the token
// owner, so its chunks ride along in the second exchange as a second lane.
template <typename T>
ShardedTensor<T> parallel_block_forward(const ShardedTensor<T>& x,
                                        const BlockParams<T>& bp,
                                        const BlockGeom& geom, CommLog& log) {
  const int n = x.devices();
  detail::check_parallel_geom<T>(geom, n);
  const MixIndexer ix(geom.tokens, geom.dim, geom.mix);
  const bool batch_in = x.shard_dim == 0;
  if (!batch_in && x.shard_dim != 1)
    throw ShapeError("parallel block: input must be sharded on batch or tokens");

  // Local rearrangement into the canonical chunk layout.
  ShardedTensor<T> chunks;
  chunks.global_shape = {ix.heads(), x.global_shape[0], geom.tokens, ix.chunk()};
  chunks.shard_dim = batch_in ? 1 : 2;
  for (int d = 0; d < n; ++d)
    chunks.slices.push_back(detail::chunks_from_tokens(
        x.slices[static_cast<size_t>(d)], ix, batch_in ? 0 : d * (geom.tokens / n)));

  // Exchange 1: every head owner receives the full batch for its heads.
  ShardedTensor<T> on_heads = all2all(chunks, 0, log, "mixing");

  const int heads_per_dev = ix.heads() / n;
  ShardedTensor<T> processed;
  processed.shard_dim = 0;
  const int lanes = batch_in ? 2 : 1;
  processed.global_shape = {ix.heads(), x.global_shape[0], geom.tokens,
                            ix.chunk() * lanes};
  for (int d = 0; d < n; ++d) {
    Tensor<T> y = detail::stage1_on_slice(on_heads.slices[static_cast<size_t>(d)], bp,
                                          geom, d * heads_per_dev);
    if (batch_in) {
      // Second lane forwards the block input chunks to the token owners.
      std::vector<Tensor<T>> lanes_v{std::move(y),
                                     on_heads.slices[static_cast<size_t>(d)]};
      processed.slices.push_back(
          kern::concat_axis(std::span<const Tensor<T>>(lanes_v), 3));
    } else {
      processed.slices.push_back(std::move(y));
    }
  }

  // Exchange 2: every token owner receives all chunks of its tokens.
  ShardedTensor<T> on_tokens = all2all(processed, 2, log, "reverting");

  const int tokens_per_dev = geom.tokens / n;
  ShardedTensor<T> out;
  out.global_shape = {x.global_shape[0], geom.tokens, geom.dim};
  out.shard_dim = 1;
  for (int d = 0; d < n; ++d) {
    const int t0 = d * tokens_per_dev;
    Tensor<T> reverted =
        detail::tokens_from_chunks(on_tokens.slices[static_cast<size_t>(d)], ix, t0,
                                   0, lanes);
    Tensor<T> residual =
        batch_in ? detail::tokens_from_chunks(on_tokens.slices[static_cast<size_t>(d)],
                                              ix, t0, 1, lanes)
                 : x.slices[static_cast<size_t>(d)];
    const int batch = reverted.dim(0);
    Tensor<T> slab(Shape{batch, tokens_per_dev, geom.dim});
    std::vector<int> one{1};
    for (int tl = 0; tl < tokens_per_dev; ++tl) {
      Tensor<T> rt(Shape{batch, geom.dim});
      Tensor<T> xt(Shape{batch, geom.dim});
      for (int b = 0; b < batch; ++b) {
        std::memcpy(rt.data() + static_cast<size_t>(b) * geom.dim,
                    reverted.data() +
                        (static_cast<size_t>(b) * tokens_per_dev + tl) * geom.dim,
                    sizeof(T) * static_cast<size_t>(geom.dim));
        std::memcpy(xt.data() + static_cast<size_t>(b) * geom.dim,
                    residual.data() +
                        (static_cast<size_t>(b) * tokens_per_dev + tl) * geom.dim,
                    sizeof(T) * static_cast<size_t>(geom.dim));
      }
      Tensor<T> y = detail::position_forward_value(
          rt, xt, bp.stage2, t0 + tl, geom.norm, static_cast<T>(geom.eps),
          geom.residual, nullptr, nullptr, nullptr);
      for (int b = 0; b < batch; ++b)
        std::memcpy(slab.data() + (static_cast<size_t>(b) * tokens_per_dev + tl) *
                                      geom.dim,
                    y.data() + static_cast<size_t>(b) * geom.dim,
                    sizeof(T) * static_cast<size_t>(geom.dim));
    }
    out.slices.push_back(std::move(slab));
  }
  return out;
}

template <typename T>
struct ParallelRun {
  ShardedTensor<T> output;  // batch-sharded, same layout as the input
  CommLog log;
};

template <typename T>
ShardedTensor<T> parallel_block_forward_naive(const ShardedTensor<T>& x,
                                              const BlockParams<T>& bp,
                                              const BlockGeom& geom, CommLog& log);

// The whole block stack under token parallelism. Batch-sharded input, one
// terminal exchange to restore batch sharding: 2L+1 exchanges total. The
// naive plan re-shards before and after each per-position stage instead,
// costing 4L with identical numerics.
template <typename T>
ParallelRun<T> run_parallel(const Tensor<T>& x0, const ModelParams<T>& m,
                            const ExperimentConfig& cfg, int devices,
                            bool naive = false) {
  const ModelConfig& mc = cfg.model;
  if (mc.block != BlockKind::kTokenMixer)
    throw ConfigError("device simulator supports the two-stage block only");
  const auto dims = layer_dims(mc, x0.dim(1), x0.dim(2));
  const auto junctions = interval_junctions(mc.layers, mc.interval);

  ParallelRun<T> run;
  ShardedTensor<T> x = ShardedTensor<T>::shard(x0, 0, devices);
  std::vector<ShardedTensor<T>> inputs{x};

  for (int layer = 1; layer <= mc.layers; ++layer) {
    const auto& d = dims[static_cast<size_t>(layer - 1)];
    BlockGeom geom{d.tokens_in, d.dim_in,
                   MixConfig{d.heads, mc.mix.strategy, mc.mix.seed},
                   mc.norm, mc.norm_eps, mc.standard_residual};
    const BlockParams<T>& bp = m.blocks[static_cast<size_t>(layer - 1)];
    ShardedTensor<T> y = naive ? parallel_block_forward_naive(x, bp, geom, run.log)
                               : parallel_block_forward(x, bp, geom, run.log);
    for (int j : junctions)
      if (j == layer) {
        const ShardedTensor<T>& skip =
            inputs[static_cast<size_t>(layer - mc.interval - 1)];
        for (int dev = 0; dev < devices; ++dev)
          y.slices[static_cast<size_t>(dev)] =
              kern::add(y.slices[static_cast<size_t>(dev)],
                        skip.slices[static_cast<size_t>(dev)]);
      }
    x = y;
    inputs.push_back(x);
  }
  run.output = naive ? x : all2all(x, 0, run.log, "restore");
  return run;
}

// Naive plan for one block: shard to heads, back to batch, to tokens (with
// the residual stream stacked alongside), back to batch. Four exchanges.
template <typename T>
ShardedTensor<T> parallel_block_forward_naive(const ShardedTensor<T>& x,
                                              const BlockParams<T>& bp,
                                              const BlockGeom& geom, CommLog& log) {
  const int n = x.devices();
  detail::check_parallel_geom<T>(geom, n);
  if (x.shard_dim != 0)
    throw ShapeError("naive plan expects batch-sharded input");
  const MixIndexer ix(geom.tokens, geom.dim, geom.mix);

  ShardedTensor<T> chunks;
  chunks.global_shape = {ix.heads(), x.global_shape[0], geom.tokens, ix.chunk()};
  chunks.shard_dim = 1;
  for (int d = 0; d < n; ++d)
    chunks.slices.push_back(
        detail::chunks_from_tokens(x.slices[static_cast<size_t>(d)], ix, 0));

  ShardedTensor<T> on_heads = all2all(chunks, 0, log, "to-heads");
  const int heads_per_dev = ix.heads() / n;
  ShardedTensor<T> processed = on_heads;
  for (int d = 0; d < n; ++d)
    processed.slices[static_cast<size_t>(d)] = detail::stage1_on_slice(
        on_heads.slices[static_cast<size_t>(d)], bp, geom, d * heads_per_dev);

  ShardedTensor<T> back = all2all(processed, 1, log, "to-batch");

  // Local revert on each device's examples, then pack [reverted ; input].
  ShardedTensor<T> payload;
  payload.global_shape = {x.global_shape[0], geom.tokens, 2 * geom.dim};
  payload.shard_dim = 0;
  for (int d = 0; d < n; ++d) {
    Tensor<T> reverted =
        detail::tokens_from_chunks(back.slices[static_cast<size_t>(d)], ix, 0, 0, 1);
    std::vector<Tensor<T>> parts{std::move(reverted), x.slices[static_cast<size_t>(d)]};
    payload.slices.push_back(kern::concat_axis(std::span<const Tensor<T>>(parts), 2));
  }

  ShardedTensor<T> on_tokens = all2all(payload, 1, log, "to-tokens");
  const int tokens_per_dev = geom.tokens / n;
  ShardedTensor<T> out;
  out.global_shape = {x.global_shape[0], geom.tokens, geom.dim};
  out.shard_dim = 1;
  for (int d = 0; d < n; ++d) {
    const Tensor<T>& slab_in = on_tokens.slices[static_cast<size_t>(d)];
    const int batch = slab_in.dim(0);
    Tensor<T> slab(Shape{batch, tokens_per_dev, geom.dim});
    for (int tl = 0; tl < tokens_per_dev; ++tl) {
      Tensor<T> rt(Shape{batch, geom.dim});
      Tensor<T> xt(Shape{batch, geom.dim});
      for (int b = 0; b < batch; ++b) {
        const T* row = slab_in.data() +
                       (static_cast<size_t>(b) * tokens_per_dev + tl) * 2 * geom.dim;
        std::memcpy(rt.data() + static_cast<size_t>(b) * geom.dim, row,
                    sizeof(T) * static_cast<size_t>(geom.dim));
        std::memcpy(xt.data() + static_cast<size_t>(b) * geom.dim, row + geom.dim,
                    sizeof(T) * static_cast<size_t>(geom.dim));
      }
      Tensor<T> y = detail::position_forward_value(
          rt, xt, bp.stage2, d * tokens_per_dev + tl, geom.norm,
          static_cast<T>(geom.eps), geom.residual, nullptr, nullptr, nullptr);
      for (int b = 0; b < batch; ++b)
        std::memcpy(
            slab.data() + (static_cast<size_t>(b) * tokens_per_dev + tl) * geom.dim,
            y.data() + static_cast<size_t>(b) * geom.dim,
            sizeof(T) * static_cast<size_t>(geom.dim));
    }
    out.slices.push_back(std::move(slab));
  }
  return all2all(out, 0, log, "to-batch");
}

// Scores through the device simulator: tokenizer and head run centrally, the
// block stack runs sharded.
template <typename T>
Tensor<T> model_scores_parallel(const ModelParams<T>& m, const Batch& batch,
                                const ExperimentConfig& cfg, int devices,
                                CommLog* log_out = nullptr) {
  Tensor<T> x0 = tokenize_value(batch, m, cfg);
  ParallelRun<T> run = run_parallel(x0, m, cfg, devices);
  if (log_out) *log_out = run.log;
  Tensor<T> pooled = kern::mean_axis(run.output.unshard(), 1);
  return head_logit_value(pooled, m.head);
}

}  // namespace tmx
