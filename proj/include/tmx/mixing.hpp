#pragma once

#include <vector>

#include "tmx/config.hpp"
#include "tmx/rng.hpp"

namespace tmx {

// Index algebra of the mixing/reverting rearrangement.
//
// Every token is cut into H chunks of width D/H. Mixed position h is the
// concatenation, in token order, of chunk chunk_of(t, h) taken from token
// src_token(t). For the vertical, diagonal and random strategies this is a
// bijection on scalars and revert is its exact inverse. The half-tokens
// control deliberately sources all chunks from the first half of the tokens
// and is therefore not invertible; its revert picks the canonical copy.
class MixIndexer {
 public:
  MixIndexer(int tokens, int dim, const MixConfig& cfg)
      : tokens_(tokens), dim_(dim), heads_(cfg.heads), strategy_(cfg.strategy) {
    if (heads_ <= 0 || dim_ % heads_ != 0)
      throw ShapeError("mix: dim " + std::to_string(dim_) +
                       " not divisible by heads " + std::to_string(heads_));
    if (strategy_ == MixStrategy::kNone && heads_ != tokens_)
      throw ConfigError("mix: the pass-through strategy requires heads == tokens");
    chunk_ = dim_ / heads_;
    width_ = tokens_ * chunk_;
    if (strategy_ == MixStrategy::kRandom) {
      Rng rng(cfg.seed);
      perm_ = rng.permutation(heads_);
      inv_perm_.assign(perm_.size(), 0);
      for (int h = 0; h < heads_; ++h) inv_perm_[static_cast<size_t>(perm_[h])] = h;
    }
    build_maps();
  }

  int tokens() const { return tokens_; }
  int dim() const { return dim_; }
  int heads() const { return heads_; }
  int chunk() const { return chunk_; }
  int width() const { return width_; }
  MixStrategy strategy() const { return strategy_; }
  bool bijective() const { return strategy_ != MixStrategy::kHalfTokens; }

  // Chunk of token t that lands in mixed position h.
  int chunk_of(int t, int h) const {
    switch (strategy_) {
      case MixStrategy::kVertical:
      case MixStrategy::kHalfTokens:
        return h;
      case MixStrategy::kDiagonal:
        return (t + h) % heads_;
      case MixStrategy::kRandom:
        return perm_[static_cast<size_t>(h)];
      case MixStrategy::kNone:
        return h == t ? 0 : -1;  // position t carries token t whole
    }
    return -1;
  }

  // Mixed position carrying chunk c of token t (canonical for the control).
  int head_of(int t, int c) const {
    switch (strategy_) {
      case MixStrategy::kVertical:
      case MixStrategy::kHalfTokens:
        return c;
      case MixStrategy::kDiagonal:
        return (c - t % heads_ + heads_) % heads_;
      case MixStrategy::kRandom:
        return inv_perm_[static_cast<size_t>(c)];
      case MixStrategy::kNone:
        return t;
    }
    return -1;
  }

  // Token whose chunks fill slot t; identity except for the control.
  int src_token(int t) const {
    if (strategy_ != MixStrategy::kHalfTokens) return t;
    const int half = (tokens_ + 1) / 2;
    return t < half ? t : t - half;
  }

  // Flat source index per output slot for mix ([B,T,D] -> [B,H,W]) and
  // revert ([B,H,W] -> [B,T,D]); row-major within an example.
  const std::vector<int>& mix_map() const { return mix_map_; }
  const std::vector<int>& revert_map() const { return revert_map_; }

 private:
  void build_maps() {
    const int64_t n = static_cast<int64_t>(tokens_) * dim_;
    mix_map_.resize(static_cast<size_t>(n));
    revert_map_.resize(static_cast<size_t>(n));
    if (strategy_ == MixStrategy::kNone) {
      for (int64_t i = 0; i < n; ++i) {
        mix_map_[static_cast<size_t>(i)] = static_cast<int>(i);
        revert_map_[static_cast<size_t>(i)] = static_cast<int>(i);
      }
      return;
    }
    for (int h = 0; h < heads_; ++h)
      for (int t = 0; t < tokens_; ++t) {
        const int c = chunk_of(t, h);
        const int src = src_token(t);
        for (int d = 0; d < chunk_; ++d)
          mix_map_[static_cast<size_t>(h) * width_ + t * chunk_ + d] =
              src * dim_ + c * chunk_ + d;
      }
    for (int t = 0; t < tokens_; ++t)
      for (int c = 0; c < heads_; ++c) {
        const int h = head_of(t, c);
        for (int d = 0; d < chunk_; ++d)
          revert_map_[static_cast<size_t>(t) * dim_ + c * chunk_ + d] =
              h * width_ + t * chunk_ + d;
      }
  }

  int tokens_, dim_, heads_, chunk_ = 0, width_ = 0;
  MixStrategy strategy_;
  std::vector<int> perm_, inv_perm_;
  std::vector<int> mix_map_, revert_map_;
};

}  // namespace tmx
