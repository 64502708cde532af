#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "tmx/config.hpp"

namespace tmx {

struct Batch {
  int size = 0;
  int n_features = 0;
  std::vector<int> ids;        // size x n_features, row-major
  std::vector<double> labels;  // {0, 1}

  int id(int example, int feature) const {
    return ids[static_cast<size_t>(example) * n_features + feature];
  }
};

// Synthetic impression log: ids drawn uniformly per feature, labels from a
// planted logistic model with per-id main effects plus cross-group pairwise
// interaction tables, and logit noise.
struct Dataset {
  int n_features = 0;
  std::vector<int32_t> ids;    // examples x features
  std::vector<uint8_t> labels;
  std::vector<double> oracle;  // planted scores, noise-free
  double positive_rate = 0.0;
  double ceiling_auc = 0.0;    // AUC of the planted score on these labels
  double intercept_used = 0.0;

  int size() const {
    return n_features == 0 ? 0
                           : static_cast<int>(ids.size()) / n_features;
  }
  Batch batch(std::span<const int> examples) const;
  Batch batch_range(int start, int count) const;
};

// The planted model is seeded by cfg.seed; the example stream by stream_seed,
// so train and eval splits share one ground truth. Regenerates with an
// adjusted intercept if the positive rate leaves (0.05, 0.95).
Dataset generate(const std::vector<FeatureSpec>& features, const DataConfig& cfg,
                 uint64_t stream_seed, int examples);

inline Dataset generate_train(const std::vector<FeatureSpec>& f, const DataConfig& c) {
  return generate(f, c, c.seed + 1000003, c.train_examples);
}
inline Dataset generate_eval(const std::vector<FeatureSpec>& f, const DataConfig& c) {
  return generate(f, c, c.seed + 2000003, c.eval_examples);
}

// Canonical byte serialization, used by determinism checks.
std::vector<uint8_t> dataset_bytes(const Dataset& d);

}  // namespace tmx
