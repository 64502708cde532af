#include "tmx/data.hpp"

#include <cmath>
#include <cstring>

#include "tmx/metrics.hpp"
#include "tmx/rng.hpp"

namespace tmx {

Batch Dataset::batch(std::span<const int> examples) const {
  Batch b;
  b.size = static_cast<int>(examples.size());
  b.n_features = n_features;
  b.ids.reserve(examples.size() * static_cast<size_t>(n_features));
  b.labels.reserve(examples.size());
  for (int e : examples) {
    const int32_t* row = ids.data() + static_cast<size_t>(e) * n_features;
    for (int f = 0; f < n_features; ++f) b.ids.push_back(row[f]);
    b.labels.push_back(labels[static_cast<size_t>(e)] ? 1.0 : 0.0);
  }
  return b;
}

Batch Dataset::batch_range(int start, int count) const {
  std::vector<int> idx(static_cast<size_t>(count));
  for (int i = 0; i < count; ++i) idx[static_cast<size_t>(i)] = start + i;
  return batch(idx);
}

namespace {

// Ground truth shared by all example streams drawn from the same DataConfig.
struct PlantedModel {
  std::vector<std::vector<double>> mains;           // per feature, per id
  std::vector<std::pair<int, int>> pair_features;   // cross term feature indices
  std::vector<std::vector<double>> pair_tables;     // card_a * card_b each

  double score(const int32_t* ids) const {
    double s = 0.0;
    for (size_t f = 0; f < mains.size(); ++f) s += mains[f][static_cast<size_t>(ids[f])];
    for (size_t p = 0; p < pair_features.size(); ++p) {
      const auto [fa, fb] = pair_features[p];
      const size_t cols = pair_tables[p].size() /
                          mains[static_cast<size_t>(fa)].size();
      s += pair_tables[p][static_cast<size_t>(ids[fa]) * cols + ids[fb]];
    }
    return s;
  }
};

PlantedModel plant(const std::vector<FeatureSpec>& features, const DataConfig& cfg) {
  PlantedModel m;
  Rng rng(cfg.seed);
  for (const auto& f : features) {
    std::vector<double> w(static_cast<size_t>(f.cardinality));
    for (auto& v : w) v = rng.normal() * cfg.main_scale;
    m.mains.push_back(std::move(w));
  }
  for (const auto& c : cfg.cross) {
    int fa = -1, fb = -1;
    for (size_t f = 0; f < features.size(); ++f) {
      if (features[f].name == c.a) fa = static_cast<int>(f);
      if (features[f].name == c.b) fb = static_cast<int>(f);
    }
    if (fa < 0 || fb < 0) throw ConfigError("cross term names unknown feature");
    const int ca = features[static_cast<size_t>(fa)].cardinality;
    const int cb = features[static_cast<size_t>(fb)].cardinality;
    std::vector<double> table(static_cast<size_t>(ca) * cb);
    for (auto& v : table) v = rng.normal() * c.scale;
    m.pair_features.emplace_back(fa, fb);
    m.pair_tables.push_back(std::move(table));
  }
  return m;
}

double sigmoid(double x) {
  return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

}  // namespace

Dataset generate(const std::vector<FeatureSpec>& features, const DataConfig& cfg,
                 uint64_t stream_seed, int examples) {
  const PlantedModel planted = plant(features, cfg);
  const int nf = static_cast<int>(features.size());

  double intercept = cfg.intercept;
  Dataset d;
  for (int attempt = 0; attempt < 8; ++attempt) {
    d = Dataset{};
    d.n_features = nf;
    d.intercept_used = intercept;
    d.ids.reserve(static_cast<size_t>(examples) * nf);
    d.labels.reserve(static_cast<size_t>(examples));
    d.oracle.reserve(static_cast<size_t>(examples));
    Rng rng(stream_seed);
    int64_t positives = 0;
    std::vector<int32_t> row(static_cast<size_t>(nf));
    for (int e = 0; e < examples; ++e) {
      for (int f = 0; f < nf; ++f)
        row[static_cast<size_t>(f)] = static_cast<int32_t>(
            rng.below(static_cast<uint64_t>(features[static_cast<size_t>(f)].cardinality)));
      const double score = intercept + planted.score(row.data());
      const double p = sigmoid(score + cfg.noise * rng.normal());
      const uint8_t label = rng.uniform() < p ? 1 : 0;
      positives += label;
      d.ids.insert(d.ids.end(), row.begin(), row.end());
      d.labels.push_back(label);
      d.oracle.push_back(score);
    }
    d.positive_rate = static_cast<double>(positives) / examples;
    if (d.positive_rate > 0.05 && d.positive_rate < 0.95) break;
    // Degenerate base rate: recentre the intercept and redraw the stream.
    const double clamped = std::min(0.999, std::max(0.001, d.positive_rate));
    intercept -= std::log(clamped / (1.0 - clamped));
  }
  if (d.positive_rate <= 0.05 || d.positive_rate >= 0.95)
    throw ConfigError("synthetic data: positive rate stayed degenerate after "
                      "intercept adjustment");
  d.ceiling_auc = auc(d.oracle, d.labels);
  return d;
}

std::vector<uint8_t> dataset_bytes(const Dataset& d) {
  std::vector<uint8_t> out;
  auto put = [&](const void* p, size_t n) {
    const auto* b = static_cast<const uint8_t*>(p);
    out.insert(out.end(), b, b + n);
  };
  const int32_t nf = d.n_features;
  const int64_t n = d.size();
  put(&nf, sizeof(nf));
  put(&n, sizeof(n));
  put(d.ids.data(), d.ids.size() * sizeof(int32_t));
  put(d.labels.data(), d.labels.size());
  put(d.oracle.data(), d.oracle.size() * sizeof(double));
  return out;
}

}  // namespace tmx
