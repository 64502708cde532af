#include "tmx/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace tmx {

double auc(std::span<const double> scores, std::span<const uint8_t> labels) {
  if (scores.size() != labels.size())
    throw MetricError("auc: scores and labels differ in length");
  int64_t pos = 0, neg = 0;
  for (uint8_t l : labels) (l ? pos : neg)++;
  if (pos == 0 || neg == 0)
    throw MetricError("auc: undefined on single-class input");

  const size_t n = scores.size();
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t{0});
  std::sort(order.begin(), order.end(),
            [&](size_t a, size_t b) { return scores[a] < scores[b]; });

  // Average ranks over tied score runs, accumulate positive ranks.
  double pos_rank_sum = 0.0;
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j + 1));
    for (size_t k = i; k <= j; ++k)
      if (labels[order[k]]) pos_rank_sum += avg_rank;
    i = j + 1;
  }
  return (pos_rank_sum - 0.5 * static_cast<double>(pos) * (pos + 1)) /
         (static_cast<double>(pos) * static_cast<double>(neg));
}

double logloss(std::span<const double> logits, std::span<const uint8_t> labels) {
  if (logits.size() != labels.size())
    throw MetricError("logloss: logits and labels differ in length");
  double loss = 0.0;
  for (size_t i = 0; i < logits.size(); ++i) {
    const double z = logits[i];
    const double y = labels[i] ? 1.0 : 0.0;
    loss += std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
  }
  return loss / static_cast<double>(logits.size());
}

}  // namespace tmx
