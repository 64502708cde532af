#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

namespace tmx {

class MetricError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Rank-based AUC: probability that a random positive outranks a random
// negative, ties counted one half. Throws MetricError on single-class input.
double auc(std::span<const double> scores, std::span<const uint8_t> labels);

// Mean binary cross-entropy of logits against {0,1} labels.
double logloss(std::span<const double> logits, std::span<const uint8_t> labels);

}  // namespace tmx
