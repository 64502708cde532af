#pragma once

#include <string>

#include "tmx/model.hpp"

namespace tmx {

struct Checkpoint {
  ExperimentConfig cfg;
  ModelParams<double> params;
};

// Binary checkpoint: embedded config JSON plus named 64-bit tensors in the
// canonical parameter order. Round-trips bit-exactly.
void save_checkpoint(const ModelParams<double>& params, const ExperimentConfig& cfg,
                     const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace tmx
