#pragma once

#include "tmx/train.hpp"

namespace tmx {

// Named single-toggle variants of a base experiment: component removals,
// residual-design baselines, norm placement, mixing strategy, MoE component
// toggles, gate-scale and init-scale grids.
std::vector<std::string> ablation_presets();

// Throws ConfigError on an unknown preset name.
ExperimentConfig apply_preset(const ExperimentConfig& base, const std::string& name);

struct AblationRow {
  std::string name;
  std::vector<RunReport> runs;  // one per seed
  double mean_auc = 0.0;
  double delta_vs_base = 0.0;
};

struct AblationReport {
  std::vector<uint64_t> seeds;
  std::vector<AblationRow> rows;  // rows[0] is the base
};

// Trains the base and every named variant with common seeds (init, data and
// batch order all keyed to the seed) and reports per-seed AUC deltas.
AblationReport run_ablation(const ExperimentConfig& base,
                            const std::vector<std::string>& names,
                            const std::vector<uint64_t>& seeds);

std::string render_ablation(const AblationReport& report);

std::string ablation_to_json(const AblationReport& report);

}  // namespace tmx
