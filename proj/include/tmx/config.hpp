#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tmx/common.hpp"

namespace tmx {

enum class Precision { kF32, kF64 };
enum class NormPlacement { kPre, kPost, kSandwich };
enum class MixStrategy { kVertical, kDiagonal, kRandom, kHalfTokens, kNone };
enum class StageNetKind { kPerTokenSwiglu, kSharedSwiglu, kPerTokenFfn, kMoe };
enum class BlockKind { kTokenMixer, kRankMixer };

// One sparse categorical input feature.
struct FeatureSpec {
  std::string name;
  int cardinality = 1;
  int emb_dim = 1;
  int group = 0;  // semantic group index, 0-based
};

struct MixConfig {
  int heads = 8;
  MixStrategy strategy = MixStrategy::kVertical;
  uint64_t seed = 0;  // used by the random strategy
};

struct MoeConfig {
  int experts = 4;   // experts per token position, including the shared one
  int k_active = 2;  // activated per example, including the shared one
  bool shared_expert = true;
  double alpha = 0.0;           // gate value scale; 0 selects experts/k_active
  double variance_boost = 1.0;  // multiplies expert kernel init variance
  bool shared_bank = false;     // one expert bank for all positions of a stage
};

struct StageConfig {
  StageNetKind kind = StageNetKind::kPerTokenSwiglu;
  MoeConfig moe;
};

// Xavier-normal init scales per SwiGLU matrix role.
struct InitConfig {
  uint64_t seed = 1;
  double scale_up = 1.0;
  double scale_gate = 1.0;
  double scale_down = 0.01;
};

struct ModelConfig {
  int dim = 64;         // token width D
  int layers = 4;       // block count L
  int hidden_mult = 2;  // hidden expansion n
  MixConfig mix;
  NormPlacement norm = NormPlacement::kPre;
  double norm_eps = 1e-6;
  int interval = 2;        // inter-layer residual stride; 0 disables
  double aux_weight = 0.1; // lambda
  std::vector<int> aux_sites;  // 1-based layers; empty = junction layers
  bool global_token = true;
  bool standard_residual = true;
  BlockKind block = BlockKind::kTokenMixer;
  StageConfig stage1, stage2;
  InitConfig init;
  int tokenizer_layers = 1;  // 1 = linear projection, 2 = 2-layer with Swish
  Precision precision = Precision::kF32;
};

struct CrossTerm {
  std::string a, b;   // feature names, different groups
  double scale = 0.5;
};

// Planted logistic model over synthetic feature ids.
struct DataConfig {
  uint64_t seed = 99;          // seeds the planted model
  int train_examples = 49152;
  int eval_examples = 8192;
  double noise = 1.0;          // stddev of logit noise
  double intercept = 0.0;
  double main_scale = 0.4;     // stddev of per-id main effects
  std::vector<CrossTerm> cross;
};

struct TrainConfig {
  int batch_size = 256;
  int epochs = 2;
  uint64_t seed = 7;
  double lr_dense = 0.01;
  double lr_sparse = 0.05;
  int eval_every = 0;        // steps between evals; 0 = once per epoch
  int parallel_devices = 0;  // >1 routes eval through the device simulator
};

struct ExperimentConfig {
  ModelConfig model;
  std::vector<FeatureSpec> features;
  DataConfig data;
  TrainConfig train;
};

// ---- derived geometry ----

int group_count(const std::vector<FeatureSpec>& features);

// Feature indices per group, in declaration order.
std::vector<std::vector<int>> features_by_group(const std::vector<FeatureSpec>& fs);

inline int token_count(const ExperimentConfig& cfg) {
  return group_count(cfg.features) + (cfg.model.global_token ? 1 : 0);
}

// Per-layer geometry; the baseline block changes token count and width.
struct LayerDims {
  int tokens_in = 0, dim_in = 0;
  int heads = 0, mixed_width = 0;
  int tokens_out = 0, dim_out = 0;
};

std::vector<LayerDims> layer_dims(const ModelConfig& model, int tokens0, int dim0);

// Layers whose output receives an inter-layer residual from k layers below:
// candidates k+k, 2k+k, ... with none terminating at the final layer.
std::vector<int> interval_junctions(int layers, int interval);

// Aux-head placement; defaults to the junction layers.
std::vector<int> aux_site_layers(const ModelConfig& model);

// Throws ConfigError when dimensions or toggles are inconsistent.
void validate(const ExperimentConfig& cfg);

// ---- serialization (JSON, lossless round-trip) ----

ExperimentConfig experiment_from_json(const std::string& text);
std::string experiment_to_json(const ExperimentConfig& cfg);
ExperimentConfig load_experiment_file(const std::string& path);
void save_experiment_file(const ExperimentConfig& cfg, const std::string& path);

// Stable hash of the canonical JSON form, for report provenance.
std::string config_fingerprint(const ExperimentConfig& cfg);

// The desk-scale default experiment (model, features, data, training).
ExperimentConfig default_experiment();

}  // namespace tmx
