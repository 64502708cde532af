#include "tmx/ablation.hpp"

#include <json.hpp>
#include <sstream>

namespace tmx {

namespace {

MoeConfig moe_1in2() {
  MoeConfig m;
  m.experts = 4;
  m.k_active = 2;
  m.shared_expert = true;
  m.alpha = 0.0;  // auto -> 2
  return m;
}

MoeConfig moe_1in4() {
  MoeConfig m;
  m.experts = 8;
  m.k_active = 2;
  m.shared_expert = true;
  m.alpha = 0.0;  // auto -> 4
  return m;
}

MoeConfig moe_1in8() {
  MoeConfig m;
  m.experts = 16;
  m.k_active = 2;
  m.shared_expert = true;
  m.alpha = 0.0;  // auto -> 8
  return m;
}

void set_moe(ExperimentConfig& c, const MoeConfig& m) {
  c.model.stage1.kind = StageNetKind::kMoe;
  c.model.stage1.moe = m;
  c.model.stage2.kind = StageNetKind::kMoe;
  c.model.stage2.moe = m;
}

void set_init(ExperimentConfig& c, double up, double gate, double down) {
  c.model.init.scale_up = up;
  c.model.init.scale_gate = gate;
  c.model.init.scale_down = down;
}

}  // namespace

std::vector<std::string> ablation_presets() {
  return {
      // component removals
      "no_global_token", "no_mixing_reverting", "no_residual", "no_interval_aux",
      "pswiglu_to_swiglu", "pswiglu_to_pffn",
      // residual-design baselines
      "rankmixer", "rankmixer_no_otr", "rankmixer_no_sr_otr",
      // norm placement
      "post_norm", "sandwich_norm",
      // mixing strategy
      "mix_diagonal", "mix_random", "mix_half_tokens",
      // sparse expert bank components
      "moe_1in2", "moe_1in2_no_shared", "moe_1in2_no_gate_scaling",
      "moe_1in2_no_small_init", "moe_standard", "moe_increase_variance",
      // gate-scale grid
      "moe_1in2_alpha1", "moe_1in2_alpha2", "moe_1in2_alpha3", "moe_1in2_alpha4",
      "moe_1in4_alpha1", "moe_1in4_alpha2", "moe_1in4_alpha4", "moe_1in4_alpha6",
      "moe_1in4_alpha8", "moe_1in8",
      // init-scale grid
      "init_base", "init_down001", "init_down01", "init_all001", "init_reverse",
  };
}

ExperimentConfig apply_preset(const ExperimentConfig& base, const std::string& name) {
  ExperimentConfig c = base;
  if (name == "base") {
    // unchanged
  } else if (name == "no_global_token") {
    c.model.global_token = false;
    if (c.model.mix.strategy == MixStrategy::kNone)
      c.model.mix.heads = token_count(c);
  } else if (name == "no_mixing_reverting") {
    c.model.mix.strategy = MixStrategy::kNone;
    c.model.mix.heads = token_count(c);
  } else if (name == "no_residual") {
    c.model.standard_residual = false;
  } else if (name == "no_interval_aux") {
    c.model.interval = 0;
    c.model.aux_weight = 0.0;
    c.model.aux_sites.clear();
  } else if (name == "pswiglu_to_swiglu") {
    c.model.stage1.kind = StageNetKind::kSharedSwiglu;
    c.model.stage2.kind = StageNetKind::kSharedSwiglu;
  } else if (name == "pswiglu_to_pffn") {
    c.model.stage1.kind = StageNetKind::kPerTokenFfn;
    c.model.stage2.kind = StageNetKind::kPerTokenFfn;
  } else if (name == "rankmixer") {
    c.model.block = BlockKind::kRankMixer;
    c.model.mix.heads = token_count(c);
  } else if (name == "rankmixer_no_otr") {
    c.model.block = BlockKind::kRankMixer;
    c.model.mix.heads = std::max(1, token_count(c) / 2);
  } else if (name == "rankmixer_no_sr_otr") {
    c.model.block = BlockKind::kRankMixer;
    c.model.mix.heads = std::max(1, token_count(c) / 2);
    c.model.standard_residual = false;
  } else if (name == "post_norm") {
    c.model.norm = NormPlacement::kPost;
  } else if (name == "sandwich_norm") {
    c.model.norm = NormPlacement::kSandwich;
  } else if (name == "mix_diagonal") {
    c.model.mix.strategy = MixStrategy::kDiagonal;
  } else if (name == "mix_random") {
    c.model.mix.strategy = MixStrategy::kRandom;
  } else if (name == "mix_half_tokens") {
    c.model.mix.strategy = MixStrategy::kHalfTokens;
  } else if (name == "moe_1in2") {
    set_moe(c, moe_1in2());
  } else if (name == "moe_1in2_no_shared") {
    MoeConfig m = moe_1in2();
    m.shared_expert = false;
    set_moe(c, m);
  } else if (name == "moe_1in2_no_gate_scaling") {
    MoeConfig m = moe_1in2();
    m.alpha = 1.0;
    set_moe(c, m);
  } else if (name == "moe_1in2_no_small_init") {
    set_moe(c, moe_1in2());
    set_init(c, 1.0, 1.0, 1.0);
  } else if (name == "moe_standard") {
    MoeConfig m = moe_1in2();
    m.shared_bank = true;
    set_moe(c, m);
  } else if (name == "moe_increase_variance") {
    MoeConfig m = moe_1in2();
    m.alpha = 1.0;
    m.variance_boost = 4.0;
    set_moe(c, m);
  } else if (name.rfind("moe_1in2_alpha", 0) == 0) {
    MoeConfig m = moe_1in2();
    m.alpha = std::stod(name.substr(std::string("moe_1in2_alpha").size()));
    set_moe(c, m);
  } else if (name.rfind("moe_1in4_alpha", 0) == 0) {
    MoeConfig m = moe_1in4();
    m.alpha = std::stod(name.substr(std::string("moe_1in4_alpha").size()));
    set_moe(c, m);
  } else if (name == "moe_1in8") {
    set_moe(c, moe_1in8());
  } else if (name == "init_base") {
    set_init(c, 1.0, 1.0, 1.0);
  } else if (name == "init_down001") {
    set_init(c, 1.0, 1.0, 0.01);
  } else if (name == "init_down01") {
    set_init(c, 1.0, 1.0, 0.1);
  } else if (name == "init_all001") {
    set_init(c, 0.01, 0.01, 0.01);
  } else if (name == "init_reverse") {
    set_init(c, 0.01, 0.01, 1.0);
  } else {
    throw ConfigError("unknown ablation preset '" + name + "'");
  }
  validate(c);
  return c;
}

AblationReport run_ablation(const ExperimentConfig& base,
                            const std::vector<std::string>& names,
                            const std::vector<uint64_t>& seeds) {
  AblationReport rep;
  rep.seeds = seeds;

  auto run_variant = [&](const std::string& name) {
    AblationRow row;
    row.name = name;
    ExperimentConfig cfg = apply_preset(base, name);
    double sum = 0.0;
    for (uint64_t seed : seeds) {
      ExperimentConfig c = cfg;
      c.model.init.seed = seed;
      c.train.seed = seed;
      RunReport r = run_experiment(c);
      sum += r.final_auc;
      row.runs.push_back(std::move(r));
    }
    row.mean_auc = seeds.empty() ? 0.0 : sum / static_cast<double>(seeds.size());
    return row;
  };

  rep.rows.push_back(run_variant("base"));
  for (const auto& name : names) {
    AblationRow row = run_variant(name);
    row.delta_vs_base = row.mean_auc - rep.rows[0].mean_auc;
    rep.rows.push_back(std::move(row));
  }
  return rep;
}

std::string render_ablation(const AblationReport& report) {
  std::ostringstream os;
  os << "setting                        mean AUC   dAUC vs base   per-seed\n";
  for (const auto& row : report.rows) {
    char line[128];
    snprintf(line, sizeof(line), "%-30s %8.4f   %+11.4f   ", row.name.c_str(),
             row.mean_auc, row.delta_vs_base);
    os << line;
    for (const auto& r : row.runs) {
      char v[32];
      snprintf(v, sizeof(v), "%.4f ", r.final_auc);
      os << v;
    }
    os << "\n";
  }
  return os.str();
}

std::string ablation_to_json(const AblationReport& report) {
  nlohmann::ordered_json j;
  j["seeds"] = report.seeds;
  auto rows = nlohmann::ordered_json::array();
  for (const auto& row : report.rows) {
    nlohmann::ordered_json r;
    r["name"] = row.name;
    r["mean_auc"] = row.mean_auc;
    r["delta_vs_base"] = row.delta_vs_base;
    auto per_seed = nlohmann::ordered_json::array();
    for (const auto& run : row.runs) per_seed.push_back(run.final_auc);
    r["per_seed_auc"] = per_seed;
    rows.push_back(r);
  }
  j["rows"] = rows;
  return j.dump(2);
}

}  // namespace tmx
