#include "tmx/config.hpp"

#include <fstream>
#include <json.hpp>
#include <sstream>

#include "tmx/model.hpp"

namespace tmx {

using ordered_json = nlohmann::ordered_json;

int group_count(const std::vector<FeatureSpec>& features) {
  int mx = -1;
  for (const auto& f : features) mx = std::max(mx, f.group);
  return mx + 1;
}

std::vector<std::vector<int>> features_by_group(const std::vector<FeatureSpec>& fs) {
  std::vector<std::vector<int>> groups(static_cast<size_t>(group_count(fs)));
  for (size_t f = 0; f < fs.size(); ++f)
    groups[static_cast<size_t>(fs[f].group)].push_back(static_cast<int>(f));
  return groups;
}

std::vector<LayerDims> layer_dims(const ModelConfig& mc, int tokens0, int dim0) {
  std::vector<LayerDims> out;
  int t = tokens0, d = dim0;
  for (int l = 0; l < mc.layers; ++l) {
    LayerDims ld;
    ld.tokens_in = t;
    ld.dim_in = d;
    ld.heads = mc.mix.heads;
    if (ld.heads <= 0 || d % ld.heads != 0)
      throw ConfigError("layer " + std::to_string(l + 1) + ": width " +
                        std::to_string(d) + " not divisible by " +
                        std::to_string(ld.heads) + " heads");
    ld.mixed_width = t * (d / ld.heads);
    if (mc.block == BlockKind::kRankMixer) {
      ld.tokens_out = ld.heads;
      ld.dim_out = ld.mixed_width;
    } else {
      ld.tokens_out = t;
      ld.dim_out = d;
    }
    out.push_back(ld);
    t = ld.tokens_out;
    d = ld.dim_out;
  }
  return out;
}

std::vector<int> interval_junctions(int layers, int interval) {
  std::vector<int> out;
  if (interval < 2) return out;
  for (int i = interval; i + interval <= layers; i += interval) {
    const int j = i + interval;
    if (j != layers) out.push_back(j);
  }
  return out;
}

std::vector<int> aux_site_layers(const ModelConfig& mc) {
  if (!mc.aux_sites.empty()) return mc.aux_sites;
  return interval_junctions(mc.layers, mc.interval);
}

namespace {

void check(bool ok, const std::string& msg) {
  if (!ok) throw ConfigError(msg);
}

void validate_stage(const StageConfig& sc, int width, int hidden_mult,
                    const char* label) {
  const int hidden = hidden_mult * width;
  if (sc.kind != StageNetKind::kMoe) return;
  const MoeConfig& m = sc.moe;
  check(m.experts >= 1, std::string(label) + ": experts must be >= 1");
  check(m.k_active >= 1 && m.k_active <= m.experts,
        std::string(label) + ": need 1 <= k_active <= experts");
  check(!m.shared_expert || m.experts >= 2,
        std::string(label) + ": shared expert requires >= 2 experts");
  check(hidden % m.experts == 0,
        std::string(label) + ": hidden width " + std::to_string(hidden) +
            " not divisible by " + std::to_string(m.experts) + " experts");
  check(m.alpha >= 0.0, std::string(label) + ": alpha must be >= 0 (0 = auto)");
  check(m.variance_boost > 0.0, std::string(label) + ": variance_boost must be > 0");
}

}  // namespace

void validate(const ExperimentConfig& cfg) {
  check(!cfg.features.empty(), "no features declared");
  const int groups = group_count(cfg.features);
  check(groups >= 1, "no feature groups");
  std::vector<int> per_group(static_cast<size_t>(groups), 0);
  for (const auto& f : cfg.features) {
    check(!f.name.empty(), "feature with empty name");
    check(f.cardinality >= 1, "feature '" + f.name + "': cardinality must be >= 1");
    check(f.emb_dim >= 1, "feature '" + f.name + "': emb_dim must be >= 1");
    check(f.group >= 0 && f.group < groups, "feature '" + f.name + "': bad group");
    per_group[static_cast<size_t>(f.group)]++;
  }
  for (int g = 0; g < groups; ++g)
    check(per_group[static_cast<size_t>(g)] > 0,
          "group " + std::to_string(g) + " has no features");

  const ModelConfig& mc = cfg.model;
  check(mc.dim >= 1 && mc.layers >= 1 && mc.hidden_mult >= 1,
        "model dims must be positive");
  check(mc.norm_eps > 0.0, "norm_eps must be > 0");
  check(mc.interval == 0 || mc.interval >= 2,
        "interval residual stride must be 0 (off) or >= 2");
  check(mc.aux_weight >= 0.0, "aux_weight must be >= 0");
  check(mc.tokenizer_layers == 1 || mc.tokenizer_layers == 2,
        "tokenizer_layers must be 1 or 2");

  const int tokens0 = token_count(cfg);
  check(tokens0 >= 1, "model needs at least one token");
  if (mc.mix.strategy == MixStrategy::kNone)
    check(mc.mix.heads == tokens0,
          "pass-through mixing requires heads == tokens");
  const auto dims = layer_dims(mc, tokens0, mc.dim);  // throws on divisibility
  for (const auto& d : dims) {
    validate_stage(mc.stage1, d.mixed_width, mc.hidden_mult, "stage1");
    if (mc.block == BlockKind::kTokenMixer)
      validate_stage(mc.stage2, d.dim_in, mc.hidden_mult, "stage2");
  }

  int prev = 0;
  for (int s : mc.aux_sites) {
    check(s >= 1 && s < mc.layers,
          "aux site " + std::to_string(s) +
              " invalid: sites must lie in [1, layers-1]; the final layer is "
              "not an aux site");
    check(s > prev, "aux sites must be strictly increasing");
    prev = s;
  }

  check(cfg.data.train_examples > 0 && cfg.data.eval_examples > 0,
        "data sizes must be positive");
  check(cfg.data.noise >= 0.0, "noise must be >= 0");
  for (const auto& c : cfg.data.cross) {
    int ia = -1, ib = -1;
    for (size_t f = 0; f < cfg.features.size(); ++f) {
      if (cfg.features[f].name == c.a) ia = static_cast<int>(f);
      if (cfg.features[f].name == c.b) ib = static_cast<int>(f);
    }
    check(ia >= 0 && ib >= 0, "cross term names unknown feature");
    check(cfg.features[static_cast<size_t>(ia)].group !=
              cfg.features[static_cast<size_t>(ib)].group,
          "cross term '" + c.a + "' x '" + c.b + "' must span two groups");
  }

  check(cfg.train.batch_size >= 1, "batch_size must be >= 1");
  check(cfg.train.epochs >= 0, "epochs must be >= 0");
  check(cfg.train.lr_dense > 0.0 && cfg.train.lr_sparse > 0.0,
        "learning rates must be > 0");
  check(cfg.train.parallel_devices >= 0, "parallel_devices must be >= 0");
}

MoeTelemetry make_telemetry(const ExperimentConfig& cfg) {
  MoeTelemetry t;
  const auto dims = layer_dims(cfg.model, token_count(cfg), cfg.model.dim);
  if (cfg.model.stage1.kind == StageNetKind::kMoe) {
    const MoeConfig& m = cfg.model.stage1.moe;
    for (const auto& d : dims)
      t.stage1.emplace_back(d.heads, m.experts - (m.shared_expert ? 1 : 0),
                            m.shared_expert);
  }
  if (cfg.model.block == BlockKind::kTokenMixer &&
      cfg.model.stage2.kind == StageNetKind::kMoe) {
    const MoeConfig& m = cfg.model.stage2.moe;
    for (const auto& d : dims)
      t.stage2.emplace_back(d.tokens_in, m.experts - (m.shared_expert ? 1 : 0),
                            m.shared_expert);
  }
  return t;
}

ParamCounts count_params(const ExperimentConfig& cfg) {
  ParamCounts c;
  const ModelConfig& mc = cfg.model;
  for (const auto& f : cfg.features)
    c.embedding += static_cast<int64_t>(f.cardinality) * f.emb_dim;

  int64_t dense = 0, inactive = 0;
  int total_in = 0;
  for (const auto& g : features_by_group(cfg.features)) {
    int in = 0;
    for (int f : g) in += cfg.features[static_cast<size_t>(f)].emb_dim;
    total_in += in;
    dense += static_cast<int64_t>(in) * mc.dim;
    if (mc.tokenizer_layers == 2) dense += static_cast<int64_t>(mc.dim) * mc.dim;
  }
  if (mc.global_token) {
    dense += static_cast<int64_t>(total_in) * mc.dim;
    if (mc.tokenizer_layers == 2) dense += static_cast<int64_t>(mc.dim) * mc.dim;
  }

  auto stage_params = [&](const StageConfig& sc, int positions, int width,
                          int64_t* inactive_out) {
    const int64_t hidden = static_cast<int64_t>(mc.hidden_mult) * width;
    int64_t p = 0;
    switch (sc.kind) {
      case StageNetKind::kPerTokenSwiglu:
        p += positions * 3 * width * hidden;
        break;
      case StageNetKind::kSharedSwiglu:
        p += 3 * width * hidden;
        break;
      case StageNetKind::kPerTokenFfn:
        p += positions * 2 * width * hidden;
        break;
      case StageNetKind::kMoe: {
        const MoeConfig& m = sc.moe;
        const int64_t slab = hidden / m.experts;
        const int banks = m.shared_bank ? 1 : positions;
        p += static_cast<int64_t>(banks) * m.experts * 3 * width * slab;
        p += static_cast<int64_t>(banks) * width *
             (m.experts - (m.shared_expert ? 1 : 0));  // router
        *inactive_out += static_cast<int64_t>(banks) * (m.experts - m.k_active) *
                         3 * width * slab;
        break;
      }
    }
    p += static_cast<int64_t>(positions) * width;  // gamma
    if (mc.norm == NormPlacement::kSandwich)
      p += static_cast<int64_t>(positions) * width;
    return p;
  };

  const auto dims = layer_dims(mc, token_count(cfg), mc.dim);
  for (const auto& d : dims) {
    dense += stage_params(mc.stage1, d.heads, d.mixed_width, &inactive);
    if (mc.block == BlockKind::kTokenMixer)
      dense += stage_params(mc.stage2, d.tokens_in, d.dim_in, &inactive);
  }
  for (int site : aux_site_layers(mc))
    dense += dims[static_cast<size_t>(site - 1)].dim_out + 1;
  dense += dims.back().dim_out + 1;

  c.dense_total = dense;
  c.dense_activated = dense - inactive;
  return c;
}

// ---- JSON ----

namespace {

std::string to_string(Precision p) { return p == Precision::kF32 ? "f32" : "f64"; }
std::string to_string(NormPlacement n) {
  switch (n) {
    case NormPlacement::kPre: return "pre";
    case NormPlacement::kPost: return "post";
    case NormPlacement::kSandwich: return "sandwich";
  }
  return "pre";
}
std::string to_string(MixStrategy s) {
  switch (s) {
    case MixStrategy::kVertical: return "vertical";
    case MixStrategy::kDiagonal: return "diagonal";
    case MixStrategy::kRandom: return "random";
    case MixStrategy::kHalfTokens: return "half_tokens";
    case MixStrategy::kNone: return "none";
  }
  return "vertical";
}
std::string to_string(StageNetKind k) {
  switch (k) {
    case StageNetKind::kPerTokenSwiglu: return "pswiglu";
    case StageNetKind::kSharedSwiglu: return "shared_swiglu";
    case StageNetKind::kPerTokenFfn: return "pffn";
    case StageNetKind::kMoe: return "moe";
  }
  return "pswiglu";
}
std::string to_string(BlockKind k) {
  return k == BlockKind::kTokenMixer ? "tokenmixer" : "rankmixer";
}

template <typename E>
E parse_enum(const std::string& s, std::initializer_list<std::pair<const char*, E>> table,
             const char* what) {
  for (const auto& [k, v] : table)
    if (s == k) return v;
  throw ConfigError(std::string("unknown ") + what + " '" + s + "'");
}

Precision parse_precision(const std::string& s) {
  return parse_enum<Precision>(s, {{"f32", Precision::kF32}, {"f64", Precision::kF64}},
                               "precision");
}
NormPlacement parse_norm(const std::string& s) {
  return parse_enum<NormPlacement>(s,
                                   {{"pre", NormPlacement::kPre},
                                    {"post", NormPlacement::kPost},
                                    {"sandwich", NormPlacement::kSandwich}},
                                   "norm placement");
}
MixStrategy parse_strategy(const std::string& s) {
  return parse_enum<MixStrategy>(s,
                                 {{"vertical", MixStrategy::kVertical},
                                  {"diagonal", MixStrategy::kDiagonal},
                                  {"random", MixStrategy::kRandom},
                                  {"half_tokens", MixStrategy::kHalfTokens},
                                  {"none", MixStrategy::kNone}},
                                 "mix strategy");
}
StageNetKind parse_net(const std::string& s) {
  return parse_enum<StageNetKind>(s,
                                  {{"pswiglu", StageNetKind::kPerTokenSwiglu},
                                   {"shared_swiglu", StageNetKind::kSharedSwiglu},
                                   {"pffn", StageNetKind::kPerTokenFfn},
                                   {"moe", StageNetKind::kMoe}},
                                  "stage net");
}
BlockKind parse_block(const std::string& s) {
  return parse_enum<BlockKind>(
      s, {{"tokenmixer", BlockKind::kTokenMixer}, {"rankmixer", BlockKind::kRankMixer}},
      "block kind");
}

ordered_json stage_to_json(const StageConfig& s) {
  ordered_json j;
  j["net"] = to_string(s.kind);
  if (s.kind == StageNetKind::kMoe) {
    j["experts"] = s.moe.experts;
    j["k_active"] = s.moe.k_active;
    j["shared_expert"] = s.moe.shared_expert;
    j["alpha"] = s.moe.alpha;
    j["variance_boost"] = s.moe.variance_boost;
    j["shared_bank"] = s.moe.shared_bank;
  }
  return j;
}

StageConfig stage_from_json(const ordered_json& j) {
  StageConfig s;
  s.kind = parse_net(j.value("net", "pswiglu"));
  if (s.kind == StageNetKind::kMoe) {
    s.moe.experts = j.value("experts", 4);
    s.moe.k_active = j.value("k_active", 2);
    s.moe.shared_expert = j.value("shared_expert", true);
    s.moe.alpha = j.value("alpha", 0.0);
    s.moe.variance_boost = j.value("variance_boost", 1.0);
    s.moe.shared_bank = j.value("shared_bank", false);
  }
  return s;
}

}  // namespace

std::string experiment_to_json(const ExperimentConfig& cfg) {
  ordered_json j;
  ordered_json m;
  m["dim"] = cfg.model.dim;
  m["layers"] = cfg.model.layers;
  m["hidden_mult"] = cfg.model.hidden_mult;
  m["heads"] = cfg.model.mix.heads;
  m["mix_strategy"] = to_string(cfg.model.mix.strategy);
  m["mix_seed"] = cfg.model.mix.seed;
  m["norm"] = to_string(cfg.model.norm);
  m["norm_eps"] = cfg.model.norm_eps;
  m["interval"] = cfg.model.interval;
  m["aux_weight"] = cfg.model.aux_weight;
  m["aux_sites"] = cfg.model.aux_sites;
  m["global_token"] = cfg.model.global_token;
  m["standard_residual"] = cfg.model.standard_residual;
  m["block"] = to_string(cfg.model.block);
  m["stage1"] = stage_to_json(cfg.model.stage1);
  m["stage2"] = stage_to_json(cfg.model.stage2);
  m["init_seed"] = cfg.model.init.seed;
  m["init_scales"] = {cfg.model.init.scale_up, cfg.model.init.scale_gate,
                      cfg.model.init.scale_down};
  m["tokenizer_layers"] = cfg.model.tokenizer_layers;
  m["precision"] = to_string(cfg.model.precision);
  j["model"] = m;

  ordered_json feats = ordered_json::array();
  for (const auto& f : cfg.features) {
    ordered_json jf;
    jf["name"] = f.name;
    jf["cardinality"] = f.cardinality;
    jf["emb_dim"] = f.emb_dim;
    jf["group"] = f.group;
    feats.push_back(jf);
  }
  j["features"] = feats;

  ordered_json d;
  d["seed"] = cfg.data.seed;
  d["train_examples"] = cfg.data.train_examples;
  d["eval_examples"] = cfg.data.eval_examples;
  d["noise"] = cfg.data.noise;
  d["intercept"] = cfg.data.intercept;
  d["main_scale"] = cfg.data.main_scale;
  ordered_json cross = ordered_json::array();
  for (const auto& c : cfg.data.cross)
    cross.push_back({{"a", c.a}, {"b", c.b}, {"scale", c.scale}});
  d["cross"] = cross;
  j["data"] = d;

  ordered_json t;
  t["batch_size"] = cfg.train.batch_size;
  t["epochs"] = cfg.train.epochs;
  t["seed"] = cfg.train.seed;
  t["lr_dense"] = cfg.train.lr_dense;
  t["lr_sparse"] = cfg.train.lr_sparse;
  t["eval_every"] = cfg.train.eval_every;
  t["parallel_devices"] = cfg.train.parallel_devices;
  j["train"] = t;

  return j.dump(2);
}

ExperimentConfig experiment_from_json(const std::string& text) {
  ordered_json j;
  try {
    j = ordered_json::parse(text);
  } catch (const std::exception& e) {
    throw ConfigError(std::string("config parse error: ") + e.what());
  }
  ExperimentConfig cfg;
  if (j.contains("model")) {
    const auto& m = j["model"];
    cfg.model.dim = m.value("dim", cfg.model.dim);
    cfg.model.layers = m.value("layers", cfg.model.layers);
    cfg.model.hidden_mult = m.value("hidden_mult", cfg.model.hidden_mult);
    cfg.model.mix.heads = m.value("heads", cfg.model.mix.heads);
    cfg.model.mix.strategy = parse_strategy(m.value("mix_strategy", "vertical"));
    cfg.model.mix.seed = m.value("mix_seed", cfg.model.mix.seed);
    cfg.model.norm = parse_norm(m.value("norm", "pre"));
    cfg.model.norm_eps = m.value("norm_eps", cfg.model.norm_eps);
    cfg.model.interval = m.value("interval", cfg.model.interval);
    cfg.model.aux_weight = m.value("aux_weight", cfg.model.aux_weight);
    cfg.model.aux_sites = m.value("aux_sites", cfg.model.aux_sites);
    cfg.model.global_token = m.value("global_token", cfg.model.global_token);
    cfg.model.standard_residual =
        m.value("standard_residual", cfg.model.standard_residual);
    cfg.model.block = parse_block(m.value("block", "tokenmixer"));
    if (m.contains("stage1")) cfg.model.stage1 = stage_from_json(m["stage1"]);
    if (m.contains("stage2")) cfg.model.stage2 = stage_from_json(m["stage2"]);
    cfg.model.init.seed = m.value("init_seed", cfg.model.init.seed);
    if (m.contains("init_scales")) {
      const auto& s = m["init_scales"];
      if (!s.is_array() || s.size() != 3)
        throw ConfigError("init_scales must be [up, gate, down]");
      cfg.model.init.scale_up = s[0].get<double>();
      cfg.model.init.scale_gate = s[1].get<double>();
      cfg.model.init.scale_down = s[2].get<double>();
    }
    cfg.model.tokenizer_layers = m.value("tokenizer_layers", cfg.model.tokenizer_layers);
    cfg.model.precision = parse_precision(m.value("precision", "f32"));
  }
  if (j.contains("features")) {
    for (const auto& jf : j["features"]) {
      FeatureSpec f;
      f.name = jf.value("name", "");
      f.cardinality = jf.value("cardinality", 1);
      f.emb_dim = jf.value("emb_dim", 1);
      f.group = jf.value("group", 0);
      cfg.features.push_back(f);
    }
  }
  if (j.contains("data")) {
    const auto& d = j["data"];
    cfg.data.seed = d.value("seed", cfg.data.seed);
    cfg.data.train_examples = d.value("train_examples", cfg.data.train_examples);
    cfg.data.eval_examples = d.value("eval_examples", cfg.data.eval_examples);
    cfg.data.noise = d.value("noise", cfg.data.noise);
    cfg.data.intercept = d.value("intercept", cfg.data.intercept);
    cfg.data.main_scale = d.value("main_scale", cfg.data.main_scale);
    if (d.contains("cross"))
      for (const auto& jc : d["cross"]) {
        CrossTerm c;
        c.a = jc.value("a", "");
        c.b = jc.value("b", "");
        c.scale = jc.value("scale", 0.5);
        cfg.data.cross.push_back(c);
      }
  }
  if (j.contains("train")) {
    const auto& t = j["train"];
    cfg.train.batch_size = t.value("batch_size", cfg.train.batch_size);
    cfg.train.epochs = t.value("epochs", cfg.train.epochs);
    cfg.train.seed = t.value("seed", cfg.train.seed);
    cfg.train.lr_dense = t.value("lr_dense", cfg.train.lr_dense);
    cfg.train.lr_sparse = t.value("lr_sparse", cfg.train.lr_sparse);
    cfg.train.eval_every = t.value("eval_every", cfg.train.eval_every);
    cfg.train.parallel_devices = t.value("parallel_devices", cfg.train.parallel_devices);
  }
  validate(cfg);
  return cfg;
}

ExperimentConfig load_experiment_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return experiment_from_json(ss.str());
}

void save_experiment_file(const ExperimentConfig& cfg, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write config file '" + path + "'");
  out << experiment_to_json(cfg) << "\n";
}

std::string config_fingerprint(const ExperimentConfig& cfg) {
  const std::string s = experiment_to_json(cfg);
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf);
}

ExperimentConfig default_experiment() {
  ExperimentConfig cfg;
  // Crossing features keep small vocabularies so the planted pair tables are
  // densely observed at desk-scale sample sizes.
  cfg.features = {
      {"user_seg", 8, 8, 0},  {"user_act", 16, 6, 0}, {"user_geo", 16, 6, 0},
      {"item_cat", 8, 8, 1},  {"item_pop", 12, 6, 1}, {"ctx_hour", 24, 6, 2},
      {"ctx_dev", 8, 4, 3},   {"hist_cat", 8, 8, 4},  {"hist_len", 12, 4, 5},
      {"cross_bucket", 8, 6, 6},
  };
  cfg.data.cross = {
      {"user_seg", "item_cat", 0.8},
      {"user_seg", "hist_cat", 0.8},
      {"item_cat", "cross_bucket", 0.8},
      {"ctx_dev", "hist_cat", 0.8},
  };
  cfg.data.main_scale = 0.3;
  cfg.data.noise = 1.0;
  validate(cfg);
  return cfg;
}

}  // namespace tmx
