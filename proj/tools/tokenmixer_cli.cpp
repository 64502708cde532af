#include <CLI11.hpp>
#include <cstdio>
#include <fstream>
#include <iostream>

#include "tmx/ablation.hpp"
#include "tmx/checkpoint.hpp"
#include "tmx/fp8.hpp"
#include "tmx/modelcheck.hpp"
#include "tmx/report.hpp"

using namespace tmx;

namespace {

ExperimentConfig load_or_default(const std::string& path) {
  return path.empty() ? default_experiment() : load_experiment_file(path);
}

void write_file(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write '" + path + "'");
  out << text;
}

// A minimal model with the requested geometry for the sharding simulator:
// one single-feature group per non-global token.
ExperimentConfig sim_config(int tokens, int dim, int heads, int layers,
                            uint64_t seed, const std::string& strategy) {
  ExperimentConfig cfg;
  cfg.features.clear();
  for (int g = 0; g < tokens - 1; ++g)
    cfg.features.push_back({"f" + std::to_string(g), 8, 4, g});
  cfg.model.dim = dim;
  cfg.model.mix.heads = heads;
  cfg.model.mix.strategy = strategy == "diagonal" ? MixStrategy::kDiagonal
                           : strategy == "random" ? MixStrategy::kRandom
                                                  : MixStrategy::kVertical;
  cfg.model.mix.seed = seed;
  cfg.model.layers = layers;
  cfg.model.hidden_mult = 2;
  cfg.model.interval = 0;
  cfg.model.aux_weight = 0.0;
  cfg.model.init.seed = seed;
  cfg.model.init.scale_down = 1.0;  // exercise non-trivial outputs
  cfg.model.precision = Precision::kF64;
  cfg.data.seed = seed;
  validate(cfg);
  return cfg;
}

int cmd_train(const std::string& config_path, const std::string& out_path,
              const std::string& ckpt_path) {
  ExperimentConfig cfg = load_or_default(config_path);
  ModelParams<double> trained;
  RunReport rep = run_experiment(cfg, ckpt_path.empty() ? nullptr : &trained);
  std::cout << render_reports({"train"}, {rep});
  std::cout << "trajectory:\n";
  for (const auto& p : rep.trajectory)
    printf("  step %6d  logloss %.5f  auc %.5f\n", p.step, p.logloss, p.auc);
  if (!out_path.empty()) write_file(out_path, run_report_to_json(rep));
  if (!ckpt_path.empty()) {
    save_checkpoint(trained, cfg, ckpt_path);
    std::cout << "checkpoint written to " << ckpt_path << "\n";
  }
  return rep.aborted ? 1 : 0;
}

int cmd_gradcheck(const std::string& config_path) {
  int failures = 0;
  auto report = [&](const char* name, double err, double tol) {
    const bool ok = err < tol;
    printf("%-28s max rel err %.3e  (tol %.0e)  %s\n", name, err, tol,
           ok ? "ok" : "FAIL");
    if (!ok) ++failures;
  };

  {
    Rng rng(3);
    Tensor<double> x(Shape{6});
    for (int i = 0; i < 6; ++i) x[i] = rng.normal();
    report("sum of squares", grad_check([](Tape<double>& t, Var v) {
             return t.sum(t.mul(v, v));
           }, x), 1e-6);
    Tensor<double> w(Shape{6, 4});
    for (int64_t i = 0; i < w.numel(); ++i) w[i] = rng.normal();
    report("matmul+swish+softmax", grad_check([&](Tape<double>& t, Var v) {
             return t.mean(t.softmax(t.swish(t.matmul(t.reshape(v, {1, 6}),
                                                      t.constant(w)))));
           }, x), 1e-6);
  }

  if (config_path.empty()) {
    report("toy model (dense)", model_grad_check(toy_experiment(false), 4), 1e-4);
    report("toy model (sparse experts)", model_grad_check(toy_experiment(true), 4),
           1e-4);
  } else {
    ExperimentConfig cfg = load_or_default(config_path);
    cfg.model.precision = Precision::kF64;
    report("model", model_grad_check(cfg, 4), 1e-4);
  }
  return failures == 0 ? 0 : 1;
}

int cmd_ablate(const std::string& config_path, std::vector<std::string> presets,
               std::vector<uint64_t> seeds, const std::string& out_path) {
  ExperimentConfig cfg = load_or_default(config_path);
  if (presets.empty()) presets = ablation_presets();
  if (seeds.empty()) seeds = {1, 2};
  AblationReport rep = run_ablation(cfg, presets, seeds);
  std::cout << render_ablation(rep);
  if (!out_path.empty()) write_file(out_path, ablation_to_json(rep));
  return 0;
}

int cmd_sim_parallel(int devices, int layers, int tokens, int dim, int heads,
                     int batch, uint64_t seed, const std::string& strategy,
                     bool naive) {
  ExperimentConfig cfg = sim_config(tokens, dim, heads, layers, seed, strategy);
  ModelParams<double> m = init_model<double>(cfg);

  Rng rng(seed + 17);
  Tensor<double> x0(Shape{batch, tokens, dim});
  for (int64_t i = 0; i < x0.numel(); ++i) x0[i] = rng.normal();

  ParallelRun<double> run = run_parallel(x0, m, cfg, devices, naive);
  Tensor<double> serial = blocks_forward_value(x0, m, cfg).back();
  Tensor<double> parallel = run.output.unshard();
  double max_diff = 0.0;
  for (int64_t i = 0; i < serial.numel(); ++i)
    max_diff = std::max(max_diff, std::abs(serial[i] - parallel[i]));

  printf("devices=%d layers=%d tokens=%d dim=%d heads=%d batch=%d mode=%s\n",
         devices, layers, tokens, dim, heads, batch, naive ? "naive" : "optimized");
  printf("exchanges:\n");
  for (const auto& e : run.log.events)
    printf("  %-10s %10llu bytes  %s -> %s\n", e.label.c_str(),
           static_cast<unsigned long long>(e.bytes), e.src_layout.c_str(),
           e.dst_layout.c_str());
  const int expected = naive ? 4 * layers : 2 * layers + 1;
  const bool count_ok = run.log.count() == expected;
  const bool equiv_ok = max_diff < 1e-10;
  printf("exchange count: %d (expected %d)  %s\n", run.log.count(), expected,
         count_ok ? "ok" : "FAIL");
  printf("max |parallel - serial| = %.3e  %s\n", max_diff,
         equiv_ok ? "PASS" : "FAIL");
  return count_ok && equiv_ok ? 0 : 1;
}

int cmd_quantize_eval(const std::string& ckpt_path, uint64_t eval_seed) {
  Checkpoint ck = load_checkpoint(ckpt_path);
  DataConfig dc = ck.cfg.data;
  if (eval_seed != 0) dc.seed = eval_seed;
  Dataset eval = generate_eval(ck.cfg.features, dc);
  fp8::Fp8Report rep = fp8::fp8_eval(ck.params, ck.cfg, eval);
  printf("8-bit inference fidelity (%d held-out examples, data seed %llu)\n",
         eval.size(), static_cast<unsigned long long>(dc.seed));
  for (size_t l = 0; l < rep.layer_max_rel.size(); ++l)
    printf("  layer %zu max relative deviation: %.3e\n", l + 1, rep.layer_max_rel[l]);
  printf("  max |score dev|: %.3e\n", rep.score_max_abs_dev);
  printf("  logloss: fp32 %.5f  fp8 %.5f\n", rep.logloss_fp32, rep.logloss_fp8);
  printf("  auc:     fp32 %.5f  fp8 %.5f  (delta %+.5f)\n", rep.auc_fp32,
         rep.auc_fp8, rep.auc_delta());
  return 0;
}

int cmd_report(const std::vector<std::string>& inputs) {
  std::vector<RunReport> reports;
  std::vector<std::string> names;
  for (const auto& path : inputs) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    reports.push_back(run_report_from_json(ss.str()));
    names.push_back(path);
  }
  std::cout << render_reports(names, reports);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Desk-scale TokenMixer-Large ranking-model workbench"};
  app.require_subcommand(1);

  std::string config_path, out_path, ckpt_path;
  auto* train = app.add_subcommand("train", "train on synthetic data");
  train->add_option("--config", config_path, "experiment JSON (default: built-in)");
  train->add_option("--out", out_path, "write the run report JSON here");
  train->add_option("--checkpoint", ckpt_path, "write trained parameters here");

  std::string gc_config;
  auto* gradcheck =
      app.add_subcommand("gradcheck", "finite-difference gradient verification");
  gradcheck->add_option("--config", gc_config, "check this experiment's model");

  std::string ab_config, ab_out;
  std::vector<std::string> ab_presets;
  std::vector<uint64_t> ab_seeds;
  auto* ablate = app.add_subcommand("ablate", "train named variants and compare");
  ablate->add_option("--config", ab_config, "base experiment JSON");
  ablate->add_option("--preset", ab_presets, "preset names (default: all)");
  ablate->add_option("--seed", ab_seeds, "seeds (default: 1 2)");
  ablate->add_option("--out", ab_out, "write the comparison JSON here");

  int devices = 2, layers = 3, tokens = 4, dim = 8, heads = 4, batch = 8;
  uint64_t sim_seed = 1;
  std::string strategy = "vertical";
  bool naive = false;
  auto* sim = app.add_subcommand("sim-parallel",
                                 "deterministic sharding simulation with "
                                 "exchange accounting and an equivalence check");
  sim->add_option("--devices", devices, "logical device count");
  sim->add_option("--layers", layers, "block count");
  sim->add_option("--tokens", tokens, "token count");
  sim->add_option("--dim", dim, "token width");
  sim->add_option("--heads", heads, "mixed positions");
  sim->add_option("--batch", batch, "batch size");
  sim->add_option("--seed", sim_seed, "parameter/input seed");
  sim->add_option("--strategy", strategy, "vertical|diagonal|random");
  sim->add_flag("--naive", naive, "re-shard around every stage (4L exchanges)");

  std::string q_ckpt;
  uint64_t q_seed = 0;
  auto* quant = app.add_subcommand("quantize-eval",
                                   "compare 8-bit and full-precision inference");
  quant->add_option("--checkpoint", q_ckpt, "trained checkpoint")->required();
  quant->add_option("--seed", q_seed, "eval dataset seed override");

  std::vector<std::string> report_inputs;
  auto* report = app.add_subcommand("report", "render run reports as a table");
  report->add_option("inputs", report_inputs, "run report JSON files")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (app.got_subcommand(train)) return cmd_train(config_path, out_path, ckpt_path);
    if (app.got_subcommand(gradcheck)) return cmd_gradcheck(gc_config);
    if (app.got_subcommand(ablate))
      return cmd_ablate(ab_config, ab_presets, ab_seeds, ab_out);
    if (app.got_subcommand(sim))
      return cmd_sim_parallel(devices, layers, tokens, dim, heads, batch, sim_seed,
                              strategy, naive);
    if (app.got_subcommand(quant)) return cmd_quantize_eval(q_ckpt, q_seed);
    if (app.got_subcommand(report)) return cmd_report(report_inputs);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
