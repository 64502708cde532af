#pragma once

#include "tmx/gradcheck.hpp"
#include "tmx/train.hpp"

namespace tmx {

// Small full-coverage config for whole-model verification: interval residual
// and aux head present, three groups plus the global token, 64-bit.
inline ExperimentConfig toy_experiment(bool with_moe = false) {
  ExperimentConfig cfg;
  cfg.features = {
      {"a", 5, 3, 0}, {"b", 4, 2, 0}, {"c", 5, 3, 1}, {"d", 4, 2, 2}};
  cfg.model.dim = 8;
  cfg.model.mix.heads = 2;
  cfg.model.layers = 5;
  cfg.model.hidden_mult = 2;
  cfg.model.interval = 2;  // junction and aux head at layer 4
  cfg.model.aux_weight = 0.1;
  cfg.model.init.scale_up = 1.0;
  cfg.model.init.scale_gate = 1.0;
  cfg.model.init.scale_down = 1.0;
  cfg.model.precision = Precision::kF64;
  cfg.data.train_examples = 256;
  cfg.data.eval_examples = 128;
  cfg.data.cross = {{"a", "c", 0.5}};
  cfg.train.batch_size = 4;
  if (with_moe) {
    MoeConfig m;
    m.experts = 4;
    m.k_active = 2;
    m.shared_expert = true;
    cfg.model.stage1.kind = StageNetKind::kMoe;
    cfg.model.stage1.moe = m;
    cfg.model.stage2.kind = StageNetKind::kMoe;
    cfg.model.stage2.moe = m;
  }
  validate(cfg);
  return cfg;
}

// Central-difference check of the 64-bit loss gradient over every parameter
// of the model. The difference quotient is evaluated in extended precision:
// with ~2e4 parameters some gradients sit near 1e-8, and a 64-bit oracle's
// own roundoff (|f|*u/eps ~ 1e-11) would otherwise dominate the comparison.
inline double model_grad_check(const ExperimentConfig& cfg, int batch_size,
                               double eps = 1e-5) {
  ModelParams<double> params = init_model<double>(cfg);
  Dataset ds = generate_train(cfg.features, cfg.data);
  Batch b = ds.batch_range(0, batch_size);
  Tensor<double> labels = batch_labels<double>(b);
  Tensor<double> flat = flatten_params(params);

  Tape<double> tape;
  Var xv = tape.leaf(flat, true);
  ModelVars mv = bind_model_flat(tape, params, xv);
  ModelOutput out = model_forward(tape, b, mv, cfg);
  tape.backward(model_loss(tape, out, labels, cfg.model.aux_weight));
  const Tensor<double> analytic = tape.grad(xv);

  ModelParams<long double> probe = params.cast<long double>();
  std::vector<long double*> coord;
  coord.reserve(static_cast<size_t>(flat.numel()));
  for_each_param(probe, [&](const std::string&, Tensor<long double>& t, bool) {
    for (int64_t i = 0; i < t.numel(); ++i) coord.push_back(&t[i]);
  });

  double worst = 0.0;
  for (size_t i = 0; i < coord.size(); ++i) {
    const long double keep = *coord[i];
    *coord[i] = keep + eps;
    const long double up = model_loss_value(probe, b, cfg);
    *coord[i] = keep - eps;
    const long double down = model_loss_value(probe, b, cfg);
    *coord[i] = keep;
    const double fd = static_cast<double>((up - down) / (2.0L * eps));
    const double a = analytic[static_cast<int64_t>(i)];
    const double denom = std::max({std::abs(a), std::abs(fd), 1e-12});
    worst = std::max(worst, std::abs(a - fd) / denom);
  }
  return worst;
}

}  // namespace tmx
