#pragma once

#include <numeric>
#include <sstream>

#include "tmx/flops.hpp"
#include "tmx/metrics.hpp"
#include "tmx/parallel.hpp"

namespace tmx {

// acc += g^2; p -= lr * g / sqrt(acc + eps)
template <typename T>
void adagrad_step(Tensor<T>& p, const Tensor<T>& g, Tensor<T>& acc, double lr,
                  double eps = 1e-10) {
  if (!p.same_shape(g) || !p.same_shape(acc))
    throw ShapeError("adagrad: parameter/gradient/state shapes differ");
  if (!g.all_finite()) throw NumericError("adagrad: non-finite gradient");
  for (int64_t i = 0; i < p.numel(); ++i) {
    acc[i] += g[i] * g[i];
    p[i] -= static_cast<T>(lr * g[i] / std::sqrt(acc[i] + eps));
  }
}

struct EvalPoint {
  int step = 0;
  double logloss = 0.0;
  double auc = 0.0;
};

struct RunReport {
  std::string fingerprint;
  uint64_t seed = 0;
  std::vector<EvalPoint> trajectory;
  std::vector<double> epoch_train_loss;
  double final_logloss = 0.0;
  double final_auc = 0.0;
  double ceiling_auc = 0.0;
  int64_t params_embedding = 0;
  int64_t params_dense = 0;
  int64_t params_activated = 0;
  double flops_per_batch = 0.0;
  int rejected_steps = 0;
  bool aborted = false;
  std::string abort_reason;
};

template <typename T>
struct BoundModel {
  ModelVars vars;
  std::vector<Var> leaves;
  std::vector<uint8_t> sparse;
};

template <typename T>
BoundModel<T> bind_model_training(Tape<T>& tape, ModelParams<T>& m) {
  BoundModel<T> b;
  auto binder = [&](const std::string&, Tensor<T>& t, bool sp) {
    Var v = tape.leaf(t, true);
    b.leaves.push_back(v);
    b.sparse.push_back(sp ? 1 : 0);
    return v;
  };
  b.vars = walk_model(m, binder);
  return b;
}

namespace detail {

template <typename T>
double tensor_rms(const Tensor<T>& x) {
  double s = 0.0;
  for (int64_t i = 0; i < x.numel(); ++i)
    s += static_cast<double>(x[i]) * static_cast<double>(x[i]);
  return std::sqrt(s / static_cast<double>(x.numel()));
}

// Best-effort per-layer activation norms for the NaN-abort diagnostic.
template <typename T>
std::string layer_norm_diagnostic(const ModelParams<T>& m, const Batch& batch,
                                  const ExperimentConfig& cfg) {
  std::ostringstream os;
  try {
    std::vector<Tensor<T>> outs;
    model_scores_value(m, batch, cfg, nullptr, nullptr, nullptr, &outs);
    for (size_t l = 0; l < outs.size(); ++l)
      os << " layer" << (l + 1) << " rms=" << tensor_rms(outs[l]);
  } catch (const std::exception& e) {
    os << " (diagnostic stopped: " << e.what() << ")";
  }
  return os.str();
}

}  // namespace detail

// Scores over a whole dataset through the value-level path (or the device
// simulator when requested), batched to bound memory.
template <typename T>
std::vector<double> eval_scores(const ModelParams<T>& model, const Dataset& ds,
                                const ExperimentConfig& cfg, int devices = 0) {
  std::vector<double> scores;
  scores.reserve(static_cast<size_t>(ds.size()));
  const int eb = 512;
  for (int s = 0; s < ds.size(); s += eb) {
    const int c = std::min(eb, ds.size() - s);
    Batch b = ds.batch_range(s, c);
    Tensor<T> z = devices > 1 ? model_scores_parallel(model, b, cfg, devices)
                              : model_scores_value(model, b, cfg);
    for (int i = 0; i < c; ++i) scores.push_back(static_cast<double>(z[i]));
  }
  return scores;
}

// The full loop: tokenize -> blocks -> pool -> head, BCE plus weighted aux
// losses, Adagrad with separate dense and embedding rates. Deterministic
// under (config, seed). A non-finite gradient rejects the step and flags the
// run; a non-finite activation aborts with per-layer norms.
template <typename T>
RunReport train_model(const ExperimentConfig& cfg,
                      ModelParams<T>* trained = nullptr,
                      const Dataset* train_ds = nullptr,
                      const Dataset* eval_ds = nullptr) {
  validate(cfg);
  RunReport rep;
  rep.fingerprint = config_fingerprint(cfg);
  rep.seed = cfg.train.seed;
  const ParamCounts counts = count_params(cfg);
  rep.params_embedding = counts.embedding;
  rep.params_dense = counts.dense_total;
  rep.params_activated = counts.dense_activated;
  rep.flops_per_batch = flops_count(cfg, cfg.train.batch_size);

  Dataset train_local, eval_local;
  if (!train_ds) {
    train_local = generate_train(cfg.features, cfg.data);
    train_ds = &train_local;
  }
  if (!eval_ds) {
    eval_local = generate_eval(cfg.features, cfg.data);
    eval_ds = &eval_local;
  }
  rep.ceiling_auc = eval_ds->ceiling_auc;

  ModelParams<T> model = init_model<T>(cfg);
  std::vector<Tensor<T>> acc;
  for_each_param(model,
                 [&](const std::string&, Tensor<T>& t, bool) { acc.emplace_back(t.shape()); });

  const int batch_size = cfg.train.batch_size;
  const int steps_per_epoch = train_ds->size() / batch_size;
  int step = 0;

  auto run_eval = [&](int at_step) {
    std::vector<double> scores =
        eval_scores(model, *eval_ds, cfg, cfg.train.parallel_devices);
    EvalPoint p;
    p.step = at_step;
    p.logloss = logloss(scores, eval_ds->labels);
    p.auc = auc(scores, eval_ds->labels);
    rep.trajectory.push_back(p);
  };

  for (int epoch = 0; epoch < cfg.train.epochs && !rep.aborted; ++epoch) {
    Rng order_rng(cfg.train.seed * 1000003ULL + static_cast<uint64_t>(epoch));
    std::vector<int> order(static_cast<size_t>(train_ds->size()));
    std::iota(order.begin(), order.end(), 0);
    order_rng.shuffle(order.begin(), order.end());

    double loss_sum = 0.0;
    int loss_n = 0;
    for (int s = 0; s < steps_per_epoch; ++s) {
      Batch b = train_ds->batch(
          std::span<const int>(order.data() + static_cast<size_t>(s) * batch_size,
                               static_cast<size_t>(batch_size)));
      try {
        Tape<T> tape;
        BoundModel<T> bound = bind_model_training(tape, model);
        ModelOutput out = model_forward(tape, b, bound.vars, cfg);
        Var loss = model_loss(tape, out, batch_labels<T>(b), cfg.model.aux_weight);
        loss_sum += static_cast<double>(tape.val(loss)[0]);
        loss_n++;
        tape.backward(loss);

        bool finite = true;
        for (Var v : bound.leaves)
          if (!tape.grad(v).all_finite()) {
            finite = false;
            break;
          }
        if (!finite) {
          rep.rejected_steps++;
        } else {
          size_t i = 0;
          for_each_param(model, [&](const std::string&, Tensor<T>& t, bool sp) {
            adagrad_step(t, tape.grad(bound.leaves[i]), acc[i],
                         sp ? cfg.train.lr_sparse : cfg.train.lr_dense);
            ++i;
          });
        }
      } catch (const NumericError& e) {
        rep.aborted = true;
        rep.abort_reason = std::string(e.what()) +
                           detail::layer_norm_diagnostic(model, b, cfg);
        break;
      }
      ++step;
      if (cfg.train.eval_every > 0 && step % cfg.train.eval_every == 0)
        run_eval(step);
    }
    if (loss_n > 0) rep.epoch_train_loss.push_back(loss_sum / loss_n);
    if (!rep.aborted && cfg.train.eval_every == 0) run_eval(step);
  }
  if (!rep.aborted &&
      (rep.trajectory.empty() || rep.trajectory.back().step != step))
    run_eval(step);
  if (!rep.trajectory.empty()) {
    rep.final_logloss = rep.trajectory.back().logloss;
    rep.final_auc = rep.trajectory.back().auc;
  }
  if (trained) *trained = std::move(model);
  return rep;
}

// Precision dispatch; trained parameters always surface at 64-bit.
inline RunReport run_experiment(const ExperimentConfig& cfg,
                                ModelParams<double>* trained = nullptr,
                                const Dataset* train_ds = nullptr,
                                const Dataset* eval_ds = nullptr) {
  if (cfg.model.precision == Precision::kF64)
    return train_model<double>(cfg, trained, train_ds, eval_ds);
  if (trained) {
    ModelParams<float> p;
    RunReport r = train_model<float>(cfg, &p, train_ds, eval_ds);
    *trained = p.cast<double>();
    return r;
  }
  return train_model<float>(cfg, nullptr, train_ds, eval_ds);
}

}  // namespace tmx
