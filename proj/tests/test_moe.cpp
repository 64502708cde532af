#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "tmx/ablation.hpp"
#include "tmx/block.hpp"
#include "tmx/modelcheck.hpp"

using namespace tmx;

namespace {

Tensor<double> random_tensor(Shape s, Rng& rng, double scale = 1.0) {
  Tensor<double> t(std::move(s));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.normal() * scale;
  return t;
}

SpMoeParams<double> random_moe(int width, int hidden, const MoeConfig& mc,
                               uint64_t seed, double down_scale = 1.0) {
  InitConfig init;
  init.scale_down = down_scale;
  Rng rng(seed);
  return init_sp_moe<double>(width, hidden, mc, init, rng);
}

SpMoeVars bind_moe(Tape<double>& t, SpMoeParams<double>& p) {
  SpMoeVars v;
  for (auto& e : p.experts)
    v.experts.push_back(
        {t.leaf(e.up, true), t.leaf(e.gate, true), t.leaf(e.down, true)});
  v.router = t.leaf(p.router, true);
  v.k_active = p.k_active;
  v.shared_last = p.shared_last;
  v.alpha = p.alpha;
  return v;
}

}  // namespace

TEST_CASE("routing selects top scores with softmax gates over the selection") {
  Tensor<double> router(Shape{3, 3});
  router.at(0, 0) = 1.0;
  router.at(1, 1) = 1.0;
  router.at(2, 2) = 1.0;  // identity: scores = x
  Tensor<double> x(Shape{3}, std::vector<double>{2.0, 1.0, 0.5});
  auto r = route(x, router, 2);
  REQUIRE(r.indices == std::vector<int>{0, 1});
  CHECK(r.gates[0] == doctest::Approx(0.7310585786300049).epsilon(1e-9));
  CHECK(r.gates[1] == doctest::Approx(0.2689414213699951).epsilon(1e-9));
  CHECK(r.gates[0] + r.gates[1] == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("equal scores tie toward the lowest index with uniform gates") {
  Tensor<double> router(Shape{2, 4});  // zero router: all scores equal
  Tensor<double> x(Shape{2}, std::vector<double>{0.3, -0.7});
  auto r = route(x, router, 2);
  CHECK(r.indices == std::vector<int>{0, 1});
  CHECK(r.gates[0] == doctest::Approx(0.5));
  CHECK(r.gates[1] == doctest::Approx(0.5));
}

TEST_CASE("selecting every routed expert is the full softmax") {
  Rng rng(3);
  Tensor<double> router = random_tensor({4, 3}, rng);
  Tensor<double> x = random_tensor({4}, rng);
  auto r = route(x, router, 3);
  Tensor<double> scores = kern::matmul(x.reshaped({1, 4}), router);
  Tensor<double> full = kern::softmax_rows(scores);
  double sum = 0.0;
  for (size_t j = 0; j < r.indices.size(); ++j) {
    CHECK(r.gates[j] == doctest::Approx(full[r.indices[j]]).epsilon(1e-12));
    sum += r.gates[j];
  }
  CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("more active experts than routed experts is an error") {
  Rng rng(4);
  Tensor<double> router = random_tensor({4, 2}, rng);
  Tensor<double> x = random_tensor({4}, rng);
  CHECK_THROWS_AS(route(x, router, 3), ShapeError);
}

TEST_CASE("selected gates sum to one over random instances") {
  Rng rng(5);
  for (int rep = 0; rep < 50; ++rep) {
    const int routed = 2 + static_cast<int>(rng.below(6));
    const int k = 1 + static_cast<int>(rng.below(static_cast<uint64_t>(routed)));
    Tensor<double> router = random_tensor({5, routed}, rng);
    Tensor<double> x = random_tensor({5}, rng);
    auto r = route(x, router, k);
    double sum = 0.0;
    for (double g : r.gates) sum += g;
    CHECK(std::abs(sum - 1.0) < 1e-12);
  }
}

TEST_CASE("positive rescaling of router logits keeps the selected index set") {
  Rng rng(6);
  for (int rep = 0; rep < 30; ++rep) {
    Tensor<double> scores = random_tensor({4, 6}, rng);
    Tensor<int> a = kern::topk_indices(scores, 3);
    Tensor<int> b = kern::topk_indices(kern::scale(scores, 2.5 + rng.uniform()), 3);
    for (int64_t i = 0; i < a.numel(); ++i) CHECK(a[i] == b[i]);
  }
}

TEST_CASE("zero expert weights give zero routed output") {
  MoeConfig mc;
  mc.experts = 4;
  mc.k_active = 2;
  mc.shared_expert = true;
  SpMoeParams<double> p = random_moe(6, 12, mc, 7);
  for (auto& e : p.experts) {
    e.up = Tensor<double>(e.up.shape());
    e.gate = Tensor<double>(e.gate.shape());
    e.down = Tensor<double>(e.down.shape());
  }
  Rng rng(8);
  Tensor<double> x = random_tensor({3, 6}, rng);
  Tensor<double> y = sp_moe_value(x, p);
  for (int64_t i = 0; i < y.numel(); ++i) CHECK(y[i] == 0.0);
}

TEST_CASE("alpha times uniform gates over two experts sums them") {
  MoeConfig mc;
  mc.experts = 2;
  mc.k_active = 2;
  mc.shared_expert = false;
  mc.alpha = 2.0;
  SpMoeParams<double> p = random_moe(5, 10, mc, 9);
  p.router = Tensor<double>(p.router.shape());  // zero scores -> gates 1/2, 1/2
  Rng rng(10);
  Tensor<double> x = random_tensor({4, 5}, rng);
  Tensor<double> y = sp_moe_value(x, p);
  Tensor<double> want = kern::add(pswiglu_value(x, p.experts[0]),
                                  pswiglu_value(x, p.experts[1]));
  for (int64_t i = 0; i < y.numel(); ++i)
    CHECK(y[i] == doctest::Approx(want[i]).epsilon(1e-12));
}

TEST_CASE("unselected experts get exactly zero gradient, selected ones do not") {
  MoeConfig mc;
  mc.experts = 4;
  mc.k_active = 3;  // shared plus two routed, so the gates stay differentiable
  mc.shared_expert = true;
  SpMoeParams<double> p = random_moe(6, 12, mc, 11);
  // deterministic routing: experts 1 and 2 win for every row
  p.router = Tensor<double>(p.router.shape());
  for (int i = 0; i < p.router.dim(0); ++i) {
    p.router.at(i, 1) = 1.0;
    p.router.at(i, 2) = 0.5;
  }

  Tape<double> t;
  SpMoeVars v = bind_moe(t, p);
  Rng rng(12);
  Tensor<double> xval(Shape{3, 6});
  for (int64_t i = 0; i < xval.numel(); ++i) xval[i] = 0.5 + rng.uniform();  // positive
  Var x = t.constant(xval);
  Var y = sp_moe(t, x, v);
  t.backward(t.sum(y));

  auto grad_norm = [&](const SwigluVars& w) {
    double s = 0.0;
    for (Var g : {w.up, w.gate, w.down})
      for (int64_t i = 0; i < t.grad(g).numel(); ++i)
        s += std::abs(t.grad(g)[i]);
    return s;
  };
  CHECK(grad_norm(v.experts[0]) == 0.0);  // unselected
  CHECK(grad_norm(v.experts[1]) > 0.0);   // routed winner
  CHECK(grad_norm(v.experts[2]) > 0.0);   // routed runner-up
  CHECK(grad_norm(v.experts[3]) > 0.0);   // shared
  // the router learns through the selected-score softmax
  double router_grad = 0.0;
  for (int64_t i = 0; i < t.grad(v.router).numel(); ++i)
    router_grad += std::abs(t.grad(v.router)[i]);
  CHECK(router_grad > 0.0);
  // a single routed activation pins its gate at one: no router gradient
  SpMoeParams<double> p1 = random_moe(6, 12, mc, 24);
  p1.k_active = 2;
  Tape<double> t1;
  SpMoeVars v1 = bind_moe(t1, p1);
  t1.backward(t1.sum(sp_moe(t1, t1.constant(xval), v1)));
  double r1 = 0.0;
  for (int64_t i = 0; i < t1.grad(v1.router).numel(); ++i)
    r1 += std::abs(t1.grad(v1.router)[i]);
  CHECK(r1 == 0.0);
}

TEST_CASE("grouped evaluation matches naive per-example dispatch") {
  Rng rng(13);
  for (int rep = 0; rep < 10; ++rep) {
    MoeConfig mc;
    mc.experts = 2 + static_cast<int>(rng.below(4));
    mc.k_active = 1 + static_cast<int>(rng.below(static_cast<uint64_t>(mc.experts)));
    mc.shared_expert = rng.uniform() < 0.5 && mc.experts >= 2 && mc.k_active >= 1;
    const int width = 4 * (1 + static_cast<int>(rng.below(2)));
    const int hidden = width * mc.experts;
    SpMoeParams<double> p = random_moe(width, hidden, mc, rng.next_u64());
    Tensor<double> x = random_tensor({7, width}, rng);
    Tensor<double> grouped = sp_moe_value(x, p);
    Tensor<double> naive = sp_moe_reference(x, p);
    for (int64_t i = 0; i < grouped.numel(); ++i)
      CHECK(std::abs(grouped[i] - naive[i]) < 1e-12);
  }
}

TEST_CASE("tape and value expert banks agree bitwise") {
  MoeConfig mc;
  mc.experts = 4;
  mc.k_active = 2;
  mc.shared_expert = true;
  SpMoeParams<double> p = random_moe(6, 12, mc, 14);
  Rng rng(15);
  Tensor<double> x = random_tensor({5, 6}, rng);
  Tape<double> t;
  SpMoeVars v = bind_moe(t, p);
  Tensor<double> tape_y = t.val(sp_moe(t, t.constant(x), v));
  Tensor<double> val_y = sp_moe_value(x, p);
  for (int64_t i = 0; i < tape_y.numel(); ++i) CHECK(tape_y[i] == val_y[i]);
}

TEST_CASE("splitting a dense network is exact under full activation") {
  Rng rng(16);
  SUBCASE("one expert is the network itself") {
    InitConfig init;
    init.scale_down = 1.0;
    SwigluParams<double> dense = init_swiglu<double>(6, 12, 6, init, rng);
    auto experts = split_dense(dense, 1);
    Tensor<double> x = random_tensor({4, 6}, rng);
    Tensor<double> a = pswiglu_value(x, dense);
    Tensor<double> b = pswiglu_value(x, experts[0]);
    for (int64_t i = 0; i < a.numel(); ++i) CHECK(a[i] == b[i]);
  }
  SUBCASE("slab sum reproduces the dense output") {
    for (int experts_n : {2, 3, 4, 6}) {
      InitConfig init;
      init.scale_down = 1.0;
      SwigluParams<double> dense = init_swiglu<double>(8, 24, 8, init, rng);
      auto experts = split_dense(dense, experts_n);
      Tensor<double> x = random_tensor({5, 8}, rng);
      Tensor<double> sum = all_experts_unit_gate_value(x, experts);
      Tensor<double> want = pswiglu_value(x, dense);
      for (int64_t i = 0; i < sum.numel(); ++i)
        CHECK(std::abs(sum[i] - want[i]) < 1e-12);
    }
  }
  SUBCASE("hidden width must divide") {
    InitConfig init;
    SwigluParams<double> dense = init_swiglu<double>(4, 10, 4, init, rng);
    CHECK_THROWS_AS(split_dense(dense, 4), ShapeError);
  }
  SUBCASE("half activation halves the expert parameter count") {
    InitConfig init;
    SwigluParams<double> dense = init_swiglu<double>(8, 16, 8, init, rng);
    auto experts = split_dense(dense, 4);
    auto numel = [](const SwigluParams<double>& w) {
      return w.up.numel() + w.gate.numel() + w.down.numel();
    };
    int64_t total = 0;
    for (const auto& e : experts) total += numel(e);
    int64_t activated = numel(experts[0]) + numel(experts[1]);  // k = 2 of 4
    CHECK(total == numel(dense));
    CHECK(activated * 2 == total);
  }
}

TEST_CASE("xavier-normal init honors the role scales") {
  SUBCASE("zero scale degenerates to the zero matrix") {
    Rng rng(17);
    Tensor<double> w = xavier_normal<double>(16, 16, 0.0, rng);
    for (int64_t i = 0; i < w.numel(); ++i) CHECK(w[i] == 0.0);
  }
  SUBCASE("down-matrix stddev matches scale * sqrt(2/(n_in+n_out))") {
    Rng rng(18);
    const int n_in = 128, n_out = 128;  // >= 1e4 samples
    Tensor<double> w = xavier_normal<double>(n_in, n_out, 0.01, rng);
    double ss = 0.0;
    for (int64_t i = 0; i < w.numel(); ++i) ss += w[i] * w[i];
    const double stddev = std::sqrt(ss / static_cast<double>(w.numel()));
    const double want = 0.01 * std::sqrt(2.0 / (n_in + n_out));
    CHECK(stddev == doctest::Approx(want).epsilon(0.10));
  }
  SUBCASE("init-scale grid is available as named presets") {
    ExperimentConfig base = toy_experiment(false);
    auto scales = [](const ExperimentConfig& c) {
      return std::vector<double>{c.model.init.scale_up, c.model.init.scale_gate,
                                 c.model.init.scale_down};
    };
    CHECK(scales(apply_preset(base, "init_base")) == std::vector<double>{1, 1, 1});
    CHECK(scales(apply_preset(base, "init_down001")) ==
          std::vector<double>{1, 1, 0.01});
    CHECK(scales(apply_preset(base, "init_down01")) ==
          std::vector<double>{1, 1, 0.1});
    CHECK(scales(apply_preset(base, "init_all001")) ==
          std::vector<double>{0.01, 0.01, 0.01});
    CHECK(scales(apply_preset(base, "init_reverse")) ==
          std::vector<double>{0.01, 0.01, 1});
  }
}

TEST_CASE("default gate scale is the total over the active count") {
  CHECK(default_alpha(4, 2) == doctest::Approx(2.0));
  CHECK(default_alpha(8, 2) == doctest::Approx(4.0));
  CHECK(default_alpha(3, 3) == doctest::Approx(1.0));
  CHECK_THROWS_AS(default_alpha(4, 0), ConfigError);
}

TEST_CASE("load statistics") {
  MoeConfig mc;
  mc.experts = 4;
  mc.k_active = 2;
  mc.shared_expert = true;  // 3 routed + shared, one routed activation per row
  SpMoeParams<double> p = random_moe(16, 16, mc, 19);

  SUBCASE("shared expert frequency is one, counts add up") {
    Rng rng(20);
    LoadRecorder rec(1, p.routed_count(), true);
    const int window = 4096;
    for (int chunk = 0; chunk < window / 256; ++chunk) {
      Tensor<double> x = random_tensor({256, 16}, rng);
      sp_moe_value(x, p, nullptr, &rec, 0);
    }
    const LoadStats& s = rec.stats();
    CHECK(s.window == window);
    CHECK(s.frequency(0, s.routed) == doctest::Approx(1.0));
    CHECK(s.routed_total(0) == static_cast<int64_t>(window) * p.k_routed());
    // isotropic inputs + random router: near-uniform routing at init
    for (int e = 0; e < s.routed; ++e)
      CHECK(std::abs(s.frequency(0, e) - 1.0 / 3.0) < 0.2 / 3.0);
    CHECK(s.cv(0) < 0.2);
  }
  SUBCASE("activating every routed expert pins frequencies at one") {
    MoeConfig all;
    all.experts = 4;
    all.k_active = 4;
    all.shared_expert = false;
    SpMoeParams<double> q = random_moe(8, 8, all, 21);
    Rng rng(22);
    LoadRecorder rec(1, 4, false);
    Tensor<double> x = random_tensor({64, 8}, rng);
    sp_moe_value(x, q, nullptr, &rec, 0);
    for (int e = 0; e < 4; ++e) CHECK(rec.stats().frequency(0, e) == doctest::Approx(1.0));
  }
}

TEST_CASE("near-identity block at the default small init") {
  // pre-norm block, down scale 0.01: relative output perturbation under 5%
  ExperimentConfig cfg = toy_experiment(true);
  Rng rng(23);
  InitConfig init;  // defaults: up 1, gate 1, down 0.01
  StageConfig moe_stage = cfg.model.stage1;
  BlockParams<double> bp;
  bp.stage1 = init_stage<double>(2, 16, 2, moe_stage, NormPlacement::kPre, init, rng);
  bp.stage2 = init_stage<double>(4, 8, 2, moe_stage, NormPlacement::kPre, init, rng);
  BlockGeom geom{4, 8, {2, MixStrategy::kVertical, 0}, NormPlacement::kPre, 1e-6, true};
  Tensor<double> x = random_tensor({16, 4, 8}, rng);
  Tensor<double> y = block_forward_value(x, bp, geom);
  double num = 0.0, den = 0.0;
  for (int64_t i = 0; i < x.numel(); ++i) {
    num += (y[i] - x[i]) * (y[i] - x[i]);
    den += x[i] * x[i];
  }
  CHECK(std::sqrt(num / den) < 0.05);
}

TEST_CASE("sparse-expert model gradient passes the finite-difference oracle") {
  CHECK(model_grad_check(toy_experiment(true), 3) < 1e-4);
}

TEST_CASE("shared-bank and variance-boost presets construct and run") {
  ExperimentConfig cfg = toy_experiment(true);
  for (const char* name : {"moe_standard", "moe_increase_variance"}) {
    ExperimentConfig c = apply_preset(cfg, name);
    ModelParams<double> m = init_model<double>(c);
    Dataset ds = generate_train(c.features, c.data);
    Batch b = ds.batch_range(0, 4);
    Tensor<double> z = model_scores_value(m, b, c);
    CHECK(z.numel() == 4);
  }
}
