#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "tmx/gradcheck.hpp"
#include "tmx/rng.hpp"
#include "tmx/tape.hpp"

using namespace tmx;

namespace {

Tensor<double> random_tensor(Shape s, Rng& rng, double scale = 1.0) {
  Tensor<double> t(std::move(s));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.normal() * scale;
  return t;
}

// Reduce an arbitrary output to a scalar with fixed random weights so that a
// single gradcheck covers every output coordinate.
Var weighted(Tape<double>& t, Var out, uint64_t seed) {
  Rng rng(seed);
  Tensor<double> w(t.val(out).shape());
  for (int64_t i = 0; i < w.numel(); ++i) w[i] = rng.normal();
  return t.sum(t.mul(out, t.constant(w)));
}

}  // namespace

TEST_CASE("matmul by identity is identity") {
  Rng rng(1);
  Tensor<double> eye(Shape{3, 3});
  for (int i = 0; i < 3; ++i) eye.at(i, i) = 1.0;
  Tensor<double> a = random_tensor({3, 3}, rng);
  Tape<double> t;
  Var out = t.matmul(t.constant(eye), t.constant(a));
  for (int64_t i = 0; i < a.numel(); ++i) CHECK(t.val(out)[i] == doctest::Approx(a[i]));
}

TEST_CASE("swish at 1 equals sigmoid(1)") {
  Tape<double> t;
  Var x = t.constant(Tensor<double>::scalar(1.0));
  Var y = t.swish(x);
  CHECK(t.val(y)[0] == doctest::Approx(0.7310585786300049).epsilon(1e-12));
}

TEST_CASE("softmax of equal logits is uniform and normalized") {
  Tape<double> t;
  Var y = t.softmax(t.constant(Tensor<double>(Shape{2}, std::vector<double>{0.0, 0.0})));
  CHECK(t.val(y)[0] == doctest::Approx(0.5));
  CHECK(t.val(y)[1] == doctest::Approx(0.5));

  Rng rng(7);
  for (int rep = 0; rep < 20; ++rep) {
    Tape<double> tp;
    Tensor<double> logits = random_tensor({4, 9}, rng, 3.0);
    Var s = tp.softmax(tp.constant(logits));
    const auto& v = tp.val(s);
    for (int i = 0; i < 4; ++i) {
      double sum = 0.0;
      for (int j = 0; j < 9; ++j) {
        CHECK(v.at(i, j) >= 0.0);
        sum += v.at(i, j);
      }
      CHECK(std::abs(sum - 1.0) < 1e-12);
    }
  }
}

TEST_CASE("backward of sum gives ones") {
  Tape<double> t;
  Rng rng(2);
  Var x = t.leaf(random_tensor({5}, rng), true);
  t.backward(t.sum(x));
  for (int i = 0; i < 5; ++i) CHECK(t.grad(x)[i] == doctest::Approx(1.0));
}

TEST_CASE("backward of sum of squares") {
  Tape<double> t;
  Var x = t.leaf(Tensor<double>(Shape{2}, std::vector<double>{1.0, 2.0}), true);
  t.backward(t.sum(t.mul(x, x)));
  CHECK(t.grad(x)[0] == doctest::Approx(2.0));
  CHECK(t.grad(x)[1] == doctest::Approx(4.0));
}

TEST_CASE("unused leaf gets zero gradient") {
  Tape<double> t;
  Rng rng(3);
  Var x = t.leaf(random_tensor({3}, rng), true);
  Var w = t.leaf(random_tensor({3}, rng), true);
  t.backward(t.sum(x));
  for (int i = 0; i < 3; ++i) CHECK(t.grad(w)[i] == 0.0);
}

TEST_CASE("backward rejects non-scalar loss") {
  Tape<double> t;
  Rng rng(4);
  Var x = t.leaf(random_tensor({3}, rng), true);
  CHECK_THROWS_AS(t.backward(x), ShapeError);
}

TEST_CASE("shape mismatch names the primitive") {
  Tape<double> t;
  Rng rng(5);
  Var a = t.constant(random_tensor({2, 3}, rng));
  Var b = t.constant(random_tensor({2, 3}, rng));
  try {
    t.matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("matmul") != std::string::npos);
  }
}

TEST_CASE("non-finite output raises NumericError") {
  Tape<double> t;
  Var z = t.constant(Tensor<double>::scalar(1e308));
  CHECK_THROWS_AS(t.mul(z, z), NumericError);
}

TEST_CASE("concat then split round-trips (and vice versa)") {
  Rng rng(6);
  Tensor<double> a = random_tensor({2, 3, 4}, rng);
  for (int axis = 0; axis < 3; ++axis) {
    Tape<double> t;
    Var v = t.constant(a);
    auto parts = t.split_even(v, axis, a.dim(axis) == 4 ? 2 : a.dim(axis));
    Var back = t.concat(parts, axis);
    REQUIRE(t.val(back).shape() == a.shape());
    for (int64_t i = 0; i < a.numel(); ++i) CHECK(t.val(back)[i] == a[i]);
  }
}

TEST_CASE("grad_check on sum of squares") {
  Rng rng(8);
  Tensor<double> x = random_tensor({6}, rng);
  double err = grad_check(
      [](Tape<double>& t, Var v) { return t.sum(t.mul(v, v)); }, x, 1e-5);
  CHECK(err < 1e-6);
}

TEST_CASE("grad_check on a constant function is zero") {
  Rng rng(9);
  Tensor<double> x = random_tensor({4}, rng);
  double err = grad_check(
      [](Tape<double>& t, Var v) {
        (void)v;
        return t.constant(Tensor<double>::scalar(3.5));
      },
      x, 1e-5);
  CHECK(err == 0.0);
}

TEST_CASE("per-primitive gradient battery") {
  Rng rng(10);

  auto check = [&](const char* name, Shape shape,
                   std::function<Var(Tape<double>&, Var)> f, double scale = 1.0) {
    Tensor<double> x = random_tensor(shape, rng, scale);
    const double err = grad_check(f, x, 1e-5);
    INFO("primitive: " << std::string(name));
    CHECK(err < 1e-6);
  };

  Tensor<double> w = random_tensor({4, 3}, rng);
  check("matmul_lhs", {5, 4}, [&](Tape<double>& t, Var v) {
    return weighted(t, t.matmul(v, t.constant(w)), 21);
  });
  Tensor<double> a = random_tensor({5, 4}, rng);
  check("matmul_rhs", {4, 3}, [&](Tape<double>& t, Var v) {
    return weighted(t, t.matmul(t.constant(a), v), 22);
  });
  Tensor<double> addend = random_tensor({3, 4}, rng);
  check("add", {3, 4}, [&](Tape<double>& t, Var v) {
    return weighted(t, t.add(v, t.constant(addend)), 23);
  });
  check("sub", {3, 4}, [&](Tape<double>& t, Var v) {
    return weighted(t, t.sub(t.constant(Tensor<double>(Shape{3, 4}, 0.7)), v), 24);
  });
  Tensor<double> factor = random_tensor({3, 4}, rng);
  check("mul", {3, 4}, [&](Tape<double>& t, Var v) {
    return weighted(t, t.mul(v, t.constant(factor)), 25);
  });
  check("scale", {7}, [&](Tape<double>& t, Var v) {
    return weighted(t, t.scale(v, -2.5), 26);
  });
  check("sigmoid", {9}, [&](Tape<double>& t, Var v) {
    return weighted(t, t.sigmoid(v), 27);
  });
  check("swish", {9}, [&](Tape<double>& t, Var v) {
    return weighted(t, t.swish(v), 28);
  });
  check("softmax", {3, 5}, [&](Tape<double>& t, Var v) {
    return weighted(t, t.softmax(v), 29);
  });
  Tensor<double> gamma = random_tensor({6}, rng);
  check("rmsnorm_x", {4, 6}, [&](Tape<double>& t, Var v) {
    return weighted(t, t.rmsnorm(v, t.constant(gamma), 1e-6), 30);
  });
  Tensor<double> xr = random_tensor({4, 6}, rng);
  check("rmsnorm_gamma", {6}, [&](Tape<double>& t, Var v) {
    return weighted(t, t.rmsnorm(t.constant(xr), v, 1e-6), 31);
  });
  check("concat_split", {4, 6}, [&](Tape<double>& t, Var v) {
    auto parts = t.split_even(v, 1, 3);
    std::vector<Var> reordered{parts[2], parts[0], parts[1]};
    return weighted(t, t.concat(reordered, 1), 32);
  });
  check("reshape_transpose", {4, 6}, [&](Tape<double>& t, Var v) {
    return weighted(t, t.transpose(t.reshape(v, {3, 8})), 33);
  });
  std::vector<int> slots{5, 3, 3, 0, 11, 7};
  check("gather_slots", {3, 4, 3}, [&](Tape<double>& t, Var v) {
    return weighted(t, t.gather_slots(v, slots, {3, 6}), 34);
  });
  std::vector<int> rows{2, 0, 2, 1};
  check("gather_rows", {3, 5}, [&](Tape<double>& t, Var v) {
    return weighted(t, t.gather_rows(v, rows), 35);
  });
  check("scatter_add_rows", {4, 5}, [&](Tape<double>& t, Var v) {
    return weighted(t, t.scatter_add_rows(v, rows, 3), 36);
  });
  Tensor<int> idx(Shape{3, 2}, std::vector<int>{0, 2, 1, 1, 4, 0});
  check("gather_cols", {3, 5}, [&](Tape<double>& t, Var v) {
    return weighted(t, t.gather_cols(v, idx), 37);
  });
  Tensor<double> sv = random_tensor({4}, rng);
  check("scale_rows_x", {4, 5}, [&](Tape<double>& t, Var v) {
    return weighted(t, t.scale_rows(v, t.constant(sv)), 38);
  });
  Tensor<double> xs = random_tensor({4, 5}, rng);
  check("scale_rows_s", {4}, [&](Tape<double>& t, Var v) {
    return weighted(t, t.scale_rows(t.constant(xs), v), 39);
  });
  check("mean_axis", {3, 4, 2}, [&](Tape<double>& t, Var v) {
    return weighted(t, t.mean_axis(v, 1), 40);
  });
  check("mean", {11}, [&](Tape<double>& t, Var v) { return t.mean(v); });
  Tensor<double> labels(Shape{6}, std::vector<double>{1, 0, 1, 1, 0, 0});
  check("bce_with_logits", {6}, [&](Tape<double>& t, Var v) {
    return t.bce_with_logits(v, labels);
  });
}

TEST_CASE("gradients flow only through selected top-k entries") {
  Rng rng(11);
  Tensor<double> scores = random_tensor({3, 5}, rng);
  Tensor<int> idx = kern::topk_indices(scores, 2);

  Tape<double> t;
  Var s = t.leaf(scores, true);
  Var sel = t.gather_cols(s, idx);
  t.backward(t.sum(t.softmax(sel)));
  const auto& g = t.grad(s);
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 5; ++j) {
      const bool selected = idx.at(i, 0) == j || idx.at(i, 1) == j;
      if (!selected) CHECK(g.at(i, j) == 0.0);
    }
  }
}

TEST_CASE("top-k ties break toward the lowest index") {
  Tensor<double> scores(Shape{1, 4}, std::vector<double>{1.0, 1.0, 1.0, 1.0});
  Tensor<int> idx = kern::topk_indices(scores, 2);
  CHECK(idx.at(0, 0) == 0);
  CHECK(idx.at(0, 1) == 1);

  Tensor<double> s2(Shape{1, 3}, std::vector<double>{0.5, 2.0, 2.0});
  Tensor<int> i2 = kern::topk_indices(s2, 2);
  CHECK(i2.at(0, 0) == 1);
  CHECK(i2.at(0, 1) == 2);
}

TEST_CASE("matmul MAC accounting") {
  Tape<double> t;
  Rng rng(12);
  Var a = t.constant(random_tensor({3, 4}, rng));
  Var b = t.constant(random_tensor({4, 5}, rng));
  t.matmul(a, b);
  CHECK(t.gemm_macs() == 3u * 4u * 5u);
}
