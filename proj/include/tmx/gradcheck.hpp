#pragma once

#include <algorithm>
#include <functional>

#include "tmx/tape.hpp"

namespace tmx {

// Central-difference gradient verification at 64-bit precision.
//
// f builds a scalar loss from a single input variable on the given tape.
// Returns the max over coordinates of
//   |analytic - fd| / max(|analytic|, |fd|, 1e-12).
inline double grad_check(
    const std::function<Var(Tape<double>&, Var)>& f, const Tensor<double>& x,
    double eps = 1e-5) {
  Tape<double> tape;
  Var xv = tape.leaf(x, /*requires_grad=*/true);
  Var loss = f(tape, xv);
  tape.backward(loss);
  const Tensor<double> analytic = tape.grad(xv);

  auto eval = [&](const Tensor<double>& probe) {
    Tape<double> t;
    Var v = t.leaf(probe, false);
    Var l = f(t, v);
    if (t.val(l).numel() != 1)
      throw ShapeError("grad_check: function is not scalar-valued");
    return t.val(l)[0];
  };

  double worst = 0.0;
  Tensor<double> probe = x;
  for (int64_t i = 0; i < x.numel(); ++i) {
    const double keep = probe[i];
    probe[i] = keep + eps;
    const double up = eval(probe);
    probe[i] = keep - eps;
    const double down = eval(probe);
    probe[i] = keep;
    const double fd = (up - down) / (2.0 * eps);
    const double a = analytic[i];
    const double denom = std::max({std::abs(a), std::abs(fd), 1e-12});
    worst = std::max(worst, std::abs(a - fd) / denom);
  }
  return worst;
}

}  // namespace tmx
