#pragma once

#include <algorithm>
#include <cmath>
#include <functional>

#include "conbat/autodiff/tape.hpp"

namespace conbat::ad {

/// Builds a scalar loss from a leaf on the given tape.
using ScalarFn = std::function<Var(Tape<double>&, Var)>;

/// Max over elements of |analytic - central difference| / (|central difference| + 1e-8).
inline double grad_check(const ScalarFn& f, const Tensor<double>& x, double eps) {
  Tape<double> tape;
  const Var leaf = tape.leaf(x);
  const Var loss = f(tape, leaf);
  tape.backward(loss);
  const Tensor<double> analytic = tape.grad(leaf);

  auto eval = [&](const Tensor<double>& point) {
    Tape<double> probe;
    const Var v = probe.leaf(point, false);
    return probe.value(f(probe, v)).item();
  };

  double worst = 0.0;
  Tensor<double> point = x;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double orig = point[i];
    point[i] = orig + eps;
    const double up = eval(point);
    point[i] = orig - eps;
    const double down = eval(point);
    point[i] = orig;
    const double fd = (up - down) / (2.0 * eps);
    worst = std::max(worst, std::abs(analytic[i] - fd) / (std::abs(fd) + 1e-8));
  }
  return worst;
}

}  // namespace conbat::ad
