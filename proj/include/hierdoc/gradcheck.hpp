#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "hierdoc/errors.hpp"
#include "hierdoc/tape.hpp"
#include "hierdoc/tensor.hpp"

namespace hierdoc {

// Central-difference gradient oracle. `f` must be a deterministic scalar
// function of x evaluated under the tape it receives; gradient checking is
// meaningful in double precision only, so the oracle is fixed to double.
//
// Returns the maximum elementwise relative error
//   |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
inline double grad_check(
    const std::function<Tensor<double>(Tape<double>&, const Tensor<double>&)>&
        f,
    const Tensor<double>& x, double h = 1e-5) {
  Tensor<double> probe = x.clone();
  probe.set_requires_grad(true);
  probe.zero_grad();
  {
    Tape<double> tape;
    Tensor<double> loss = f(tape, probe);
    if (loss.numel() != 1)
      throw ContractError("grad_check: function must be scalar-valued");
    tape.backward(loss);
  }
  const std::vector<double>& analytic = *probe.grad;

  Tensor<double> xwork = x.clone();
  double max_rel = 0.0;
  for (size_t i = 0; i < xwork.numel(); ++i) {
    const double orig = xwork.at(i);
    xwork.at(i) = orig + h;
    Tape<double> tp(false);
    const double fp = f(tp, xwork).scalar();
    xwork.at(i) = orig - h;
    Tape<double> tm(false);
    const double fm = f(tm, xwork).scalar();
    xwork.at(i) = orig;
    const double numeric = (fp - fm) / (2.0 * h);
    const double denom =
        std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
    max_rel = std::max(max_rel, std::abs(analytic[i] - numeric) / denom);
  }
  return max_rel;
}

}  // namespace hierdoc
