#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "ctsan/tensor.hpp"

namespace ctsan {

using NamedTensor = std::pair<std::string, Tensor>;

struct ParamCheck {
  std::string name;
  std::size_t count = 0;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
};

struct GradCheckReport {
  std::vector<ParamCheck> params;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  bool passed = false;
};

// Compares tape gradients of the scalar `loss_fn` against central differences
// for every element of every parameter. Runs in 64-bit precision. The
// relative error of one element is |a - n| / max(|a| + |n|, 1e-6), so entries
// whose true gradient is ~0 are judged on absolute error.
//
// `loss_fn` must be deterministic; two evaluations that differ bitwise raise
// UsageError (for example a model with dropout left on).
GradCheckReport grad_check(const std::function<Tensor()>& loss_fn,
                           const std::vector<NamedTensor>& params, double step = 1e-5,
                           double tolerance = 1e-4);

}  // namespace ctsan
