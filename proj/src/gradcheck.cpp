#include "ctsan/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace ctsan {

GradCheckReport grad_check(const std::function<Tensor()>& loss_fn,
                           const std::vector<NamedTensor>& params, double step, double tolerance) {
  PrecisionScope precision(Precision::kF64);
  for (const auto& [name, p] : params) {
    if (!p.requires_grad()) throw UsageError("grad_check: parameter " + name + " does not require a gradient");
  }

  auto evaluate = [&]() {
    Tensor loss = loss_fn();
    if (loss.numel() != 1) throw UsageError("grad_check: loss must be a scalar");
    return loss.item();
  };
  const double first = evaluate();
  const double second = evaluate();
  if (first != second) {
    throw UsageError("grad_check: loss function is not deterministic (is dropout enabled?)");
  }

  std::vector<std::vector<double>> analytic;
  {
    Tape tape;
    TapeScope scope(tape);
    for (auto [name, p] : params) p.zero_grad();
    Tensor loss = loss_fn();
    tape.backward(loss);
    for (const auto& [name, p] : params) {
      if (p.has_grad()) {
        analytic.emplace_back(p.grad().begin(), p.grad().end());
      } else {
        analytic.emplace_back(p.numel(), 0.0);
      }
    }
  }

  GradCheckReport report;
  report.tolerance = tolerance;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor p = params[k].second;
    auto values = p.mutable_data();
    ParamCheck check{params[k].first, values.size(), 0.0, 0.0};
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + step;
      const double up = evaluate();
      values[i] = saved - step;
      const double down = evaluate();
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double a = analytic[k][i];
      const double abs_err = std::abs(a - numeric);
      const double rel = abs_err / std::max(std::abs(a) + std::abs(numeric), 1e-6);
      check.max_rel_error = std::max(check.max_rel_error, rel);
      check.max_abs_error = std::max(check.max_abs_error, abs_err);
    }
    report.max_rel_error = std::max(report.max_rel_error, check.max_rel_error);
    report.params.push_back(std::move(check));
  }
  for (auto [name, p] : params) p.zero_grad();
  report.passed = report.max_rel_error < tolerance;
  return report;
}

}  // namespace ctsan
