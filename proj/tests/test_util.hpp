#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "ctsan/tensor.hpp"

namespace ctsan::testing {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0,
                            bool param = true) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = dist(rng);
  return param ? Tensor::parameter(std::move(shape), std::move(v)) : Tensor::from(std::move(shape), std::move(v));
}

// Central-difference gradient of a scalar function w.r.t. every entry of x.
inline std::vector<double> numeric_grad(const std::function<double()>& f, Tensor x, double step = 1e-5) {
  auto values = x.mutable_data();
  std::vector<double> g(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double saved = values[i];
    values[i] = saved + step;
    const double up = f();
    values[i] = saved - step;
    const double down = f();
    values[i] = saved;
    g[i] = (up - down) / (2 * step);
  }
  return g;
}

inline double max_rel_error(std::span<const double> a, std::span<const double> b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double denom = std::max(std::abs(a[i]) + std::abs(b[i]), 1e-6);
    worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
  }
  return worst;
}

// O(d^2) circular convolution y[k] = sum_j a[j] b[(k - j) mod d].
inline std::vector<double> direct_circular_convolve(std::span<const double> a, std::span<const double> b) {
  const std::size_t d = a.size();
  std::vector<double> y(d, 0.0);
  for (std::size_t k = 0; k < d; ++k)
    for (std::size_t j = 0; j < d; ++j) y[k] += a[j] * b[(k + d - j) % d];
  return y;
}

}  // namespace ctsan::testing
