#include "ctsan/ops.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <complex>
#include <map>
#include <mutex>
#include <numeric>

namespace ctsan {

using detail::make_result;
using detail::Node;

namespace {

void require_rank(const Tensor& x, std::size_t rank, const char* op) {
  if (x.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_string(x.shape()));
  }
}

[[noreturn]] void mismatch(const char* op, const Tensor& a, const Tensor& b) {
  throw DimensionError(std::string(op) + ": incompatible shapes " + shape_string(a.shape()) +
                       " and " + shape_string(b.shape()));
}

std::vector<double> copy_of(const Tensor& x) { return {x.data().begin(), x.data().end()}; }

}  // namespace

Tensor unary(Unary op, const Tensor& x) {
  const auto xs = x.data();
  std::vector<double> y(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double v = xs[i];
    switch (op) {
      case Unary::kTanh: y[i] = std::tanh(v); break;
      case Unary::kSigmoid: y[i] = v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); break;
      case Unary::kRelu: y[i] = v > 0 ? v : 0.0; break;
      case Unary::kExp: y[i] = std::exp(v); break;
      case Unary::kLog:
        if (!(v > 0)) throw DomainError("log of non-positive value " + std::to_string(v));
        y[i] = std::log(v);
        break;
      case Unary::kNeg: y[i] = -v; break;
      case Unary::kSqrt:
        if (v < 0) throw DomainError("sqrt of negative value " + std::to_string(v));
        y[i] = std::sqrt(v);
        break;
      case Unary::kSquare: y[i] = v * v; break;
    }
  }
  return make_result(x.shape(), std::move(y), {x}, [op](Node& out) {
    Node& in = *out.inputs[0];
    double* g = in.grad_buffer();
    if (!g) return;
    const auto& go = out.grad;
    const auto& yv = out.value;
    const auto& xv = in.value;
    for (std::size_t i = 0; i < go.size(); ++i) {
      double d = 0.0;
      switch (op) {
        case Unary::kTanh: d = 1.0 - yv[i] * yv[i]; break;
        case Unary::kSigmoid: d = yv[i] * (1.0 - yv[i]); break;
        case Unary::kRelu: d = xv[i] > 0 ? 1.0 : 0.0; break;
        case Unary::kExp: d = yv[i]; break;
        case Unary::kLog: d = 1.0 / xv[i]; break;
        case Unary::kNeg: d = -1.0; break;
        case Unary::kSqrt: d = yv[i] > 0 ? 0.5 / yv[i] : 0.0; break;
        case Unary::kSquare: d = 2.0 * xv[i]; break;
      }
      g[i] += go[i] * d;
    }
  });
}

Tensor binary(Binary op, const Tensor& a, const Tensor& b) {
  const bool same = a.shape() == b.shape();
  if (!same && a.numel() != 1 && b.numel() != 1) mismatch("elementwise", a, b);
  const Shape out_shape = same ? a.shape() : (a.numel() == 1 ? b.shape() : a.shape());
  const std::size_t n = shape_numel(out_shape);
  const auto as = a.data();
  const auto bs = b.data();
  const std::size_t sa = as.size() == 1 ? 0 : 1;
  const std::size_t sb = bs.size() == 1 ? 0 : 1;
  std::vector<double> y(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double u = as[i * sa];
    const double v = bs[i * sb];
    switch (op) {
      case Binary::kAdd: y[i] = u + v; break;
      case Binary::kSub: y[i] = u - v; break;
      case Binary::kMul: y[i] = u * v; break;
    }
  }
  return make_result(out_shape, std::move(y), {a, b}, [op, sa, sb](Node& out) {
    Node& na = *out.inputs[0];
    Node& nb = *out.inputs[1];
    double* ga = na.grad_buffer();
    double* gb = nb.grad_buffer();
    const auto& go = out.grad;
    for (std::size_t i = 0; i < go.size(); ++i) {
      switch (op) {
        case Binary::kAdd:
          if (ga) ga[i * sa] += go[i];
          if (gb) gb[i * sb] += go[i];
          break;
        case Binary::kSub:
          if (ga) ga[i * sa] += go[i];
          if (gb) gb[i * sb] -= go[i];
          break;
        case Binary::kMul:
          if (ga) ga[i * sa] += go[i] * nb.value[i * sb];
          if (gb) gb[i * sb] += go[i] * na.value[i * sa];
          break;
      }
    }
  });
}

Tensor scale(const Tensor& x, double factor) {
  std::vector<double> y = copy_of(x);
  for (auto& v : y) v *= factor;
  return make_result(x.shape(), std::move(y), {x}, [factor](Node& out) {
    double* g = out.inputs[0]->grad_buffer();
    if (!g) return;
    for (std::size_t i = 0; i < out.grad.size(); ++i) g[i] += factor * out.grad[i];
  });
}

Tensor add_scalar(const Tensor& x, double value) {
  std::vector<double> y = copy_of(x);
  for (auto& v : y) v += value;
  return make_result(x.shape(), std::move(y), {x}, [](Node& out) {
    double* g = out.inputs[0]->grad_buffer();
    if (!g) return;
    for (std::size_t i = 0; i < out.grad.size(); ++i) g[i] += out.grad[i];
  });
}

Tensor clamp_min(const Tensor& x, double floor) {
  std::vector<double> y = copy_of(x);
  for (auto& v : y) v = std::max(v, floor);
  return make_result(x.shape(), std::move(y), {x}, [floor](Node& out) {
    Node& in = *out.inputs[0];
    double* g = in.grad_buffer();
    if (!g) return;
    for (std::size_t i = 0; i < out.grad.size(); ++i) {
      if (in.value[i] > floor) g[i] += out.grad[i];
    }
  });
}

Tensor maximum(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) mismatch("maximum", a, b);
  const auto as = a.data();
  const auto bs = b.data();
  std::vector<double> y(as.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = as[i] >= bs[i] ? as[i] : bs[i];
  return make_result(a.shape(), std::move(y), {a, b}, [](Node& out) {
    Node& na = *out.inputs[0];
    Node& nb = *out.inputs[1];
    double* ga = na.grad_buffer();
    double* gb = nb.grad_buffer();
    for (std::size_t i = 0; i < out.grad.size(); ++i) {
      if (na.value[i] >= nb.value[i]) {
        if (ga) ga[i] += out.grad[i];
      } else if (gb) {
        gb[i] += out.grad[i];
      }
    }
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) mismatch("matmul", a, b);
  const auto as = a.data();
  const auto bs = b.data();
  std::vector<double> y(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double av = as[i * k + p];
      if (av == 0.0) continue;
      const double* brow = &bs[p * n];
      double* yrow = &y[i * n];
      for (std::size_t j = 0; j < n; ++j) yrow[j] += av * brow[j];
    }
  }
  return make_result({m, n}, std::move(y), {a, b}, [m, k, n](Node& out) {
    Node& na = *out.inputs[0];
    Node& nb = *out.inputs[1];
    const auto& g = out.grad;
    if (double* ga = na.grad_buffer()) {
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * nb.value[p * n + j];
          ga[i * k + p] += acc;
        }
      }
    }
    if (double* gb = nb.grad_buffer()) {
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          const double av = na.value[i * k + p];
          if (av == 0.0) continue;
          for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += av * g[i * n + j];
        }
      }
    }
  });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul_nt");
  require_rank(b, 2, "matmul_nt");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k) mismatch("matmul_nt", a, b);
  const auto as = a.data();
  const auto bs = b.data();
  std::vector<double> y(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = &as[i * k];
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = &bs[j * k];
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      y[i * n + j] = acc;
    }
  }
  return make_result({m, n}, std::move(y), {a, b}, [m, k, n](Node& out) {
    Node& na = *out.inputs[0];
    Node& nb = *out.inputs[1];
    const auto& g = out.grad;
    double* ga = na.grad_buffer();
    double* gb = nb.grad_buffer();
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        const double gv = g[i * n + j];
        if (gv == 0.0) continue;
        if (ga) {
          for (std::size_t p = 0; p < k; ++p) ga[i * k + p] += gv * nb.value[j * k + p];
        }
        if (gb) {
          for (std::size_t p = 0; p < k; ++p) gb[j * k + p] += gv * na.value[i * k + p];
        }
      }
    }
  });
}

Tensor transpose(const Tensor& x) {
  require_rank(x, 2, "transpose");
  const std::size_t m = x.dim(0), n = x.dim(1);
  const auto xs = x.data();
  std::vector<double> y(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) y[j * m + i] = xs[i * n + j];
  return make_result({n, m}, std::move(y), {x}, [m, n](Node& out) {
    double* g = out.inputs[0]->grad_buffer();
    if (!g) return;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) g[i * n + j] += out.grad[j * m + i];
  });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  Tensor y = matmul_nt(x, weight);
  return bias.defined() ? add_rowwise(y, bias) : y;
}

Tensor sum(const Tensor& x) {
  const auto xs = x.data();
  const double s = std::accumulate(xs.begin(), xs.end(), 0.0);
  return make_result({1}, {s}, {x}, [](Node& out) {
    Node& in = *out.inputs[0];
    double* g = in.grad_buffer();
    if (!g) return;
    for (std::size_t i = 0; i < in.value.size(); ++i) g[i] += out.grad[0];
  });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor sum_axis(const Tensor& x, std::size_t axis) {
  require_rank(x, 2, "sum_axis");
  if (axis > 1) throw DimensionError("sum_axis: axis must be 0 or 1");
  const std::size_t m = x.dim(0), n = x.dim(1);
  const auto xs = x.data();
  std::vector<double> y(axis == 0 ? n : m, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) y[axis == 0 ? j : i] += xs[i * n + j];
  Shape shape{y.size()};
  return make_result(std::move(shape), std::move(y), {x}, [axis, m, n](Node& out) {
    double* g = out.inputs[0]->grad_buffer();
    if (!g) return;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) g[i * n + j] += out.grad[axis == 0 ? j : i];
  });
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  const Shape& s = x.shape();
  if (axis >= s.size()) throw DimensionError("softmax: axis out of range for " + shape_string(s));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[axis];
  const auto xs = x.data();
  std::vector<double> y(xs.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      double mx = xs[base];
      for (std::size_t l = 1; l < len; ++l) mx = std::max(mx, xs[base + l * inner]);
      double z = 0.0;
      for (std::size_t l = 0; l < len; ++l) {
        const double e = std::exp(xs[base + l * inner] - mx);
        y[base + l * inner] = e;
        z += e;
      }
      for (std::size_t l = 0; l < len; ++l) y[base + l * inner] /= z;
    }
  }
  return make_result(s, std::move(y), {x}, [outer, inner, len](Node& out) {
    double* g = out.inputs[0]->grad_buffer();
    if (!g) return;
    const auto& yv = out.value;
    const auto& go = out.grad;
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * len * inner + in;
        double dot = 0.0;
        for (std::size_t l = 0; l < len; ++l) dot += go[base + l * inner] * yv[base + l * inner];
        for (std::size_t l = 0; l < len; ++l) {
          const std::size_t idx = base + l * inner;
          g[idx] += yv[idx] * (go[idx] - dot);
        }
      }
    }
  });
}

Tensor log_softmax_rows(const Tensor& x) {
  require_rank(x, 2, "log_softmax_rows");
  const std::size_t m = x.dim(0), n = x.dim(1);
  const auto xs = x.data();
  std::vector<double> y(xs.size());
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = &xs[i * n];
    const double mx = *std::max_element(row, row + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(row[j] - mx);
    const double lz = mx + std::log(z);
    for (std::size_t j = 0; j < n; ++j) y[i * n + j] = row[j] - lz;
  }
  return make_result({m, n}, std::move(y), {x}, [m, n](Node& out) {
    double* g = out.inputs[0]->grad_buffer();
    if (!g) return;
    for (std::size_t i = 0; i < m; ++i) {
      double total = 0.0;
      for (std::size_t j = 0; j < n; ++j) total += out.grad[i * n + j];
      for (std::size_t j = 0; j < n; ++j) {
        g[i * n + j] += out.grad[i * n + j] - std::exp(out.value[i * n + j]) * total;
      }
    }
  });
}

Tensor pick_per_row(const Tensor& x, std::span<const int> cols) {
  require_rank(x, 2, "pick_per_row");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (cols.size() != m) {
    throw DimensionError("pick_per_row: " + std::to_string(cols.size()) + " indices for " + shape_string(x.shape()));
  }
  std::vector<std::size_t> flat(m);
  std::vector<double> y(m);
  for (std::size_t i = 0; i < m; ++i) {
    if (cols[i] < 0 || static_cast<std::size_t>(cols[i]) >= n) {
      throw DimensionError("pick_per_row: column " + std::to_string(cols[i]) + " out of range for " +
                           shape_string(x.shape()));
    }
    flat[i] = i * n + static_cast<std::size_t>(cols[i]);
    y[i] = x.data()[flat[i]];
  }
  return make_result({m}, std::move(y), {x}, [flat](Node& out) {
    double* g = out.inputs[0]->grad_buffer();
    if (!g) return;
    for (std::size_t i = 0; i < flat.size(); ++i) g[flat[i]] += out.grad[i];
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_string(x.shape()) + " as " +
                         shape_string(shape));
  }
  return make_result(std::move(shape), copy_of(x), {x}, [](Node& out) {
    double* g = out.inputs[0]->grad_buffer();
    if (!g) return;
    for (std::size_t i = 0; i < out.grad.size(); ++i) g[i] += out.grad[i];
  });
}

Tensor slice_cols(const Tensor& x, std::size_t start, std::size_t count) {
  require_rank(x, 2, "slice_cols");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (count == 0 || start + count > n) {
    throw DimensionError("slice_cols: range out of bounds for " + shape_string(x.shape()));
  }
  const auto xs = x.data();
  std::vector<double> y(m * count);
  for (std::size_t i = 0; i < m; ++i)
    std::copy_n(&xs[i * n + start], count, &y[i * count]);
  return make_result({m, count}, std::move(y), {x}, [m, n, start, count](Node& out) {
    double* g = out.inputs[0]->grad_buffer();
    if (!g) return;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < count; ++j) g[i * n + start + j] += out.grad[i * count + j];
  });
}

Tensor slice_rows(const Tensor& x, std::size_t start, std::size_t count) {
  require_rank(x, 2, "slice_rows");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (count == 0 || start + count > m) {
    throw DimensionError("slice_rows: range out of bounds for " + shape_string(x.shape()));
  }
  const auto xs = x.data();
  std::vector<double> y(xs.begin() + static_cast<std::ptrdiff_t>(start * n),
                        xs.begin() + static_cast<std::ptrdiff_t>((start + count) * n));
  return make_result({count, n}, std::move(y), {x}, [n, start](Node& out) {
    double* g = out.inputs[0]->grad_buffer();
    if (!g) return;
    for (std::size_t i = 0; i < out.grad.size(); ++i) g[start * n + i] += out.grad[i];
  });
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw UsageError("concat_cols: no inputs");
  const std::size_t m = parts[0].dim(0);
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    require_rank(p, 2, "concat_cols");
    if (p.dim(0) != m) mismatch("concat_cols", parts[0], p);
    widths.push_back(p.dim(1));
    total += p.dim(1);
  }
  std::vector<double> y(m * total);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto ps = parts[k].data();
    for (std::size_t i = 0; i < m; ++i)
      std::copy_n(&ps[i * widths[k]], widths[k], &y[i * total + offset]);
    offset += widths[k];
  }
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  return make_result({m, total}, std::move(y), std::move(inputs), [m, total, widths](Node& out) {
    std::size_t offset = 0;
    for (std::size_t k = 0; k < widths.size(); ++k) {
      if (double* g = out.inputs[k]->grad_buffer()) {
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < widths[k]; ++j)
            g[i * widths[k] + j] += out.grad[i * total + offset + j];
      }
      offset += widths[k];
    }
  });
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw UsageError("concat_rows: no inputs");
  const std::size_t n = parts[0].dim(1);
  std::vector<std::size_t> heights;
  std::size_t total = 0;
  for (const auto& p : parts) {
    require_rank(p, 2, "concat_rows");
    if (p.dim(1) != n) mismatch("concat_rows", parts[0], p);
    heights.push_back(p.dim(0));
    total += p.dim(0);
  }
  std::vector<double> y;
  y.reserve(total * n);
  for (const auto& p : parts) y.insert(y.end(), p.data().begin(), p.data().end());
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  return make_result({total, n}, std::move(y), std::move(inputs), [n, heights](Node& out) {
    std::size_t offset = 0;
    for (std::size_t k = 0; k < heights.size(); ++k) {
      const std::size_t len = heights[k] * n;
      if (double* g = out.inputs[k]->grad_buffer()) {
        for (std::size_t i = 0; i < len; ++i) g[i] += out.grad[offset + i];
      }
      offset += len;
    }
  });
}

Tensor pick(const Tensor& x, std::size_t flat_index) {
  if (flat_index >= x.numel()) {
    throw DimensionError("pick: index " + std::to_string(flat_index) + " out of range for " +
                         shape_string(x.shape()));
  }
  return make_result({1}, {x.data()[flat_index]}, {x}, [flat_index](Node& out) {
    double* g = out.inputs[0]->grad_buffer();
    if (g) g[flat_index] += out.grad[0];
  });
}

Tensor add_rowwise(const Tensor& x, const Tensor& row) {
  require_rank(x, 2, "add_rowwise");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (row.numel() != n || row.rank() > 2 || (row.rank() == 2 && row.dim(0) != 1)) {
    mismatch("add_rowwise", x, row);
  }
  std::vector<double> y = copy_of(x);
  const auto rs = row.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) y[i * n + j] += rs[j];
  return make_result({m, n}, std::move(y), {x, row}, [m, n](Node& out) {
    if (double* gx = out.inputs[0]->grad_buffer()) {
      for (std::size_t i = 0; i < m * n; ++i) gx[i] += out.grad[i];
    }
    if (double* gr = out.inputs[1]->grad_buffer()) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gr[j] += out.grad[i * n + j];
    }
  });
}

Tensor mul_rowwise(const Tensor& x, const Tensor& row) {
  require_rank(x, 2, "mul_rowwise");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (row.numel() != n || row.rank() > 2 || (row.rank() == 2 && row.dim(0) != 1)) {
    mismatch("mul_rowwise", x, row);
  }
  std::vector<double> y = copy_of(x);
  const auto rs = row.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) y[i * n + j] *= rs[j];
  return make_result({m, n}, std::move(y), {x, row}, [m, n](Node& out) {
    Node& nx = *out.inputs[0];
    Node& nr = *out.inputs[1];
    if (double* gx = nx.grad_buffer()) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += out.grad[i * n + j] * nr.value[j];
    }
    if (double* gr = nr.grad_buffer()) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gr[j] += out.grad[i * n + j] * nx.value[i * n + j];
    }
  });
}

Tensor repeat_rows(const Tensor& x, std::size_t times) {
  require_rank(x, 2, "repeat_rows");
  if (times == 0) throw UsageError("repeat_rows: times must be positive");
  const std::size_t block = x.numel();
  std::vector<double> y;
  y.reserve(block * times);
  for (std::size_t t = 0; t < times; ++t) y.insert(y.end(), x.data().begin(), x.data().end());
  return make_result({x.dim(0) * times, x.dim(1)}, std::move(y), {x}, [block, times](Node& out) {
    double* g = out.inputs[0]->grad_buffer();
    if (!g) return;
    for (std::size_t t = 0; t < times; ++t)
      for (std::size_t i = 0; i < block; ++i) g[i] += out.grad[t * block + i];
  });
}

Tensor repeat_each_row(const Tensor& x, std::size_t times) {
  require_rank(x, 2, "repeat_each_row");
  if (times == 0) throw UsageError("repeat_each_row: times must be positive");
  const std::size_t m = x.dim(0), n = x.dim(1);
  const auto xs = x.data();
  std::vector<double> y(m * times * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t t = 0; t < times; ++t)
      std::copy_n(&xs[i * n], n, &y[(i * times + t) * n]);
  return make_result({m * times, n}, std::move(y), {x}, [m, n, times](Node& out) {
    double* g = out.inputs[0]->grad_buffer();
    if (!g) return;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t t = 0; t < times; ++t)
        for (std::size_t j = 0; j < n; ++j) g[i * n + j] += out.grad[(i * times + t) * n + j];
  });
}

Tensor layer_norm_rows(const Tensor& x, double eps) {
  require_rank(x, 2, "layer_norm_rows");
  const std::size_t m = x.dim(0), n = x.dim(1);
  const auto xs = x.data();
  std::vector<double> y(m * n);
  std::vector<double> inv_std(m);
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = &xs[i * n];
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += row[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(n);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) y[i * n + j] = (row[j] - mu) * inv_std[i];
  }
  // Keep the unrounded normalised values for the backward rule.
  std::vector<double> xhat = y;
  return make_result({m, n}, std::move(y), {x}, [m, n, inv_std, xhat](Node& out) {
    double* g = out.inputs[0]->grad_buffer();
    if (!g) return;
    const auto& go = out.grad;
    for (std::size_t i = 0; i < m; ++i) {
      double mg = 0.0, mgx = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        mg += go[i * n + j];
        mgx += go[i * n + j] * xhat[i * n + j];
      }
      mg /= static_cast<double>(n);
      mgx /= static_cast<double>(n);
      for (std::size_t j = 0; j < n; ++j) {
        g[i * n + j] += inv_std[i] * (go[i * n + j] - mg - xhat[i * n + j] * mgx);
      }
    }
  });
}

Tensor conv2d(const Tensor& x, const Tensor& kernel) {
  if (x.rank() != 3 && x.rank() != 4) {
    throw DimensionError("conv2d: input must be [h,w,c] or [b,h,w,c], got " + shape_string(x.shape()));
  }
  require_rank(kernel, 4, "conv2d");
  const bool batched = x.rank() == 4;
  const std::size_t B = batched ? x.dim(0) : 1;
  const std::size_t H = x.dim(batched ? 1 : 0), W = x.dim(batched ? 2 : 1), Ci = x.dim(batched ? 3 : 2);
  const std::size_t KH = kernel.dim(0), KW = kernel.dim(1), Co = kernel.dim(3);
  if (KH % 2 == 0 || KW % 2 == 0) {
    throw UsageError("conv2d: even kernel extent " + shape_string(kernel.shape()) + " is unsupported");
  }
  if (kernel.dim(2) != Ci) mismatch("conv2d", x, kernel);
  const long ph = static_cast<long>(KH / 2), pw = static_cast<long>(KW / 2);
  const auto xs = x.data();
  const auto ks = kernel.data();
  std::vector<double> y(B * H * W * Co, 0.0);
  auto for_each_tap = [=](auto&& body) {
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < H; ++i)
        for (std::size_t j = 0; j < W; ++j)
          for (std::size_t di = 0; di < KH; ++di) {
            const long si = static_cast<long>(i + di) - ph;
            if (si < 0 || si >= static_cast<long>(H)) continue;
            for (std::size_t dj = 0; dj < KW; ++dj) {
              const long sj = static_cast<long>(j + dj) - pw;
              if (sj < 0 || sj >= static_cast<long>(W)) continue;
              const std::size_t xbase = ((b * H + static_cast<std::size_t>(si)) * W + static_cast<std::size_t>(sj)) * Ci;
              const std::size_t ybase = ((b * H + i) * W + j) * Co;
              const std::size_t kbase = (di * KW + dj) * Ci * Co;
              body(xbase, ybase, kbase);
            }
          }
  };
  for_each_tap([&](std::size_t xb, std::size_t yb, std::size_t kb) {
    for (std::size_t c = 0; c < Ci; ++c) {
      const double xv = xs[xb + c];
      if (xv == 0.0) continue;
      const double* krow = &ks[kb + c * Co];
      for (std::size_t o = 0; o < Co; ++o) y[yb + o] += xv * krow[o];
    }
  });
  Shape out_shape = batched ? Shape{B, H, W, Co} : Shape{H, W, Co};
  return make_result(std::move(out_shape), std::move(y), {x, kernel},
                     [for_each_tap, Ci, Co](Node& out) {
                       Node& nx = *out.inputs[0];
                       Node& nk = *out.inputs[1];
                       double* gx = nx.grad_buffer();
                       double* gk = nk.grad_buffer();
                       const auto& go = out.grad;
                       for_each_tap([&](std::size_t xb, std::size_t yb, std::size_t kb) {
                         for (std::size_t c = 0; c < Ci; ++c) {
                           const std::size_t krow = kb + c * Co;
                           if (gx) {
                             double acc = 0.0;
                             for (std::size_t o = 0; o < Co; ++o) acc += go[yb + o] * nk.value[krow + o];
                             gx[xb + c] += acc;
                           }
                           if (gk) {
                             const double xv = nx.value[xb + c];
                             if (xv == 0.0) continue;
                             for (std::size_t o = 0; o < Co; ++o) gk[krow + o] += xv * go[yb + o];
                           }
                         }
                       });
                     });
}

Tensor pool2d(const Tensor& x, PoolKind kind, std::size_t window) {
  if (x.rank() != 3 && x.rank() != 4) {
    throw DimensionError("pool2d: input must be [h,w,c] or [b,h,w,c], got " + shape_string(x.shape()));
  }
  const bool batched = x.rank() == 4;
  const std::size_t B = batched ? x.dim(0) : 1;
  const std::size_t H = x.dim(batched ? 1 : 0), W = x.dim(batched ? 2 : 1), C = x.dim(batched ? 3 : 2);
  if (window == 0 || H % window != 0 || W % window != 0) {
    throw DimensionError("pool2d: window " + std::to_string(window) + " does not divide " +
                         shape_string(x.shape()));
  }
  const std::size_t OH = H / window, OW = W / window;
  const auto xs = x.data();
  std::vector<double> y(B * OH * OW * C, 0.0);
  std::vector<std::size_t> argmax(kind == PoolKind::kMax ? y.size() : 0);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t oi = 0; oi < OH; ++oi)
      for (std::size_t oj = 0; oj < OW; ++oj)
        for (std::size_t c = 0; c < C; ++c) {
          const std::size_t yi = ((b * OH + oi) * OW + oj) * C + c;
          double best = 0.0, acc = 0.0;
          std::size_t best_idx = 0;
          bool first = true;
          for (std::size_t di = 0; di < window; ++di)
            for (std::size_t dj = 0; dj < window; ++dj) {
              const std::size_t xi = ((b * H + oi * window + di) * W + oj * window + dj) * C + c;
              const double v = xs[xi];
              acc += v;
              if (first || v > best) {
                best = v;
                best_idx = xi;
                first = false;
              }
            }
          if (kind == PoolKind::kMax) {
            y[yi] = best;
            argmax[yi] = best_idx;
          } else {
            y[yi] = acc / static_cast<double>(window * window);
          }
        }
  Shape out_shape = batched ? Shape{B, OH, OW, C} : Shape{OH, OW, C};
  return make_result(std::move(out_shape), std::move(y), {x},
                     [kind, argmax, B, H, W, C, OH, OW, window](Node& out) {
                       double* g = out.inputs[0]->grad_buffer();
                       if (!g) return;
                       if (kind == PoolKind::kMax) {
                         for (std::size_t i = 0; i < out.grad.size(); ++i) g[argmax[i]] += out.grad[i];
                         return;
                       }
                       const double w = 1.0 / static_cast<double>(window * window);
                       for (std::size_t b = 0; b < B; ++b)
                         for (std::size_t i = 0; i < H; ++i)
                           for (std::size_t j = 0; j < W; ++j)
                             for (std::size_t c = 0; c < C; ++c) {
                               const std::size_t yi = ((b * OH + i / window) * OW + j / window) * C + c;
                               g[((b * H + i) * W + j) * C + c] += w * out.grad[yi];
                             }
                     });
}

Tensor global_avg_pool(const Tensor& x) {
  require_rank(x, 3, "global_avg_pool");
  const std::size_t cells = x.dim(0) * x.dim(1);
  Tensor flat = reshape(x, {cells, x.dim(2)});
  return reshape(scale(sum_axis(flat, 0), 1.0 / static_cast<double>(cells)), {1, x.dim(2)});
}

Tensor pad_bottom_right(const Tensor& x, std::size_t height, std::size_t width) {
  require_rank(x, 3, "pad_bottom_right");
  const std::size_t H = x.dim(0), W = x.dim(1), C = x.dim(2);
  if (height < H || width < W) {
    throw DimensionError("pad_bottom_right: target smaller than " + shape_string(x.shape()));
  }
  const auto xs = x.data();
  std::vector<double> y(height * width * C, 0.0);
  for (std::size_t i = 0; i < H; ++i)
    std::copy_n(&xs[i * W * C], W * C, &y[i * width * C]);
  return make_result({height, width, C}, std::move(y), {x}, [H, W, C, width](Node& out) {
    double* g = out.inputs[0]->grad_buffer();
    if (!g) return;
    for (std::size_t i = 0; i < H; ++i)
      for (std::size_t k = 0; k < W * C; ++k) g[i * W * C + k] += out.grad[i * width * C + k];
  });
}

namespace {

// FFTW planning is not thread-safe; execution with the new-array interface is.
struct FftPlans {
  fftw_plan forward;
  fftw_plan inverse;
};

FftPlans plans_for(std::size_t n) {
  static std::mutex mu;
  static std::map<std::size_t, FftPlans> cache;
  std::lock_guard<std::mutex> lock(mu);
  auto it = cache.find(n);
  if (it != cache.end()) return it->second;
  const std::size_t nc = n / 2 + 1;
  double* real = fftw_alloc_real(n);
  fftw_complex* spec = fftw_alloc_complex(nc);
  FftPlans p{};
  p.forward = fftw_plan_dft_r2c_1d(static_cast<int>(n), real, spec, FFTW_ESTIMATE);
  p.inverse = fftw_plan_dft_c2r_1d(static_cast<int>(n), spec, real, FFTW_ESTIMATE);
  fftw_free(real);
  fftw_free(spec);
  cache.emplace(n, p);
  return p;
}

using Spectrum = std::vector<std::complex<double>>;

Spectrum rfft(std::span<const double> x) {
  const std::size_t n = x.size();
  const FftPlans p = plans_for(n);
  double* real = fftw_alloc_real(n);
  fftw_complex* spec = fftw_alloc_complex(n / 2 + 1);
  std::copy(x.begin(), x.end(), real);
  fftw_execute_dft_r2c(p.forward, real, spec);
  Spectrum out(n / 2 + 1);
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = {spec[k][0], spec[k][1]};
  fftw_free(real);
  fftw_free(spec);
  return out;
}

std::vector<double> irfft(const Spectrum& s, std::size_t n) {
  const FftPlans p = plans_for(n);
  double* real = fftw_alloc_real(n);
  fftw_complex* spec = fftw_alloc_complex(n / 2 + 1);
  for (std::size_t k = 0; k < s.size(); ++k) {
    spec[k][0] = s[k].real();
    spec[k][1] = s[k].imag();
  }
  fftw_execute_dft_c2r(p.inverse, spec, real);
  std::vector<double> out(real, real + n);
  for (auto& v : out) v /= static_cast<double>(n);
  fftw_free(real);
  fftw_free(spec);
  return out;
}

// Circular cross-correlation r[j] = sum_k g[k] * b[(k - j) mod n].
std::vector<double> circular_correlate(std::span<const double> g, std::span<const double> b) {
  Spectrum G = rfft(g);
  const Spectrum Bs = rfft(b);
  for (std::size_t k = 0; k < G.size(); ++k) G[k] *= std::conj(Bs[k]);
  return irfft(G, g.size());
}

}  // namespace

Tensor fft_pair_convolve(const Tensor& a, const Tensor& b) {
  if (a.numel() != b.numel()) mismatch("fft_pair_convolve", a, b);
  const std::size_t n = a.numel();
  Spectrum A = rfft(a.data());
  const Spectrum Bs = rfft(b.data());
  for (std::size_t k = 0; k < A.size(); ++k) A[k] *= Bs[k];
  std::vector<double> y = irfft(A, n);
  return make_result(a.shape(), std::move(y), {a, b}, [](Node& out) {
    Node& na = *out.inputs[0];
    Node& nb = *out.inputs[1];
    if (double* ga = na.grad_buffer()) {
      const auto r = circular_correlate(out.grad, nb.value);
      for (std::size_t i = 0; i < r.size(); ++i) ga[i] += r[i];
    }
    if (double* gb = nb.grad_buffer()) {
      const auto r = circular_correlate(out.grad, na.value);
      for (std::size_t i = 0; i < r.size(); ++i) gb[i] += r[i];
    }
  });
}

Tensor count_sketch(const Tensor& x, std::span<const std::size_t> hash, std::span<const double> sign,
                    std::size_t out_dim) {
  const std::size_t n = x.numel();
  if (hash.size() != n || sign.size() != n) {
    throw DimensionError("count_sketch: sketch of length " + std::to_string(hash.size()) +
                         " for input " + shape_string(x.shape()));
  }
  for (auto h : hash) {
    if (h >= out_dim) throw UsageError("count_sketch: hash index out of range");
  }
  const auto xs = x.data();
  std::vector<double> y(out_dim, 0.0);
  for (std::size_t i = 0; i < n; ++i) y[hash[i]] += sign[i] * xs[i];
  Shape out_shape = x.rank() == 2 ? Shape{1, out_dim} : Shape{out_dim};
  std::vector<std::size_t> h(hash.begin(), hash.end());
  std::vector<double> s(sign.begin(), sign.end());
  return make_result(std::move(out_shape), std::move(y), {x}, [h, s](Node& out) {
    double* g = out.inputs[0]->grad_buffer();
    if (!g) return;
    for (std::size_t i = 0; i < h.size(); ++i) g[i] += s[i] * out.grad[h[i]];
  });
}

Tensor embedding_lookup(const Tensor& embedding, std::span<const int> ids) {
  require_rank(embedding, 2, "embedding_lookup");
  if (ids.empty()) throw UsageError("embedding_lookup: no ids");
  const std::size_t d = embedding.dim(0), vocab = embedding.dim(1);
  const auto es = embedding.data();
  std::vector<double> y(ids.size() * d);
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= vocab) {
      throw UsageError("embedding_lookup: id " + std::to_string(ids[r]) + " outside vocabulary of " +
                       std::to_string(vocab));
    }
    for (std::size_t k = 0; k < d; ++k) y[r * d + k] = es[k * vocab + static_cast<std::size_t>(ids[r])];
  }
  std::vector<int> id_copy(ids.begin(), ids.end());
  return make_result({ids.size(), d}, std::move(y), {embedding}, [id_copy, d, vocab](Node& out) {
    double* g = out.inputs[0]->grad_buffer();
    if (!g) return;
    for (std::size_t r = 0; r < id_copy.size(); ++r)
      for (std::size_t k = 0; k < d; ++k)
        g[k * vocab + static_cast<std::size_t>(id_copy[r])] += out.grad[r * d + k];
  });
}

}  // namespace ctsan
