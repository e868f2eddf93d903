#pragma once

// Differentiable tensor operations. Elementwise binaries require equal
// shapes; the only implicit broadcast is a one-element operand. Row-wise
// broadcasting against a vector is available through the explicit
// add_rowwise / mul_rowwise ops.

#include <cstddef>
#include <span>
#include <vector>

#include "ctsan/tensor.hpp"

namespace ctsan {

enum class Unary { kTanh, kSigmoid, kRelu, kExp, kLog, kNeg, kSqrt, kSquare };
enum class Binary { kAdd, kSub, kMul };

Tensor unary(Unary op, const Tensor& x);
Tensor binary(Binary op, const Tensor& a, const Tensor& b);

inline Tensor add(const Tensor& a, const Tensor& b) { return binary(Binary::kAdd, a, b); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return binary(Binary::kSub, a, b); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return binary(Binary::kMul, a, b); }
inline Tensor tanh(const Tensor& x) { return unary(Unary::kTanh, x); }
inline Tensor sigmoid(const Tensor& x) { return unary(Unary::kSigmoid, x); }
inline Tensor relu(const Tensor& x) { return unary(Unary::kRelu, x); }
inline Tensor exp(const Tensor& x) { return unary(Unary::kExp, x); }
// Throws DomainError on any non-positive entry.
inline Tensor log(const Tensor& x) { return unary(Unary::kLog, x); }
inline Tensor neg(const Tensor& x) { return unary(Unary::kNeg, x); }
// sqrt(0) = 0 with a zero subgradient there.
inline Tensor sqrt(const Tensor& x) { return unary(Unary::kSqrt, x); }
inline Tensor square(const Tensor& x) { return unary(Unary::kSquare, x); }

Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double value);
// max(x, floor); gradient flows only where x > floor.
Tensor clamp_min(const Tensor& x, double floor);
// Elementwise maximum; on ties the gradient goes to `a`.
Tensor maximum(const Tensor& a, const Tensor& b);

Tensor matmul(const Tensor& a, const Tensor& b);     // [m,k]x[k,n]
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // [m,k]x[n,k]^T
Tensor transpose(const Tensor& x);
// x*W^T + b with W stored [out, in]; b may be undefined.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
// Matrix reduction: axis 0 sums over rows -> [n], axis 1 over columns -> [m].
Tensor sum_axis(const Tensor& x, std::size_t axis);
Tensor softmax(const Tensor& x, std::size_t axis);
// Row-wise log(softmax(x)) for a matrix, computed without forming softmax.
Tensor log_softmax_rows(const Tensor& x);
// out[i] = x[i, cols[i]].
Tensor pick_per_row(const Tensor& x, std::span<const int> cols);

Tensor reshape(const Tensor& x, Shape shape);
Tensor slice_cols(const Tensor& x, std::size_t start, std::size_t count);
Tensor slice_rows(const Tensor& x, std::size_t start, std::size_t count);
Tensor concat_cols(std::span<const Tensor> parts);
Tensor concat_rows(std::span<const Tensor> parts);
// Single element as a one-element tensor.
Tensor pick(const Tensor& x, std::size_t flat_index);

Tensor add_rowwise(const Tensor& x, const Tensor& row);  // [m,n] + [n]
Tensor mul_rowwise(const Tensor& x, const Tensor& row);  // [m,n] * [n]
// [p,c] -> [times*p, c], stacking whole copies.
Tensor repeat_rows(const Tensor& x, std::size_t times);
// [l,c] -> [l*times, c], each row repeated `times` times in place.
Tensor repeat_each_row(const Tensor& x, std::size_t times);

// Per-row standardisation (x - mean) / sqrt(var + eps), no gain or bias.
Tensor layer_norm_rows(const Tensor& x, double eps);

// Same-padded cross-correlation. x is [h,w,cin] or [b,h,w,cin]; kernel is
// [kh,kw,cin,cout] with odd kh, kw.
Tensor conv2d(const Tensor& x, const Tensor& kernel);

enum class PoolKind { kMax, kAvg };
// Non-overlapping window x window pooling with stride `window`. The window
// must divide both spatial extents. Max backward routes to the first maximal
// element in row-major window order.
Tensor pool2d(const Tensor& x, PoolKind kind, std::size_t window);
// Full-grid average: [h,w,c] -> [1,c].
Tensor global_avg_pool(const Tensor& x);
// Zero padding at the bottom and right of an [h,w,c] grid.
Tensor pad_bottom_right(const Tensor& x, std::size_t height, std::size_t width);

// Circular convolution of two equal-length vectors via FFT.
Tensor fft_pair_convolve(const Tensor& a, const Tensor& b);
// Count sketch: out[hash[i]] += sign[i] * x[i].
Tensor count_sketch(const Tensor& x, std::span<const std::size_t> hash,
                    std::span<const double> sign, std::size_t out_dim);

// Columns of E [d, vocab] for each id, returned as rows [n, d].
Tensor embedding_lookup(const Tensor& embedding, std::span<const int> ids);

}  // namespace ctsan
