#pragma once

// Dense row-major tensors with tape-based reverse-mode differentiation.
//
// A Tensor is a cheap handle; copies alias the same storage. Operations
// executed while a Tape is active (see TapeScope) and that touch at least one
// tensor with requires_grad() are recorded, and Tape::backward() replays them
// in reverse. Without an active tape nothing is recorded, which is how
// inference and finite-difference evaluation run.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "ctsan/errors.hpp"

namespace ctsan {

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

// Values are held in double storage. In kF32 mode every op output is rounded
// to the nearest float, so arithmetic matches single precision at the op
// boundary; kF64 keeps full double precision for gradient checks.
enum class Precision { kF32, kF64 };

Precision current_precision();

class PrecisionScope {
 public:
  explicit PrecisionScope(Precision p);
  ~PrecisionScope();
  PrecisionScope(const PrecisionScope&) = delete;
  PrecisionScope& operator=(const PrecisionScope&) = delete;

 private:
  Precision saved_;
};

// When enabled, every op output is scanned and a DomainError is raised on the
// first NaN/Inf. On by default in debug builds.
void set_finite_checks(bool enabled);
bool finite_checks();

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  // Zero-initialised gradient buffer, or nullptr when this node does not
  // participate in differentiation.
  double* grad_buffer();
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor from(Shape shape, std::vector<double> values);
  static Tensor scalar(double value);
  // Leaf with requires_grad set.
  static Tensor parameter(Shape shape, std::vector<double> values);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  // Direct write access, intended for leaves (optimizer updates, tests).
  std::span<double> mutable_data() const;
  double item() const;
  double operator[](std::size_t flat) const { return data()[flat]; }
  double at(std::size_t row, std::size_t col) const;

  bool requires_grad() const;
  void set_requires_grad(bool on);
  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad() const;
  void zero_grad() const;

  // Same underlying storage (parameter identity).
  bool same_as(const Tensor& other) const { return node_ == other.node_; }
  // Value copy with no history and no gradient requirement.
  Tensor detach() const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

class Tape {
 public:
  void record(std::shared_ptr<detail::Node> node);
  // Propagates d(loss)/d(.) to every recorded node and into the gradient
  // buffers of requires_grad leaves. Leaf gradients accumulate across calls.
  void backward(const Tensor& loss);
  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }
  const std::vector<std::shared_ptr<detail::Node>>& nodes() const { return nodes_; }

 private:
  std::vector<std::shared_ptr<detail::Node>> nodes_;
};

void backward(Tape& tape, const Tensor& loss);

// Makes `tape` the recording target on this thread for the scope lifetime.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* saved_;
};

// Suspends recording on this thread for the scope lifetime.
class NoTapeScope {
 public:
  NoTapeScope();
  ~NoTapeScope();
  NoTapeScope(const NoTapeScope&) = delete;
  NoTapeScope& operator=(const NoTapeScope&) = delete;

 private:
  Tape* saved_;
};

Tape* active_tape();

namespace detail {

using BackwardFn = std::function<void(Node&)>;

// Builds an op result. Records it on the active tape when any input requires
// a gradient; otherwise the backward rule is dropped.
Tensor make_result(Shape shape, std::vector<double> value,
                   std::vector<Tensor> inputs, BackwardFn fn);

}  // namespace detail

}  // namespace ctsan
