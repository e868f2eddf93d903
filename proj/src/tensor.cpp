#include "ctsan/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace ctsan {

namespace {

thread_local Precision g_precision = Precision::kF32;
thread_local Tape* g_tape = nullptr;
#ifdef NDEBUG
bool g_finite_checks = false;
#else
bool g_finite_checks = true;
#endif

}  // namespace

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

Precision current_precision() { return g_precision; }

PrecisionScope::PrecisionScope(Precision p) : saved_(g_precision) { g_precision = p; }
PrecisionScope::~PrecisionScope() { g_precision = saved_; }

void set_finite_checks(bool enabled) { g_finite_checks = enabled; }
bool finite_checks() { return g_finite_checks; }

double* detail::Node::grad_buffer() {
  if (!requires_grad) return nullptr;
  if (grad.empty()) grad.assign(value.size(), 0.0);
  return grad.data();
}

namespace {

std::shared_ptr<detail::Node> new_node(Shape shape, std::vector<double> values) {
  for (auto e : shape) {
    if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_string(shape));
  }
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("shape " + shape_string(shape) + " needs " +
                         std::to_string(shape_numel(shape)) + " values, got " +
                         std::to_string(values.size()));
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  return node;
}

void round_to_precision(std::vector<double>& v) {
  if (g_precision != Precision::kF32) return;
  for (auto& x : v) x = static_cast<double>(static_cast<float>(x));
}

}  // namespace

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(Shape shape, double value) {
  std::vector<double> v(shape_numel(shape), value);
  return from(std::move(shape), std::move(v));
}

Tensor Tensor::from(Shape shape, std::vector<double> values) {
  return Tensor(new_node(std::move(shape), std::move(values)));
}

Tensor Tensor::scalar(double value) { return from({1}, {value}); }

Tensor Tensor::parameter(Shape shape, std::vector<double> values) {
  Tensor t = from(std::move(shape), std::move(values));
  t.node_->requires_grad = true;
  return t;
}

const Shape& Tensor::shape() const {
  if (!node_) throw UsageError("use of an undefined tensor");
  return node_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_string(s));
  }
  return s[axis];
}

std::size_t Tensor::numel() const { return shape_numel(shape()); }

std::span<const double> Tensor::data() const {
  shape();
  return node_->value;
}

std::span<double> Tensor::mutable_data() const {
  shape();
  return node_->value;
}

double Tensor::item() const {
  if (numel() != 1) throw UsageError("item() on tensor of shape " + shape_string(shape()));
  return node_->value[0];
}

double Tensor::at(std::size_t row, std::size_t col) const {
  if (rank() != 2) throw DimensionError("at(row, col) needs a matrix, got " + shape_string(shape()));
  return node_->value.at(row * node_->shape[1] + col);
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

void Tensor::set_requires_grad(bool on) {
  shape();
  node_->requires_grad = on;
}

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  if (!has_grad()) throw UsageError("tensor has no gradient");
  return node_->grad;
}

std::span<double> Tensor::mutable_grad() const {
  shape();
  if (!node_->requires_grad) throw UsageError("tensor does not require a gradient");
  node_->grad_buffer();
  return node_->grad;
}

void Tensor::zero_grad() const {
  if (node_ && !node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

Tensor Tensor::detach() const { return from(shape(), node_->value); }

void Tape::record(std::shared_ptr<detail::Node> node) { nodes_.push_back(std::move(node)); }

void Tape::backward(const Tensor& loss) {
  if (!loss.defined()) throw UsageError("backward on an undefined tensor");
  if (loss.numel() != 1) {
    throw UsageError("backward needs a scalar loss, got " + shape_string(loss.shape()));
  }
  const auto& target = loss.node();
  auto it = std::find(nodes_.rbegin(), nodes_.rend(), target);
  if (it == nodes_.rend()) throw UsageError("loss was not produced on this tape");
  const std::size_t last = static_cast<std::size_t>(std::distance(it, nodes_.rend())) - 1;

  for (std::size_t i = 0; i <= last; ++i) nodes_[i]->grad.clear();
  target->grad.assign(1, 1.0);
  for (std::size_t i = last + 1; i-- > 0;) {
    auto& node = *nodes_[i];
    if (node.grad.empty() || !node.backward) continue;
    node.backward(node);
  }
}

void backward(Tape& tape, const Tensor& loss) { tape.backward(loss); }

TapeScope::TapeScope(Tape& tape) : saved_(g_tape) { g_tape = &tape; }
TapeScope::~TapeScope() { g_tape = saved_; }

NoTapeScope::NoTapeScope() : saved_(g_tape) { g_tape = nullptr; }
NoTapeScope::~NoTapeScope() { g_tape = saved_; }

Tape* active_tape() { return g_tape; }

Tensor detail::make_result(Shape shape, std::vector<double> value, std::vector<Tensor> inputs,
                           BackwardFn fn) {
  round_to_precision(value);
  if (g_finite_checks) {
    for (double x : value) {
      if (!std::isfinite(x)) throw DomainError("non-finite value produced by tensor op");
    }
  }
  auto node = new_node(std::move(shape), std::move(value));
  if (g_tape != nullptr) {
    const bool needs = std::any_of(inputs.begin(), inputs.end(),
                                   [](const Tensor& t) { return t.requires_grad(); });
    if (needs) {
      node->requires_grad = true;
      node->inputs.reserve(inputs.size());
      for (auto& t : inputs) node->inputs.push_back(t.node());
      node->backward = std::move(fn);
      g_tape->record(node);
    }
  }
  return Tensor(std::move(node));
}

}  // namespace ctsan
