#include "m2fn/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "m2fn/errors.hpp"

namespace m2fn {

namespace {
thread_local Tape* g_active_tape = nullptr;
}  // namespace

std::size_t element_count(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad) {
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] == 0) {
      throw ShapeError("tensor extent " + std::to_string(i) +
                       " is zero in shape " + shape_string(shape));
    }
  }
  if (element_count(shape) != values.size()) {
    throw ShapeError("shape " + shape_string(shape) + " needs " +
                     std::to_string(element_count(shape)) + " values, got " +
                     std::to_string(values.size()));
  }
  storage_ = std::make_shared<detail::TensorStorage>();
  storage_->shape = std::move(shape);
  storage_->values = std::move(values);
  storage_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = element_count(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor({1}, {value}, requires_grad);
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " +
                     shape_string(shape()));
  }
  return storage_->shape[axis];
}

double Tensor::item() const {
  if (size() != 1) {
    throw ShapeError("item() on non-scalar tensor " + shape_string(shape()));
  }
  return storage_->values[0];
}

std::span<double> Tensor::mutable_grad() const {
  if (storage_->grad.empty()) storage_->grad.assign(storage_->values.size(), 0.0);
  return storage_->grad;
}

void Tensor::zero_grad() {
  std::fill(storage_->grad.begin(), storage_->grad.end(), 0.0);
}

Tensor Tensor::clone() const {
  return Tensor(storage_->shape, storage_->values, false);
}

Tape::Recording::Recording(Tape& tape) : previous_(g_active_tape) {
  g_active_tape = &tape;
}

Tape::Recording::~Recording() { g_active_tape = previous_; }

Tape* Tape::active() { return g_active_tape; }

void Tape::record(std::string op, const std::vector<Tensor>& inputs,
                  Tensor& output, std::function<void()> backward) {
  Tape* tape = g_active_tape;
  if (tape == nullptr) return;
  const bool needs = std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) {
    return t.defined() && t.requires_grad();
  });
  if (!needs) return;
  if (tape->consumed_) {
    throw ContractError("recording '" + op + "' on a tape that already ran backward");
  }
  output.storage_->requires_grad = true;
  Node node;
  node.op = std::move(op);
  for (const Tensor& t : inputs) {
    if (t.defined()) node.inputs.push_back(t.storage_);
  }
  node.output = output.storage_;
  node.backward = std::move(backward);
  tape->nodes_.push_back(std::move(node));
}

void Tape::backward(const Tensor& loss) {
  if (consumed_) {
    throw ContractError("backward already ran on this tape; call reset() first");
  }
  if (loss.size() != 1) {
    throw ContractError("backward needs a scalar loss, got shape " +
                        shape_string(loss.shape()));
  }
  consumed_ = true;
  visit_order_.clear();
  loss.storage_->grad.assign(1, 1.0);
  for (std::size_t i = nodes_.size(); i-- > 0;) {
    Node& node = nodes_[i];
    if (node.output->grad.empty()) continue;
    visit_order_.push_back(i);
    node.backward();
  }
}

void Tape::reset() {
  nodes_.clear();
  visit_order_.clear();
  consumed_ = false;
}

std::vector<std::string> Tape::op_names() const {
  std::vector<std::string> names;
  names.reserve(nodes_.size());
  for (const Node& n : nodes_) names.push_back(n.op);
  return names;
}

void check_finite(const Tensor& t, const std::string& where) {
  for (double v : t.values()) {
    if (!std::isfinite(v)) {
      throw NumericError("non-finite value produced by " + where);
    }
  }
}

}  // namespace m2fn
