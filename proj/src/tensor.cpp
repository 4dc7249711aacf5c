// SPDX-License-Identifier: Apache-2.0
#include "miniseg/tensor.hpp"

#include <algorithm>
#include <sstream>

#include "miniseg/error.hpp"

namespace miniseg {

namespace {
thread_local Tape* g_active_tape = nullptr;
thread_local FlopCounter* g_active_counter = nullptr;
}  // namespace

std::string Shape::str() const {
  std::ostringstream os;
  os << n << "x" << c << "x" << h << "x" << w;
  return os.str();
}

Tensor::Tensor(Shape shape, float fill) : node_(std::make_shared<detail::TensorNode>()) {
  if (shape.n < 0 || shape.c < 0 || shape.h < 0 || shape.w < 0)
    throw ShapeError("negative extent in shape " + shape.str());
  node_->shape = shape;
  node_->data.assign(shape.numel(), fill);
}

Tensor::Tensor(Shape shape, std::vector<float> values)
    : node_(std::make_shared<detail::TensorNode>()) {
  if (values.size() != shape.numel())
    throw ShapeError("buffer of " + std::to_string(values.size()) +
                     " values does not match shape " + shape.str());
  node_->shape = shape;
  node_->data = std::move(values);
}

Tensor Tensor::shape_only(Shape shape) {
  Tensor t;
  t.node_ = std::make_shared<detail::TensorNode>();
  t.node_->shape = shape;
  t.node_->shape_only = true;
  return t;
}

std::span<float> Tensor::data() {
  if (node_->shape_only) throw UsageError("tensor " + node_->shape.str() + " has no storage (shape-only)");
  return node_->data;
}

std::span<const float> Tensor::data() const {
  if (node_->shape_only) throw UsageError("tensor " + node_->shape.str() + " has no storage (shape-only)");
  return node_->data;
}

float& Tensor::at(int n, int c, int h, int w) {
  const Shape& s = node_->shape;
  return node_->data[((static_cast<std::size_t>(n) * s.c + c) * s.h + h) * s.w + w];
}

float Tensor::at(int n, int c, int h, int w) const {
  const Shape& s = node_->shape;
  return node_->data[((static_cast<std::size_t>(n) * s.c + c) * s.h + h) * s.w + w];
}

float Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape().str());
  return node_->data[0];
}

Tensor& Tensor::set_requires_grad(bool on) {
  node_->requires_grad = on;
  return *this;
}

std::span<float> Tensor::grad() const {
  if (node_->grad.size() != node_->data.size()) node_->grad.assign(node_->data.size(), 0.0f);
  return node_->grad;
}

void Tensor::zero_grad() {
  if (node_) node_->grad.assign(node_->data.size(), 0.0f);
}

void Tensor::drop_grad() {
  if (node_) {
    node_->grad.clear();
    node_->grad.shrink_to_fit();
  }
}

Tensor Tensor::clone() const {
  if (!node_) return {};
  if (node_->shape_only) return shape_only(node_->shape);
  return Tensor(node_->shape, node_->data);
}

void Tape::record(std::function<void()> adjoint) {
  if (consumed_) throw UsageError("tape already replayed; reset() before recording");
  entries_.push_back(std::move(adjoint));
}

void Tape::backward(const Tensor& loss) {
  if (consumed_) throw UsageError("backward() called twice on the same tape without reset()");
  if (!loss.defined() || loss.numel() != 1)
    throw ShapeError("backward() expects a scalar loss");
  if (!loss.requires_grad()) throw UsageError("loss was not produced on a recording tape");
  consumed_ = true;
  loss.grad()[0] = 1.0f;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
}

void Tape::reset() {
  entries_.clear();
  consumed_ = false;
}

Tape* Tape::active() { return g_active_tape; }

Tape::Scope::Scope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
Tape::Scope::~Scope() { g_active_tape = previous_; }

FlopCounter* FlopCounter::active() { return g_active_counter; }

FlopCounter::Scope::Scope(FlopCounter& counter) : previous_(g_active_counter) {
  g_active_counter = &counter;
}
FlopCounter::Scope::~Scope() { g_active_counter = previous_; }

}  // namespace miniseg
