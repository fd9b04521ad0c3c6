#include "imask/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "imask/errors.hpp"

namespace imask {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor() = default;

Tensor::Tensor(Shape shape, double fill) : impl_(std::make_shared<Impl>()) {
  impl_->data.assign(shape_numel(shape), fill);
  impl_->shape = std::move(shape);
}

Tensor::Tensor(Shape shape, std::vector<double> values) : impl_(std::make_shared<Impl>()) {
  if (values.size() != shape_numel(shape)) {
    throw DimensionError("tensor of shape " + shape_to_string(shape) + " needs " +
                         std::to_string(shape_numel(shape)) + " values, got " +
                         std::to_string(values.size()));
  }
  impl_->shape = std::move(shape);
  impl_->data = std::move(values);
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{1}, std::vector<double>{value}); }

const Shape& Tensor::shape() const {
  static const Shape kEmpty;
  return impl_ ? impl_->shape : kEmpty;
}

std::size_t Tensor::dim(std::size_t axis) const {
  const Shape& s = shape();
  if (axis >= s.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " +
                         shape_to_string(s));
  }
  return s[axis];
}

std::size_t Tensor::numel() const { return impl_ ? impl_->data.size() : 0; }

std::span<double> Tensor::data() { return impl_->data; }
std::span<const double> Tensor::data() const { return impl_->data; }

double Tensor::item() const {
  if (numel() != 1) {
    throw DimensionError("item() on tensor of shape " + shape_to_string(shape()));
  }
  return impl_->data[0];
}

bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }
std::span<double> Tensor::grad() { return impl_->grad; }
std::span<const double> Tensor::grad() const { return impl_->grad; }

std::span<double> Tensor::ensure_grad() {
  if (impl_->grad.size() != impl_->data.size()) impl_->grad.assign(impl_->data.size(), 0.0);
  return impl_->grad;
}

void Tensor::zero_grad() {
  if (impl_) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

void Tensor::release_grad() {
  if (impl_) std::vector<double>().swap(impl_->grad);
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
  impl_->requires_grad = on;
  return *this;
}

Tensor Tensor::clone() const {
  Tensor t;
  if (!impl_) return t;
  t.impl_ = std::make_shared<Impl>(*impl_);
  return t;
}

Tensor Tensor::detach() const {
  if (!impl_) return {};
  return Tensor(impl_->shape, impl_->data);
}

bool Tensor::all_finite() const {
  if (!impl_) return true;
  auto finite = [](double v) { return std::isfinite(v); };
  return std::all_of(impl_->data.begin(), impl_->data.end(), finite) &&
         std::all_of(impl_->grad.begin(), impl_->grad.end(), finite);
}

bool Tape::should_record(std::initializer_list<const Tensor*> inputs) const {
  if (!enabled_) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor* t) { return t && t->requires_grad(); });
}

void Tape::record(std::string name, Tensor output, BackwardFn fn) {
  output.set_requires_grad(true);
  nodes_.push_back(Node{std::move(name), std::move(output), std::move(fn)});
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw AutodiffError("backward() needs a scalar loss, got shape " +
                        shape_to_string(loss.shape()));
  }
  auto it = std::find_if(nodes_.rbegin(), nodes_.rend(),
                         [&](const Node& n) { return n.output.is_same(loss); });
  if (it == nodes_.rend()) {
    throw AutodiffError("loss is detached: it was not produced by an operation on this tape");
  }
  // Intermediate gradients from an earlier backward pass must not leak in.
  for (Node& n : nodes_) n.output.release_grad();
  Tensor root = it->output;
  root.ensure_grad()[0] = 1.0;
  for (; it != nodes_.rend(); ++it) {
    if (!it->output.has_grad()) continue;  // not on the path to the loss
    it->fn(it->output);
  }
}

}  // namespace imask
