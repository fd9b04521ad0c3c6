#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace imask {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

/// Dense row-major array of doubles with an optional gradient buffer.
///
/// A Tensor is a handle: copies share the same storage, which is what lets the
/// tape hold on to intermediates and accumulate into parameter gradients.
/// Use clone() for an independent deep copy.
class Tensor {
 public:
  Tensor();
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double value);

  const Shape& shape() const;
  std::size_t dim(std::size_t axis) const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;
  bool defined() const { return static_cast<bool>(impl_); }

  std::span<double> data();
  std::span<const double> data() const;
  double item() const;
  double& operator[](std::size_t i) { return data()[i]; }
  double operator[](std::size_t i) const { return data()[i]; }

  bool has_grad() const;
  std::span<double> grad();
  std::span<const double> grad() const;
  // Allocates a zero gradient if none exists yet.
  std::span<double> ensure_grad();
  void zero_grad();
  void release_grad();

  bool requires_grad() const;
  Tensor& set_requires_grad(bool on);

  Tensor clone() const;
  // Fresh tensor with copied values and no gradient tracking.
  Tensor detach() const;
  bool is_same(const Tensor& other) const { return impl_ == other.impl_; }

  bool all_finite() const;

 private:
  struct Impl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;
    bool requires_grad = false;
  };
  std::shared_ptr<Impl> impl_;
};

/// Records differentiable operations in execution order and replays their
/// backward closures in reverse.
///
/// Operations only record when the tape is enabled and at least one input
/// requires a gradient; an inference tape (enabled = false) records nothing.
class Tape {
 public:
  // Called with the op's output; reads output.grad() and accumulates into inputs.
  using BackwardFn = std::function<void(Tensor& output)>;

  explicit Tape(bool enabled = true) : enabled_(enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  bool enabled() const { return enabled_; }
  std::size_t size() const { return nodes_.size(); }
  std::string_view op_name(std::size_t i) const { return nodes_.at(i).name; }

  bool should_record(std::initializer_list<const Tensor*> inputs) const;
  void record(std::string name, Tensor output, BackwardFn fn);

  /// Seeds d(loss)/d(loss) = 1 and runs every recorded backward closure in
  /// reverse recording order. Throws AutodiffError if the loss is not a scalar
  /// or was not produced on this tape.
  void backward(const Tensor& loss);

  void clear() { nodes_.clear(); }

 private:
  struct Node {
    std::string name;
    Tensor output;
    BackwardFn fn;
  };
  bool enabled_;
  std::vector<Node> nodes_;
};

}  // namespace imask
