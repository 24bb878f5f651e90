#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace dana {

using Shape = std::vector<std::size_t>;

std::size_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Thrown when operand shapes are incompatible; the message names the dims.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class Tape;

/// Dense row-major tensor of doubles.
///
/// Storage is shared between copies and copy-on-write through
/// mutable_data(), so passing tensors by value is cheap. A tensor may be
/// bound to a Tape node; such tensors are confined to the tape's thread.
/// Unbound tensors are immutable values and safe to share across threads.
class Tensor {
 public:
  Tensor();
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double v);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t numel() const { return data_->size(); }

  std::span<const double> data() const { return {data_->data(), data_->size()}; }
  std::span<double> mutable_data();
  double item() const;
  double operator[](std::size_t i) const { return (*data_)[i]; }

  bool tracked() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }
  int node() const { return node_; }

  /// Same values, no tape binding.
  Tensor detach() const;
  /// Same storage viewed with another shape (no tape binding).
  Tensor with_shape(Shape shape) const;

  const std::shared_ptr<std::vector<double>>& storage() const { return data_; }

 private:
  friend class Tape;
  Shape shape_;
  std::shared_ptr<std::vector<double>> data_;
  Tape* tape_ = nullptr;
  int node_ = -1;
};

/// Gradient buffers handed to a node's vector-Jacobian product. An input
/// that does not participate in the tape gets an empty span.
using GradSpans = std::vector<std::span<double>>;
using VjpFn = std::function<void(std::span<const double> grad_out, GradSpans& grad_in)>;

/// Gradients of a scalar w.r.t. the tape's leaves, keyed by node handle.
class Gradients {
 public:
  /// Gradient for a tracked leaf; all-zero tensor when unreachable.
  Tensor of(const Tensor& leaf) const;
  bool contains(const Tensor& leaf) const;

 private:
  friend class Tape;
  std::unordered_map<int, Tensor> by_node_;
  std::unordered_map<int, Shape> leaf_shapes_;
};

/// Ordered record of differentiable ops for one forward pass.
///
/// Nodes are appended in execution order, which is a topological order, so
/// backward() is a single reverse sweep. A tape is single-use: after
/// backward() it refuses further recording.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Bind a copy of `value` to this tape as a differentiable leaf.
  Tensor leaf(const Tensor& value);

  /// Record `out` as produced from `inputs` with the given VJP rule. Inputs
  /// not bound to this tape are treated as constants.
  Tensor record(Tensor out, const std::vector<Tensor>& inputs, VjpFn vjp);

  Gradients backward(const Tensor& loss);

  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

 private:
  struct Node {
    Shape shape;
    std::vector<int> inputs;
    VjpFn vjp;
    bool is_leaf = false;
  };
  std::vector<Node> nodes_;
  bool consumed_ = false;
};

/// Returns the common tape of the inputs, or nullptr when none is tracked.
/// Throws if inputs are bound to different tapes.
Tape* common_tape(const std::vector<Tensor>& inputs);

}  // namespace dana
