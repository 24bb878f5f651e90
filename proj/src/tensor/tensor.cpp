#include "dana/tensor/tensor.hpp"

#include <algorithm>
#include <sstream>

namespace dana {

std::size_t numel_of(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

void check_dims(const Shape& shape) {
  for (auto d : shape) {
    if (d == 0) throw ShapeError("tensor dims must be >= 1, got " + shape_str(shape));
  }
}

}  // namespace

Tensor::Tensor() : data_(std::make_shared<std::vector<double>>(1, 0.0)) {}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
  check_dims(shape_);
  data_ = std::make_shared<std::vector<double>>(numel_of(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)) {
  check_dims(shape_);
  if (values.size() != numel_of(shape_)) {
    throw ShapeError("data length " + std::to_string(values.size()) + " does not match shape " +
                     shape_str(shape_));
  }
  data_ = std::make_shared<std::vector<double>>(std::move(values));
}

Tensor Tensor::scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

std::span<double> Tensor::mutable_data() {
  if (data_.use_count() > 1) data_ = std::make_shared<std::vector<double>>(*data_);
  return {data_->data(), data_->size()};
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape_));
  return (*data_)[0];
}

Tensor Tensor::detach() const {
  Tensor t = *this;
  t.tape_ = nullptr;
  t.node_ = -1;
  return t;
}

Tensor Tensor::with_shape(Shape shape) const {
  check_dims(shape);
  if (numel_of(shape) != numel()) {
    throw ShapeError("cannot view " + shape_str(shape_) + " as " + shape_str(shape));
  }
  Tensor t = detach();
  t.shape_ = std::move(shape);
  return t;
}

Tensor Gradients::of(const Tensor& leaf) const {
  if (auto it = by_node_.find(leaf.node()); it != by_node_.end()) return it->second;
  if (auto it = leaf_shapes_.find(leaf.node()); it != leaf_shapes_.end()) return Tensor(it->second, 0.0);
  return Tensor(leaf.shape(), 0.0);
}

bool Gradients::contains(const Tensor& leaf) const { return by_node_.count(leaf.node()) > 0; }

Tensor Tape::leaf(const Tensor& value) {
  if (consumed_) throw std::logic_error("tape already consumed by backward()");
  Tensor t = value.detach();
  t.tape_ = this;
  t.node_ = static_cast<int>(nodes_.size());
  nodes_.push_back(Node{t.shape(), {}, nullptr, true});
  return t;
}

Tensor Tape::record(Tensor out, const std::vector<Tensor>& inputs, VjpFn vjp) {
  if (consumed_) throw std::logic_error("tape already consumed by backward()");
  Node node;
  node.shape = out.shape();
  node.vjp = std::move(vjp);
  node.inputs.reserve(inputs.size());
  for (const auto& in : inputs) node.inputs.push_back(in.tape() == this ? in.node() : -1);
  out.tape_ = this;
  out.node_ = static_cast<int>(nodes_.size());
  nodes_.push_back(std::move(node));
  return out;
}

Gradients Tape::backward(const Tensor& loss) {
  if (loss.tape() != this) throw std::invalid_argument("loss is not recorded on this tape");
  if (loss.numel() != 1 || loss.rank() != 0) {
    throw ShapeError("backward() needs a 0-d loss, got " + shape_str(loss.shape()));
  }
  if (consumed_) throw std::logic_error("tape already consumed by backward()");
  consumed_ = true;

  std::vector<std::vector<double>> grads(nodes_.size());
  grads[loss.node()].assign(1, 1.0);
  for (int id = loss.node(); id >= 0; --id) {
    auto& node = nodes_[id];
    if (grads[id].empty() || node.is_leaf) continue;
    GradSpans spans;
    spans.reserve(node.inputs.size());
    for (int in : node.inputs) {
      if (in < 0) {
        spans.emplace_back();
        continue;
      }
      if (grads[in].empty()) grads[in].assign(numel_of(nodes_[in].shape), 0.0);
      spans.emplace_back(grads[in].data(), grads[in].size());
    }
    node.vjp(std::span<const double>(grads[id].data(), grads[id].size()), spans);
    // Interior gradients are no longer needed once propagated.
    std::vector<double>().swap(grads[id]);
    node.vjp = nullptr;
  }

  Gradients out;
  for (std::size_t id = 0; id < nodes_.size(); ++id) {
    if (!nodes_[id].is_leaf) continue;
    out.leaf_shapes_[static_cast<int>(id)] = nodes_[id].shape;
    if (!grads[id].empty()) {
      out.by_node_.emplace(static_cast<int>(id), Tensor(nodes_[id].shape, std::move(grads[id])));
    }
  }
  return out;
}

Tape* common_tape(const std::vector<Tensor>& inputs) {
  Tape* tape = nullptr;
  for (const auto& in : inputs) {
    if (!in.tracked()) continue;
    if (tape && in.tape() != tape) throw std::invalid_argument("inputs bound to different tapes");
    tape = in.tape();
  }
  return tape;
}

}  // namespace dana
