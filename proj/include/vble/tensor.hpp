#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace vble {

using Shape = std::vector<std::size_t>;

/// Raised when an operation receives tensors whose extents do not line up.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised for inputs outside an operation's mathematical domain (log of a
/// non-positive value, non-positive GDN offset, ...).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Raised when a NaN or infinity shows up in a forward or reverse pass.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

namespace detail {

struct Node;
using NodePtr = std::shared_ptr<Node>;

// grad_out has the node's own extent; grad_in[i] is null when input i does
// not require a gradient, otherwise a zero-initialised accumulation buffer.
using BackwardFn = std::function<void(std::span<const double> grad_out,
                                      std::span<std::vector<double>*> grad_in)>;

struct Node {
  Shape shape;
  std::vector<double> value;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<NodePtr> inputs;
  BackwardFn backward;

  bool is_leaf() const { return inputs.empty(); }
};

}  // namespace detail

/// Dense row-major double tensor with value semantics for data and shared
/// identity in the differentiation graph. Copies of a Tensor alias the same
/// graph node.
class Tensor {
 public:
  Tensor();
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor ones(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  const Shape& shape() const { return node_->shape; }
  std::size_t dim() const { return node_->shape.size(); }
  std::size_t extent(std::size_t axis) const;
  std::size_t size() const { return node_->value.size(); }

  std::span<const double> values() const { return node_->value; }
  const std::vector<double>& vector() const { return node_->value; }
  double operator[](std::size_t i) const { return node_->value[i]; }
  double item() const;

  /// In-place access for leaves only (optimizer updates, initialisation).
  std::span<double> mutable_values();

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag);
  bool is_leaf() const { return node_->is_leaf(); }

  /// Fresh leaf holding a copy of the values, detached from any graph.
  Tensor detach(bool requires_grad = false) const;

  const detail::NodePtr& node() const { return node_; }
  static Tensor from_node(detail::NodePtr node);

  bool same_node(const Tensor& other) const { return node_ == other.node_; }

 private:
  detail::NodePtr node_;
};

/// Gradient map produced by backward(). Holds one buffer per grad-required
/// leaf that the loss depends on.
class Gradients {
 public:
  /// Gradient of the loss w.r.t. `leaf`; zeros when the loss does not depend
  /// on it.
  std::vector<double> of(const Tensor& leaf) const;
  bool contains(const Tensor& leaf) const;
  std::size_t size() const { return grads_.size(); }

 private:
  friend Gradients backward(const Tensor& loss);
  std::unordered_map<const detail::Node*, std::vector<double>> grads_;
  std::vector<detail::NodePtr> keep_alive_;
};

/// Reverse pass from a scalar loss. Nodes are visited once in reverse
/// topological order; fan-out contributions accumulate. The recorded graph
/// behind `loss` is released afterwards, so interior tensors become
/// constants.
Gradients backward(const Tensor& loss);

namespace detail {

/// Creates the output node of an operation. Performs the finite-value check
/// and attaches the backward rule only when some input requires a gradient.
Tensor make_result(const char* op, Shape shape, std::vector<double> value,
                   std::vector<NodePtr> inputs, BackwardFn backward);

void check_finite(const char* op, std::span<const double> values);

}  // namespace detail

}  // namespace vble
