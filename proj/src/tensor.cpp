#include "vble/tensor.hpp"

#include <cmath>
#include <sstream>
#include <unordered_set>

namespace vble {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor() : node_(std::make_shared<detail::Node>()) {
  node_->value.assign(1, 0.0);
}

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad)
    : node_(std::make_shared<detail::Node>()) {
  if (numel(shape) != values.size()) {
    throw ShapeError("tensor: shape " + to_string(shape) + " holds " +
                     std::to_string(numel(shape)) + " values, got " +
                     std::to_string(values.size()));
  }
  node_->shape = std::move(shape);
  node_->value = std::move(values);
  node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::ones(Shape shape, bool requires_grad) { return full(std::move(shape), 1.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const auto n = numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return Tensor({}, {value}, requires_grad); }

std::size_t Tensor::extent(std::size_t axis) const {
  if (axis >= dim()) throw ShapeError("tensor: axis " + std::to_string(axis) + " out of range for " + to_string(shape()));
  return node_->shape[axis];
}

double Tensor::item() const {
  if (size() != 1) throw ShapeError("item: tensor of shape " + to_string(shape()) + " is not a scalar");
  return node_->value[0];
}

std::span<double> Tensor::mutable_values() {
  if (!is_leaf()) throw std::logic_error("mutable_values: only leaf tensors may be modified in place");
  return node_->value;
}

void Tensor::set_requires_grad(bool flag) {
  if (!is_leaf()) throw std::logic_error("set_requires_grad: only valid on leaf tensors");
  node_->requires_grad = flag;
}

Tensor Tensor::detach(bool requires_grad) const { return Tensor(shape(), node_->value, requires_grad); }

Tensor Tensor::from_node(detail::NodePtr node) {
  Tensor t;
  t.node_ = std::move(node);
  return t;
}

std::vector<double> Gradients::of(const Tensor& leaf) const {
  auto it = grads_.find(leaf.node().get());
  if (it == grads_.end()) return std::vector<double>(leaf.size(), 0.0);
  return it->second;
}

bool Gradients::contains(const Tensor& leaf) const { return grads_.count(leaf.node().get()) != 0; }

namespace detail {

void check_finite(const char* op, std::span<const double> values) {
  for (double v : values) {
    if (!std::isfinite(v)) throw NumericError(std::string("non-finite value produced by ") + op);
  }
}

Tensor make_result(const char* op, Shape shape, std::vector<double> value, std::vector<NodePtr> inputs,
                   BackwardFn backward) {
  check_finite(op, value);
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = op;
  bool needs = false;
  for (const auto& in : inputs) needs = needs || in->requires_grad;
  if (needs) {
    node->requires_grad = true;
    node->inputs = std::move(inputs);
    node->backward = std::move(backward);
  }
  return Tensor::from_node(std::move(node));
}

}  // namespace detail

Gradients backward(const Tensor& loss) {
  using detail::Node;
  if (loss.size() != 1) throw ShapeError("backward: loss must be a scalar, got " + to_string(loss.shape()));
  detail::check_finite("loss", loss.values());

  Gradients out;
  if (!loss.requires_grad()) return out;

  // Iterative post-order DFS gives a topological order (inputs first).
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{loss.node().get(), 0}};
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && !visited.count(child)) {
        visited.insert(child);
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  std::unordered_map<Node*, std::vector<double>> grads;
  grads[loss.node().get()] = {1.0};
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    auto found = grads.find(node);
    if (found == grads.end()) continue;
    if (node->is_leaf()) continue;
    std::vector<double>& g = found->second;
    detail::check_finite(node->op, g);

    std::vector<std::vector<double>*> slots(node->inputs.size(), nullptr);
    for (std::size_t i = 0; i < node->inputs.size(); ++i) {
      Node* in = node->inputs[i].get();
      if (!in->requires_grad) continue;
      auto& buf = grads[in];
      if (buf.empty()) buf.assign(in->value.size(), 0.0);
      slots[i] = &buf;
    }
    node->backward(g, slots);
    grads.erase(node);
  }

  for (Node* node : order) {
    if (node->is_leaf()) {
      auto it = grads.find(node);
      if (it == grads.end()) continue;
      detail::check_finite("gradient", it->second);
      out.grads_.emplace(node, std::move(it->second));
    }
  }
  // Keep leaves alive as long as the map refers to them, then drop the tape.
  for (Node* node : order) {
    if (node->is_leaf()) continue;
    for (auto& in : node->inputs) {
      if (in->is_leaf() && out.grads_.count(in.get())) out.keep_alive_.push_back(in);
    }
  }
  for (Node* node : order) {
    if (node->is_leaf()) continue;
    node->inputs.clear();
    node->backward = nullptr;
    node->requires_grad = false;
  }
  return out;
}

}  // namespace vble
