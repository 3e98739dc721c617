#include "bft/tensor.hpp"

#include <sstream>

#include "bft/errors.hpp"

namespace bft {

Index numel(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) n *= d;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) out << (i ? "," : "") << shape[i];
  out << ']';
  return out.str();
}

const Shape& Tensor::shape() const { return graph_->shape(id_); }
Index Tensor::size() const { return graph_->value(id_).size(); }
const Vector& Tensor::values() const { return graph_->value(id_); }

Eigen::Map<const RowMatrix> Tensor::matrix() const {
  const Shape& s = shape();
  const Index cols = s.empty() ? 1 : s.back();
  const Index rows = cols == 0 ? 0 : size() / cols;
  return {values().data(), rows, cols};
}

double Tensor::item() const {
  if (size() != 1) throw ContractError("item() on tensor of shape " + to_string(shape()));
  return values()(0);
}

bool Tensor::requires_grad() const { return graph_->requires_grad(id_); }
bool Tensor::detached() const { return graph_->detached(id_); }

Tensor Graph::append(Node node) {
  if (numel(node.shape) != node.value.size()) {
    throw DimensionError("shape " + to_string(node.shape) + " does not match " +
                         std::to_string(node.value.size()) + " values");
  }
  nodes_.push_back(std::move(node));
  return {this, nodes_.size() - 1};
}

Tensor Graph::leaf(Shape shape, Vector values, bool requires_grad) {
  Node node;
  node.shape = std::move(shape);
  node.value = std::move(values);
  node.requires_grad = requires_grad;
  node.is_leaf = true;
  return append(std::move(node));
}

Tensor Graph::parameter(Shape shape, Vector values) {
  return leaf(std::move(shape), std::move(values), true);
}

Tensor Graph::constant(Shape shape, Vector values) {
  return leaf(std::move(shape), std::move(values), false);
}

Tensor Graph::record(Shape shape, Vector values, std::span<const Tensor> inputs,
                     BackwardRule rule) {
  Node node;
  node.shape = std::move(shape);
  node.value = std::move(values);
  for (const Tensor& in : inputs) {
    if (&in.graph() != this) throw ContractError("operands belong to different graphs");
    node.inputs.push_back(in.id());
    node.requires_grad = node.requires_grad || nodes_[in.id()].requires_grad;
  }
  if (node.requires_grad) node.rule = std::move(rule);
  return append(std::move(node));
}

Tensor Graph::detach(const Tensor& x) {
  Node node;
  node.shape = x.shape();
  node.value = x.values();
  node.detached = true;
  return append(std::move(node));
}

Vector* Graph::grad_sink(std::size_t id) {
  Node& node = nodes_[id];
  if (!node.requires_grad) return nullptr;
  if (node.grad.size() != node.value.size()) node.grad = Vector::Zero(node.value.size());
  return &node.grad;
}

void Graph::backward(const Tensor& loss) {
  if (&loss.graph() != this) throw ContractError("backward: loss belongs to another graph");
  if (loss.size() != 1) {
    throw ContractError("backward requires a scalar loss, got shape " + to_string(loss.shape()));
  }
  for (Node& node : nodes_) node.grad.resize(0);

  if (nodes_[loss.id()].requires_grad) {
    nodes_[loss.id()].grad = Vector::Ones(1);
    for (std::size_t id = loss.id() + 1; id-- > 0;) {
      const Node& node = nodes_[id];
      if (!node.requires_grad || node.grad.size() == 0 || !node.rule) continue;
      node.rule(*this, id);
    }
  }
  for (std::size_t id = 0; id < nodes_.size(); ++id) {
    if (nodes_[id].is_leaf) grad_sink(id);
  }
}

Vector Graph::grad(const Tensor& x) const {
  const Node& node = nodes_[x.id()];
  if (node.grad.size() == node.value.size()) return node.grad;
  return Vector::Zero(node.value.size());
}

}  // namespace bft
