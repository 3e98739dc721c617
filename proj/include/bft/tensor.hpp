#pragma once

// Reverse-mode automatic differentiation over dense row-major tensors.
//
// A Graph owns every node created during one forward pass. Nodes are appended
// in execution order, so append order is a topological order and backward()
// walks it in reverse. Tensors are lightweight handles (graph pointer + node
// id) and stay valid for the lifetime of their Graph.

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace bft {

using Index = Eigen::Index;
using Shape = std::vector<Index>;
using Vector = Eigen::VectorXd;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using TokenGrid = Eigen::Matrix<std::int32_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Index numel(const Shape& shape);
std::string to_string(const Shape& shape);

class Graph;

/// Handle to a differentiable node.
class Tensor {
 public:
  Tensor() = default;

  Graph& graph() const { return *graph_; }
  std::size_t id() const { return id_; }
  bool valid() const { return graph_ != nullptr; }

  const Shape& shape() const;
  Index rank() const { return static_cast<Index>(shape().size()); }
  Index size() const;
  const Vector& values() const;
  /// Values viewed as [product of leading dims, last dim].
  Eigen::Map<const RowMatrix> matrix() const;
  /// The single value of a one-element tensor.
  double item() const;
  bool requires_grad() const;
  bool detached() const;

 private:
  friend class Graph;
  Tensor(Graph* graph, std::size_t id) : graph_(graph), id_(id) {}

  Graph* graph_ = nullptr;
  std::size_t id_ = 0;
};

/// Test hooks. Production code leaves these at their defaults.
struct GraphOptions {
  /// Negates the GELU backward rule; gradient checks must catch it.
  bool flip_gelu_backward = false;
};

class Graph {
 public:
  /// Accumulates the gradient of node `self` into its inputs' gradients.
  using BackwardRule = std::function<void(Graph& graph, std::size_t self)>;

  explicit Graph(GraphOptions options = {}) : options_(options) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  const GraphOptions& options() const { return options_; }

  Tensor parameter(Shape shape, Vector values);
  Tensor constant(Shape shape, Vector values);
  Tensor leaf(Shape shape, Vector values, bool requires_grad);

  /// Appends an operation node. It requires grad iff any input does.
  Tensor record(Shape shape, Vector values, std::span<const Tensor> inputs, BackwardRule rule);

  /// Same values, detached flag set, no gradient path to `x`.
  Tensor detach(const Tensor& x);

  /// Reverse sweep from a one-element `loss`. Clears previous gradients first.
  void backward(const Tensor& loss);

  /// Gradient of `x` after backward(); zeros if nothing reached it.
  Vector grad(const Tensor& x) const;

  std::size_t size() const { return nodes_.size(); }

  // Accessors used by backward rules.
  const Shape& shape(std::size_t id) const { return nodes_[id].shape; }
  const Vector& value(std::size_t id) const { return nodes_[id].value; }
  const Vector& upstream(std::size_t id) const { return nodes_[id].grad; }
  const std::vector<std::size_t>& inputs(std::size_t id) const { return nodes_[id].inputs; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  bool detached(std::size_t id) const { return nodes_[id].detached; }
  /// Zero-initialised gradient buffer of `id`, or nullptr when `id` needs no gradient.
  Vector* grad_sink(std::size_t id);

 private:
  struct Node {
    Shape shape;
    Vector value;
    Vector grad;
    std::vector<std::size_t> inputs;
    BackwardRule rule;
    bool requires_grad = false;
    bool detached = false;
    bool is_leaf = false;
  };

  Tensor append(Node node);

  GraphOptions options_;
  std::vector<Node> nodes_;
};

}  // namespace bft
