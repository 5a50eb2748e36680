#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <vector>

#include "advood/error.hpp"
#include "advood/tensor.hpp"

namespace advood {

class Graph;

// Handle to a node of a Graph. Cheap to copy; valid while the Graph lives.
struct Var {
  Graph* graph = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
  // Accumulated gradient; a zero tensor if backward never reached this node.
  Tensor grad() const;
};

// Receives d(loss)/d(output) and adds d(loss)/d(input_i) into grad_in[i].
// grad_in[i] is null for inputs that do not require gradients.
using BackwardFn =
    std::function<void(const Tensor& grad_out, std::span<Tensor* const> grad_in)>;

// Append-only tape for reverse-mode differentiation. Nodes are stored in
// creation order, so every node's inputs precede it.
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var leaf(Tensor value, bool requires_grad = false) {
    nodes_.push_back(Node{std::move(value), {}, requires_grad, {}, {}});
    return Var{this, nodes_.size() - 1};
  }

  Var constant(Tensor value) { return leaf(std::move(value), false); }

  // Records an operation output. The backward closure is kept only when some
  // input participates in differentiation.
  Var record(Tensor value, std::vector<std::size_t> inputs, BackwardFn fn) {
    bool rg = false;
    for (std::size_t i : inputs) rg = rg || nodes_.at(i).requires_grad;
    if (!value.all_finite()) {
      throw Error("non-finite value produced by graph operation");
    }
    nodes_.push_back(Node{std::move(value), std::move(inputs), rg,
                          rg ? std::move(fn) : BackwardFn{}, {}});
    return Var{this, nodes_.size() - 1};
  }

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

  Tensor grad(std::size_t id) const {
    const Node& n = nodes_.at(id);
    return n.grad.empty() ? Tensor(n.value.shape(), 0.0) : n.grad;
  }

  std::size_t size() const { return nodes_.size(); }

  // Propagates d(loss)/d(node) to every requires_grad ancestor of `loss`,
  // visiting each node once in reverse creation order. Gradients are added to
  // what previous calls accumulated: calling twice doubles them. Use
  // reset_grads() between independent passes.
  void backward(Var loss) {
    if (loss.graph != this) throw Error("backward on a foreign Var");
    const Node& root = nodes_.at(loss.id);
    if (root.value.size() != 1) {
      throw ShapeError("backward requires a scalar loss, got shape " +
                       shape_string(root.value.shape()));
    }
    if (!root.requires_grad) {
      throw Error("backward on a value not connected to any requires_grad leaf");
    }
    std::vector<Tensor> pass(loss.id + 1);
    pass[loss.id] = Tensor(root.value.shape(), 1.0);
    std::vector<Tensor*> slots;
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (pass[i].empty() || !n.backward) continue;
      slots.assign(n.inputs.size(), nullptr);
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        const std::size_t in = n.inputs[k];
        if (!nodes_[in].requires_grad) continue;
        if (pass[in].empty()) pass[in] = Tensor(nodes_[in].value.shape(), 0.0);
        slots[k] = &pass[in];
      }
      n.backward(pass[i], slots);
    }
    for (std::size_t i = 0; i <= loss.id; ++i) {
      if (pass[i].empty()) continue;
      Node& n = nodes_[i];
      if (n.grad.empty()) {
        n.grad = std::move(pass[i]);
      } else {
        auto g = n.grad.data();
        auto p = pass[i].data();
        for (std::size_t j = 0; j < g.size(); ++j) g[j] += p[j];
      }
    }
  }

  void reset_grads() {
    for (Node& n : nodes_) n.grad = Tensor();
  }

 private:
  struct Node {
    Tensor value;
    std::vector<std::size_t> inputs;
    bool requires_grad;
    BackwardFn backward;
    Tensor grad;
  };

  // deque keeps node addresses stable so closures may hold Tensor pointers.
  std::deque<Node> nodes_;
};

inline const Tensor& Var::value() const { return graph->value(id); }
inline bool Var::requires_grad() const { return graph->requires_grad(id); }
inline Tensor Var::grad() const { return graph->grad(id); }

}  // namespace advood
