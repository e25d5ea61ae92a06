#pragma once

#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "accentctc/tensor.hpp"

namespace accentctc {

/// A named trainable tensor living outside any graph. `grad` is filled by
/// Graph::accumulate_parameter_grads and cleared by zero_grad.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  bool trainable = true;

  Parameter() = default;
  Parameter(std::string n, Tensor<T> v)
      : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

  void zero_grad() { grad.fill(T(0)); }
};

template <typename T>
class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Graph<T>* graph, std::size_t id) : graph_(graph), id_(id) {}

  Graph<T>& graph() const { return *graph_; }
  std::size_t id() const { return id_; }
  const Tensor<T>& value() const { return graph_->value(id_); }
  const Shape& shape() const { return value().shape(); }
  std::size_t dim(std::size_t axis) const { return value().dim(axis); }
  std::size_t size() const { return value().size(); }
  bool requires_grad() const { return graph_->requires_grad(id_); }
  T item() const { return value().item(); }

  /// Gradient buffer after backward (zeros if the node was never reached).
  Tensor<T> grad() const { return graph_->grad_tensor(id_); }

 private:
  Graph<T>* graph_ = nullptr;
  std::size_t id_ = 0;
};

/// Reverse-mode tape. Nodes are appended in creation order, which is a
/// topological order; backward walks them in reverse.
template <typename T>
class Graph {
 public:
  /// Called with the graph and the id of the node being differentiated.
  using BackwardFn = std::function<void(Graph&, std::size_t)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var<T> constant(Tensor<T> value) {
    return push(std::move(value), false, nullptr, nullptr);
  }

  /// A tracked leaf (e.g. the point of a gradient check).
  Var<T> input(Tensor<T> value, bool requires_grad = true) {
    return push(std::move(value), requires_grad, nullptr, nullptr);
  }

  /// Leaf bound to a parameter; repeated calls return the same node.
  Var<T> param(Parameter<T>& p) {
    if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) {
      return Var<T>(this, it->second);
    }
    Var<T> v = push(p.value, p.trainable, nullptr, &p);
    param_nodes_.emplace(&p, v.id());
    return v;
  }

  /// Records an op output. `backward` is dropped when no input needs grad.
  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs,
                BackwardFn backward) {
    bool needs = false;
    for (const Var<T>& v : inputs) needs = needs || requires_grad(v.id());
    if (value.has_nan()) {
      throw NumericError("NaN produced in forward pass (node " +
                         std::to_string(nodes_.size()) + ")");
    }
    return push(std::move(value), needs, needs ? std::move(backward) : nullptr,
                nullptr);
  }

  const Tensor<T>& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Mutable gradient buffer of a node, allocated as zeros on first use.
  std::vector<T>& grad(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad.assign(n.value.size(), T(0));
    return n.grad;
  }
  std::vector<T>& grad(const Var<T>& v) { return grad(v.id()); }

  Tensor<T> grad_tensor(std::size_t id) const {
    const Node& n = nodes_[id];
    if (n.grad.empty()) return Tensor<T>(n.value.shape());
    return Tensor<T>(n.value.shape(), n.grad);
  }

  void backward(const Var<T>& loss) {
    if (loss.size() != 1) {
      throw UsageError("backward() needs a scalar loss, got shape " +
                       shape_string(loss.shape()));
    }
    for (Node& n : nodes_) n.grad.clear();
    grad(loss.id())[0] = T(1);
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.backward || n.grad.empty()) continue;
      n.backward(*this, i);
    }
    for (const Node& n : nodes_) {
      for (T g : n.grad) {
        if (!std::isfinite(g)) {
          throw NumericError("non-finite gradient in backward pass");
        }
      }
    }
  }

  /// Adds leaf gradients into each bound Parameter::grad, in node order.
  void accumulate_parameter_grads() const {
    for (const Node& n : nodes_) {
      if (n.param == nullptr || !n.requires_grad || n.grad.empty()) continue;
      auto dst = n.param->grad.data();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += n.grad[i];
    }
  }

 private:
  struct Node {
    Tensor<T> value;
    std::vector<T> grad;
    bool requires_grad = false;
    BackwardFn backward;
    Parameter<T>* param = nullptr;
  };

  Var<T> push(Tensor<T> value, bool requires_grad, BackwardFn backward,
              Parameter<T>* param) {
    nodes_.push_back(
        Node{std::move(value), {}, requires_grad, std::move(backward), param});
    return Var<T>(this, nodes_.size() - 1);
  }

  // deque keeps references to earlier nodes valid while new ones are pushed.
  std::deque<Node> nodes_;
  std::unordered_map<const Parameter<T>*, std::size_t> param_nodes_;
};

}  // namespace accentctc
