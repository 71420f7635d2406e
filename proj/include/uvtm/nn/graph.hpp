#pragma once

#include <cstdint>
#include <functional>
#include <unordered_map>
#include <vector>

#include "uvtm/nn/param_store.hpp"

namespace uvtm::nn {

/// Handle to a node of a Graph. id < 0 means "absent".
struct Var {
  int id = -1;
  explicit operator bool() const { return id >= 0; }
};

/// Reverse-mode tape. Nodes are appended in topological order; backward() walks
/// them in reverse and finally adds parameter-leaf gradients into the store.
template <typename T>
class Graph {
 public:
  using Matrix = Mat<T>;
  using Backward = std::function<void(Graph&, int self)>;

  explicit Graph(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  bool grad_enabled() const { return grad_enabled_; }

  Var constant(Matrix value) { return push(std::move(value), false, nullptr, nullptr); }

  /// Leaf bound to a parameter; repeated calls return the same node.
  Var param(Parameter<T>& p) {
    const auto it = param_ids_.find(&p);
    if (it != param_ids_.end()) return Var{it->second};
    const Var v = push(p.value, grad_enabled_, nullptr, &p);
    param_ids_.emplace(&p, v.id);
    return v;
  }

  /// Appends an op result. The backward closure is kept only when some parent
  /// needs a gradient.
  Var emit(Matrix value, std::initializer_list<Var> parents, Backward backward) {
    bool needs = false;
    if (grad_enabled_) {
      for (Var p : parents)
        if (p && nodes_[static_cast<std::size_t>(p.id)].requires_grad) needs = true;
    }
    return push(std::move(value), needs, needs ? std::move(backward) : nullptr, nullptr);
  }

  /// Variant for ops with a runtime-sized parent list.
  Var emit_many(Matrix value, const std::vector<Var>& parents, Backward backward) {
    bool needs = false;
    if (grad_enabled_) {
      for (Var p : parents)
        if (p && nodes_[static_cast<std::size_t>(p.id)].requires_grad) needs = true;
    }
    return push(std::move(value), needs, needs ? std::move(backward) : nullptr, nullptr);
  }

  const Matrix& value(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].value; }
  Matrix& grad(Var v) { return nodes_[static_cast<std::size_t>(v.id)].grad; }
  Matrix& grad(int id) { return nodes_[static_cast<std::size_t>(id)].grad; }
  bool requires_grad(Var v) const { return v && nodes_[static_cast<std::size_t>(v.id)].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Fingerprint of the on/off pattern of every piecewise op evaluated so far.
  /// Finite differences are only meaningful when it does not change.
  std::uint64_t pattern() const { return pattern_; }
  void mix_pattern(std::uint64_t h) { pattern_ = (pattern_ ^ h) * 1099511628211ull; }

  /// Backpropagates from a 1x1 root with unit seed.
  void backward(Var root) {
    if (value(root).size() != 1) throw Error("neuralcore", "backward root must be a scalar");
    backward(root, Matrix::Ones(1, 1));
  }

  void backward(Var root, const Matrix& seed) {
    if (!grad_enabled_) throw Error("neuralcore", "graph was built without gradients");
    for (auto& n : nodes_)
      if (n.requires_grad) n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
    auto& r = nodes_[static_cast<std::size_t>(root.id)];
    if (!r.requires_grad) return;
    r.grad += seed;
    for (int i = root.id; i >= 0; --i) {
      auto& n = nodes_[static_cast<std::size_t>(i)];
      if (n.requires_grad && n.backward) n.backward(*this, i);
    }
    for (auto& n : nodes_)
      if (n.param && n.requires_grad) n.param->grad += n.grad;
  }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    Backward backward;
    Parameter<T>* param = nullptr;
  };

  Var push(Matrix value, bool requires_grad, Backward backward, Parameter<T>* param) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.backward = std::move(backward);
    n.param = param;
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  bool grad_enabled_;
  std::uint64_t pattern_ = 1469598103934665603ull;
  std::vector<Node> nodes_;
  std::unordered_map<const Parameter<T>*, int> param_ids_;
};

}  // namespace uvtm::nn
