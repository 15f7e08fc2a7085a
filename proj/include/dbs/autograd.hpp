#pragma once

#include <functional>
#include <memory>
#include <stdexcept>
#include <unordered_set>
#include <utility>
#include <vector>

#include "dbs/tensor.hpp"

namespace dbs {

namespace detail {

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

inline bool& training_mode_flag() {
  thread_local bool enabled = false;
  return enabled;
}

template <class T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // empty until something flows back
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Receives the gradient w.r.t. this node's value and pushes into parents.
  std::function<void(const Tensor<T>&)> backward;

  Tensor<T>& grad_buffer() {
    if (grad.empty() && value.numel() > 0) grad = Tensor<T>(value.shape(), T{0});
    if (grad.shape() != value.shape()) grad = Tensor<T>(value.shape(), T{0});
    return grad;
  }
};

}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

// Disables graph recording within a scope (inference, evaluation).
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

inline bool training_mode() { return detail::training_mode_flag(); }

// Switches normalization layers between batch statistics (training) and running statistics
// (evaluation, the default) within a scope.
class TrainingModeGuard {
 public:
  explicit TrainingModeGuard(bool on = true) : prev_(detail::training_mode_flag()) { detail::training_mode_flag() = on; }
  ~TrainingModeGuard() { detail::training_mode_flag() = prev_; }
  TrainingModeGuard(const TrainingModeGuard&) = delete;
  TrainingModeGuard& operator=(const TrainingModeGuard&) = delete;

 private:
  bool prev_;
};

// Handle to a node of a dynamically recorded computation graph. Copies share the node.
template <class T>
class Var {
 public:
  using Node = detail::Node<T>;

  Var() = default;
  explicit Var(Tensor<T> value, bool requires_grad = false) : node_(std::make_shared<Node>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  bool defined() const noexcept { return node_ != nullptr; }
  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  int dim(int i) const { return node_->value.dim(i); }
  bool requires_grad() const noexcept { return node_ && node_->requires_grad; }
  void set_requires_grad(bool r) { node_->requires_grad = r; }

  // Gradient accumulated by the last backward(); zeros when nothing reached this node.
  Tensor<T> grad() const {
    if (node_->grad.empty()) return Tensor<T>(node_->value.shape(), T{0});
    return node_->grad;
  }
  bool has_grad() const noexcept { return node_ && !node_->grad.empty(); }
  void zero_grad() { node_->grad = Tensor<T>(); }

  // Backpropagates from this node. A scalar root is seeded with 1; otherwise a seed is required.
  void backward() const {
    if (node_->value.numel() != 1)
      throw std::logic_error("backward() without a seed requires a scalar root, got " +
                             shape_str(shape()));
    backward(Tensor<T>(shape(), T{1}));
  }
  void backward(const Tensor<T>& seed) const {
    if (seed.shape() != shape()) throw std::invalid_argument("backward seed shape mismatch");
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    // iterative post-order DFS
    std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
      auto& [n, i] = stack.back();
      if (i < n->parents.size()) {
        Node* p = n->parents[i++].get();
        if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }
    Tensor<T>& g = node_->grad_buffer();
    for (std::size_t k = 0; k < g.numel(); ++k) g[k] += seed[k];
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node* n = *it;
      if (n->backward && !n->grad.empty()) n->backward(n->grad);
    }
  }

  // Drops history so the value acts as a fresh leaf.
  Var detach() const { return Var(node_->value, false); }

  std::shared_ptr<Node> node() const { return node_; }

  // Builds an op result. Backward is recorded only when grad mode is on and some input needs it.
  static Var make(Tensor<T> value, std::vector<Var> inputs,
                  std::function<void(const Tensor<T>&)> backward) {
    Var out(std::move(value), false);
    if (!grad_enabled()) return out;
    bool any = false;
    for (const auto& v : inputs) any = any || v.requires_grad();
    if (!any) return out;
    out.node_->requires_grad = true;
    for (auto& v : inputs)
      if (v.defined()) out.node_->parents.push_back(v.node_);
    out.node_->backward = std::move(backward);
    return out;
  }

  // Accumulates into this node's gradient; no-op for nodes outside the graph.
  void accumulate(const Tensor<T>& g) const {
    if (!requires_grad()) return;
    Tensor<T>& buf = node_->grad_buffer();
    const T* src = g.ptr();
    T* dst = buf.ptr();
    for (std::size_t k = 0; k < buf.numel(); ++k) dst[k] += src[k];
  }
  // Direct access for ops that scatter into the gradient buffer; nullptr when not tracked.
  Tensor<T>* grad_sink() const { return requires_grad() ? &node_->grad_buffer() : nullptr; }

 private:
  std::shared_ptr<Node> node_;
};

}  // namespace dbs
