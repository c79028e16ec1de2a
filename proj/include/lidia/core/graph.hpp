#pragma once

#include <algorithm>
#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "lidia/core/tensor.hpp"

namespace lidia {

template <class T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // allocated on first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node<T>>> inputs;
  std::function<void(Node<T>&)> backward;

  Tensor<T>& ensure_grad() {
    if (!grad.defined()) grad = Tensor<T>(value.shape());
    return grad;
  }
};

/// Handle to a node in the computation graph. Cheap to copy.
template <class T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<T>> n) : node(std::move(n)) {}

  static Var leaf(Tensor<T> value, bool requires_grad = false) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    return Var(std::move(n));
  }

  bool defined() const { return static_cast<bool>(node); }
  const Tensor<T>& val() const { return node->value; }
  Tensor<T>& val() { return node->value; }
  const Tensor<T>& grad() const { return node->grad; }
  bool requires_grad() const { return node && node->requires_grad; }
  T scalar() const { return node->value[0]; }

  std::shared_ptr<Node<T>> node;
};

namespace detail {
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

/// Disables graph construction within scope (inference mode).
struct NoGradGuard {
  NoGradGuard() : prev_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = prev_; }

 private:
  bool prev_;
};

inline bool grad_enabled() { return detail::grad_mode(); }

/// Accumulate g into the gradient of `in` if it participates in autodiff.
template <class T>
void accum_grad(Node<T>& in, const Tensor<T>& g) {
  if (!in.requires_grad) return;
  Tensor<T>& dst = in.ensure_grad();
  const T* s = g.data();
  T* d = dst.data();
  int64_t n = dst.numel();
  for (int64_t i = 0; i < n; ++i) d[i] += s[i];
}

template <class T>
Var<T> make_op(Tensor<T> value, std::initializer_list<Var<T>> ins,
               std::function<void(Node<T>&)> bwd) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  bool rg = false;
  for (const auto& v : ins) rg = rg || (v.node && v.node->requires_grad);
  if (rg && grad_enabled()) {
    n->requires_grad = true;
    for (const auto& v : ins) n->inputs.push_back(v.node);
    n->backward = std::move(bwd);
  }
  return Var<T>(std::move(n));
}

/// Reverse-mode sweep from a scalar root. Seeds droot = 1 and accumulates
/// gradients into every reachable requires_grad node (leaf grads persist
/// until explicitly cleared, enabling cross-case accumulation).
template <class T>
void backward(const Var<T>& root) {
  if (!root.defined() || !root.node->requires_grad) return;
  if (root.node->value.numel() != 1)
    throw std::logic_error("backward: root must be a scalar");

  // Iterative post-order DFS for topological order.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, size_t>> stack;
  stack.emplace_back(root.node.get(), 0);
  seen.insert(root.node.get());
  while (!stack.empty()) {
    auto& [n, idx] = stack.back();
    if (idx < n->inputs.size()) {
      Node<T>* child = n->inputs[idx++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  root.node->ensure_grad().fill(T(0));
  root.node->grad[0] = T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward && n->grad.defined()) n->backward(*n);
  }
}

}  // namespace lidia
