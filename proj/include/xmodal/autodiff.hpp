#pragma once

// Minimal reverse-mode automatic differentiation over Tensor values.
//
// A Var is a shared handle to a graph node. Operations build nodes that keep
// their parents alive and a closure that pushes the node's gradient back into
// the parents. backward() orders the graph topologically from the root and
// runs the closures in reverse. Parameters are leaves that outlive graphs;
// their gradients accumulate until zero_grad().

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "xmodal/tensor.hpp"

namespace xmodal {

template <typename T>
struct Node;

template <typename T>
using Var = std::shared_ptr<Node<T>>;

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  std::vector<Var<T>> parents;
  std::function<void(Node&)> backward_fn;
  bool requires_grad = false;

  const Shape& shape() const { return value.shape(); }

  /// Gradient buffer, zero-initialised on first use.
  Tensor<T>& grad_buffer() {
    if (grad.empty() && !value.empty()) grad = Tensor<T>(value.shape());
    return grad;
  }

  void zero_grad() { grad = Tensor<T>(); }
};

namespace detail {
inline bool& grad_disabled() {
  thread_local bool disabled = false;
  return disabled;
}
}  // namespace detail

/// Disables graph recording on this thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_disabled()) { detail::grad_disabled() = true; }
  ~NoGradGuard() { detail::grad_disabled() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename T>
Var<T> constant(Tensor<T> value) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  return n;
}

template <typename T>
Var<T> leaf(Tensor<T> value, bool requires_grad = true) {
  auto n = constant(std::move(value));
  n->requires_grad = requires_grad;
  return n;
}

/// Creates an op node. The closure receives the node; its parents are in
/// node.parents in the order given here.
template <typename T>
Var<T> make_op(Tensor<T> value, std::vector<Var<T>> parents, std::function<void(Node<T>&)> fn) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  bool any = false;
  for (const auto& p : parents) any = any || p->requires_grad;
  if (any && !detail::grad_disabled()) {
    n->requires_grad = true;
    n->parents = std::move(parents);
    n->backward_fn = std::move(fn);
  }
  return n;
}

/// Runs reverse-mode accumulation from a scalar root (seed gradient 1).
template <typename T>
void backward(const Var<T>& root) {
  if (root->value.size() != 1) throw ShapeError("backward() needs a scalar root");
  if (!root->requires_grad) return;

  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.get(), 0}};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* p = node->parents[next++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
  // Intermediate gradients are dead after the sweep; leaves keep theirs.
  for (Node<T>* n : order)
    if (n->backward_fn) n->grad = Tensor<T>();
}

}  // namespace xmodal
