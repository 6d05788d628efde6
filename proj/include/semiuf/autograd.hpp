#pragma once

// Minimal tape-free reverse-mode autodiff over Tensor<T>. Every op result
// keeps shared pointers to its parents plus a closure that pushes the
// node's gradient back into them; backward() walks the graph in reverse
// topological order.

#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <vector>

#include "semiuf/tensor.hpp"

namespace semiuf {

template <class T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  Tensor<T>& grad_buffer() {
    if (grad.empty()) grad = Tensor<T>(value.shape(), T(0));
    return grad;
  }
};

// Thread-local switch that stops ops from recording backward closures.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
  static bool active();

 private:
  bool previous_;
};

template <class T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Var leaf(Tensor<T> value, bool requires_grad = false) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    return Var(std::move(n));
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  int dim(int i) const { return node_->value.dim(i); }
  const Tensor<T>& grad() const { return node_->grad; }
  Tensor<T>& mutable_grad() { return node_->grad_buffer(); }
  bool has_grad() const { return !node_->grad.empty(); }
  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool r) { node_->requires_grad = r; }
  void zero_grad() { node_->grad = Tensor<T>(); }
  const std::shared_ptr<Node<T>>& node() const { return node_; }

  // Value of a single-element tensor.
  T item() const {
    if (node_->value.size() != 1) throw ShapeError("item() on non-scalar " + shape_str(shape()));
    return node_->value[0];
  }

  Var detach() const { return leaf(node_->value, false); }

  // Seeds d(self)/d(self) = 1 and propagates. Self must be a scalar.
  void backward() const;

 private:
  std::shared_ptr<Node<T>> node_;
};

// Creates an op result. The closure is dropped when no parent needs a gradient.
template <class T>
Var<T> make_result(Tensor<T> value, std::vector<Var<T>> parents,
                   std::function<void(Node<T>&)> backward_fn) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  bool any = false;
  if (!NoGradGuard::active()) {
    for (const auto& p : parents) any = any || (p.defined() && p.requires_grad());
  }
  if (any) {
    n->requires_grad = true;
    for (auto& p : parents) n->parents.push_back(p.defined() ? p.node() : nullptr);
    n->backward_fn = std::move(backward_fn);
  }
  return Var<T>(std::move(n));
}

template <class T>
void Var<T>::backward() const {
  if (node_->value.size() != 1) throw ShapeError("backward() requires a scalar output");
  if (!node_->requires_grad) return;
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  // Iterative post-order DFS.
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, idx] = stack.back();
    if (idx < n->parents.size()) {
      Node<T>* p = n->parents[idx++].get();
      if (p && p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  node_->grad_buffer().fill(T(0));
  node_->grad[0] = T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
}

// Accumulates into a parent's gradient only when that parent wants one.
template <class T>
inline Tensor<T>* parent_grad(Node<T>& n, std::size_t i) {
  auto& p = n.parents[i];
  if (!p || !p->requires_grad) return nullptr;
  return &p->grad_buffer();
}

}  // namespace semiuf
