#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "misod/core/tensor.hpp"

namespace misod {

// Reverse-mode autograd over a dynamically recorded tape. Each op produces a
// Node whose backprop closure reads the node's grad and accumulates into the
// parents' grads. With grads disabled (or no parent requiring them) ops emit
// leaf nodes with no tape, so inference frees intermediates as they go out of
// scope.

struct GradMode {
  static bool& enabled() {
    thread_local bool flag = true;
    return flag;
  }
};

class NoGradGuard {
 public:
  NoGradGuard() : prev_(GradMode::enabled()) { GradMode::enabled() = false; }
  ~NoGradGuard() { GradMode::enabled() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // allocated on first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backprop;

  void ensure_grad() {
    if (grad.numel() != value.numel()) grad = Tensor<T>::zeros_like(value);
  }
  void accumulate(const Tensor<T>& contribution) {
    ensure_grad();
    grad += contribution;
  }
};

template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<T> v, bool requires_grad = false)
      : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(v);
    node_->requires_grad = requires_grad;
  }
  explicit Var(std::shared_ptr<Node<T>> n) : node_(std::move(n)) {}

  bool defined() const { return static_cast<bool>(node_); }
  const std::shared_ptr<Node<T>>& node() const { return node_; }

  Tensor<T>& value() { return node_->value; }
  const Tensor<T>& value() const { return node_->value; }
  const Shape4& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }

  const Tensor<T>& grad() const {
    internal_check(node_ != nullptr, "grad() on undefined Var");
    const_cast<Node<T>*>(node_.get())->ensure_grad();
    return node_->grad;
  }
  void zero_grad() {
    if (node_) node_->grad = Tensor<T>();
  }

  T item() const { return node_->value.item(); }

  // Reverse pass from this (scalar) node through the recorded tape.
  void backward() {
    internal_check(node_ && node_->value.numel() == 1,
                   "backward() needs a scalar root");
    std::vector<Node<T>*> order = topo_order(node_.get());
    node_->ensure_grad();
    node_->grad.fill(T(1));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node<T>* n = *it;
      if (n->backprop && n->requires_grad) {
        n->ensure_grad();
        n->backprop(*n);
      }
    }
  }

 private:
  static std::vector<Node<T>*> topo_order(Node<T>* root) {
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> visited;
    // iterative DFS; second visit emits the node
    std::vector<std::pair<Node<T>*, bool>> stack{{root, false}};
    while (!stack.empty()) {
      auto [n, emit] = stack.back();
      stack.pop_back();
      if (emit) {
        order.push_back(n);
        continue;
      }
      if (!visited.insert(n).second) continue;
      stack.push_back({n, true});
      for (const auto& p : n->parents) {
        if (p && p->requires_grad && !visited.contains(p.get())) {
          stack.push_back({p.get(), false});
        }
      }
    }
    return order;
  }

  std::shared_ptr<Node<T>> node_;
};

// Builds an op result node. `parents` lists the differentiable inputs; the
// closure must accumulate into exactly those.
template <typename T>
Var<T> make_op(Tensor<T> out, std::vector<Var<T>> parents,
               std::function<void(Node<T>&)> backprop) {
  bool track = GradMode::enabled();
  bool any = false;
  if (track) {
    for (const auto& p : parents) any = any || p.requires_grad();
  }
  if (!track || !any) return Var<T>(std::move(out));

  auto node = std::make_shared<Node<T>>();
  node->value = std::move(out);
  node->requires_grad = true;
  node->parents.reserve(parents.size());
  for (auto& p : parents) node->parents.push_back(p.node());
  node->backprop = std::move(backprop);
  return Var<T>(node);
}

}  // namespace misod
