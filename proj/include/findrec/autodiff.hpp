#pragma once

// Reverse-mode differentiation over dense tensors.
//
// Every primitive builds a Node holding its forward value, its parents and a
// gradient rule. `backward` walks the graph in reverse topological order and
// accumulates gradients into every node that requires them. Leaves created
// with requires_grad=true (parameters) keep their gradient between calls
// until `zero_grad` is called on them.

#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "findrec/errors.hpp"
#include "findrec/tensor.hpp"

namespace findrec::ad {

struct Node {
  Tensor value;
  Tensor grad;
  bool has_grad = false;
  bool requires_grad = false;
  std::string op;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  // Gradient buffer, zero-initialized on first use.
  Tensor& grad_buffer() {
    if (!has_grad) {
      grad = Tensor(value.shape(), 0.0);
      has_grad = true;
    }
    return grad;
  }

  void zero_grad() {
    if (has_grad) grad.fill(0.0);
  }
};

namespace detail {
inline bool& grad_enabled_flag() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_enabled_flag(); }

// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_enabled_flag()) { detail::grad_enabled_flag() = false; }
  ~NoGradGuard() { detail::grad_enabled_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t numel() const { return node_->value.numel(); }
  bool requires_grad() const { return node_->requires_grad; }
  bool defined() const { return static_cast<bool>(node_); }

  // Accumulated gradient; zeros when nothing has been accumulated yet.
  Tensor grad() const {
    if (node_->has_grad) return node_->grad;
    return Tensor(node_->value.shape(), 0.0);
  }
  bool has_grad() const { return node_->has_grad; }
  Tensor& grad_buffer() { return node_->grad_buffer(); }
  void zero_grad() { node_->zero_grad(); }

  double item() const { return node_->value.item(); }

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& ptr() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

inline Var leaf(Tensor value, bool requires_grad = false) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  n->op = "leaf";
  return Var(std::move(n));
}

inline Var constant(Tensor value) { return leaf(std::move(value), false); }

inline Var detach(const Var& v) { return constant(v.value()); }

enum class FiniteCheck { Strict, AllowNegInf };

// Registers a primitive result. The gradient rule receives the result node;
// it reads `self.grad` and accumulates into the parents that require grad.
inline Var make_op(std::string op, Tensor value, std::vector<Var> parents,
                   std::function<void(Node&)> backward,
                   FiniteCheck check = FiniteCheck::Strict) {
  for (double v : value.data()) {
    const bool ok = std::isfinite(v) ||
                    (check == FiniteCheck::AllowNegInf && std::isinf(v) && v < 0.0);
    if (!ok) throw NumericalError("non-finite value produced by " + op);
  }
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->op = std::move(op);
  bool req = false;
  if (grad_enabled()) {
    for (const auto& p : parents) req = req || p.requires_grad();
  }
  n->requires_grad = req;
  if (req) {
    n->parents.reserve(parents.size());
    for (const auto& p : parents) n->parents.push_back(p.ptr());
    n->backward = std::move(backward);
  }
  return Var(std::move(n));
}

// Accumulates d(loss)/d(node) into every node reachable from `loss`.
inline void backward(const Var& loss) {
  if (loss.numel() != 1) {
    throw ShapeMismatch("backward requires a scalar loss, got " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) return;

  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(loss.node(), 0);
  seen.insert(loss.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  loss.node()->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->parents.empty()) continue;
    if (!n->backward) throw GraphError("primitive '" + n->op + "' has no gradient rule");
    if (n->has_grad) n->backward(*n);
    if (n != loss.node()) {
      n->grad = Tensor();
      n->has_grad = false;
    }
  }
}

}  // namespace findrec::ad
