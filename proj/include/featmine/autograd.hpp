#pragma once

#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "featmine/tensor.hpp"

namespace featmine {

namespace detail {

inline bool& grad_recording() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

/// Disables graph recording for its lifetime (evaluation, probes).
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_recording()) { detail::grad_recording() = false; }
  ~NoGradGuard() { detail::grad_recording() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename T>
struct Node {
  BasicTensor<T> value;
  BasicTensor<T> grad;  // empty until something flows into it
  bool requires_grad = false;
  bool is_leaf = true;
  bool backward_done = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into the parents.
  std::function<void(Node&)> backward_fn;

  BasicTensor<T>& ensure_grad() {
    if (grad.shape() != value.shape() || grad.empty() != value.empty()) {
      grad = BasicTensor<T>(value.shape());
    }
    return grad;
  }
};

/// Handle to a node in the reverse-mode graph. Copies share the node.
template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(BasicTensor<T> value, bool requires_grad = false)
      : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  const BasicTensor<T>& value() const { return node_->value; }
  BasicTensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return !node_->grad.empty(); }

  /// Gradient buffer; zeros if nothing has flowed into this node yet.
  const BasicTensor<T>& grad() const { return node_->ensure_grad(); }
  BasicTensor<T>& mutable_grad() { return node_->ensure_grad(); }
  void zero_grad() {
    if (!node_->grad.empty()) node_->grad.fill(T(0));
  }

  std::shared_ptr<Node<T>> node() const { return node_; }
  bool defined() const { return static_cast<bool>(node_); }

  /// Builds an interior node. Recording is skipped under NoGradGuard or when
  /// no parent needs a gradient.
  static Var make(BasicTensor<T> value, std::vector<Var> parents,
                  std::function<void(Node<T>&)> backward_fn) {
    if (!value.all_finite()) {
      throw NumericError("non-finite value produced by forward op");
    }
    Var out(std::move(value));
    bool needs = false;
    for (const auto& p : parents) needs = needs || p.requires_grad();
    if (needs && detail::grad_recording()) {
      out.node_->requires_grad = true;
      out.node_->is_leaf = false;
      for (auto& p : parents) out.node_->parents.push_back(p.node_);
      out.node_->backward_fn = std::move(backward_fn);
    }
    return out;
  }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Reverse-mode accumulation from a scalar. Leaf gradients are accumulated
/// (never overwritten), so shared parameters receive the sum over paths.
template <typename T>
void backward(const Var<T>& loss) {
  auto root = loss.node();
  if (!root) throw UsageError("backward on an undefined variable");
  if (root->value.numel() != 1) throw UsageError("backward requires a scalar loss");
  if (root->backward_done) {
    throw UsageError("backward called twice on the same graph; re-run the forward pass");
  }
  if (!root->requires_grad) {
    root->backward_done = true;
    return;
  }

  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.get(), 0}};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* parent = node->parents[next++].get();
      if (parent->requires_grad && !parent->is_leaf && seen.insert(parent).second) {
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->ensure_grad().fill(T(1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* node = *it;
    if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
    if (!node->grad.all_finite()) throw NumericError("non-finite gradient in backward pass");
  }
  // Release interior buffers; the graph is spent.
  for (Node<T>* node : order) {
    node->backward_fn = nullptr;
    node->parents.clear();
    if (node != root.get()) node->grad = BasicTensor<T>();
  }
  root->backward_done = true;
}

/// How a parameter was initialised.
struct InitSpec {
  std::string scheme;  // "he_normal", "uniform_fan_in", "zeros", "ones"
  std::string stream;
  std::uint64_t counter = 0;
};

template <typename T>
struct BasicParameter {
  std::string name;
  Var<T> var;
  InitSpec init;

  BasicParameter() = default;
  BasicParameter(std::string n, BasicTensor<T> value, InitSpec spec = {})
      : name(std::move(n)), var(std::move(value), true), init(std::move(spec)) {}

  const BasicTensor<T>& value() const { return var.value(); }
  BasicTensor<T>& mutable_value() { return var.mutable_value(); }
  const BasicTensor<T>& grad() const { return var.grad(); }
  const Shape& shape() const { return var.shape(); }
};

using Parameter = BasicParameter<float>;

}  // namespace featmine
