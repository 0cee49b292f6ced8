#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "remotenet/tensor.hpp"

namespace remotenet {

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  /// Lazily-allocated gradient buffer matching `value`.
  Tensor<T>& grad_buffer() {
    if (grad.empty()) grad = Tensor<T>(value.shape());
    return grad;
  }
};

/// Handle to a node in the reverse-mode graph. Copies alias the same node.
template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<T> value, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  int64_t dim(int i) const { return node_->value.dim(i); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool defined() const { return static_cast<bool>(node_); }

  /// Gradient accumulated by backward(); zeros if nothing flowed here.
  Tensor<T> grad() const { return node_->grad.empty() ? Tensor<T>(shape()) : node_->grad; }
  void zero_grad() { node_->grad = Tensor<T>(); }

  const std::shared_ptr<Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

bool grad_enabled();

/// Disables graph recording for its lifetime (inference, optimizer updates).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Builds the output node of an op. When recording is off or no input needs a
/// gradient the backward closure is dropped and the node is a constant.
template <typename T>
Var<T> make_result(Tensor<T> value, std::vector<Var<T>> inputs, std::function<void(Node<T>&)> backward_fn) {
  Var<T> out(std::move(value));
  if (!grad_enabled()) return out;
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (!any) return out;
  auto& node = *out.node();
  node.requires_grad = true;
  for (auto& in : inputs) node.parents.push_back(in.node());
  node.backward_fn = std::move(backward_fn);
  return out;
}

/// Seeds d(root)/d(root) = 1 (root must be a single element) and propagates
/// gradients to every reachable node in reverse topological order.
template <typename T>
void backward(const Var<T>& root);

}  // namespace remotenet
