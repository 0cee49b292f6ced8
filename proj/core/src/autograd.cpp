#include "remotenet/autograd.hpp"

#include <unordered_set>

namespace remotenet {

std::string shape_str(const Shape& shape) {
  std::string s = "(";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + ")";
}

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

template <typename T>
void backward(const Var<T>& root) {
  if (root.value().numel() != 1) {
    throw ShapeError("backward root must be a scalar, got " + shape_str(root.shape()));
  }
  if (!root.requires_grad()) return;

  // Iterative post-order DFS; reversed it is a valid topological order.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, size_t>> stack{{root.node().get(), 0}};
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node()->grad_buffer().fill(T(1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>& n = **it;
    if (n.backward_fn && !n.grad.empty()) n.backward_fn(n);
  }
}

template void backward<float>(const Var<float>&);
template void backward<double>(const Var<double>&);

}  // namespace remotenet
