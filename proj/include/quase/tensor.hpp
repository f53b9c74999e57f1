#pragma once

// Dense float32 tensors with reverse-mode automatic differentiation.
// Tensors are value handles onto shared storage; operations on them build a
// graph of backward closures when grad recording is enabled. Inference-mode
// forwards (NoGradGuard) allocate no graph nodes at all.

#include <atomic>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "quase/error.hpp"
#include "quase/rng.hpp"

namespace quase {

struct TensorImpl;

namespace autograd {

inline bool& grad_mode_ref() {
  thread_local bool enabled = true;
  return enabled;
}

inline bool grad_enabled() { return grad_mode_ref(); }

// RAII scope that disables graph recording.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(grad_mode_ref()) { grad_mode_ref() = false; }
  ~NoGradGuard() { grad_mode_ref() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

inline std::atomic<std::uint64_t>& node_counter() {
  static std::atomic<std::uint64_t> counter{0};
  return counter;
}

// Total graph nodes allocated since process start; tests diff this across a
// forward pass to prove inference mode records nothing.
inline std::uint64_t nodes_created() { return node_counter().load(); }

}  // namespace autograd

struct GraphNode {
  std::uint64_t id = 0;
  std::vector<std::shared_ptr<TensorImpl>> parents;
  // Reads the owning tensor's grad and accumulates into the parents' grads.
  std::function<void(TensorImpl&)> backward;
};

struct TensorImpl {
  std::vector<int> shape;
  std::vector<float> data;
  bool requires_grad = false;
  std::vector<float> grad;  // empty until backward first touches it
  std::unique_ptr<GraphNode> node;
};

inline std::size_t shape_numel(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

inline std::string shape_to_string(const std::vector<int>& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

class Tensor {
 public:
  Tensor() = default;

  static Tensor from(std::vector<int> shape, std::vector<float> data,
                     bool requires_grad = false) {
    if (shape_numel(shape) != data.size()) {
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_to_string(shape));
    }
    for (int d : shape) {
      if (d < 0) throw ShapeError("negative extent in shape " + shape_to_string(shape));
    }
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
  }

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false) {
    const std::size_t n = shape_numel(shape);
    return from(std::move(shape), std::vector<float>(n, 0.0f), requires_grad);
  }

  static Tensor ones(std::vector<int> shape, bool requires_grad = false) {
    const std::size_t n = shape_numel(shape);
    return from(std::move(shape), std::vector<float>(n, 1.0f), requires_grad);
  }

  static Tensor full(std::vector<int> shape, float value, bool requires_grad = false) {
    const std::size_t n = shape_numel(shape);
    return from(std::move(shape), std::vector<float>(n, value), requires_grad);
  }

  static Tensor scalar(float value, bool requires_grad = false) {
    return from({}, {value}, requires_grad);
  }

  static Tensor randn(std::vector<int> shape, Rng& rng, float stddev = 1.0f,
                      bool requires_grad = false) {
    std::vector<float> data(shape_numel(shape));
    for (float& v : data) v = rng.normal(0.0f, stddev);
    return from(std::move(shape), std::move(data), requires_grad);
  }

  static Tensor uniform(std::vector<int> shape, Rng& rng, float lo, float hi,
                        bool requires_grad = false) {
    std::vector<float> data(shape_numel(shape));
    for (float& v : data) v = rng.uniform(lo, hi);
    return from(std::move(shape), std::move(data), requires_grad);
  }

  bool defined() const { return impl_ != nullptr; }
  const std::vector<int>& shape() const { return impl_->shape; }
  int rank() const { return static_cast<int>(impl_->shape.size()); }
  int dim(int axis) const { return impl_->shape[static_cast<std::size_t>(axis)]; }
  std::size_t numel() const { return impl_->data.size(); }

  const std::vector<float>& data() const { return impl_->data; }
  // In-place access; intended for leaf tensors (parameters, test inputs).
  std::vector<float>& mutable_data() { return impl_->data; }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool v) {
    if (impl_->node) throw ContractError("set_requires_grad only applies to leaf tensors");
    impl_->requires_grad = v;
  }

  bool has_grad() const { return !impl_->grad.empty(); }
  const std::vector<float>& grad() const { return impl_->grad; }
  void zero_grad() { impl_->grad.clear(); }

  std::uint64_t node_id() const { return impl_->node ? impl_->node->id : 0; }

  float item() const {
    if (numel() != 1) {
      throw ContractError("item() requires a single-element tensor, got shape " +
                          shape_to_string(impl_->shape));
    }
    return impl_->data[0];
  }

  // Same values, detached from the graph.
  Tensor detach() const {
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = impl_->shape;
    impl->data = impl_->data;
    return Tensor(std::move(impl));
  }

  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<TensorImpl> impl_;
};

namespace detail {

inline void accumulate_grad(TensorImpl& t, const std::vector<float>& g) {
  if (!t.requires_grad && !t.node) return;
  if (t.grad.empty()) t.grad.assign(t.data.size(), 0.0f);
  for (std::size_t i = 0; i < g.size(); ++i) t.grad[i] += g[i];
}

}  // namespace detail

// Result construction shared by every op: records a graph node only when grad
// mode is on and some input can take a gradient.
inline Tensor make_op_result(std::vector<int> shape, std::vector<float> data,
                             const std::vector<Tensor>& inputs,
                             std::function<void(TensorImpl&)> backward) {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  if (autograd::grad_enabled()) {
    std::vector<std::shared_ptr<TensorImpl>> parents;
    for (const Tensor& t : inputs) {
      if (t.impl() && (t.impl()->requires_grad || t.impl()->node)) {
        parents.push_back(t.impl());
      }
    }
    if (!parents.empty()) {
      impl->requires_grad = true;
      impl->node = std::make_unique<GraphNode>();
      impl->node->id = ++autograd::node_counter();
      impl->node->parents = std::move(parents);
      impl->node->backward = std::move(backward);
    }
  }
  return Tensor(std::move(impl));
}

// Reverse-mode sweep from a scalar loss. Gradients accumulate into every
// requires_grad tensor reachable from the loss; repeated calls without
// zero_grad() keep accumulating.
inline void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward requires a scalar loss");
  }
  TensorImpl* root = loss.impl().get();
  if (!root->node) {
    if (root->requires_grad) {
      detail::accumulate_grad(*root, {1.0f});
      return;
    }
    throw ContractError("backward requires a loss on an active graph");
  }

  // Iterative DFS postorder following parent edges; reversed it yields an
  // order where every consumer runs before its producers.
  std::vector<TensorImpl*> order;
  std::vector<std::pair<TensorImpl*, std::size_t>> stack;
  std::unordered_set<TensorImpl*> visited;
  stack.emplace_back(root, 0);
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, next_parent] = stack.back();
    if (next_parent < node->node->parents.size()) {
      TensorImpl* p = node->node->parents[next_parent].get();
      ++next_parent;
      if (p->node && visited.insert(p).second) {
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  detail::accumulate_grad(*root, {1.0f});
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl* t = *it;
    if (t->grad.empty()) continue;  // no gradient flowed into this subgraph
    if (t->node->backward) t->node->backward(*t);
  }
}

}  // namespace quase
