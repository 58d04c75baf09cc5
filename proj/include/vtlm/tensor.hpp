#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "vtlm/error.hpp"

namespace vtlm {

using Index = std::int64_t;
using Shape = std::vector<Index>;

inline Index numel_of(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

namespace detail {
inline thread_local int no_grad_depth = 0;
}

inline bool grad_enabled() { return detail::no_grad_depth == 0; }

/// Disables graph recording for its lifetime (evaluation, decoding).
class NoGradGuard {
 public:
  NoGradGuard() { ++detail::no_grad_depth; }
  ~NoGradGuard() { --detail::no_grad_depth; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

template <class T>
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backward_fn;

  std::vector<T>& ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

/// Dense row-major tensor with reverse-mode autodiff.
///
/// A Tensor is a cheap handle; copies alias the same storage. Results of
/// differentiable ops keep their inputs alive until backward() releases the
/// graph.
template <class T>
class Tensor {
 public:
  using value_type = T;
  using Node = TensorNode<T>;

  Tensor() = default;

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
      : node_(std::make_shared<Node>()) {
    for (Index e : shape) {
      if (e <= 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
    }
    if (numel_of(shape) != static_cast<Index>(data.size())) {
      throw ShapeError("shape " + shape_str(shape) + " does not match " +
                       std::to_string(data.size()) + " values");
    }
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = static_cast<std::size_t>(numel_of(shape));
    return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
  }

  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    const auto n = static_cast<std::size_t>(numel_of(shape));
    return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
  }

  static Tensor scalar(T value, bool requires_grad = false) {
    return Tensor({1}, {value}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  Index rank() const { return static_cast<Index>(node_->shape.size()); }
  Index dim(Index i) const { return node_->shape.at(static_cast<std::size_t>(i < 0 ? rank() + i : i)); }
  Index numel() const { return static_cast<Index>(node_->data.size()); }
  /// Product of all extents but the last.
  Index rows() const { return numel() / dim(-1); }

  std::span<T> data() { return node_->data; }
  std::span<const T> data() const { return node_->data; }
  std::vector<T>& values() { return node_->data; }
  const std::vector<T>& values() const { return node_->data; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<T> grad() { return node_->grad; }
  std::span<const T> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  T item() const {
    if (numel() != 1) throw UsageError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }

  T& at(Index flat) { return node_->data.at(static_cast<std::size_t>(flat)); }
  T at(Index flat) const { return node_->data.at(static_cast<std::size_t>(flat)); }

  /// Deep copy without graph history.
  Tensor clone() const { return Tensor(shape(), values(), requires_grad()); }

  /// Populates .grad of every reachable leaf that requires it, then
  /// releases the recorded graph.
  void backward() {
    if (numel() != 1) {
      throw UsageError("backward() needs a scalar loss, got " + shape_str(shape()));
    }
    const auto order = topological_order();
    node_->ensure_grad()[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node& n = **it;
      if (n.backward_fn && !n.grad.empty()) n.backward_fn(n);
    }
    for (Node* n : order) {
      if (!n->parents.empty()) {
        n->parents.clear();
        n->backward_fn = nullptr;
      }
    }
  }

  std::shared_ptr<Node> node() const { return node_; }

  /// Builds an op result. Graph edges are recorded only when grad mode is
  /// on and some parent requires a gradient.
  static Tensor make_result(Shape shape, std::vector<T> data,
                            std::vector<Tensor> parents,
                            std::function<void(Node&)> backward_fn) {
    Tensor out(std::move(shape), std::move(data));
    if (!grad_enabled()) return out;
    bool any = false;
    for (const auto& p : parents) any = any || p.requires_grad();
    if (!any) return out;
    out.node_->requires_grad = true;
    for (auto& p : parents) out.node_->parents.push_back(p.node_);
    out.node_->backward_fn = std::move(backward_fn);
    return out;
  }

 private:
  std::vector<Node*> topological_order() const {
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
      auto& [n, next] = stack.back();
      if (next < n->parents.size()) {
        Node* p = n->parents[next++].get();
        if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }
    return order;
  }

  std::shared_ptr<Node> node_;
};

/// Element-type conversion, dropping graph history.
template <class U, class T>
Tensor<U> tensor_cast(const Tensor<T>& t) {
  std::vector<U> out(t.values().begin(), t.values().end());
  return Tensor<U>(t.shape(), std::move(out), t.requires_grad());
}

}  // namespace vtlm
