/* Copyright 2026 The ecglab Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

// Reverse-mode automatic differentiation over dense row-major tensors.
//
// A Tensor is a shared handle to a graph node. Operations in ops.hpp build
// the graph eagerly: values are computed immediately and, when any input
// requires a gradient, the output remembers its parents and a closure that
// pushes the output gradient back onto them. backward() walks the graph in
// reverse topological order and then releases it.

#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "ecglab/errors.hpp"

namespace ecglab {

using Index = std::int64_t;
using Shape = std::vector<Index>;

inline Index numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

/// Disables graph recording for the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

inline bool grad_enabled() { return detail::grad_mode(); }

/// Storage with Eigen's maximum alignment. Vectorised reductions peel
/// differently on differently aligned buffers, so fixed alignment is what
/// makes repeated runs bitwise identical.
template <typename T>
using Buffer = std::vector<T, Eigen::aligned_allocator<T>>;

template <typename T>
struct Node {
  Shape shape;
  Buffer<T> value;
  Buffer<T> grad;
  bool has_grad = false;
  bool requires_grad = false;
  bool is_leaf = true;
  bool retain_grad = false;
  bool consumed = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  T* grad_data() {
    if (!has_grad) {
      grad.assign(value.size(), T(0));
      has_grad = true;
    }
    return grad.data();
  }
};

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = std::make_shared<Node<T>>();
    n->value.assign(static_cast<std::size_t>(numel(shape)), T(0));
    n->shape = std::move(shape);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor full(Shape shape, T v, bool requires_grad = false) {
    auto t = zeros(std::move(shape), requires_grad);
    std::fill(t.node_->value.begin(), t.node_->value.end(), v);
    return t;
  }

  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false) {
    if (static_cast<Index>(values.size()) != numel(shape))
      throw ShapeError("Tensor::from: " + std::to_string(values.size()) + " values do not fill shape " +
                       shape_str(shape));
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->value.assign(values.begin(), values.end());
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor scalar(T v, bool requires_grad = false) { return from({1}, {v}, requires_grad); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  Index dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t rank() const { return node_->shape.size(); }
  Index size() const { return static_cast<Index>(node_->value.size()); }

  std::span<T> data() { return node_->value; }
  std::span<const T> data() const { return node_->value; }
  T* ptr() { return node_->value.data(); }
  const T* ptr() const { return node_->value.data(); }

  /// Gradient buffer; empty when nothing has flowed into this tensor yet.
  std::span<const T> grad() const {
    if (!node_->has_grad) return {};
    return node_->grad;
  }
  std::span<T> mutable_grad() { return {node_->grad_data(), node_->value.size()}; }
  bool has_grad() const { return node_->has_grad; }

  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->is_leaf; }

  void set_requires_grad(bool on) {
    if (!node_->is_leaf) throw StateError("requires_grad can only be toggled on leaf tensors");
    node_->requires_grad = on;
  }

  /// Keeps the gradient of a non-leaf tensor after backward().
  void retain_grad() { node_->retain_grad = true; }

  void zero_grad() {
    if (node_->has_grad) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
  }

  T item() const {
    if (node_->value.size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }

  /// Detached copy sharing no graph state.
  Tensor clone() const { return from(shape(), node_->value, false); }

  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

namespace detail {

template <typename T>
Tensor<T> make_output(Shape shape) {
  return Tensor<T>::zeros(std::move(shape));
}

/// True when an op over `inputs` will be recorded for backward.
template <typename T>
bool will_record(std::initializer_list<const Tensor<T>*> inputs) {
  if (!grad_enabled()) return false;
  for (const auto* in : inputs)
    if (in->defined() && in->requires_grad()) return true;
  return false;
}

/// Wires `out` into the graph if gradients are being recorded and any input
/// needs one. `fn` receives the output node and accumulates into parents.
template <typename T, typename Fn>
void attach(Tensor<T>& out, std::initializer_list<const Tensor<T>*> inputs, Fn&& fn) {
  if (!grad_enabled()) return;
  bool any = false;
  for (const auto* in : inputs) any = any || (in->defined() && in->requires_grad());
  if (!any) return;
  auto* node = out.node();
  node->requires_grad = true;
  node->is_leaf = false;
  for (const auto* in : inputs)
    if (in->defined()) node->parents.push_back(in->node_ptr());
  node->backward_fn = std::forward<Fn>(fn);
}

template <typename T, typename Fn>
void attach(Tensor<T>& out, const std::vector<Tensor<T>>& inputs, Fn&& fn) {
  if (!grad_enabled()) return;
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (!any) return;
  auto* node = out.node();
  node->requires_grad = true;
  node->is_leaf = false;
  for (const auto& in : inputs) node->parents.push_back(in.node_ptr());
  node->backward_fn = std::forward<Fn>(fn);
}

}  // namespace detail

/// Back-propagates from a scalar loss into every tensor that requires a
/// gradient. Gradients accumulate on leaves. The graph is released afterwards,
/// so a second call on the same loss is a StateError.
template <typename T>
void backward(const Tensor<T>& loss) {
  if (!loss.defined()) throw StateError("backward on an undefined tensor");
  if (loss.size() != 1) throw ShapeError("backward expects a scalar loss, got " + shape_str(loss.shape()));
  Node<T>* root = loss.node();
  if (root->consumed)
    throw StateError("backward called twice on the same graph; run a fresh forward pass first");
  if (!root->requires_grad) throw StateError("loss does not depend on any tensor that requires a gradient");

  // Iterative post-order DFS.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{root, 0}};
  seen.insert(root);
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

  if (root->is_leaf) {
    root->grad_data()[0] += T(1);
  } else {
    root->grad_data()[0] = T(1);
  }
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward_fn && n->has_grad) n->backward_fn(*n);
  }
  for (Node<T>* n : order) {
    if (n->is_leaf) continue;
    n->backward_fn = nullptr;
    n->parents.clear();
    if (!n->retain_grad && n != root) {
      n->grad.clear();
      n->grad.shrink_to_fit();
      n->has_grad = false;
    }
  }
  root->consumed = true;
}

// Optional instrumentation: multiply-accumulate counting and shape tracing.
namespace detail {
inline std::uint64_t*& mac_counter() {
  thread_local std::uint64_t* counter = nullptr;
  return counter;
}
}  // namespace detail

inline void count_macs(std::uint64_t macs) {
  if (auto* c = detail::mac_counter()) *c += macs;
}

/// Counts multiply-accumulates of every op executed on this thread.
class MacCounterScope {
 public:
  MacCounterScope() : prev_(detail::mac_counter()) { detail::mac_counter() = &count_; }
  ~MacCounterScope() { detail::mac_counter() = prev_; }
  MacCounterScope(const MacCounterScope&) = delete;
  MacCounterScope& operator=(const MacCounterScope&) = delete;
  std::uint64_t macs() const { return count_; }

 private:
  std::uint64_t count_ = 0;
  std::uint64_t* prev_;
};

struct ShapeRecord {
  std::string name;
  Shape shape;
};

namespace detail {
inline std::vector<ShapeRecord>*& shape_trace() {
  thread_local std::vector<ShapeRecord>* trace = nullptr;
  return trace;
}
}  // namespace detail

/// Collects named layer output shapes emitted by model forward passes.
class ShapeTraceScope {
 public:
  ShapeTraceScope() : prev_(detail::shape_trace()) { detail::shape_trace() = &records_; }
  ~ShapeTraceScope() { detail::shape_trace() = prev_; }
  ShapeTraceScope(const ShapeTraceScope&) = delete;
  ShapeTraceScope& operator=(const ShapeTraceScope&) = delete;
  const std::vector<ShapeRecord>& records() const { return records_; }

 private:
  std::vector<ShapeRecord> records_;
  std::vector<ShapeRecord>* prev_;
};

template <typename T>
void trace_shape(const std::string& name, const Tensor<T>& t) {
  if (auto* tr = detail::shape_trace()) tr->push_back({name, t.shape()});
}

/// Leaf tensors reachable from `out` without passing through any of `stops`.
template <typename T>
std::vector<Node<T>*> reachable_leaves(const Tensor<T>& out, const std::vector<Tensor<T>>& stops = {}) {
  std::unordered_set<Node<T>*> stop_set;
  for (const auto& s : stops) stop_set.insert(s.node());
  std::vector<Node<T>*> leaves;
  std::unordered_set<Node<T>*> seen{out.node()};
  std::vector<Node<T>*> stack{out.node()};
  while (!stack.empty()) {
    Node<T>* n = stack.back();
    stack.pop_back();
    if (stop_set.count(n)) continue;
    if (n->is_leaf) {
      leaves.push_back(n);
      continue;
    }
    for (auto& p : n->parents)
      if (seen.insert(p.get()).second) stack.push_back(p.get());
  }
  return leaves;
}

}  // namespace ecglab
