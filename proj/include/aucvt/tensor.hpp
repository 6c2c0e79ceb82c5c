/*
 * Copyright 2026 The AU-CVT Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

// Dense f64 tensors with a dynamically recorded gradient tape.
//
// A Tensor is a cheap handle onto a shared node. Operations whose inputs
// require gradients record a node holding the inputs and a backward rule;
// nodes are numbered in creation order, so sorting the nodes reachable from a
// loss by descending id is a valid reverse topological order. That ordering
// is the tape.

#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "aucvt/errors.hpp"

namespace aucvt {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

namespace detail {

using BackwardFn = std::function<void(const std::vector<double>& grad_out)>;

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until something flows in
  bool requires_grad = false;
  std::uint64_t id = 0;
  std::string op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  BackwardFn backward;
};

inline std::uint64_t next_node_id() {
  static std::atomic<std::uint64_t> counter{0};
  return ++counter;
}

inline std::vector<double>& grad_buffer(Node& n) {
  if (n.grad.empty()) n.grad.assign(n.data.size(), 0.0);
  return n.grad;
}

/// Test hook: when non-empty, the backward rule of every op with this name is
/// scaled by 1.5 so gradient checks can prove they notice a broken rule.
inline std::string& corrupted_op() {
  static std::string name;
  return name;
}

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false) {
    for (std::size_t e : shape) {
      if (e == 0) throw DimensionError("tensor extents must be >= 1, got " + shape_str(shape));
    }
    if (shape_numel(shape) != data.size()) {
      throw DimensionError("tensor " + shape_str(shape) + " needs " +
                           std::to_string(shape_numel(shape)) + " values, got " +
                           std::to_string(data.size()));
    }
    node_ = std::make_shared<detail::Node>();
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
    node_->id = detail::next_node_id();
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::size_t n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    std::size_t n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
  }

  static Tensor scalar(double value, bool requires_grad = false) {
    return Tensor({1}, {value}, requires_grad);
  }

  bool defined() const noexcept { return static_cast<bool>(node_); }

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<const double> data() const { return node_->data; }
  /// Mutable view; used by initializers, optimizers and finite differences.
  std::span<double> mutable_data() const { return node_->data; }
  const std::vector<double>& values() const& { return node_->data; }
  std::vector<double> values() && { return node_->data; }

  double operator[](std::size_t i) const { return node_->data[i]; }
  double item() const {
    if (numel() != 1) throw ContractError("item() on tensor " + shape_str(shape()));
    return node_->data[0];
  }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool is_leaf() const { return node_->inputs.empty(); }
  const std::string& op_name() const { return node_->op; }
  std::uint64_t id() const { return node_->id; }

  bool has_grad() const { return !node_->grad.empty(); }
  /// Accumulated gradient, or zeros when nothing has flowed in yet.
  std::vector<double> grad() const {
    return has_grad() ? node_->grad : std::vector<double>(numel(), 0.0);
  }
  std::span<double> mutable_grad() const { return detail::grad_buffer(*node_); }
  void zero_grad() const { node_->grad.assign(node_->data.size(), 0.0); }
  void clear_grad() const { node_->grad.clear(); }

  /// Same values, no tape history, no gradient.
  Tensor detach() const { return Tensor(shape(), node_->data, false); }

  /// Deep copy that keeps requires_grad but drops history and gradient.
  Tensor clone() const { return Tensor(shape(), node_->data, requires_grad()); }

  void backward() const;

  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

namespace detail {

/// Creates an op result. When no input requires a gradient the result is a
/// plain constant and nothing is recorded.
inline Tensor record(std::string op, Shape shape, std::vector<double> data,
                     std::initializer_list<Tensor> inputs, BackwardFn fn) {
  Tensor out(std::move(shape), std::move(data), false);
  bool any = std::any_of(inputs.begin(), inputs.end(),
                         [](const Tensor& t) { return t.requires_grad(); });
  Node& n = *out.node_ptr();
  n.op = std::move(op);
  if (!any) return out;
  n.requires_grad = true;
  for (const Tensor& t : inputs) n.inputs.push_back(t.node_ptr());
  n.backward = std::move(fn);
  return out;
}

inline Tensor record(std::string op, Shape shape, std::vector<double> data,
                     const std::vector<Tensor>& inputs, BackwardFn fn) {
  Tensor out(std::move(shape), std::move(data), false);
  bool any = std::any_of(inputs.begin(), inputs.end(),
                         [](const Tensor& t) { return t.requires_grad(); });
  Node& n = *out.node_ptr();
  n.op = std::move(op);
  if (!any) return out;
  n.requires_grad = true;
  for (const Tensor& t : inputs) n.inputs.push_back(t.node_ptr());
  n.backward = std::move(fn);
  return out;
}

/// Nodes reachable from `root` through grad-requiring edges, in reverse
/// creation order.
inline std::vector<Node*> build_tape(Node* root) {
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<Node*> stack{root};
  seen.insert(root);
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (const auto& in : n->inputs) {
      if (in->requires_grad && seen.insert(in.get()).second) stack.push_back(in.get());
    }
  }
  std::sort(order.begin(), order.end(),
            [](const Node* a, const Node* b) { return a->id > b->id; });
  return order;
}

}  // namespace detail

/// Accumulates d(this)/d(leaf) into every grad-requiring leaf reachable from
/// this scalar. Intermediate gradients are rebuilt on each call; leaf
/// gradients add up until zero_grad().
inline void Tensor::backward() const {
  if (!defined()) throw ContractError("backward() on an undefined tensor");
  if (numel() != 1) {
    throw ContractError("backward() needs a scalar loss, got " + shape_str(shape()));
  }
  if (!requires_grad()) return;  // constant loss: every gradient is zero

  std::vector<detail::Node*> tape = detail::build_tape(node_.get());
  for (detail::Node* n : tape) {
    if (!n->inputs.empty()) n->grad.clear();
  }
  detail::grad_buffer(*node_)[0] += 1.0;

  const std::string& corrupted = detail::corrupted_op();
  for (detail::Node* n : tape) {
    if (n->inputs.empty() || n->grad.empty()) continue;
    if (!corrupted.empty() && n->op == corrupted) {
      std::vector<double> g = n->grad;
      for (double& v : g) v *= 1.5;
      n->backward(g);
    } else {
      n->backward(n->grad);
    }
  }
  for (detail::Node* n : tape) {
    if (!n->inputs.empty() && n != node_.get()) n->grad.clear();
  }
}

}  // namespace aucvt
