#pragma once

#include <Eigen/Dense>

#include <array>
#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "mmt/errors.hpp"

namespace mmt {

using Index = Eigen::Index;

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;
using MatrixF = Matrix<float>;
using MatrixD = Matrix<double>;

// Boolean keep-mask; true marks an entry that participates.
using Mask = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

namespace detail {

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

template <typename Scalar>
struct Node {
  Matrix<Scalar> value;
  Matrix<Scalar> grad;  // empty until something flows into it
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this node's grad and accumulates into the inputs.
  std::function<void(const Matrix<Scalar>&)> backward;
  bool consumed = false;

  template <typename Expr>
  void accumulate(const Expr& g) {
    if (!requires_grad) return;
    if (grad.size() == 0) {
      grad = g;
    } else {
      grad += g;
    }
  }
};

}  // namespace detail

// Disables graph recording on this thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline bool grad_enabled() { return detail::grad_mode(); }

// Dense row-major 2-D tensor with reverse-mode gradient tracking. Copies are
// handles to the same node; values are immutable after construction apart
// from parameter updates done through mutable_value().
template <typename Scalar>
class Tensor {
 public:
  using NodeT = detail::Node<Scalar>;

  Tensor() : node_(std::make_shared<NodeT>()) {}

  static Tensor constant(Matrix<Scalar> value) {
    Tensor t;
    t.node_->value = std::move(value);
    return t;
  }

  static Tensor parameter(Matrix<Scalar> value) {
    Tensor t = constant(std::move(value));
    t.node_->requires_grad = true;
    return t;
  }

  static Tensor scalar(Scalar v) {
    Matrix<Scalar> m(1, 1);
    m(0, 0) = v;
    return constant(std::move(m));
  }

  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }
  Index size() const { return node_->value.size(); }
  std::array<Index, 2> shape() const { return {rows(), cols()}; }

  const Matrix<Scalar>& value() const { return node_->value; }
  Matrix<Scalar>& mutable_value() { return node_->value; }
  Scalar item() const {
    if (size() != 1) throw ShapeError("item() on a non-scalar tensor");
    return node_->value(0, 0);
  }

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return node_->grad.size() != 0; }
  const Matrix<Scalar>& grad() const { return node_->grad; }
  Matrix<Scalar>& mutable_grad() { return node_->grad; }
  void zero_grad() { node_->grad.resize(0, 0); }

  // Detached copy of the value.
  Tensor detach() const { return constant(node_->value); }

  NodeT& node() const { return *node_; }
  const std::shared_ptr<NodeT>& node_ptr() const { return node_; }

  // Builds the result of a differentiable op. When recording is off or no
  // input needs a gradient the backward closure is dropped.
  template <typename Backward>
  static Tensor make(Matrix<Scalar> value, std::initializer_list<Tensor> inputs, Backward&& backward) {
    Tensor out = constant(std::move(value));
    if (!grad_enabled()) return out;
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    if (!any) return out;
    out.node_->requires_grad = true;
    out.node_->inputs.reserve(inputs.size());
    for (const auto& in : inputs) out.node_->inputs.push_back(in.node_);
    out.node_->backward = std::forward<Backward>(backward);
    return out;
  }

  static Tensor make_n(Matrix<Scalar> value, const std::vector<Tensor>& inputs,
                       std::function<void(const Matrix<Scalar>&)> backward) {
    Tensor out = constant(std::move(value));
    if (!grad_enabled()) return out;
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    if (!any) return out;
    out.node_->requires_grad = true;
    out.node_->inputs.reserve(inputs.size());
    for (const auto& in : inputs) out.node_->inputs.push_back(in.node_);
    out.node_->backward = std::move(backward);
    return out;
  }

 private:
  std::shared_ptr<NodeT> node_;
};

// Reverse sweep from a scalar loss. Each recorded node is visited once in
// reverse topological order; the graph is consumed, so a second call on the
// same loss is an error rather than a silent double accumulation.
template <typename Scalar>
void backward(const Tensor<Scalar>& loss) {
  using NodeT = detail::Node<Scalar>;
  if (loss.size() != 1) throw ShapeError("backward() needs a scalar loss");
  NodeT* root = &loss.node();
  if (root->consumed) throw AutodiffError("backward() called twice on the same graph");
  if (!root->requires_grad) throw AutodiffError("loss is not connected to any parameter");

  // Shared ownership keeps every visited node alive while upstream nodes
  // release their input lists during the sweep.
  std::vector<std::shared_ptr<NodeT>> order;
  std::unordered_set<NodeT*> seen;
  std::vector<std::pair<std::shared_ptr<NodeT>, std::size_t>> stack;
  stack.emplace_back(loss.node_ptr(), 0);
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      const auto& child = node->inputs[next++];
      if (child->requires_grad && !seen.count(child.get())) {
        seen.insert(child.get());
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->accumulate(Matrix<Scalar>::Ones(1, 1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    NodeT* node = it->get();
    if (!node->backward) continue;
    if (node->grad.size() != 0) node->backward(node->grad);
    node->backward = nullptr;
    node->inputs.clear();
    node->consumed = true;
  }
}

}  // namespace mmt
