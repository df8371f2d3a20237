// Copyright 2026 The dsmoe Authors
// SPDX-License-Identifier: Apache-2.0

// Dense 64-bit tensors with a dynamic reverse-mode tape.
//
// Every operation that consumes a tensor requiring gradients produces a node
// holding its parents and a backward closure. The "graph" of a scalar seed is
// the set of nodes reachable from it; backward() visits that set once, in
// reverse creation order, so each node's gradient is complete before it is
// propagated further.

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace dsmoe {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

struct Node;
using NodePtr = std::shared_ptr<Node>;

// Propagates node.grad into the parents' gradients.
using BackwardFn = std::function<void(Node& node)>;

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::uint64_t sequence = 0;
  std::vector<NodePtr> parents;
  BackwardFn backward;

  // Lazily sized gradient buffer.
  std::vector<double>& grad_buffer();
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor vector(std::initializer_list<double> values, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t size() const;
  std::size_t dim() const { return shape().size(); }
  std::size_t rows() const;  // extent 0 (1 for scalars)
  std::size_t cols() const;  // last extent of a matrix, 1 otherwise

  std::span<const double> values() const&;
  // A temporary hands out a copy, so the result cannot dangle.
  std::vector<double> values() const&& { return {values_view().begin(), values_view().end()}; }
  // Direct write access. Only meaningful for leaves (parameters, buffers).
  std::span<double> mutable_values();
  double item() const;
  double operator[](std::size_t i) const { return values()[i]; }
  double at(std::size_t row, std::size_t col) const;

  bool requires_grad() const;
  bool is_leaf() const;
  bool has_grad() const;
  // Gradient view; a zero-filled buffer is allocated when none exists yet.
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  // Leaf copy of the current values with no graph attachment.
  Tensor detach() const;

  const NodePtr& node() const { return node_; }

 private:
  std::span<const double> values_view() const;

  NodePtr node_;
};

// A named trainable parameter or persistent buffer.
struct NamedTensor {
  std::string name;
  Tensor tensor;
};
using ParamList = std::vector<NamedTensor>;

std::size_t count_scalars(const ParamList& params);

// Reverse-mode sweep from a scalar seed. Leaf gradients accumulate across
// calls; intermediate gradients are reset on every call.
void backward(const Tensor& seed);

// Number of nodes the last traversal would visit (seed included).
std::size_t graph_size(const Tensor& seed);

bool grad_enabled();

// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Builds the result node of an operation. The node records parents and the
// backward closure only when recording is enabled and some parent needs
// gradients; otherwise the result is a plain constant.
Tensor make_result(Shape shape, std::vector<double> values, std::vector<Tensor> parents,
                   BackwardFn backward);

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t worst_param = 0;    // index into the checked parameter list
  std::size_t worst_element = 0;  // flat index inside that parameter
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t scalars_checked = 0;
};

// Compares reverse-mode gradients of `loss` against central differences,
//   err = |analytic - (f(p+eps) - f(p-eps)) / 2eps| / max(1, |analytic|),
// and reports the worst scalar. Parameters are restored after probing.
GradCheckResult grad_check(const std::function<Tensor()>& loss, std::span<const Tensor> params,
                           double eps = 1e-5);

namespace fault {
// Test hook: when set, the PReLU backward rule is deliberately wrong. Used to
// prove the gradient harness can fail.
void set_corrupt_prelu_backward(bool enabled);
bool corrupt_prelu_backward();
}  // namespace fault

}  // namespace dsmoe
