// Copyright 2026 The dsmoe Authors
// SPDX-License-Identifier: Apache-2.0

#include "dsmoe/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>
#include <unordered_set>

#include "dsmoe/errors.hpp"

namespace dsmoe {
namespace {

std::atomic<std::uint64_t> g_sequence{1};
thread_local bool t_grad_enabled = true;
std::atomic<bool> g_corrupt_prelu{false};

NodePtr new_node(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape_size(shape) != values.size()) {
    throw DimensionError("tensor of shape " + shape_string(shape) + " cannot hold " +
                         std::to_string(values.size()) + " values");
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  node->sequence = g_sequence.fetch_add(1, std::memory_order_relaxed);
  return node;
}

// Nodes reachable from `seed` that take part in differentiation, newest first.
std::vector<Node*> reverse_order(const NodePtr& seed) {
  std::vector<Node*> nodes;
  std::unordered_set<const Node*> seen;
  std::vector<Node*> stack{seed.get()};
  seen.insert(seed.get());
  while (!stack.empty()) {
    Node* node = stack.back();
    stack.pop_back();
    nodes.push_back(node);
    for (const auto& parent : node->parents) {
      if (parent->requires_grad && seen.insert(parent.get()).second) {
        stack.push_back(parent.get());
      }
    }
  }
  std::sort(nodes.begin(), nodes.end(),
            [](const Node* a, const Node* b) { return a->sequence > b->sequence; });
  return nodes;
}

}  // namespace

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (auto extent : shape) n *= extent;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

std::vector<double>& Node::grad_buffer() {
  if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  return grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const auto n = shape_size(shape);
  return Tensor(new_node(std::move(shape), std::vector<double>(n, value), requires_grad));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  return Tensor(new_node(std::move(shape), std::move(values), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor(new_node({}, {value}, requires_grad));
}

Tensor Tensor::vector(std::initializer_list<double> values, bool requires_grad) {
  return Tensor(new_node({values.size()}, std::vector<double>(values), requires_grad));
}

const Shape& Tensor::shape() const {
  if (!node_) throw ContractError("use of an undefined tensor");
  return node_->shape;
}

std::size_t Tensor::size() const { return node_ ? node_->value.size() : 0; }

std::size_t Tensor::rows() const {
  const auto& s = shape();
  return s.empty() ? 1 : s[0];
}

std::size_t Tensor::cols() const {
  const auto& s = shape();
  return s.size() == 2 ? s[1] : 1;
}

std::span<const double> Tensor::values() const& { return values_view(); }

std::span<const double> Tensor::values_view() const {
  if (!node_) throw ContractError("use of an undefined tensor");
  return node_->value;
}

std::span<double> Tensor::mutable_values() {
  if (!node_) throw ContractError("use of an undefined tensor");
  return node_->value;
}

double Tensor::item() const {
  if (size() != 1) {
    throw DimensionError("item() on tensor of shape " + shape_string(shape()));
  }
  return node_->value[0];
}

double Tensor::at(std::size_t row, std::size_t col) const {
  if (dim() != 2 || row >= shape()[0] || col >= shape()[1]) {
    throw DimensionError("at(" + std::to_string(row) + "," + std::to_string(col) +
                         ") on tensor of shape " + shape_string(shape()));
  }
  return node_->value[row * shape()[1] + col];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }
bool Tensor::is_leaf() const { return node_ && node_->parents.empty(); }
bool Tensor::has_grad() const { return node_ && node_->grad.size() == node_->value.size(); }

std::span<const double> Tensor::grad() const {
  if (!node_) throw ContractError("use of an undefined tensor");
  return node_->grad_buffer();
}

std::span<double> Tensor::mutable_grad() {
  if (!node_) throw ContractError("use of an undefined tensor");
  return node_->grad_buffer();
}

void Tensor::zero_grad() {
  if (node_ && !node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

Tensor Tensor::detach() const {
  return Tensor(new_node(shape(), node_->value, false));
}

std::size_t count_scalars(const ParamList& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.tensor.size();
  return n;
}

void backward(const Tensor& seed) {
  if (!seed.defined() || seed.size() != 1) {
    throw ContractError("backward() requires a scalar seed, got shape " +
                        (seed.defined() ? shape_string(seed.shape()) : std::string("<undefined>")));
  }
  if (!seed.requires_grad()) {
    throw ContractError("backward() seed does not depend on any parameter");
  }
  auto order = reverse_order(seed.node());
  for (Node* node : order) {
    if (!node->parents.empty()) node->grad.assign(node->value.size(), 0.0);
  }
  seed.node()->grad_buffer()[0] += 1.0;
  for (Node* node : order) {
    if (node->backward) node->backward(*node);
  }
}

std::size_t graph_size(const Tensor& seed) { return reverse_order(seed.node()).size(); }

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

Tensor make_result(Shape shape, std::vector<double> values, std::vector<Tensor> parents,
                   BackwardFn backward_fn) {
  bool needs = false;
  if (t_grad_enabled) {
    for (const auto& p : parents) needs = needs || p.requires_grad();
  }
  auto node = new_node(std::move(shape), std::move(values), needs);
  if (needs) {
    node->parents.reserve(parents.size());
    for (auto& p : parents) node->parents.push_back(p.node());
    node->backward = std::move(backward_fn);
  }
  return Tensor(std::move(node));
}

GradCheckResult grad_check(const std::function<Tensor()>& loss, std::span<const Tensor> params,
                           double eps) {
  if (!(eps > 0.0)) throw DomainError("grad_check step must be positive");
  std::vector<Tensor> leaves(params.begin(), params.end());
  for (auto& p : leaves) p.zero_grad();
  Tensor value = loss();
  if (!std::isfinite(value.item())) throw TrainingError("grad_check: loss is not finite at the base point");
  backward(value);

  std::vector<std::vector<double>> analytic;
  analytic.reserve(leaves.size());
  for (auto& p : leaves) analytic.emplace_back(p.grad().begin(), p.grad().end());

  GradCheckResult result;
  NoGradGuard no_grad;
  for (std::size_t pi = 0; pi < leaves.size(); ++pi) {
    auto values = leaves[pi].mutable_values();
    for (std::size_t e = 0; e < values.size(); ++e) {
      const double saved = values[e];
      values[e] = saved + eps;
      const double plus = loss().item();
      values[e] = saved - eps;
      const double minus = loss().item();
      values[e] = saved;
      if (!std::isfinite(plus) || !std::isfinite(minus)) {
        throw TrainingError("grad_check: non-finite loss when probing parameter " +
                            std::to_string(pi) + " element " + std::to_string(e));
      }
      const double numeric = (plus - minus) / (2.0 * eps);
      const double a = analytic[pi][e];
      const double err = std::abs(a - numeric) / std::max(1.0, std::abs(a));
      ++result.scalars_checked;
      if (err > result.max_relative_error || result.scalars_checked == 1) {
        result.max_relative_error = err;
        result.worst_param = pi;
        result.worst_element = e;
        result.worst_analytic = a;
        result.worst_numeric = numeric;
      }
    }
  }
  return result;
}

namespace fault {
void set_corrupt_prelu_backward(bool enabled) { g_corrupt_prelu.store(enabled); }
bool corrupt_prelu_backward() { return g_corrupt_prelu.load(); }
}  // namespace fault

}  // namespace dsmoe
