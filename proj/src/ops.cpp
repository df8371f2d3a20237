// Copyright 2026 The dsmoe Authors
// SPDX-License-Identifier: Apache-2.0

#include "dsmoe/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

#include "dsmoe/errors.hpp"

namespace dsmoe {
namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using MutMap = Eigen::Map<RowMatrix>;

// Gradient buffer of parent i, or nullptr when it does not need one.
double* grad_of(Node& node, std::size_t i) {
  Node& parent = *node.parents[i];
  return parent.requires_grad ? parent.grad_buffer().data() : nullptr;
}

const std::vector<double>& value_of(const Node& node, std::size_t i) {
  return node.parents[i]->value;
}

void require_matrix(const Tensor& x, const char* op) {
  if (x.dim() != 2) {
    throw DimensionError(std::string(op) + " expects a matrix, got shape " + shape_string(x.shape()));
  }
}

bool is_scalar(const Tensor& x) { return x.size() == 1 && x.dim() <= 1; }

double sigmoid_scalar(double v) {
  if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

}  // namespace

Tensor elementwise(UnaryOp op, const Tensor& x) {
  const auto in = x.values();
  std::vector<double> out(in.size());
  switch (op) {
    case UnaryOp::neg:
      for (std::size_t i = 0; i < in.size(); ++i) out[i] = -in[i];
      return make_result(x.shape(), std::move(out), {x}, [](Node& node) {
        if (double* g = grad_of(node, 0))
          for (std::size_t i = 0; i < node.grad.size(); ++i) g[i] -= node.grad[i];
      });
    case UnaryOp::sigmoid:
      for (std::size_t i = 0; i < in.size(); ++i) out[i] = sigmoid_scalar(in[i]);
      return make_result(x.shape(), std::move(out), {x}, [](Node& node) {
        if (double* g = grad_of(node, 0))
          for (std::size_t i = 0; i < node.grad.size(); ++i) {
            const double y = node.value[i];
            g[i] += node.grad[i] * y * (1.0 - y);
          }
      });
    case UnaryOp::log:
      for (std::size_t i = 0; i < in.size(); ++i) {
        if (!(in[i] > 0.0)) {
          throw DomainError("log of non-positive value " + std::to_string(in[i]) + " at index " +
                            std::to_string(i));
        }
        out[i] = std::log(in[i]);
      }
      return make_result(x.shape(), std::move(out), {x}, [](Node& node) {
        if (double* g = grad_of(node, 0)) {
          const auto& xv = value_of(node, 0);
          for (std::size_t i = 0; i < node.grad.size(); ++i) g[i] += node.grad[i] / xv[i];
        }
      });
    case UnaryOp::exp:
      for (std::size_t i = 0; i < in.size(); ++i) {
        out[i] = std::exp(in[i]);
        if (!std::isfinite(out[i])) {
          throw DomainError("exp overflow at index " + std::to_string(i));
        }
      }
      return make_result(x.shape(), std::move(out), {x}, [](Node& node) {
        if (double* g = grad_of(node, 0))
          for (std::size_t i = 0; i < node.grad.size(); ++i) g[i] += node.grad[i] * node.value[i];
      });
  }
  throw ContractError("unknown unary op");
}

Tensor elementwise(BinaryOp op, const Tensor& a, const Tensor& b) {
  const bool same = a.shape() == b.shape();
  const bool a_scalar = !same && is_scalar(a);
  const bool b_scalar = !same && is_scalar(b);
  if (!same && !a_scalar && !b_scalar) {
    throw DimensionError("elementwise operands " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()) + " are not broadcast-compatible");
  }
  const Shape shape = a_scalar ? b.shape() : a.shape();
  const std::size_t n = shape_size(shape);
  const auto av = a.values();
  const auto bv = b.values();
  const std::size_t sa = a_scalar ? 0 : 1;  // index strides
  const std::size_t sb = b_scalar ? 0 : 1;
  std::vector<double> out(n);
  switch (op) {
    case BinaryOp::add:
      for (std::size_t i = 0; i < n; ++i) out[i] = av[i * sa] + bv[i * sb];
      break;
    case BinaryOp::sub:
      for (std::size_t i = 0; i < n; ++i) out[i] = av[i * sa] - bv[i * sb];
      break;
    case BinaryOp::mul:
      for (std::size_t i = 0; i < n; ++i) out[i] = av[i * sa] * bv[i * sb];
      break;
  }
  return make_result(shape, std::move(out), {a, b}, [op, sa, sb](Node& node) {
    const auto& dy = node.grad;
    double* ga = grad_of(node, 0);
    double* gb = grad_of(node, 1);
    const auto& av = value_of(node, 0);
    const auto& bv = value_of(node, 1);
    for (std::size_t i = 0; i < dy.size(); ++i) {
      switch (op) {
        case BinaryOp::add:
          if (ga) ga[i * sa] += dy[i];
          if (gb) gb[i * sb] += dy[i];
          break;
        case BinaryOp::sub:
          if (ga) ga[i * sa] += dy[i];
          if (gb) gb[i * sb] -= dy[i];
          break;
        case BinaryOp::mul:
          if (ga) ga[i * sa] += dy[i] * bv[i * sb];
          if (gb) gb[i * sb] += dy[i] * av[i * sa];
          break;
      }
    }
  });
}

Tensor add(const Tensor& a, const Tensor& b) { return elementwise(BinaryOp::add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return elementwise(BinaryOp::sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return elementwise(BinaryOp::mul, a, b); }
Tensor neg(const Tensor& x) { return elementwise(UnaryOp::neg, x); }
Tensor sigmoid(const Tensor& x) { return elementwise(UnaryOp::sigmoid, x); }
Tensor log(const Tensor& x) { return elementwise(UnaryOp::log, x); }
Tensor exp(const Tensor& x) { return elementwise(UnaryOp::exp, x); }

Tensor scale(const Tensor& x, double factor) {
  const auto in = x.values();
  std::vector<double> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] * factor;
  return make_result(x.shape(), std::move(out), {x}, [factor](Node& node) {
    if (double* g = grad_of(node, 0))
      for (std::size_t i = 0; i < node.grad.size(); ++i) g[i] += node.grad[i] * factor;
  });
}

Tensor prelu(const Tensor& x, const Tensor& slope) {
  if (slope.size() != 1) {
    throw DimensionError("prelu slope must be a scalar, got " + shape_string(slope.shape()));
  }
  const double a = slope.item();
  const auto in = x.values();
  std::vector<double> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] > 0.0 ? in[i] : a * in[i];
  return make_result(x.shape(), std::move(out), {x, slope}, [](Node& node) {
    const auto& xv = value_of(node, 0);
    const double a = value_of(node, 1)[0];
    const double neg_factor = fault::corrupt_prelu_backward() ? 1.5 * a : a;
    double* gx = grad_of(node, 0);
    double* ga = grad_of(node, 1);
    double slope_grad = 0.0;
    for (std::size_t i = 0; i < node.grad.size(); ++i) {
      const double dy = node.grad[i];
      if (xv[i] > 0.0) {
        if (gx) gx[i] += dy;
      } else {
        if (gx) gx[i] += neg_factor * dy;
        slope_grad += xv[i] * dy;
      }
    }
    if (ga) ga[0] += slope_grad;
  });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  const auto in = x.values();
  std::vector<double> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = std::clamp(in[i], lo, hi);
  return make_result(x.shape(), std::move(out), {x}, [lo, hi](Node& node) {
    if (double* g = grad_of(node, 0)) {
      const auto& xv = value_of(node, 0);
      for (std::size_t i = 0; i < node.grad.size(); ++i)
        if (xv[i] >= lo && xv[i] <= hi) g[i] += node.grad[i];
    }
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.dim() != 2 || b.dim() != 2 || a.shape()[1] != b.shape()[0]) {
    throw DimensionError("matmul shape mismatch: " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
  }
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  std::vector<double> out(m * n);
  MutMap(out.data(), m, n).noalias() =
      ConstMap(a.values().data(), m, k) * ConstMap(b.values().data(), k, n);
  return make_result({m, n}, std::move(out), {a, b}, [m, k, n](Node& node) {
    ConstMap dy(node.grad.data(), m, n);
    if (double* ga = grad_of(node, 0)) {
      MutMap(ga, m, k).noalias() += dy * ConstMap(value_of(node, 1).data(), k, n).transpose();
    }
    if (double* gb = grad_of(node, 1)) {
      MutMap(gb, k, n).noalias() += ConstMap(value_of(node, 0).data(), m, k).transpose() * dy;
    }
  });
}

Tensor transpose(const Tensor& a) {
  require_matrix(a, "transpose");
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  std::vector<double> out(m * n);
  MutMap(out.data(), n, m) = ConstMap(a.values().data(), m, n).transpose();
  return make_result({n, m}, std::move(out), {a}, [m, n](Node& node) {
    if (double* g = grad_of(node, 0)) {
      MutMap(g, m, n) += ConstMap(node.grad.data(), n, m).transpose();
    }
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_size(shape) != x.size()) {
    throw DimensionError("cannot reshape " + shape_string(x.shape()) + " to " + shape_string(shape));
  }
  std::vector<double> out(x.values().begin(), x.values().end());
  return make_result(std::move(shape), std::move(out), {x}, [](Node& node) {
    if (double* g = grad_of(node, 0))
      for (std::size_t i = 0; i < node.grad.size(); ++i) g[i] += node.grad[i];
  });
}

namespace {

void softmax_row(const double* in, double* out, std::size_t k) {
  double peak = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < k; ++j) peak = std::max(peak, in[j]);
  double total = 0.0;
  for (std::size_t j = 0; j < k; ++j) {
    out[j] = std::exp(in[j] - peak);
    total += out[j];
  }
  for (std::size_t j = 0; j < k; ++j) out[j] /= total;
}

Tensor softmax_impl(const Tensor& logits, std::size_t n, std::size_t k) {
  const auto in = logits.values();
  for (double v : in) {
    if (!std::isfinite(v)) throw DomainError("softmax of non-finite logit");
  }
  std::vector<double> out(in.size());
  for (std::size_t r = 0; r < n; ++r) softmax_row(in.data() + r * k, out.data() + r * k, k);
  return make_result(logits.shape(), std::move(out), {logits}, [n, k](Node& node) {
    double* g = grad_of(node, 0);
    if (!g) return;
    for (std::size_t r = 0; r < n; ++r) {
      const double* y = node.value.data() + r * k;
      const double* dy = node.grad.data() + r * k;
      double inner = 0.0;
      for (std::size_t j = 0; j < k; ++j) inner += y[j] * dy[j];
      for (std::size_t j = 0; j < k; ++j) g[r * k + j] += y[j] * (dy[j] - inner);
    }
  });
}

}  // namespace

Tensor softmax(const Tensor& logits) {
  if (logits.dim() != 1 || logits.size() == 0) {
    throw DimensionError("softmax expects a non-empty vector, got " + shape_string(logits.shape()));
  }
  return softmax_impl(logits, 1, logits.size());
}

Tensor softmax_rows(const Tensor& logits) {
  require_matrix(logits, "softmax_rows");
  if (logits.shape()[1] == 0) throw DimensionError("softmax_rows over zero columns");
  return softmax_impl(logits, logits.shape()[0], logits.shape()[1]);
}

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.values()) total += v;
  return make_result({}, {total}, {x}, [](Node& node) {
    if (double* g = grad_of(node, 0)) {
      const double dy = node.grad[0];
      const std::size_t n = node.parents[0]->value.size();
      for (std::size_t i = 0; i < n; ++i) g[i] += dy;
    }
  });
}

Tensor mean(const Tensor& x) {
  if (x.size() == 0) throw DimensionError("mean of an empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.size()));
}

Tensor add_rowwise(const Tensor& x, const Tensor& b) {
  require_matrix(x, "add_rowwise");
  const std::size_t n = x.shape()[0], d = x.shape()[1];
  if (b.size() != d) {
    throw DimensionError("add_rowwise: row bias " + shape_string(b.shape()) + " vs matrix " +
                         shape_string(x.shape()));
  }
  const auto xv = x.values();
  const auto bv = b.values();
  std::vector<double> out(n * d);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] = xv[r * d + c] + bv[c];
  return make_result({n, d}, std::move(out), {x, b}, [n, d](Node& node) {
    double* gx = grad_of(node, 0);
    double* gb = grad_of(node, 1);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < d; ++c) {
        const double dy = node.grad[r * d + c];
        if (gx) gx[r * d + c] += dy;
        if (gb) gb[c] += dy;
      }
  });
}

Tensor mul_rowwise(const Tensor& x, const Tensor& g) {
  require_matrix(x, "mul_rowwise");
  const std::size_t n = x.shape()[0], d = x.shape()[1];
  if (g.size() != d) {
    throw DimensionError("mul_rowwise: row factor " + shape_string(g.shape()) + " vs matrix " +
                         shape_string(x.shape()));
  }
  const auto xv = x.values();
  const auto gv = g.values();
  std::vector<double> out(n * d);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] = xv[r * d + c] * gv[c];
  return make_result({n, d}, std::move(out), {x, g}, [n, d](Node& node) {
    double* gx = grad_of(node, 0);
    double* gg = grad_of(node, 1);
    const auto& xv = value_of(node, 0);
    const auto& gv = value_of(node, 1);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < d; ++c) {
        const double dy = node.grad[r * d + c];
        if (gx) gx[r * d + c] += dy * gv[c];
        if (gg) gg[c] += dy * xv[r * d + c];
      }
  });
}

Tensor scale_rows(const Tensor& x, const Tensor& c) {
  require_matrix(x, "scale_rows");
  const std::size_t n = x.shape()[0], d = x.shape()[1];
  if (c.size() != n) {
    throw DimensionError("scale_rows: factors " + shape_string(c.shape()) + " vs matrix " +
                         shape_string(x.shape()));
  }
  const auto xv = x.values();
  const auto cv = c.values();
  std::vector<double> out(n * d);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = xv[r * d + j] * cv[r];
  return make_result({n, d}, std::move(out), {x, c}, [n, d](Node& node) {
    double* gx = grad_of(node, 0);
    double* gc = grad_of(node, 1);
    const auto& xv = value_of(node, 0);
    const auto& cv = value_of(node, 1);
    for (std::size_t r = 0; r < n; ++r) {
      double acc = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double dy = node.grad[r * d + j];
        if (gx) gx[r * d + j] += dy * cv[r];
        acc += dy * xv[r * d + j];
      }
      if (gc) gc[r] += acc;
    }
  });
}

Tensor row_dot(const Tensor& a, const Tensor& b) {
  require_matrix(a, "row_dot");
  if (a.shape() != b.shape()) {
    throw DimensionError("row_dot shape mismatch: " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
  const std::size_t n = a.shape()[0], d = a.shape()[1];
  const auto av = a.values();
  const auto bv = b.values();
  std::vector<double> out(n);
  for (std::size_t r = 0; r < n; ++r) {
    double acc = 0.0;
    for (std::size_t j = 0; j < d; ++j) acc += av[r * d + j] * bv[r * d + j];
    out[r] = acc;
  }
  return make_result({n}, std::move(out), {a, b}, [n, d](Node& node) {
    double* ga = grad_of(node, 0);
    double* gb = grad_of(node, 1);
    const auto& av = value_of(node, 0);
    const auto& bv = value_of(node, 1);
    for (std::size_t r = 0; r < n; ++r) {
      const double dy = node.grad[r];
      for (std::size_t j = 0; j < d; ++j) {
        if (ga) ga[r * d + j] += dy * bv[r * d + j];
        if (gb) gb[r * d + j] += dy * av[r * d + j];
      }
    }
  });
}

Tensor gather_rows(const Tensor& table, std::span<const std::size_t> ids) {
  require_matrix(table, "gather_rows");
  const std::size_t v = table.shape()[0], d = table.shape()[1];
  const auto tv = table.values();
  std::vector<double> out(ids.size() * d);
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] >= v) {
      throw LookupError("row index " + std::to_string(ids[r]) + " out of range for table with " +
                        std::to_string(v) + " rows");
    }
    std::copy_n(tv.begin() + static_cast<std::ptrdiff_t>(ids[r] * d), d, out.begin() + static_cast<std::ptrdiff_t>(r * d));
  }
  std::vector<std::size_t> rows(ids.begin(), ids.end());
  return make_result({ids.size(), d}, std::move(out), {table}, [rows = std::move(rows), d](Node& node) {
    if (double* g = grad_of(node, 0))
      for (std::size_t r = 0; r < rows.size(); ++r)
        for (std::size_t j = 0; j < d; ++j) g[rows[r] * d + j] += node.grad[r * d + j];
  });
}

Tensor mean_pool_rows(const Tensor& table, std::span<const std::vector<std::size_t>> lists) {
  require_matrix(table, "mean_pool_rows");
  const std::size_t v = table.shape()[0], d = table.shape()[1];
  const auto tv = table.values();
  std::vector<double> out(lists.size() * d, 0.0);
  for (std::size_t r = 0; r < lists.size(); ++r) {
    if (lists[r].empty()) continue;
    const double w = 1.0 / static_cast<double>(lists[r].size());
    for (std::size_t id : lists[r]) {
      if (id >= v) {
        throw LookupError("row index " + std::to_string(id) + " out of range for table with " +
                          std::to_string(v) + " rows");
      }
      for (std::size_t j = 0; j < d; ++j) out[r * d + j] += w * tv[id * d + j];
    }
  }
  std::vector<std::vector<std::size_t>> copy(lists.begin(), lists.end());
  return make_result({lists.size(), d}, std::move(out), {table},
                     [lists = std::move(copy), d](Node& node) {
                       double* g = grad_of(node, 0);
                       if (!g) return;
                       for (std::size_t r = 0; r < lists.size(); ++r) {
                         if (lists[r].empty()) continue;
                         const double w = 1.0 / static_cast<double>(lists[r].size());
                         for (std::size_t id : lists[r])
                           for (std::size_t j = 0; j < d; ++j) g[id * d + j] += w * node.grad[r * d + j];
                       }
                     });
}

Tensor scatter_rows(std::span<const Tensor> parts, std::span<const std::vector<std::size_t>> index,
                    std::size_t rows) {
  if (parts.size() != index.size()) {
    throw DimensionError("scatter_rows: " + std::to_string(parts.size()) + " parts but " +
                         std::to_string(index.size()) + " index lists");
  }
  if (parts.empty()) throw DimensionError("scatter_rows needs at least one part");
  const std::size_t d = parts[0].cols();
  std::vector<double> out(rows * d, 0.0);
  std::vector<char> filled(rows, 0);
  for (std::size_t p = 0; p < parts.size(); ++p) {
    require_matrix(parts[p], "scatter_rows");
    if (parts[p].shape()[0] != index[p].size() || parts[p].shape()[1] != d) {
      throw DimensionError("scatter_rows: part " + shape_string(parts[p].shape()) +
                           " does not match its index list of " + std::to_string(index[p].size()));
    }
    const auto pv = parts[p].values();
    for (std::size_t i = 0; i < index[p].size(); ++i) {
      const std::size_t r = index[p][i];
      if (r >= rows || filled[r]) {
        throw LookupError("scatter_rows: target row " + std::to_string(r) + " invalid or duplicated");
      }
      filled[r] = 1;
      std::copy_n(pv.begin() + static_cast<std::ptrdiff_t>(i * d), d, out.begin() + static_cast<std::ptrdiff_t>(r * d));
    }
  }
  std::vector<std::vector<std::size_t>> copy(index.begin(), index.end());
  std::vector<Tensor> parents(parts.begin(), parts.end());
  return make_result({rows, d}, std::move(out), std::move(parents),
                     [index = std::move(copy), d](Node& node) {
                       for (std::size_t p = 0; p < index.size(); ++p) {
                         double* g = grad_of(node, p);
                         if (!g) continue;
                         for (std::size_t i = 0; i < index[p].size(); ++i)
                           for (std::size_t j = 0; j < d; ++j) g[i * d + j] += node.grad[index[p][i] * d + j];
                       }
                     });
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw DimensionError("concat_cols needs at least one part");
  const std::size_t n = parts[0].rows();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    require_matrix(p, "concat_cols");
    if (p.shape()[0] != n) {
      throw DimensionError("concat_cols row mismatch: " + shape_string(p.shape()) + " vs " +
                           std::to_string(n) + " rows");
    }
    widths.push_back(p.shape()[1]);
    total += p.shape()[1];
  }
  std::vector<double> out(n * total);
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const auto pv = parts[p].values();
    const std::size_t w = widths[p];
    for (std::size_t r = 0; r < n; ++r)
      std::copy_n(pv.begin() + static_cast<std::ptrdiff_t>(r * w), w, out.begin() + static_cast<std::ptrdiff_t>(r * total + offset));
    offset += w;
  }
  std::vector<Tensor> parents(parts.begin(), parts.end());
  return make_result({n, total}, std::move(out), std::move(parents),
                     [widths = std::move(widths), n, total](Node& node) {
                       std::size_t offset = 0;
                       for (std::size_t p = 0; p < widths.size(); ++p) {
                         const std::size_t w = widths[p];
                         if (double* g = grad_of(node, p))
                           for (std::size_t r = 0; r < n; ++r)
                             for (std::size_t j = 0; j < w; ++j) g[r * w + j] += node.grad[r * total + offset + j];
                         offset += w;
                       }
                     });
}

Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end) {
  require_matrix(x, "slice_cols");
  const std::size_t n = x.shape()[0], d = x.shape()[1];
  if (begin >= end || end > d) {
    throw DimensionError("slice_cols [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") out of range for " + shape_string(x.shape()));
  }
  const std::size_t w = end - begin;
  const auto xv = x.values();
  std::vector<double> out(n * w);
  for (std::size_t r = 0; r < n; ++r)
    std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>(r * d + begin), w, out.begin() + static_cast<std::ptrdiff_t>(r * w));
  return make_result({n, w}, std::move(out), {x}, [n, d, w, begin](Node& node) {
    if (double* g = grad_of(node, 0))
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t j = 0; j < w; ++j) g[r * d + begin + j] += node.grad[r * w + j];
  });
}

Tensor standardize_cols(const Tensor& x, double eps) {
  require_matrix(x, "standardize_cols");
  const std::size_t n = x.shape()[0], d = x.shape()[1];
  if (n == 0) throw DimensionError("standardize_cols over an empty batch");
  const auto xv = x.values();
  std::vector<double> inv_std(d);
  std::vector<double> out(n * d);
  for (std::size_t c = 0; c < d; ++c) {
    double mu = 0.0;
    for (std::size_t r = 0; r < n; ++r) mu += xv[r * d + c];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
      const double dev = xv[r * d + c] - mu;
      var += dev * dev;
    }
    var /= static_cast<double>(n);
    inv_std[c] = 1.0 / std::sqrt(var + eps);
    for (std::size_t r = 0; r < n; ++r) out[r * d + c] = (xv[r * d + c] - mu) * inv_std[c];
  }
  return make_result({n, d}, std::move(out), {x}, [n, d, inv_std = std::move(inv_std)](Node& node) {
    double* g = grad_of(node, 0);
    if (!g) return;
    const double inv_n = 1.0 / static_cast<double>(n);
    for (std::size_t c = 0; c < d; ++c) {
      double sum_dy = 0.0, sum_dy_y = 0.0;
      for (std::size_t r = 0; r < n; ++r) {
        sum_dy += node.grad[r * d + c];
        sum_dy_y += node.grad[r * d + c] * node.value[r * d + c];
      }
      for (std::size_t r = 0; r < n; ++r) {
        const double dy = node.grad[r * d + c];
        const double y = node.value[r * d + c];
        g[r * d + c] += inv_std[c] * (dy - inv_n * sum_dy - inv_n * y * sum_dy_y);
      }
    }
  });
}

}  // namespace dsmoe
