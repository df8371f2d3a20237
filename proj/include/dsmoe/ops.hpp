// Copyright 2026 The dsmoe Authors
// SPDX-License-Identifier: Apache-2.0

// Differentiable operations over dsmoe::Tensor.
//
// Elementwise broadcasting is limited to equal shapes and scalar-vs-tensor.
// Row-wise combinations that a batched network needs (bias rows, per-row
// scaling, gathers) are separate named operations with their own backward
// rules rather than general broadcasting.

#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "dsmoe/tensor.hpp"

namespace dsmoe {

enum class UnaryOp { neg, sigmoid, log, exp };
enum class BinaryOp { add, sub, mul };

Tensor elementwise(UnaryOp op, const Tensor& x);
Tensor elementwise(BinaryOp op, const Tensor& a, const Tensor& b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& x);
Tensor sigmoid(const Tensor& x);
// Throws DomainError on any non-positive input.
Tensor log(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor scale(const Tensor& x, double factor);

// x if x > 0 else slope * x, with one learnable scalar slope.
Tensor prelu(const Tensor& x, const Tensor& slope);

// Clamps into [lo, hi]; the gradient is zero where clamping is active.
Tensor clamp(const Tensor& x, double lo, double hi);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& x, Shape shape);

// Softmax of a vector [K] (or of each row of [n x K]) with max subtraction.
Tensor softmax(const Tensor& logits);
Tensor softmax_rows(const Tensor& logits);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

// x[n x d] + b[d] on every row.
Tensor add_rowwise(const Tensor& x, const Tensor& b);
// x[n x d] * g[d] on every row.
Tensor mul_rowwise(const Tensor& x, const Tensor& g);
// Row i of x[n x d] multiplied by c[i]; c holds n values ([n] or [n x 1]).
Tensor scale_rows(const Tensor& x, const Tensor& c);
// Per-row inner products of two [n x d] matrices -> [n].
Tensor row_dot(const Tensor& a, const Tensor& b);

// Rows of a [V x d] table selected by index -> [n x d].
Tensor gather_rows(const Tensor& table, std::span<const std::size_t> ids);
// Mean of the selected table rows per output row; empty lists give zero rows.
Tensor mean_pool_rows(const Tensor& table, std::span<const std::vector<std::size_t>> lists);
// Inverse of a row partition: part p's row i lands at output row index[p][i].
Tensor scatter_rows(std::span<const Tensor> parts,
                    std::span<const std::vector<std::size_t>> index, std::size_t rows);

Tensor concat_cols(std::span<const Tensor> parts);
Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end);

// Column-wise standardization with the batch's own statistics:
//   (x - mean) / sqrt(var + eps), var being the biased batch variance.
Tensor standardize_cols(const Tensor& x, double eps);

}  // namespace dsmoe
