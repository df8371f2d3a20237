// Copyright 2026 The dsmoe Authors
// SPDX-License-Identifier: Apache-2.0

// Scenario-adaptive projection: a shared affine map plus a rank-R correction
// whose R coefficients are generated from the scenario embedding,
//
//   b_s = gen_W e_s + gen_b                       (R coefficients)
//   y   = W_shared x + bias + B^T diag(b_s) A^T x
//
// The correction is evaluated in factored form and never materialized on
// the forward path.

#pragma once

#include <cstddef>
#include <string>

#include "dsmoe/rng.hpp"
#include "dsmoe/tensor.hpp"

namespace dsmoe {

struct SapDims {
  std::size_t in = 0;
  std::size_t out = 0;
  std::size_t rank = 0;
  std::size_t scenario_dim = 0;
};

class SapLayer {
 public:
  SapLayer() = default;
  // Requires 1 <= rank <= min(in, out). W_shared uses fan-in uniform init,
  // A is small random, B starts at zero so the correction is zero at step 0.
  SapLayer(SapDims dims, Rng& rng);

  const SapDims& dims() const { return dims_; }

  // With adaptive disabled the generator output is forced to zero and the
  // low-rank parameters drop out of collect() and of the forward graph.
  void set_adaptive(bool adaptive) { adaptive_ = adaptive; }
  bool adaptive() const { return adaptive_; }

  // e_s as [d_emb] -> [R], or [n x d_emb] -> [n x R].
  Tensor scenario_bias(const Tensor& scenario) const;

  // x as [d_in] with e_s [d_emb] -> [d_out]; or x [n x d_in] with e_s
  // [n x d_emb] (row i uses its own scenario) -> [n x d_out].
  Tensor forward(const Tensor& x, const Tensor& scenario) const;

  // Sum over r of (b_s)_r * outer(A[:, r], B[r, :]) -> [d_in x d_out].
  // Analysis/test path only.
  Tensor materialize_delta(const Tensor& scenario) const;

  Tensor& shared_weight() { return shared_weight_; }
  Tensor& bias() { return bias_; }
  Tensor& down() { return down_; }
  Tensor& up() { return up_; }
  Tensor& gen_weight() { return gen_weight_; }
  Tensor& gen_bias() { return gen_bias_; }
  const Tensor& shared_weight() const { return shared_weight_; }
  const Tensor& bias() const { return bias_; }
  const Tensor& down() const { return down_; }
  const Tensor& up() const { return up_; }
  const Tensor& gen_weight() const { return gen_weight_; }
  const Tensor& gen_bias() const { return gen_bias_; }

  // Trainable tensors (low-rank ones only while adaptive).
  void collect(ParamList& out, const std::string& prefix) const;
  // Every tensor regardless of the adaptive switch, for checkpoints.
  void collect_all(ParamList& out, const std::string& prefix) const;

  // d_out*d_in + d_out + R*(d_in + d_out) + R*d_emb + R.
  static std::size_t parameter_count(const SapDims& dims);
  // Share of parameter_count owned by the scenario-adaptive path.
  static std::size_t adaptive_parameter_count(const SapDims& dims);
  // Floating point operations of one forward pass on a single row.
  static std::size_t flops(const SapDims& dims, bool adaptive);

 private:
  SapDims dims_;
  bool adaptive_ = true;
  Tensor shared_weight_;  // [d_out x d_in]
  Tensor bias_;           // [d_out]
  Tensor down_;           // A: [d_in x R]
  Tensor up_;             // B: [R x d_out]
  Tensor gen_weight_;     // [R x d_emb]
  Tensor gen_bias_;       // [R]
};

}  // namespace dsmoe
