// Copyright 2026 The dsmoe Authors
// SPDX-License-Identifier: Apache-2.0

#include "dsmoe/sap.hpp"

#include <algorithm>
#include <cmath>

#include "dsmoe/errors.hpp"
#include "dsmoe/features.hpp"
#include "dsmoe/ops.hpp"

namespace dsmoe {

SapLayer::SapLayer(SapDims dims, Rng& rng) : dims_(dims) {
  if (dims.in < 1 || dims.out < 1 || dims.scenario_dim < 1) {
    throw DimensionError("SAP layer dimensions must be positive");
  }
  if (dims.rank < 1 || dims.rank > std::min(dims.in, dims.out)) {
    throw DimensionError("SAP rank " + std::to_string(dims.rank) + " must lie in [1, min(" +
                         std::to_string(dims.in) + ", " + std::to_string(dims.out) + ")]");
  }
  const double fan_in = 1.0 / std::sqrt(static_cast<double>(dims.in));
  shared_weight_ = uniform_table(dims.out, dims.in, fan_in, rng);
  bias_ = Tensor::zeros({dims.out}, true);
  down_ = uniform_table(dims.in, dims.rank, fan_in, rng);
  up_ = Tensor::zeros({dims.rank, dims.out}, true);
  gen_weight_ = uniform_table(dims.rank, dims.scenario_dim,
                              1.0 / std::sqrt(static_cast<double>(dims.scenario_dim)), rng);
  gen_bias_ = Tensor::zeros({dims.rank}, true);
}

Tensor SapLayer::scenario_bias(const Tensor& scenario) const {
  if (scenario.dim() == 1) {
    if (scenario.size() != dims_.scenario_dim) {
      throw DimensionError("scenario embedding " + shape_string(scenario.shape()) + " vs generator input " +
                           std::to_string(dims_.scenario_dim));
    }
    return reshape(scenario_bias(reshape(scenario, {1, dims_.scenario_dim})), {dims_.rank});
  }
  if (scenario.dim() != 2 || scenario.cols() != dims_.scenario_dim) {
    throw DimensionError("scenario embedding " + shape_string(scenario.shape()) + " vs generator input " +
                         std::to_string(dims_.scenario_dim));
  }
  return add_rowwise(matmul(scenario, transpose(gen_weight_)), gen_bias_);
}

Tensor SapLayer::forward(const Tensor& x, const Tensor& scenario) const {
  if (x.dim() == 1) {
    if (scenario.dim() != 1) {
      throw DimensionError("single-row SAP input needs a single scenario vector, got " +
                           shape_string(scenario.shape()));
    }
    Tensor y = forward(reshape(x, {1, x.size()}), reshape(scenario, {1, scenario.size()}));
    return reshape(y, {dims_.out});
  }
  if (x.dim() != 2 || x.cols() != dims_.in) {
    throw DimensionError("SAP input " + shape_string(x.shape()) + " vs layer input width " +
                         std::to_string(dims_.in));
  }
  if (scenario.dim() != 2 || scenario.rows() != x.rows()) {
    throw DimensionError("SAP scenario batch " + shape_string(scenario.shape()) + " vs input " +
                         shape_string(x.shape()));
  }
  Tensor y = add_rowwise(matmul(x, transpose(shared_weight_)), bias_);
  if (!adaptive_) return y;
  Tensor coefficients = scenario_bias(scenario);         // [n x R]
  Tensor projected = matmul(x, down_);                   // [n x R]
  Tensor correction = matmul(mul(projected, coefficients), up_);  // [n x d_out]
  return add(y, correction);
}

Tensor SapLayer::materialize_delta(const Tensor& scenario) const {
  if (scenario.dim() != 1) {
    throw DimensionError("materialize_delta takes one scenario vector, got " + shape_string(scenario.shape()));
  }
  Tensor coefficients = scenario_bias(scenario);
  if (!adaptive_) coefficients = Tensor::zeros({dims_.rank});
  return matmul(mul_rowwise(down_, coefficients), up_);
}

void SapLayer::collect(ParamList& out, const std::string& prefix) const {
  out.push_back({prefix + "shared_weight", shared_weight_});
  out.push_back({prefix + "bias", bias_});
  if (adaptive_) {
    out.push_back({prefix + "down", down_});
    out.push_back({prefix + "up", up_});
    out.push_back({prefix + "gen_weight", gen_weight_});
    out.push_back({prefix + "gen_bias", gen_bias_});
  }
}

void SapLayer::collect_all(ParamList& out, const std::string& prefix) const {
  out.push_back({prefix + "shared_weight", shared_weight_});
  out.push_back({prefix + "bias", bias_});
  out.push_back({prefix + "down", down_});
  out.push_back({prefix + "up", up_});
  out.push_back({prefix + "gen_weight", gen_weight_});
  out.push_back({prefix + "gen_bias", gen_bias_});
}

std::size_t SapLayer::parameter_count(const SapDims& d) {
  return d.out * d.in + d.out + adaptive_parameter_count(d);
}

std::size_t SapLayer::adaptive_parameter_count(const SapDims& d) {
  return d.rank * (d.in + d.out) + d.rank * d.scenario_dim + d.rank;
}

std::size_t SapLayer::flops(const SapDims& d, bool adaptive) {
  std::size_t total = 2 * d.in * d.out + d.out;
  if (adaptive) {
    total += 2 * d.scenario_dim * d.rank + d.rank;  // generator
    total += 2 * d.in * d.rank + d.rank;            // A^T x, scaled by b_s
    total += 2 * d.rank * d.out + d.out;            // B^T (.), added
  }
  return total;
}

}  // namespace dsmoe
