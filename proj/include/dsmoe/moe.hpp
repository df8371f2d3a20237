// Copyright 2026 The dsmoe Authors
// SPDX-License-Identifier: Apache-2.0

// SAP-based multi-gate mixture of experts.
//
//   Expert_k(x | e_s, d) = DSBN_k(PReLU(SAP_k(x | e_s)), d)
//   alpha                = softmax(W_gate e_s + b_gate)
//   z_mix                = sum_k alpha_k Expert_k(x | e_s, d)
//   z_out                = SAP_forward(z_mix | e_s)

#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "dsmoe/rng.hpp"
#include "dsmoe/sap.hpp"
#include "dsmoe/tensor.hpp"

namespace dsmoe {

enum class Mode { train, infer };

struct DsbnOptions {
  double momentum = 0.1;
  double eps = 1e-5;
};

// Domain-specific batch normalization: one set of affine parameters and
// running statistics per scenario. With per_scenario = false every scenario
// maps to a single shared slot (plain batch normalization).
class Dsbn {
 public:
  Dsbn() = default;
  Dsbn(std::size_t dim, std::size_t scenarios, bool per_scenario, DsbnOptions options = {});

  std::size_t dim() const { return dim_; }
  std::size_t scenarios() const { return scenarios_; }
  bool per_scenario() const { return per_scenario_; }
  std::size_t slots() const { return gamma_.size(); }
  std::size_t slot_for(std::size_t scenario) const;
  const DsbnOptions& options() const { return options_; }

  // Rows are grouped by scenario slot. Train mode normalizes each group by its
  // own batch statistics and folds them into the running estimates; a group
  // of one row falls back to the running statistics (counted in
  // singleton_fallbacks). Infer mode uses running statistics throughout.
  Tensor forward(const Tensor& x, std::span<const std::size_t> scenario_ids, Mode mode);

  Tensor& gamma(std::size_t slot) { return gamma_.at(slot); }
  Tensor& beta(std::size_t slot) { return beta_.at(slot); }
  const Tensor& gamma(std::size_t slot) const { return gamma_.at(slot); }
  const Tensor& beta(std::size_t slot) const { return beta_.at(slot); }
  std::span<double> running_mean(std::size_t slot) { return running_mean_.at(slot); }
  std::span<double> running_var(std::size_t slot) { return running_var_.at(slot); }
  std::span<const double> running_mean(std::size_t slot) const { return running_mean_.at(slot); }
  std::span<const double> running_var(std::size_t slot) const { return running_var_.at(slot); }

  std::size_t singleton_fallbacks() const { return singleton_fallbacks_; }

  void collect(ParamList& out, const std::string& prefix) const;
  // Running statistics as tensors (copies), for checkpoints.
  ParamList buffers(const std::string& prefix) const;
  void load_buffer(std::size_t slot, bool mean, std::span<const double> values);

 private:
  Tensor normalize_partition(const Tensor& part, std::size_t slot, Mode mode);

  std::size_t dim_ = 0;
  std::size_t scenarios_ = 0;
  bool per_scenario_ = true;
  DsbnOptions options_;
  std::vector<Tensor> gamma_;
  std::vector<Tensor> beta_;
  std::vector<std::vector<double>> running_mean_;
  std::vector<std::vector<double>> running_var_;
  std::size_t singleton_fallbacks_ = 0;
};

// (x - mean) / sqrt(var + eps) with constant statistics.
Tensor normalize_with(const Tensor& x, std::span<const double> mean, std::span<const double> var,
                      double eps);

class Expert {
 public:
  Expert() = default;
  Expert(SapDims dims, std::size_t scenarios, bool per_scenario_norm, DsbnOptions options, Rng& rng);

  // SAP -> PReLU -> DSBN on a [n x d_in] batch.
  Tensor forward(const Tensor& x, const Tensor& scenario, std::span<const std::size_t> scenario_ids,
                 Mode mode);

  SapLayer& sap() { return sap_; }
  const SapLayer& sap() const { return sap_; }
  Tensor& slope() { return slope_; }
  const Tensor& slope() const { return slope_; }
  Dsbn& norm() { return norm_; }
  const Dsbn& norm() const { return norm_; }

  void collect(ParamList& out, const std::string& prefix) const;

 private:
  SapLayer sap_;
  Tensor slope_;
  Dsbn norm_;
};

class GateNetwork {
 public:
  GateNetwork() = default;
  GateNetwork(std::size_t experts, std::size_t scenario_dim, Rng& rng);

  std::size_t experts() const { return weight_.rows(); }
  // e_s [d_emb] -> alpha [K], or [n x d_emb] -> [n x K].
  Tensor weights(const Tensor& scenario) const;

  Tensor& weight() { return weight_; }
  Tensor& bias() { return bias_; }
  const Tensor& weight() const { return weight_; }
  const Tensor& bias() const { return bias_; }

  void collect(ParamList& out, const std::string& prefix) const;

 private:
  Tensor weight_;  // [K x d_emb]
  Tensor bias_;    // [K]
};

struct MoeConfig {
  std::size_t in = 0;
  std::size_t hidden = 64;
  std::size_t out = 32;
  std::size_t experts = 3;
  std::size_t rank = 4;
  std::size_t scenario_dim = 16;
  std::size_t scenarios = 1;
  bool use_sap = true;
  bool use_dsbn = true;
  DsbnOptions dsbn;
};

class MoeBlock {
 public:
  MoeBlock() = default;
  MoeBlock(const MoeConfig& config, Rng& rng);

  const MoeConfig& config() const { return config_; }

  // z_mix for a batch; rows may span scenarios.
  Tensor mixture(const Tensor& x, const Tensor& scenario, std::span<const std::size_t> scenario_ids,
                 Mode mode);
  // z_output = SAP_forward(z_mix).
  Tensor forward(const Tensor& x, const Tensor& scenario, std::span<const std::size_t> scenario_ids,
                 Mode mode);

  std::vector<Expert>& experts() { return experts_; }
  const std::vector<Expert>& experts() const { return experts_; }
  GateNetwork& gate() { return gate_; }
  const GateNetwork& gate() const { return gate_; }
  SapLayer& forward_sap() { return forward_sap_; }
  const SapLayer& forward_sap() const { return forward_sap_; }

  // Every SAP layer of the block, experts first.
  std::vector<const SapLayer*> sap_layers() const;

  void collect(ParamList& out, const std::string& prefix) const;
  void collect_all(ParamList& out, const std::string& prefix) const;
  ParamList buffers(const std::string& prefix) const;

  std::size_t parameter_count() const;
  std::size_t flops() const;

 private:
  MoeConfig config_;
  std::vector<Expert> experts_;
  GateNetwork gate_;
  SapLayer forward_sap_;
};

}  // namespace dsmoe
