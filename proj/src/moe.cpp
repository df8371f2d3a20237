// Copyright 2026 The dsmoe Authors
// SPDX-License-Identifier: Apache-2.0

#include "dsmoe/moe.hpp"

#include <cmath>

#include "dsmoe/errors.hpp"
#include "dsmoe/features.hpp"
#include "dsmoe/ops.hpp"

namespace dsmoe {

Dsbn::Dsbn(std::size_t dim, std::size_t scenarios, bool per_scenario, DsbnOptions options)
    : dim_(dim), scenarios_(scenarios), per_scenario_(per_scenario), options_(options) {
  if (dim < 1 || scenarios < 1) throw DimensionError("DSBN needs dim >= 1 and at least one scenario");
  const std::size_t n_slots = per_scenario ? scenarios : 1;
  for (std::size_t s = 0; s < n_slots; ++s) {
    gamma_.push_back(Tensor::full({dim}, 1.0, true));
    beta_.push_back(Tensor::zeros({dim}, true));
    running_mean_.emplace_back(dim, 0.0);
    running_var_.emplace_back(dim, 1.0);
  }
}

std::size_t Dsbn::slot_for(std::size_t scenario) const {
  if (scenario >= scenarios_) {
    throw LookupError("scenario id " + std::to_string(scenario) + " out of range [0, " +
                      std::to_string(scenarios_) + ")");
  }
  return per_scenario_ ? scenario : 0;
}

Tensor normalize_with(const Tensor& x, std::span<const double> mean, std::span<const double> var,
                      double eps) {
  if (x.dim() != 2 || x.cols() != mean.size() || mean.size() != var.size()) {
    throw DimensionError("normalize_with: input " + shape_string(x.shape()) + " vs statistics of width " +
                         std::to_string(mean.size()));
  }
  const std::size_t n = x.rows(), d = x.cols();
  std::vector<double> root(d);
  for (std::size_t c = 0; c < d; ++c) root[c] = std::sqrt(var[c] + eps);
  const auto xv = x.values();
  std::vector<double> out(n * d);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] = (xv[r * d + c] - mean[c]) / root[c];
  return make_result({n, d}, std::move(out), {x}, [root = std::move(root), n, d](Node& node) {
    Node& parent = *node.parents[0];
    if (!parent.requires_grad) return;
    auto& g = parent.grad_buffer();
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < d; ++c) g[r * d + c] += node.grad[r * d + c] / root[c];
  });
}

Tensor Dsbn::normalize_partition(const Tensor& part, std::size_t slot, Mode mode) {
  const std::size_t m = part.rows();
  if (mode == Mode::train && m >= 2) {
    // Fold the batch statistics into the running estimates (unbiased variance).
    const auto v = part.values();
    auto& rm = running_mean_[slot];
    auto& rv = running_var_[slot];
    const double mom = options_.momentum;
    for (std::size_t c = 0; c < dim_; ++c) {
      double mu = 0.0;
      for (std::size_t r = 0; r < m; ++r) mu += v[r * dim_ + c];
      mu /= static_cast<double>(m);
      double ss = 0.0;
      for (std::size_t r = 0; r < m; ++r) {
        const double dev = v[r * dim_ + c] - mu;
        ss += dev * dev;
      }
      rm[c] = (1.0 - mom) * rm[c] + mom * mu;
      rv[c] = (1.0 - mom) * rv[c] + mom * ss / static_cast<double>(m - 1);
    }
    return standardize_cols(part, options_.eps);
  }
  if (mode == Mode::train) ++singleton_fallbacks_;
  return normalize_with(part, running_mean_[slot], running_var_[slot], options_.eps);
}

Tensor Dsbn::forward(const Tensor& x, std::span<const std::size_t> scenario_ids, Mode mode) {
  if (x.dim() != 2 || x.cols() != dim_) {
    throw DimensionError("DSBN input " + shape_string(x.shape()) + " vs width " + std::to_string(dim_));
  }
  const std::size_t n = x.rows();
  if (n < 1) throw DimensionError("DSBN over an empty batch");
  if (scenario_ids.size() != n) {
    throw DimensionError("DSBN got " + std::to_string(scenario_ids.size()) + " scenario ids for " +
                         std::to_string(n) + " rows");
  }
  std::vector<std::vector<std::size_t>> groups(slots());
  for (std::size_t r = 0; r < n; ++r) groups[slot_for(scenario_ids[r])].push_back(r);

  std::vector<Tensor> parts;
  std::vector<std::vector<std::size_t>> index;
  for (std::size_t slot = 0; slot < groups.size(); ++slot) {
    if (groups[slot].empty()) continue;
    const bool whole = groups[slot].size() == n;
    Tensor part = whole ? x : gather_rows(x, groups[slot]);
    Tensor normalized = normalize_partition(part, slot, mode);
    Tensor affine = add_rowwise(mul_rowwise(normalized, gamma_[slot]), beta_[slot]);
    if (whole) return affine;
    parts.push_back(std::move(affine));
    index.push_back(std::move(groups[slot]));
  }
  return scatter_rows(parts, index, n);
}

void Dsbn::collect(ParamList& out, const std::string& prefix) const {
  for (std::size_t s = 0; s < slots(); ++s) {
    out.push_back({prefix + "gamma." + std::to_string(s), gamma_[s]});
    out.push_back({prefix + "beta." + std::to_string(s), beta_[s]});
  }
}

ParamList Dsbn::buffers(const std::string& prefix) const {
  ParamList out;
  for (std::size_t s = 0; s < slots(); ++s) {
    out.push_back({prefix + "running_mean." + std::to_string(s), Tensor::from({dim_}, running_mean_[s])});
    out.push_back({prefix + "running_var." + std::to_string(s), Tensor::from({dim_}, running_var_[s])});
  }
  return out;
}

void Dsbn::load_buffer(std::size_t slot, bool mean, std::span<const double> values) {
  auto& target = mean ? running_mean_.at(slot) : running_var_.at(slot);
  if (values.size() != target.size()) throw DimensionError("DSBN buffer width mismatch");
  target.assign(values.begin(), values.end());
}

Expert::Expert(SapDims dims, std::size_t scenarios, bool per_scenario_norm, DsbnOptions options, Rng& rng)
    : sap_(dims, rng),
      slope_(Tensor::scalar(0.25, true)),
      norm_(dims.out, scenarios, per_scenario_norm, options) {}

Tensor Expert::forward(const Tensor& x, const Tensor& scenario, std::span<const std::size_t> scenario_ids,
                       Mode mode) {
  return norm_.forward(prelu(sap_.forward(x, scenario), slope_), scenario_ids, mode);
}

void Expert::collect(ParamList& out, const std::string& prefix) const {
  sap_.collect(out, prefix + "sap.");
  out.push_back({prefix + "prelu_slope", slope_});
  norm_.collect(out, prefix + "norm.");
}

GateNetwork::GateNetwork(std::size_t experts, std::size_t scenario_dim, Rng& rng)
    : weight_(uniform_table(experts, scenario_dim, 1.0 / std::sqrt(static_cast<double>(scenario_dim)), rng)),
      bias_(Tensor::zeros({experts}, true)) {
  if (experts < 1) throw DimensionError("gate needs at least one expert");
}

Tensor GateNetwork::weights(const Tensor& scenario) const {
  if (scenario.dim() == 1) {
    return reshape(weights(reshape(scenario, {1, scenario.size()})), {experts()});
  }
  if (scenario.dim() != 2 || scenario.cols() != weight_.cols()) {
    throw DimensionError("gate input " + shape_string(scenario.shape()) + " vs width " +
                         std::to_string(weight_.cols()));
  }
  return softmax_rows(add_rowwise(matmul(scenario, transpose(weight_)), bias_));
}

void GateNetwork::collect(ParamList& out, const std::string& prefix) const {
  out.push_back({prefix + "weight", weight_});
  out.push_back({prefix + "bias", bias_});
}

MoeBlock::MoeBlock(const MoeConfig& config, Rng& rng) : config_(config) {
  if (config.experts < 1) throw DimensionError("MoE block needs K >= 1 experts");
  const SapDims expert_dims{config.in, config.hidden, config.rank, config.scenario_dim};
  for (std::size_t k = 0; k < config.experts; ++k) {
    experts_.emplace_back(expert_dims, config.scenarios, config.use_dsbn, config.dsbn, rng);
    experts_.back().sap().set_adaptive(config.use_sap);
  }
  gate_ = GateNetwork(config.experts, config.scenario_dim, rng);
  forward_sap_ = SapLayer({config.hidden, config.out, config.rank, config.scenario_dim}, rng);
  forward_sap_.set_adaptive(config.use_sap);
}

Tensor MoeBlock::mixture(const Tensor& x, const Tensor& scenario, std::span<const std::size_t> scenario_ids,
                         Mode mode) {
  Tensor alpha = gate_.weights(scenario);  // [n x K]
  const std::size_t k_total = experts_.size();
  Tensor mixed;
  for (std::size_t k = 0; k < k_total; ++k) {
    Tensor out = experts_[k].forward(x, scenario, scenario_ids, mode);
    Tensor weighted = k_total == 1 ? out : scale_rows(out, slice_cols(alpha, k, k + 1));
    mixed = k == 0 ? weighted : add(mixed, weighted);
  }
  return mixed;
}

Tensor MoeBlock::forward(const Tensor& x, const Tensor& scenario, std::span<const std::size_t> scenario_ids,
                         Mode mode) {
  return forward_sap_.forward(mixture(x, scenario, scenario_ids, mode), scenario);
}

std::vector<const SapLayer*> MoeBlock::sap_layers() const {
  std::vector<const SapLayer*> out;
  for (const auto& e : experts_) out.push_back(&e.sap());
  out.push_back(&forward_sap_);
  return out;
}

void MoeBlock::collect(ParamList& out, const std::string& prefix) const {
  for (std::size_t k = 0; k < experts_.size(); ++k) experts_[k].collect(out, prefix + "expert" + std::to_string(k) + ".");
  gate_.collect(out, prefix + "gate.");
  forward_sap_.collect(out, prefix + "forward_sap.");
}

void MoeBlock::collect_all(ParamList& out, const std::string& prefix) const {
  for (std::size_t k = 0; k < experts_.size(); ++k) {
    const std::string p = prefix + "expert" + std::to_string(k) + ".";
    experts_[k].sap().collect_all(out, p + "sap.");
    out.push_back({p + "prelu_slope", experts_[k].slope()});
    experts_[k].norm().collect(out, p + "norm.");
  }
  gate_.collect(out, prefix + "gate.");
  forward_sap_.collect_all(out, prefix + "forward_sap.");
}

ParamList MoeBlock::buffers(const std::string& prefix) const {
  ParamList out;
  for (std::size_t k = 0; k < experts_.size(); ++k) {
    auto b = experts_[k].norm().buffers(prefix + "expert" + std::to_string(k) + ".norm.");
    out.insert(out.end(), b.begin(), b.end());
  }
  return out;
}

std::size_t MoeBlock::parameter_count() const {
  const auto& c = config_;
  const SapDims expert_dims{c.in, c.hidden, c.rank, c.scenario_dim};
  const SapDims head_dims{c.hidden, c.out, c.rank, c.scenario_dim};
  auto sap_count = [&](const SapDims& d) {
    return c.use_sap ? SapLayer::parameter_count(d) : SapLayer::parameter_count(d) - SapLayer::adaptive_parameter_count(d);
  };
  const std::size_t norm_slots = c.use_dsbn ? c.scenarios : 1;
  const std::size_t per_expert = sap_count(expert_dims) + 1 + 2 * c.hidden * norm_slots;
  return c.experts * per_expert + c.experts * c.scenario_dim + c.experts + sap_count(head_dims);
}

std::size_t MoeBlock::flops() const {
  const auto& c = config_;
  const SapDims expert_dims{c.in, c.hidden, c.rank, c.scenario_dim};
  const SapDims head_dims{c.hidden, c.out, c.rank, c.scenario_dim};
  std::size_t total = 0;
  // Expert: SAP, PReLU, normalization (subtract, divide, scale, shift).
  total += c.experts * (SapLayer::flops(expert_dims, c.use_sap) + c.hidden + 4 * c.hidden);
  // Gate logits and softmax (exp, sum, divide, max subtraction).
  total += 2 * c.scenario_dim * c.experts + c.experts + 4 * c.experts;
  // Weighted sum of expert outputs.
  total += 2 * c.experts * c.hidden;
  total += SapLayer::flops(head_dims, c.use_sap);
  return total;
}

}  // namespace dsmoe
