// Copyright 2026 The dsmoe Authors
// SPDX-License-Identifier: Apache-2.0

// Two-tower student, joint-feature teacher, accounting and checkpoints.

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "dsmoe/features.hpp"
#include "dsmoe/moe.hpp"
#include "dsmoe/sap.hpp"
#include "dsmoe/tensor.hpp"

namespace dsmoe {

struct ModelConfig {
  std::size_t hidden_dim = 64;
  std::size_t match_dim = 32;
  std::size_t experts = 3;
  std::size_t rank = 4;
  std::size_t teacher_hidden = 128;
  std::size_t teacher_layers = 2;
  bool use_sap = true;
  bool use_dsbn = true;
  DsbnOptions dsbn;

  bool operator==(const ModelConfig& o) const {
    return hidden_dim == o.hidden_dim && match_dim == o.match_dim && experts == o.experts &&
           rank == o.rank && teacher_hidden == o.teacher_hidden && teacher_layers == o.teacher_layers &&
           use_sap == o.use_sap && use_dsbn == o.use_dsbn && dsbn.momentum == o.dsbn.momentum &&
           dsbn.eps == o.dsbn.eps;
  }
};

// One side of a batch: feature rows plus the scenario of each row.
struct TowerBatch {
  std::vector<const FeatureRow*> rows;
  std::vector<std::size_t> scenarios;

  std::size_t size() const { return rows.size(); }
};

class DsmoeModel {
 public:
  DsmoeModel(FeatureSchema schema, ModelConfig config, std::uint64_t seed);

  const FeatureSchema& schema() const { return schema_; }
  const ModelConfig& config() const { return config_; }

  // Tower output [n x match_dim] for a batch of one side.
  Tensor encode(Side side, const TowerBatch& batch, Mode mode);
  Tensor user_encode(const TowerBatch& batch, Mode mode) { return encode(Side::user, batch, mode); }
  Tensor item_encode(const TowerBatch& batch, Mode mode) { return encode(Side::item, batch, mode); }

  MoeBlock& tower(Side side) { return side == Side::user ? user_tower_ : item_tower_; }
  const MoeBlock& tower(Side side) const { return side == Side::user ? user_tower_ : item_tower_; }
  FieldEmbeddings& fields(Side side) { return side == Side::user ? user_fields_ : item_fields_; }
  const FieldEmbeddings& fields(Side side) const { return side == Side::user ? user_fields_ : item_fields_; }
  ScenarioEmbedding& scenario_embedding() { return scenarios_; }
  const ScenarioEmbedding& scenario_embedding() const { return scenarios_; }

  // Trainable tensors (what the optimizer sees).
  ParamList parameters() const;
  // Every persistent tensor: parameters (including inactive SAP factors) and
  // normalization statistics. Buffers are returned as copies.
  ParamList state() const;
  void load_state(const ParamList& state);

 private:
  FeatureSchema schema_;
  ModelConfig config_;
  FieldEmbeddings user_fields_;
  FieldEmbeddings item_fields_;
  ScenarioEmbedding scenarios_;
  MoeBlock user_tower_;
  MoeBlock item_tower_;
};

// <e_u, e_v> per row -> [n].
Tensor score_logits(const Tensor& user_vectors, const Tensor& item_vectors);
// sigma(<e_u, e_v>) per row -> [n].
Tensor score(const Tensor& user_vectors, const Tensor& item_vectors);
double score(std::span<const double> user_vector, std::span<const double> item_vector);

// Interaction-aware scorer over [user fields | item fields | e_s] with a
// trunk of SAP layers and PReLU, and a scalar head.
class TeacherModel {
 public:
  TeacherModel(FeatureSchema schema, ModelConfig config, std::uint64_t seed);

  const FeatureSchema& schema() const { return schema_; }
  const ModelConfig& config() const { return config_; }

  // Joint logits [n]; item batch rows pair with user batch rows, and the
  // scenario comes from the user batch.
  Tensor logits(const TowerBatch& users, const TowerBatch& items);
  Tensor probabilities(const TowerBatch& users, const TowerBatch& items);

  std::vector<SapLayer>& trunk() { return trunk_; }
  std::vector<Tensor>& slopes() { return slopes_; }
  Tensor& head_weight() { return head_weight_; }
  Tensor& head_bias() { return head_bias_; }

  ParamList parameters() const;
  ParamList state() const { return parameters(); }
  void load_state(const ParamList& state);

 private:
  FeatureSchema schema_;
  ModelConfig config_;
  FieldEmbeddings user_fields_;
  FieldEmbeddings item_fields_;
  ScenarioEmbedding scenarios_;
  std::vector<SapLayer> trunk_;
  std::vector<Tensor> slopes_;
  Tensor head_weight_;  // [1 x teacher_hidden]
  Tensor head_bias_;    // [1]
};

struct ModelStats {
  std::size_t param_count = 0;
  std::size_t flops_per_score = 0;
};

// Closed-form accounting from the architecture, for one user-item scoring
// pass (both towers, inner product and sigmoid).
ModelStats model_stats(const DsmoeModel& model);
ModelStats model_stats(const TeacherModel& model);

// Binary checkpoint:
//   "DSMOECKP" | u32 version | u32 kind | u64 schema fingerprint |
//   u32 header length | JSON header (schema, config) |
//   u64 tensor count | per tensor: u32 name length, name, u32 ndim,
//   u64 extents, float64 little-endian values.
enum class CheckpointKind : std::uint32_t { student = 0, teacher = 1 };

struct CheckpointInfo {
  CheckpointKind kind = CheckpointKind::student;
  std::uint64_t fingerprint = 0;
  FeatureSchema schema;
  ModelConfig config;
};

void save_checkpoint(const DsmoeModel& model, const std::filesystem::path& path);
void save_checkpoint(const TeacherModel& model, const std::filesystem::path& path);
CheckpointInfo read_checkpoint_info(const std::filesystem::path& path);
DsmoeModel load_student(const std::filesystem::path& path);
TeacherModel load_teacher(const std::filesystem::path& path);

}  // namespace dsmoe
