// Copyright 2026 The dsmoe Authors
// SPDX-License-Identifier: Apache-2.0

// Feature schema, interaction records and the embedding layer.

#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "dsmoe/rng.hpp"
#include "dsmoe/tensor.hpp"

namespace dsmoe {

enum class FieldKind { sparse, dense, sequential };
enum class Side { user, item };

std::string_view to_string(FieldKind kind);
std::string_view to_string(Side side);
FieldKind parse_field_kind(std::string_view text);
Side parse_side(std::string_view text);

struct FieldSpec {
  std::string name;
  FieldKind kind = FieldKind::sparse;
  Side side = Side::user;
  std::size_t cardinality = 0;  // sparse and sequential only
  std::size_t embedding_dim = 16;
};

class FeatureSchema {
 public:
  FeatureSchema() = default;
  // Validates names, cardinalities and per-side dimension agreement.
  FeatureSchema(std::vector<FieldSpec> fields, std::size_t scenario_cardinality,
                std::size_t scenario_dim = 16);

  const std::vector<FieldSpec>& fields() const { return fields_; }
  std::size_t scenario_cardinality() const { return scenario_cardinality_; }
  std::size_t scenario_dim() const { return scenario_dim_; }

  // Indices into fields() of one side, in declaration order.
  const std::vector<std::size_t>& side_fields(Side side) const;
  const FieldSpec& side_field(Side side, std::size_t position) const;
  std::size_t side_width(Side side) const { return side_fields(side).size(); }
  // Width of the concatenated embedding of one side.
  std::size_t side_dim(Side side) const;
  std::optional<std::size_t> find(std::string_view name) const;

  // Stable text form; the fingerprint is FNV-1a 64 over it.
  std::string canonical() const;
  std::uint64_t fingerprint() const;
  std::string to_json_text() const;
  static FeatureSchema from_json_text(std::string_view text);

  bool operator==(const FeatureSchema& other) const { return canonical() == other.canonical(); }

 private:
  std::vector<FieldSpec> fields_;
  std::size_t scenario_cardinality_ = 0;
  std::size_t scenario_dim_ = 16;
  std::vector<std::size_t> user_fields_;
  std::vector<std::size_t> item_fields_;
};

std::string fingerprint_hex(std::uint64_t fingerprint);

// Raw value of one field: integer id (sparse), real (dense) or id list
// (sequential).
using FieldValue = std::variant<std::int64_t, double, std::vector<std::int64_t>>;
// Values of one side's fields, in FeatureSchema::side_fields order.
using FeatureRow = std::vector<FieldValue>;

struct InteractionRecord {
  std::int64_t user_id = 0;
  std::int64_t item_id = 0;
  std::size_t scenario_id = 0;
  int label = 0;
  FeatureRow user_features;
  FeatureRow item_features;

  bool operator==(const InteractionRecord&) const = default;
};

void validate_row(const FeatureRow& row, const FeatureSchema& schema, Side side);
void validate_record(const InteractionRecord& record, const FeatureSchema& schema);

// Embedding of a single value under its field's table:
// sparse -> table row, dense -> value * projection row, sequential -> mean of
// element rows (zero vector when empty).
Tensor embed_value(const FieldValue& value, const FieldSpec& field, const Tensor& table);

// Per-field embedding tables of one side.
class FieldEmbeddings {
 public:
  FieldEmbeddings() = default;
  // Tables initialized uniform in [-1/sqrt(d), 1/sqrt(d)].
  FieldEmbeddings(const FeatureSchema& schema, Side side, Rng& rng);

  Side side() const { return side_; }
  std::size_t output_dim() const { return output_dim_; }
  const Tensor& table(std::size_t position) const { return tables_.at(position); }
  Tensor& table(std::size_t position) { return tables_.at(position); }

  // One field embedded over a batch -> [n x d].
  Tensor embed_field(std::size_t position, std::span<const FeatureRow* const> rows) const;
  // Concatenation of every field in schema order -> [n x side_dim].
  Tensor assemble(std::span<const FeatureRow* const> rows) const;

  void collect(ParamList& out, const std::string& prefix) const;

 private:
  Side side_ = Side::user;
  std::vector<FieldSpec> specs_;
  std::vector<Tensor> tables_;
  std::size_t output_dim_ = 0;
};

// Scenario table W_s, one row per scenario.
class ScenarioEmbedding {
 public:
  ScenarioEmbedding() = default;
  ScenarioEmbedding(std::size_t scenarios, std::size_t dim, Rng& rng);

  std::size_t scenarios() const { return table_.rows(); }
  std::size_t dim() const { return table_.cols(); }
  const Tensor& table() const { return table_; }
  Tensor& table() { return table_; }

  // Rows for a batch of scenario ids -> [n x dim].
  Tensor embed(std::span<const std::size_t> scenario_ids) const;
  // Single scenario -> [dim].
  Tensor embed_one(std::size_t scenario_id) const;

  void collect(ParamList& out, const std::string& prefix) const;

 private:
  Tensor table_;
};

Tensor uniform_table(std::size_t rows, std::size_t cols, double bound, Rng& rng);

}  // namespace dsmoe
