// Copyright 2026 The dsmoe Authors
// SPDX-License-Identifier: Apache-2.0

#include "dsmoe/features.hpp"

#include <cmath>
#include <cstdio>
#include <set>
#include <sstream>

#include "dsmoe/errors.hpp"
#include "dsmoe/ops.hpp"
#include "json.hpp"

namespace dsmoe {

std::string_view to_string(FieldKind kind) {
  switch (kind) {
    case FieldKind::sparse: return "sparse";
    case FieldKind::dense: return "dense";
    case FieldKind::sequential: return "sequential";
  }
  return "?";
}

std::string_view to_string(Side side) { return side == Side::user ? "user" : "item"; }

FieldKind parse_field_kind(std::string_view text) {
  if (text == "sparse") return FieldKind::sparse;
  if (text == "dense") return FieldKind::dense;
  if (text == "sequential") return FieldKind::sequential;
  throw ValidationError("unknown field kind '" + std::string(text) + "'");
}

Side parse_side(std::string_view text) {
  if (text == "user") return Side::user;
  if (text == "item") return Side::item;
  throw ValidationError("unknown field side '" + std::string(text) + "'");
}

FeatureSchema::FeatureSchema(std::vector<FieldSpec> fields, std::size_t scenario_cardinality,
                             std::size_t scenario_dim)
    : fields_(std::move(fields)),
      scenario_cardinality_(scenario_cardinality),
      scenario_dim_(scenario_dim) {
  if (scenario_cardinality_ < 1) throw ValidationError("schema needs at least one scenario");
  if (scenario_dim_ < 1) throw ValidationError("scenario embedding dimension must be >= 1");
  std::set<std::string> names;
  for (std::size_t i = 0; i < fields_.size(); ++i) {
    const auto& f = fields_[i];
    if (f.name.empty()) throw ValidationError("field " + std::to_string(i) + " has an empty name");
    if (!names.insert(f.name).second) throw ValidationError("duplicate field name '" + f.name + "'");
    if (f.embedding_dim < 1) throw ValidationError("field '" + f.name + "' has embedding_dim 0");
    if (f.kind != FieldKind::dense && f.cardinality < 1) {
      throw ValidationError("field '" + f.name + "' needs cardinality >= 1");
    }
    (f.side == Side::user ? user_fields_ : item_fields_).push_back(i);
  }
  for (Side side : {Side::user, Side::item}) {
    const auto& idx = side_fields(side);
    if (idx.empty()) {
      throw ValidationError("schema declares no " + std::string(to_string(side)) + " fields");
    }
    for (auto i : idx) {
      if (fields_[i].embedding_dim != fields_[idx[0]].embedding_dim) {
        throw ValidationError("embedding_dim differs across " + std::string(to_string(side)) +
                              " fields ('" + fields_[i].name + "')");
      }
    }
  }
}

const std::vector<std::size_t>& FeatureSchema::side_fields(Side side) const {
  return side == Side::user ? user_fields_ : item_fields_;
}

const FieldSpec& FeatureSchema::side_field(Side side, std::size_t position) const {
  return fields_.at(side_fields(side).at(position));
}

std::size_t FeatureSchema::side_dim(Side side) const {
  std::size_t total = 0;
  for (auto i : side_fields(side)) total += fields_[i].embedding_dim;
  return total;
}

std::optional<std::size_t> FeatureSchema::find(std::string_view name) const {
  for (std::size_t i = 0; i < fields_.size(); ++i)
    if (fields_[i].name == name) return i;
  return std::nullopt;
}

std::string FeatureSchema::canonical() const {
  std::ostringstream out;
  out << "scenarios=" << scenario_cardinality_ << ";scenario_dim=" << scenario_dim_ << ";";
  for (const auto& f : fields_) {
    out << f.name << ':' << to_string(f.kind) << ':' << to_string(f.side) << ':' << f.cardinality
        << ':' << f.embedding_dim << ';';
  }
  return out.str();
}

std::uint64_t FeatureSchema::fingerprint() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : canonical()) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string fingerprint_hex(std::uint64_t fingerprint) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fingerprint));
  return buf;
}

std::string FeatureSchema::to_json_text() const {
  nlohmann::ordered_json j;
  j["scenarios"] = scenario_cardinality_;
  j["scenario_dim"] = scenario_dim_;
  auto arr = nlohmann::ordered_json::array();
  for (const auto& f : fields_) {
    nlohmann::ordered_json jf;
    jf["name"] = f.name;
    jf["kind"] = std::string(to_string(f.kind));
    jf["side"] = std::string(to_string(f.side));
    if (f.kind != FieldKind::dense) jf["cardinality"] = f.cardinality;
    jf["embedding_dim"] = f.embedding_dim;
    arr.push_back(jf);
  }
  j["fields"] = arr;
  return j.dump(2);
}

FeatureSchema FeatureSchema::from_json_text(std::string_view text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("schema is not valid JSON: ") + e.what());
  }
  try {
    std::vector<FieldSpec> fields;
    for (const auto& jf : j.at("fields")) {
      FieldSpec f;
      f.name = jf.at("name").get<std::string>();
      f.kind = parse_field_kind(jf.at("kind").get<std::string>());
      f.side = parse_side(jf.at("side").get<std::string>());
      f.cardinality = jf.value("cardinality", std::size_t{0});
      f.embedding_dim = jf.value("embedding_dim", std::size_t{16});
      fields.push_back(std::move(f));
    }
    return FeatureSchema(std::move(fields), j.at("scenarios").get<std::size_t>(),
                         j.value("scenario_dim", std::size_t{16}));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed schema: ") + e.what());
  }
}

namespace {

void validate_value(const FieldValue& value, const FieldSpec& f) {
  switch (f.kind) {
    case FieldKind::sparse: {
      const auto* v = std::get_if<std::int64_t>(&value);
      if (!v) throw ValidationError("field '" + f.name + "' expects an integer id");
      if (*v < 0 || static_cast<std::size_t>(*v) >= f.cardinality) {
        throw LookupError("field '" + f.name + "': id " + std::to_string(*v) +
                          " out of range [0, " + std::to_string(f.cardinality) + ")");
      }
      break;
    }
    case FieldKind::dense: {
      const auto* v = std::get_if<double>(&value);
      if (!v) throw ValidationError("field '" + f.name + "' expects a real value");
      if (!std::isfinite(*v)) throw ValidationError("field '" + f.name + "' has a non-finite value");
      break;
    }
    case FieldKind::sequential: {
      const auto* v = std::get_if<std::vector<std::int64_t>>(&value);
      if (!v) throw ValidationError("field '" + f.name + "' expects an id list");
      for (auto id : *v) {
        if (id < 0 || static_cast<std::size_t>(id) >= f.cardinality) {
          throw LookupError("field '" + f.name + "': sequence id " + std::to_string(id) +
                            " out of range [0, " + std::to_string(f.cardinality) + ")");
        }
      }
      break;
    }
  }
}

}  // namespace

void validate_row(const FeatureRow& row, const FeatureSchema& schema, Side side) {
  const auto& idx = schema.side_fields(side);
  if (row.size() != idx.size()) {
    throw ValidationError(std::string(to_string(side)) + " row has " + std::to_string(row.size()) +
                          " values, schema declares " + std::to_string(idx.size()));
  }
  for (std::size_t p = 0; p < idx.size(); ++p) validate_value(row[p], schema.fields()[idx[p]]);
}

void validate_record(const InteractionRecord& record, const FeatureSchema& schema) {
  if (record.label != 0 && record.label != 1) {
    throw ValidationError("label must be 0 or 1, got " + std::to_string(record.label));
  }
  if (record.scenario_id >= schema.scenario_cardinality()) {
    throw ValidationError("scenario id " + std::to_string(record.scenario_id) + " out of range [0, " +
                          std::to_string(schema.scenario_cardinality()) + ")");
  }
  validate_row(record.user_features, schema, Side::user);
  validate_row(record.item_features, schema, Side::item);
}

Tensor uniform_table(std::size_t rows, std::size_t cols, double bound, Rng& rng) {
  std::vector<double> values(rows * cols);
  for (auto& v : values) v = rng.uniform(-bound, bound);
  return Tensor::from({rows, cols}, std::move(values), true);
}

namespace {

// Shared by embed_value and FieldEmbeddings::embed_field.
Tensor embed_batch(const FieldSpec& f, const Tensor& table, std::span<const FieldValue* const> values) {
  const std::size_t n = values.size();
  for (const auto* v : values) validate_value(*v, f);
  switch (f.kind) {
    case FieldKind::sparse: {
      std::vector<std::size_t> ids(n);
      for (std::size_t i = 0; i < n; ++i) ids[i] = static_cast<std::size_t>(std::get<std::int64_t>(*values[i]));
      return gather_rows(table, ids);
    }
    case FieldKind::dense: {
      std::vector<double> column(n);
      for (std::size_t i = 0; i < n; ++i) column[i] = std::get<double>(*values[i]);
      return matmul(Tensor::from({n, 1}, std::move(column)), table);
    }
    case FieldKind::sequential: {
      std::vector<std::vector<std::size_t>> lists(n);
      for (std::size_t i = 0; i < n; ++i)
        for (auto id : std::get<std::vector<std::int64_t>>(*values[i])) lists[i].push_back(static_cast<std::size_t>(id));
      return mean_pool_rows(table, lists);
    }
  }
  throw ContractError("unknown field kind");
}

}  // namespace

Tensor embed_value(const FieldValue& value, const FieldSpec& field, const Tensor& table) {
  const FieldValue* ptr = &value;
  Tensor row = embed_batch(field, table, std::span<const FieldValue* const>(&ptr, 1));
  return reshape(row, {row.cols()});
}

FieldEmbeddings::FieldEmbeddings(const FeatureSchema& schema, Side side, Rng& rng) : side_(side) {
  for (auto i : schema.side_fields(side)) {
    const auto& f = schema.fields()[i];
    specs_.push_back(f);
    const std::size_t rows = f.kind == FieldKind::dense ? 1 : f.cardinality;
    tables_.push_back(uniform_table(rows, f.embedding_dim, 1.0 / std::sqrt(static_cast<double>(f.embedding_dim)), rng));
    output_dim_ += f.embedding_dim;
  }
}

Tensor FieldEmbeddings::embed_field(std::size_t position, std::span<const FeatureRow* const> rows) const {
  if (position >= specs_.size()) throw LookupError("field position " + std::to_string(position) + " out of range");
  std::vector<const FieldValue*> values(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i]->size() != specs_.size()) {
      throw ValidationError(std::string(to_string(side_)) + " row has " + std::to_string(rows[i]->size()) +
                            " values, expected " + std::to_string(specs_.size()));
    }
    values[i] = &(*rows[i])[position];
  }
  return embed_batch(specs_[position], tables_[position], values);
}

Tensor FieldEmbeddings::assemble(std::span<const FeatureRow* const> rows) const {
  if (specs_.size() == 1) return embed_field(0, rows);
  std::vector<Tensor> parts;
  parts.reserve(specs_.size());
  for (std::size_t p = 0; p < specs_.size(); ++p) parts.push_back(embed_field(p, rows));
  return concat_cols(parts);
}

void FieldEmbeddings::collect(ParamList& out, const std::string& prefix) const {
  for (std::size_t p = 0; p < specs_.size(); ++p) out.push_back({prefix + specs_[p].name, tables_[p]});
}

ScenarioEmbedding::ScenarioEmbedding(std::size_t scenarios, std::size_t dim, Rng& rng)
    : table_(uniform_table(scenarios, dim, 1.0 / std::sqrt(static_cast<double>(dim)), rng)) {}

Tensor ScenarioEmbedding::embed(std::span<const std::size_t> scenario_ids) const {
  return gather_rows(table_, scenario_ids);
}

Tensor ScenarioEmbedding::embed_one(std::size_t scenario_id) const {
  const std::size_t id = scenario_id;
  return reshape(gather_rows(table_, std::span<const std::size_t>(&id, 1)), {dim()});
}

void ScenarioEmbedding::collect(ParamList& out, const std::string& prefix) const {
  out.push_back({prefix + "scenario_table", table_});
}

}  // namespace dsmoe
