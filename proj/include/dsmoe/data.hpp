// Copyright 2026 The dsmoe Authors
// SPDX-License-Identifier: Apache-2.0

// Datasets, the synthetic multi-scenario generator and CSV interchange.

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "dsmoe/features.hpp"

namespace dsmoe {

struct CatalogItem {
  std::int64_t item_id = 0;
  FeatureRow features;  // item-side fields

  bool operator==(const CatalogItem&) const = default;
};

// Candidate pool with an id -> position index. Items are kept sorted by id.
class Catalog {
 public:
  Catalog() = default;
  explicit Catalog(std::vector<CatalogItem> items);

  const std::vector<CatalogItem>& items() const { return items_; }
  std::size_t size() const { return items_.size(); }
  bool empty() const { return items_.empty(); }
  const CatalogItem& operator[](std::size_t position) const { return items_[position]; }
  std::optional<std::size_t> position(std::int64_t item_id) const;
  const CatalogItem& item(std::int64_t item_id) const;

  bool operator==(const Catalog& other) const { return items_ == other.items_; }

 private:
  std::vector<CatalogItem> items_;
  std::unordered_map<std::int64_t, std::size_t> index_;
};

enum class Split { train, test };

struct Dataset {
  FeatureSchema schema;
  std::vector<InteractionRecord> records;
  Catalog catalog;
  Split split = Split::train;

  // Throws on the first schema-invalid record.
  void validate() const;
};

struct SynthSpec {
  std::size_t n_users = 400;
  std::size_t n_items = 5000;
  std::size_t n_scenarios = 4;
  std::vector<double> scenario_proportions{0.84, 0.09, 0.04, 0.03};
  std::size_t latent_dim = 8;
  double scenario_shift_strength = 1.0;
  std::size_t interactions_total = 50000;
  double noise = 1.0;  // softmax temperature over latent inner products
  std::size_t n_categories = 20;
  std::size_t embedding_dim = 16;
  double test_fraction = 0.2;
  std::uint64_t seed = 1;

  void validate() const;
};

// Fields: user_id (sparse), user_activity (dense), item_id (sparse),
// item_category (sparse).
FeatureSchema synth_schema(const SynthSpec& spec);

struct SynthData {
  Dataset train;
  Dataset test;
};

// Latent-factor generator. Each event draws a scenario from the proportions
// and a uniform user; the positives of a (user, scenario) pair are drawn
// without replacement from softmax(<shift_d(u), v> / noise) using the
// Gumbel-top-k construction. shift_d(u) = u + strength * G_d u / sqrt(L)
// with a fixed Gaussian G_d per scenario. Each pair's positives are split
// train/test by test_fraction (rounded, at least one kept for training).
SynthData synth_generate(const SynthSpec& spec);

// CSV layout: user_id,item_id,scenario_id,label, then every schema field in
// declaration order; sequential values are '|'-joined id lists.
void write_csv(const Dataset& dataset, const std::filesystem::path& path);
// Reads and validates a records file. The catalog is taken from `catalog`
// when given, otherwise collected from the records.
Dataset load_csv(const std::filesystem::path& path, const FeatureSchema& schema, Split split,
                 const Catalog* catalog = nullptr);

// item_id followed by the item-side fields.
void write_items_csv(const Catalog& catalog, const FeatureSchema& schema, const std::filesystem::path& path);
Catalog load_items_csv(const std::filesystem::path& path, const FeatureSchema& schema);

// Data directory layout shared by the CLI: schema.json, items.csv,
// train.csv, test.csv.
void write_data_dir(const SynthData& data, const std::filesystem::path& dir);
SynthData load_data_dir(const std::filesystem::path& dir);

// Plain comma-separated table with a header row.
struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(const std::string& name) const;
  bool operator==(const Table&) const = default;
};

void write_table(const Table& table, const std::filesystem::path& path);
Table read_table(const std::filesystem::path& path);

// Shortest decimal text that parses back to the same double.
std::string format_double(double value);

// Writes to a sibling temporary file and renames it into place.
void write_text_atomic(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

}  // namespace dsmoe
