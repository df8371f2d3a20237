// Copyright 2026 The dsmoe Authors
// SPDX-License-Identifier: Apache-2.0

// Exact top-K retrieval, per-scenario Recall@K, analyses and sweeps.

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "dsmoe/data.hpp"
#include "dsmoe/model.hpp"
#include "dsmoe/training.hpp"

namespace dsmoe {

// Frozen item encodings; row i belongs to item_ids()[i].
class RetrievalIndex {
 public:
  RetrievalIndex(std::vector<std::int64_t> item_ids, std::vector<double> matrix, std::size_t dim);

  // Encodes the whole catalog under one scenario in infer mode.
  static RetrievalIndex build(DsmoeModel& model, const Catalog& catalog, std::size_t scenario);

  const std::vector<std::int64_t>& item_ids() const { return ids_; }
  std::size_t size() const { return ids_.size(); }
  std::size_t dim() const { return dim_; }
  std::span<const double> row(std::size_t i) const { return {matrix_.data() + i * dim_, dim_}; }
  std::span<const double> matrix() const { return matrix_; }

 private:
  std::vector<std::int64_t> ids_;
  std::vector<double> matrix_;
  std::size_t dim_ = 0;
};

// The k best items by inner product, descending, ties by ascending id.
// Requires 1 <= k <= index.size(); excluded items are skipped, so fewer than
// k ids come back only when the remaining pool is smaller than k.
std::vector<std::int64_t> top_k_retrieve(const RetrievalIndex& index, std::span<const double> user_vector,
                                         std::size_t k, const std::unordered_set<std::int64_t>* exclude = nullptr);

// |retrieved & relevant| / |relevant|; nullopt for an empty relevant set.
std::optional<double> recall_at_k(std::span<const std::int64_t> retrieved,
                                  const std::unordered_set<std::int64_t>& relevant);

// Cosine similarity of per-scenario b_s profiles (all user-tower SAP layers
// concatenated) -> [S x S]. Zero-norm profiles give NaN rows and columns.
Tensor bs_similarity(const DsmoeModel& model);
// Mean user-tower gate weights per scenario over the dataset's records ->
// [S x K]; scenarios without records give NaN rows.
Tensor expert_activation_profile(const DsmoeModel& model, const Dataset& dataset);

struct EvalReport {
  std::vector<std::size_t> ks;
  std::size_t scenarios = 0;
  std::size_t catalog_size = 0;
  std::uint64_t fingerprint = 0;
  // recall[s][j]: mean Recall@ks[j] over the (user, scenario) pairs of s;
  // NaN when s has no evaluable pair.
  std::vector<std::vector<double>> recall;
  std::vector<double> overall;  // mean over all pairs
  std::vector<std::size_t> pairs;         // evaluated pairs per scenario
  std::vector<std::size_t> test_records;  // test positives per scenario
  std::size_t skipped_pairs = 0;          // pairs with no relevant item
  Tensor activation;                      // [S x K]
  Tensor similarity;                      // [S x S]
  ModelStats stats;
};

// Relevant items of a (u, s) pair are its test positives; its train
// positives are removed from the candidate ranking.
EvalReport evaluate(DsmoeModel& model, const Dataset& train, const Dataset& test, std::span<const std::size_t> ks);

// Nested JSON document; NaN is written as null.
std::string report_json(const EvalReport& report);
Table recall_table(const EvalReport& report);
Table matrix_table(const Tensor& matrix, const std::string& row_label, const std::string& column_prefix);
// report.json, recall.csv, activation.csv, similarity.csv under dir.
void write_report(const EvalReport& report, const std::filesystem::path& dir);

struct RunResult {
  TrainResult training;
  EvalReport report;
};

// Fresh student (and teacher when distilling) seeded with train.seed,
// trained and evaluated.
RunResult run_experiment(const SynthData& data, const ModelConfig& model, const TrainConfig& train,
                         std::span<const std::size_t> ks);

struct SweepGrid {
  std::string parameter;  // "experts" or "rank"
  std::vector<std::size_t> values;
  std::vector<std::uint64_t> seeds;
};

// Parses "experts=1..8", "rank=1..16" or "rank=1,2,4".
SweepGrid parse_grid(const std::string& text, std::size_t seed_count, std::uint64_t base_seed);

struct SweepCell {
  std::size_t value = 0;
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  EvalReport report;
};

using SweepProgress = std::function<void(const SweepCell&)>;

// One train+evaluate run per (value, seed). A failing cell is recorded and
// the sweep carries on.
std::vector<SweepCell> sweep(const SweepGrid& grid, const SynthData& data, const ModelConfig& model,
                             const TrainConfig& train, std::span<const std::size_t> ks,
                             const SweepProgress& progress = {});
// Columns: parameter, value, seed, status, error, then recall_s<d>_at<K>.
Table sweep_table(const SweepGrid& grid, std::span<const SweepCell> cells, std::size_t scenarios,
                  std::span<const std::size_t> ks);

}  // namespace dsmoe
