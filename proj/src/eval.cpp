// Copyright 2026 The dsmoe Authors
// SPDX-License-Identifier: Apache-2.0

#include "dsmoe/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

#include "dsmoe/errors.hpp"
#include "dsmoe/ops.hpp"
#include "json.hpp"

namespace dsmoe {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
constexpr std::size_t kEncodeChunk = 1024;

}  // namespace

RetrievalIndex::RetrievalIndex(std::vector<std::int64_t> item_ids, std::vector<double> matrix, std::size_t dim)
    : ids_(std::move(item_ids)), matrix_(std::move(matrix)), dim_(dim) {
  if (dim_ == 0 || matrix_.size() != ids_.size() * dim_) {
    throw DimensionError("retrieval index: " + std::to_string(matrix_.size()) + " values for " +
                         std::to_string(ids_.size()) + " items of width " + std::to_string(dim_));
  }
}

RetrievalIndex RetrievalIndex::build(DsmoeModel& model, const Catalog& catalog, std::size_t scenario) {
  NoGradGuard guard;
  const std::size_t dim = model.config().match_dim;
  std::vector<std::int64_t> ids;
  std::vector<double> matrix;
  ids.reserve(catalog.size());
  matrix.reserve(catalog.size() * dim);
  for (std::size_t begin = 0; begin < catalog.size(); begin += kEncodeChunk) {
    const std::size_t end = std::min(begin + kEncodeChunk, catalog.size());
    TowerBatch batch;
    for (std::size_t i = begin; i < end; ++i) {
      batch.rows.push_back(&catalog[i].features);
      batch.scenarios.push_back(scenario);
      ids.push_back(catalog[i].item_id);
    }
    const Tensor enc = model.item_encode(batch, Mode::infer);
    matrix.insert(matrix.end(), enc.values().begin(), enc.values().end());
  }
  return RetrievalIndex(std::move(ids), std::move(matrix), dim);
}

std::vector<std::int64_t> top_k_retrieve(const RetrievalIndex& index, std::span<const double> user_vector,
                                         std::size_t k, const std::unordered_set<std::int64_t>* exclude) {
  if (k < 1 || k > index.size()) {
    throw ArgumentError("K = " + std::to_string(k) + " is outside [1, " + std::to_string(index.size()) + "]");
  }
  if (user_vector.size() != index.dim()) {
    throw DimensionError("user vector has width " + std::to_string(user_vector.size()) + ", index has " +
                         std::to_string(index.dim()));
  }
  std::vector<std::pair<double, std::int64_t>> scored;
  scored.reserve(index.size());
  const auto& ids = index.item_ids();
  const std::size_t d = index.dim();
  const double* m = index.matrix().data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (exclude && exclude->count(ids[i])) continue;
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += user_vector[j] * m[i * d + j];
    scored.emplace_back(s, ids[i]);
  }
  auto better = [](const auto& a, const auto& b) { return a.first > b.first || (a.first == b.first && a.second < b.second); };
  const std::size_t take = std::min(k, scored.size());
  std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(take), scored.end(), better);
  std::vector<std::int64_t> out(take);
  for (std::size_t i = 0; i < take; ++i) out[i] = scored[i].second;
  return out;
}

std::optional<double> recall_at_k(std::span<const std::int64_t> retrieved,
                                  const std::unordered_set<std::int64_t>& relevant) {
  if (relevant.empty()) return std::nullopt;
  std::unordered_set<std::int64_t> seen;
  std::size_t hits = 0;
  for (auto id : retrieved)
    if (relevant.count(id) && seen.insert(id).second) ++hits;
  return static_cast<double>(hits) / static_cast<double>(relevant.size());
}

Tensor bs_similarity(const DsmoeModel& model) {
  NoGradGuard guard;
  const std::size_t S = model.schema().scenario_cardinality();
  const auto layers = model.tower(Side::user).sap_layers();
  std::vector<std::vector<double>> profiles(S);
  for (std::size_t s = 0; s < S; ++s) {
    const Tensor e_s = model.scenario_embedding().embed_one(s);
    for (const SapLayer* layer : layers) {
      const Tensor b = layer->scenario_bias(e_s);
      profiles[s].insert(profiles[s].end(), b.values().begin(), b.values().end());
    }
  }
  std::vector<double> norms(S);
  for (std::size_t s = 0; s < S; ++s) {
    double sq = 0.0;
    for (double v : profiles[s]) sq += v * v;
    norms[s] = std::sqrt(sq);
  }
  std::vector<double> out(S * S, kNaN);
  for (std::size_t i = 0; i < S; ++i) {
    if (norms[i] == 0.0) continue;
    out[i * S + i] = 1.0;
    for (std::size_t j = i + 1; j < S; ++j) {
      if (norms[j] == 0.0) continue;
      double dot = 0.0;
      for (std::size_t t = 0; t < profiles[i].size(); ++t) dot += profiles[i][t] * profiles[j][t];
      const double c = dot / (norms[i] * norms[j]);
      out[i * S + j] = c;
      out[j * S + i] = c;
    }
  }
  return Tensor::from({S, S}, std::move(out));
}

Tensor expert_activation_profile(const DsmoeModel& model, const Dataset& dataset) {
  NoGradGuard guard;
  const std::size_t S = model.schema().scenario_cardinality();
  const auto& gate = model.tower(Side::user).gate();
  const std::size_t K = gate.experts();
  std::vector<std::vector<double>> alpha(S);
  for (std::size_t s = 0; s < S; ++s) {
    const Tensor a = gate.weights(model.scenario_embedding().embed_one(s));
    alpha[s].assign(a.values().begin(), a.values().end());
  }
  std::vector<double> sums(S * K, 0.0);
  std::vector<std::size_t> counts(S, 0);
  for (const auto& r : dataset.records) {
    if (r.scenario_id >= S) throw LookupError("record scenario " + std::to_string(r.scenario_id) + " is unknown");
    for (std::size_t k = 0; k < K; ++k) sums[r.scenario_id * K + k] += alpha[r.scenario_id][k];
    ++counts[r.scenario_id];
  }
  std::vector<double> out(S * K, kNaN);
  for (std::size_t s = 0; s < S; ++s) {
    if (counts[s] == 0) continue;
    for (std::size_t k = 0; k < K; ++k) out[s * K + k] = sums[s * K + k] / static_cast<double>(counts[s]);
  }
  return Tensor::from({S, K}, std::move(out));
}

EvalReport evaluate(DsmoeModel& model, const Dataset& train, const Dataset& test, std::span<const std::size_t> ks) {
  if (!(test.schema == model.schema())) throw ContractError("test data schema differs from the model's");
  const Catalog& catalog = test.catalog.empty() ? train.catalog : test.catalog;
  if (ks.empty()) throw ArgumentError("no K values requested");
  for (auto k : ks) {
    if (k < 1 || k > catalog.size()) {
      throw ArgumentError("K = " + std::to_string(k) + " is outside [1, " + std::to_string(catalog.size()) +
                          "] for this catalog");
    }
  }
  const std::size_t S = model.schema().scenario_cardinality();
  EvalReport report;
  report.ks.assign(ks.begin(), ks.end());
  report.scenarios = S;
  report.catalog_size = catalog.size();
  report.fingerprint = model.schema().fingerprint();
  report.recall.assign(S, std::vector<double>(ks.size(), kNaN));
  report.overall.assign(ks.size(), kNaN);
  report.pairs.assign(S, 0);
  report.test_records.assign(S, 0);

  struct Pair {
    const FeatureRow* user = nullptr;
    std::unordered_set<std::int64_t> relevant;
  };
  using Key = std::pair<std::size_t, std::int64_t>;
  std::map<Key, Pair> pairs;
  for (const auto& r : test.records) {
    auto& p = pairs[{r.scenario_id, r.user_id}];
    if (!p.user) p.user = &r.user_features;
    if (r.label == 1) {
      p.relevant.insert(r.item_id);
      ++report.test_records[r.scenario_id];
    }
  }
  std::map<Key, std::unordered_set<std::int64_t>> seen;
  for (const auto& r : train.records)
    if (r.label == 1) seen[{r.scenario_id, r.user_id}].insert(r.item_id);

  const std::size_t max_k = *std::max_element(ks.begin(), ks.end());
  std::vector<double> overall_sum(ks.size(), 0.0);
  std::size_t overall_pairs = 0;
  NoGradGuard guard;
  for (std::size_t s = 0; s < S; ++s) {
    std::vector<const std::pair<const Key, Pair>*> scenario_pairs;
    for (auto it = pairs.lower_bound({s, std::numeric_limits<std::int64_t>::min()});
         it != pairs.end() && it->first.first == s; ++it) {
      if (it->second.relevant.empty()) {
        ++report.skipped_pairs;
        continue;
      }
      scenario_pairs.push_back(&*it);
    }
    if (scenario_pairs.empty()) continue;
    const RetrievalIndex index = RetrievalIndex::build(model, catalog, s);
    std::vector<double> sums(ks.size(), 0.0);
    for (std::size_t begin = 0; begin < scenario_pairs.size(); begin += kEncodeChunk) {
      const std::size_t end = std::min(begin + kEncodeChunk, scenario_pairs.size());
      TowerBatch batch;
      for (std::size_t i = begin; i < end; ++i) {
        batch.rows.push_back(scenario_pairs[i]->second.user);
        batch.scenarios.push_back(s);
      }
      const Tensor users = model.user_encode(batch, Mode::infer);
      const std::size_t d = users.cols();
      for (std::size_t i = begin; i < end; ++i) {
        const auto& [key, pair] = *scenario_pairs[i];
        auto excluded = seen.find(key);
        const auto ranked = top_k_retrieve(index, users.values().subspan((i - begin) * d, d), max_k,
                                           excluded == seen.end() ? nullptr : &excluded->second);
        for (std::size_t j = 0; j < ks.size(); ++j) {
          const std::size_t take = std::min(ks[j], ranked.size());
          const double r = *recall_at_k(std::span(ranked).first(take), pair.relevant);
          sums[j] += r;
          overall_sum[j] += r;
        }
      }
    }
    report.pairs[s] = scenario_pairs.size();
    overall_pairs += scenario_pairs.size();
    for (std::size_t j = 0; j < ks.size(); ++j) report.recall[s][j] = sums[j] / static_cast<double>(report.pairs[s]);
  }
  if (overall_pairs > 0)
    for (std::size_t j = 0; j < ks.size(); ++j) report.overall[j] = overall_sum[j] / static_cast<double>(overall_pairs);
  report.activation = expert_activation_profile(model, test);
  report.similarity = bs_similarity(model);
  report.stats = model_stats(model);
  return report;
}

namespace {

nlohmann::ordered_json matrix_json(const Tensor& m) {
  auto out = nlohmann::ordered_json::array();
  for (std::size_t r = 0; r < m.rows(); ++r) {
    auto row = nlohmann::ordered_json::array();
    for (std::size_t c = 0; c < m.cols(); ++c) row.push_back(m.at(r, c));
    out.push_back(row);
  }
  return out;
}

std::string recall_column(std::size_t k) { return "recall@" + std::to_string(k); }

}  // namespace

std::string report_json(const EvalReport& report) {
  nlohmann::ordered_json j;
  j["recall_averaging"] = "mean over (user, scenario) pairs";
  j["ks"] = report.ks;
  j["catalog_size"] = report.catalog_size;
  j["schema_fingerprint"] = fingerprint_hex(report.fingerprint);
  auto scenarios = nlohmann::ordered_json::array();
  for (std::size_t s = 0; s < report.scenarios; ++s) {
    nlohmann::ordered_json row;
    row["scenario"] = s;
    row["pairs"] = report.pairs[s];
    row["test_records"] = report.test_records[s];
    for (std::size_t k = 0; k < report.ks.size(); ++k) row[recall_column(report.ks[k])] = report.recall[s][k];
    scenarios.push_back(row);
  }
  j["scenarios"] = scenarios;
  nlohmann::ordered_json overall;
  for (std::size_t k = 0; k < report.ks.size(); ++k) overall[recall_column(report.ks[k])] = report.overall[k];
  j["overall"] = overall;
  j["skipped_pairs"] = report.skipped_pairs;
  j["expert_activation"] = matrix_json(report.activation);
  j["bs_similarity"] = matrix_json(report.similarity);
  j["model_stats"] = {{"param_count", report.stats.param_count}, {"flops_per_score", report.stats.flops_per_score}};
  return j.dump(2) + "\n";
}

Table recall_table(const EvalReport& report) {
  Table t;
  t.header = {"scenario", "pairs", "test_records"};
  for (auto k : report.ks) t.header.push_back(recall_column(k));
  std::size_t total_pairs = 0, total_records = 0;
  for (std::size_t s = 0; s < report.scenarios; ++s) {
    std::vector<std::string> row{std::to_string(s), std::to_string(report.pairs[s]),
                                 std::to_string(report.test_records[s])};
    for (double r : report.recall[s]) row.push_back(format_double(r));
    t.rows.push_back(std::move(row));
    total_pairs += report.pairs[s];
    total_records += report.test_records[s];
  }
  std::vector<std::string> all{"all", std::to_string(total_pairs), std::to_string(total_records)};
  for (double r : report.overall) all.push_back(format_double(r));
  t.rows.push_back(std::move(all));
  return t;
}

Table matrix_table(const Tensor& matrix, const std::string& row_label, const std::string& column_prefix) {
  Table t;
  t.header = {row_label};
  for (std::size_t c = 0; c < matrix.cols(); ++c) t.header.push_back(column_prefix + std::to_string(c));
  for (std::size_t r = 0; r < matrix.rows(); ++r) {
    std::vector<std::string> row{std::to_string(r)};
    for (std::size_t c = 0; c < matrix.cols(); ++c) row.push_back(format_double(matrix.at(r, c)));
    t.rows.push_back(std::move(row));
  }
  return t;
}

void write_report(const EvalReport& report, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory '" + dir.string() + "': " + ec.message());
  write_text_atomic(dir / "report.json", report_json(report));
  write_table(recall_table(report), dir / "recall.csv");
  write_table(matrix_table(report.activation, "scenario", "expert"), dir / "activation.csv");
  write_table(matrix_table(report.similarity, "scenario", "scenario"), dir / "similarity.csv");
}

RunResult run_experiment(const SynthData& data, const ModelConfig& model, const TrainConfig& train_config,
                         std::span<const std::size_t> ks) {
  DsmoeModel student(data.train.schema, model, train_config.seed);
  RunResult out;
  if (train_config.distill_weight > 0.0) {
    TeacherModel teacher(data.train.schema, model, train_config.seed);
    out.training = train(student, &teacher, data.train, train_config);
  } else {
    out.training = train(student, nullptr, data.train, train_config);
  }
  out.report = evaluate(student, data.train, data.test, ks);
  return out;
}

SweepGrid parse_grid(const std::string& text, std::size_t seed_count, std::uint64_t base_seed) {
  const auto eq = text.find('=');
  if (eq == std::string::npos) throw ArgumentError("grid '" + text + "' must look like experts=1..8");
  SweepGrid grid;
  grid.parameter = text.substr(0, eq);
  if (grid.parameter != "experts" && grid.parameter != "rank") {
    throw ArgumentError("grid parameter must be 'experts' or 'rank', got '" + grid.parameter + "'");
  }
  const std::string body = text.substr(eq + 1);
  auto parse = [&](const std::string& s) -> std::size_t {
    std::size_t pos = 0;
    unsigned long v = 0;
    try {
      v = std::stoul(s, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos != s.size() || s.empty() || v == 0) throw ArgumentError("bad grid value '" + s + "' in '" + text + "'");
    return v;
  };
  if (const auto dots = body.find(".."); dots != std::string::npos) {
    const std::size_t lo = parse(body.substr(0, dots)), hi = parse(body.substr(dots + 2));
    if (lo > hi) throw ArgumentError("empty grid range '" + body + "'");
    for (std::size_t v = lo; v <= hi; ++v) grid.values.push_back(v);
  } else {
    std::size_t start = 0;
    while (start <= body.size()) {
      const auto comma = body.find(',', start);
      grid.values.push_back(parse(body.substr(start, comma == std::string::npos ? std::string::npos : comma - start)));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
  }
  if (seed_count < 1) throw ArgumentError("a sweep needs at least one seed");
  for (std::size_t i = 0; i < seed_count; ++i) grid.seeds.push_back(base_seed + i);
  return grid;
}

std::vector<SweepCell> sweep(const SweepGrid& grid, const SynthData& data, const ModelConfig& model,
                             const TrainConfig& train_config, std::span<const std::size_t> ks,
                             const SweepProgress& progress) {
  if (grid.values.empty() || grid.seeds.empty()) throw ArgumentError("sweep grid is empty");
  std::vector<SweepCell> cells;
  for (auto value : grid.values) {
    for (auto seed : grid.seeds) {
      SweepCell cell;
      cell.value = value;
      cell.seed = seed;
      ModelConfig m = model;
      (grid.parameter == "experts" ? m.experts : m.rank) = value;
      TrainConfig t = train_config;
      t.seed = seed;
      try {
        cell.report = run_experiment(data, m, t, ks).report;
        cell.ok = true;
      } catch (const Error& e) {
        cell.error = e.what();
        for (char& c : cell.error)
          if (c == ',' || c == '\n') c = ';';
      }
      if (progress) progress(cell);
      cells.push_back(std::move(cell));
    }
  }
  return cells;
}

Table sweep_table(const SweepGrid& grid, std::span<const SweepCell> cells, std::size_t scenarios,
                  std::span<const std::size_t> ks) {
  Table t;
  t.header = {"parameter", "value", "seed", "status", "error"};
  for (std::size_t s = 0; s < scenarios; ++s)
    for (auto k : ks) t.header.push_back("recall_s" + std::to_string(s) + "_at" + std::to_string(k));
  for (const auto& c : cells) {
    std::vector<std::string> row{grid.parameter, std::to_string(c.value), std::to_string(c.seed),
                                 c.ok ? "ok" : "failed", c.error};
    for (std::size_t s = 0; s < scenarios; ++s)
      for (std::size_t j = 0; j < ks.size(); ++j) row.push_back(format_double(c.ok ? c.report.recall[s][j] : NAN));
    t.rows.push_back(std::move(row));
  }
  return t;
}

}  // namespace dsmoe
