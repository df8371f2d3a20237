// Copyright 2026 The dsmoe Authors
// SPDX-License-Identifier: Apache-2.0

#include "dsmoe/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include "dsmoe/errors.hpp"
#include "dsmoe/rng.hpp"

namespace dsmoe {

Catalog::Catalog(std::vector<CatalogItem> items) : items_(std::move(items)) {
  std::sort(items_.begin(), items_.end(),
            [](const CatalogItem& a, const CatalogItem& b) { return a.item_id < b.item_id; });
  for (std::size_t i = 0; i < items_.size(); ++i) {
    if (!index_.emplace(items_[i].item_id, i).second) {
      throw ValidationError("catalog lists item " + std::to_string(items_[i].item_id) + " twice");
    }
  }
}

std::optional<std::size_t> Catalog::position(std::int64_t item_id) const {
  auto it = index_.find(item_id);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

const CatalogItem& Catalog::item(std::int64_t item_id) const {
  auto pos = position(item_id);
  if (!pos) throw LookupError("item " + std::to_string(item_id) + " is not in the catalog");
  return items_[*pos];
}

void Dataset::validate() const {
  for (std::size_t i = 0; i < records.size(); ++i) {
    try {
      validate_record(records[i], schema);
    } catch (const Error& e) {
      throw ValidationError("record " + std::to_string(i) + ": " + e.what());
    }
  }
  for (const auto& item : catalog.items()) validate_row(item.features, schema, Side::item);
}

void SynthSpec::validate() const {
  if (n_users < 1 || n_items < 2) throw ValidationError("synthetic spec needs >= 1 user and >= 2 items");
  if (n_scenarios < 1) throw ValidationError("synthetic spec needs >= 1 scenario");
  if (scenario_proportions.size() != n_scenarios) {
    throw ValidationError("scenario_proportions has " + std::to_string(scenario_proportions.size()) +
                          " entries for " + std::to_string(n_scenarios) + " scenarios");
  }
  double total = 0.0;
  for (double p : scenario_proportions) {
    if (!(p > 0.0)) throw ValidationError("scenario proportions must be positive");
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ValidationError("scenario proportions must sum to 1");
  if (latent_dim < 1) throw ValidationError("latent_dim must be >= 1");
  if (!(noise > 0.0)) throw ValidationError("noise must be positive");
  if (!(scenario_shift_strength >= 0.0)) throw ValidationError("scenario_shift_strength must be >= 0");
  if (n_categories < 1 || embedding_dim < 1) throw ValidationError("n_categories and embedding_dim must be >= 1");
  if (!(test_fraction >= 0.0 && test_fraction < 1.0)) throw ValidationError("test_fraction must lie in [0, 1)");
  if (interactions_total < 1) throw ValidationError("interactions_total must be >= 1");
}

FeatureSchema synth_schema(const SynthSpec& spec) {
  const std::size_t d = spec.embedding_dim;
  return FeatureSchema({{"user_id", FieldKind::sparse, Side::user, spec.n_users, d},
                        {"user_activity", FieldKind::dense, Side::user, 0, d},
                        {"item_id", FieldKind::sparse, Side::item, spec.n_items, d},
                        {"item_category", FieldKind::sparse, Side::item, spec.n_categories, d}},
                       spec.n_scenarios, d);
}

SynthData synth_generate(const SynthSpec& spec) {
  spec.validate();
  const std::size_t L = spec.latent_dim;
  const std::size_t S = spec.n_scenarios;
  Rng rng(spec.seed);

  std::vector<double> users(spec.n_users * L), items(spec.n_items * L);
  for (auto& v : users) v = rng.normal();
  for (auto& v : items) v = rng.normal();
  std::vector<std::vector<double>> shifts(S, std::vector<double>(L * L));
  const double shift_scale = spec.scenario_shift_strength / std::sqrt(static_cast<double>(L));
  for (auto& g : shifts)
    for (auto& v : g) v = rng.normal() * shift_scale;
  std::vector<double> directions(spec.n_categories * L);
  for (auto& v : directions) v = rng.normal();

  // Category = best-aligned random direction.
  std::vector<std::int64_t> category(spec.n_items);
  for (std::size_t i = 0; i < spec.n_items; ++i) {
    double best = -INFINITY;
    for (std::size_t c = 0; c < spec.n_categories; ++c) {
      double dot = 0.0;
      for (std::size_t l = 0; l < L; ++l) dot += items[i * L + l] * directions[c * L + l];
      if (dot > best) {
        best = dot;
        category[i] = static_cast<std::int64_t>(c);
      }
    }
  }

  // Event counts per (scenario, user).
  std::vector<double> cumulative(S);
  std::partial_sum(spec.scenario_proportions.begin(), spec.scenario_proportions.end(), cumulative.begin());
  std::vector<std::size_t> counts(S * spec.n_users, 0);
  std::vector<std::size_t> user_total(spec.n_users, 0);
  for (std::size_t t = 0; t < spec.interactions_total; ++t) {
    const double u01 = rng.uniform();
    std::size_t s = 0;
    while (s + 1 < S && u01 >= cumulative[s]) ++s;
    const std::size_t u = rng.index(spec.n_users);
    ++counts[s * spec.n_users + u];
    ++user_total[u];
  }
  for (auto c : counts) {
    if (c > spec.n_items) {
      throw SamplingError("a (user, scenario) pair needs " + std::to_string(c) + " distinct positives but only " +
                          std::to_string(spec.n_items) + " items exist");
    }
  }

  // Standardized log activity as the dense user feature.
  std::vector<double> activity(spec.n_users);
  double mu = 0.0, sq = 0.0;
  for (std::size_t u = 0; u < spec.n_users; ++u) {
    activity[u] = std::log1p(static_cast<double>(user_total[u]));
    mu += activity[u];
  }
  mu /= static_cast<double>(spec.n_users);
  for (double a : activity) sq += (a - mu) * (a - mu);
  const double sd = std::sqrt(sq / static_cast<double>(spec.n_users));
  for (auto& a : activity) a = sd > 0.0 ? (a - mu) / sd : 0.0;

  SynthData out;
  const FeatureSchema schema = synth_schema(spec);
  std::vector<CatalogItem> catalog_items(spec.n_items);
  for (std::size_t i = 0; i < spec.n_items; ++i) {
    catalog_items[i] = {static_cast<std::int64_t>(i), FeatureRow{static_cast<std::int64_t>(i), category[i]}};
  }
  Catalog catalog(std::move(catalog_items));
  out.train = {schema, {}, catalog, Split::train};
  out.test = {schema, {}, catalog, Split::test};

  std::vector<double> shifted(L);
  std::vector<std::pair<double, std::size_t>> keyed(spec.n_items);
  for (std::size_t s = 0; s < S; ++s) {
    for (std::size_t u = 0; u < spec.n_users; ++u) {
      const std::size_t c = counts[s * spec.n_users + u];
      if (c == 0) continue;
      const double* base = &users[u * L];
      for (std::size_t a = 0; a < L; ++a) {
        double acc = base[a];
        for (std::size_t b = 0; b < L; ++b) acc += shifts[s][a * L + b] * base[b];
        shifted[a] = acc;
      }
      // Gumbel-perturbed logits; the top c are a draw without replacement.
      for (std::size_t i = 0; i < spec.n_items; ++i) {
        double dot = 0.0;
        for (std::size_t l = 0; l < L; ++l) dot += shifted[l] * items[i * L + l];
        double u01 = rng.uniform();
        while (u01 <= 0.0) u01 = rng.uniform();
        keyed[i] = {dot / spec.noise - std::log(-std::log(u01)), i};
      }
      std::partial_sort(keyed.begin(), keyed.begin() + static_cast<std::ptrdiff_t>(c), keyed.end(),
                        [](const auto& a, const auto& b) { return a.first > b.first || (a.first == b.first && a.second < b.second); });
      std::vector<std::size_t> chosen(c);
      for (std::size_t k = 0; k < c; ++k) chosen[k] = keyed[k].second;
      rng.shuffle(chosen.begin(), chosen.end());
      std::size_t n_test = static_cast<std::size_t>(std::floor(spec.test_fraction * static_cast<double>(c) + 0.5));
      n_test = std::min(n_test, c - 1);
      for (std::size_t k = 0; k < c; ++k) {
        const std::size_t i = chosen[k];
        InteractionRecord r;
        r.user_id = static_cast<std::int64_t>(u);
        r.item_id = static_cast<std::int64_t>(i);
        r.scenario_id = s;
        r.label = 1;
        r.user_features = {static_cast<std::int64_t>(u), activity[u]};
        r.item_features = {static_cast<std::int64_t>(i), category[i]};
        (k < n_test ? out.test : out.train).records.push_back(std::move(r));
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// CSV

std::string format_double(double value) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, value);
  return std::string(buf, res.ptr);
}

namespace {

std::vector<std::string> split_line(const std::string& line, char sep = ',') {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, sep)) out.push_back(cell);
  if (!line.empty() && line.back() == sep) out.emplace_back();
  return out;
}

std::string strip_cr(std::string line) {
  if (!line.empty() && line.back() == '\r') line.pop_back();
  return line;
}

std::int64_t parse_int(const std::string& text, std::size_t line, const std::string& field) {
  std::int64_t v = 0;
  auto res = std::from_chars(text.data(), text.data() + text.size(), v);
  if (res.ec != std::errc() || res.ptr != text.data() + text.size()) {
    throw ValidationError("line " + std::to_string(line) + ", field '" + field + "': '" + text +
                          "' is not an integer");
  }
  return v;
}

double parse_real(const std::string& text, std::size_t line, const std::string& field) {
  double v = 0.0;
  auto res = std::from_chars(text.data(), text.data() + text.size(), v);
  if (res.ec != std::errc() || res.ptr != text.data() + text.size()) {
    throw ValidationError("line " + std::to_string(line) + ", field '" + field + "': '" + text +
                          "' is not a number");
  }
  return v;
}

std::string format_value(const FieldValue& v) {
  if (const auto* i = std::get_if<std::int64_t>(&v)) return std::to_string(*i);
  if (const auto* d = std::get_if<double>(&v)) return format_double(*d);
  const auto& list = std::get<std::vector<std::int64_t>>(v);
  std::string out;
  for (std::size_t k = 0; k < list.size(); ++k) {
    if (k) out += '|';
    out += std::to_string(list[k]);
  }
  return out;
}

FieldValue parse_value(const std::string& text, const FieldSpec& f, std::size_t line) {
  switch (f.kind) {
    case FieldKind::sparse: return parse_int(text, line, f.name);
    case FieldKind::dense: return parse_real(text, line, f.name);
    case FieldKind::sequential: {
      std::vector<std::int64_t> ids;
      if (!text.empty())
        for (const auto& part : split_line(text, '|')) ids.push_back(parse_int(part, line, f.name));
      return ids;
    }
  }
  throw ContractError("unknown field kind");
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  return out;
}

std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  return in;
}

}  // namespace

void write_csv(const Dataset& dataset, const std::filesystem::path& path) {
  std::ostringstream out;
  const auto& schema = dataset.schema;
  out << "user_id,item_id,scenario_id,label";
  for (const auto& f : schema.fields()) out << ',' << f.name;
  out << '\n';
  const auto& user_idx = schema.side_fields(Side::user);
  const auto& item_idx = schema.side_fields(Side::item);
  for (const auto& r : dataset.records) {
    out << r.user_id << ',' << r.item_id << ',' << r.scenario_id << ',' << r.label;
    std::size_t up = 0, ip = 0;
    for (std::size_t i = 0; i < schema.fields().size(); ++i) {
      out << ',';
      if (up < user_idx.size() && user_idx[up] == i) {
        out << format_value(r.user_features.at(up++));
      } else if (ip < item_idx.size() && item_idx[ip] == i) {
        out << format_value(r.item_features.at(ip++));
      }
    }
    out << '\n';
  }
  write_text_atomic(path, out.str());
}

Dataset load_csv(const std::filesystem::path& path, const FeatureSchema& schema, Split split,
                 const Catalog* catalog) {
  auto in = open_in(path);
  std::string line;
  if (!std::getline(in, line)) throw ValidationError("'" + path.string() + "': missing header row");
  const auto header = split_line(strip_cr(line));
  std::vector<std::string> expected{"user_id", "item_id", "scenario_id", "label"};
  for (const auto& f : schema.fields()) expected.push_back(f.name);
  if (header != expected) {
    std::string want;
    for (const auto& e : expected) want += (want.empty() ? "" : ",") + e;
    throw ValidationError("'" + path.string() + "': header does not match schema; expected " + want);
  }
  Dataset ds;
  ds.schema = schema;
  ds.split = split;
  std::map<std::int64_t, FeatureRow> seen_items;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    line = strip_cr(line);
    if (line.empty()) continue;
    const auto cells = split_line(line);
    if (cells.size() != expected.size()) {
      throw ValidationError("line " + std::to_string(line_no) + ": expected " + std::to_string(expected.size()) +
                            " columns, found " + std::to_string(cells.size()));
    }
    InteractionRecord r;
    r.user_id = parse_int(cells[0], line_no, "user_id");
    r.item_id = parse_int(cells[1], line_no, "item_id");
    const auto scenario = parse_int(cells[2], line_no, "scenario_id");
    const auto label = parse_int(cells[3], line_no, "label");
    if (label != 0 && label != 1) {
      throw ValidationError("line " + std::to_string(line_no) + ", field 'label': must be 0 or 1, got " + cells[3]);
    }
    if (scenario < 0 || static_cast<std::size_t>(scenario) >= schema.scenario_cardinality()) {
      throw ValidationError("line " + std::to_string(line_no) + ", field 'scenario_id': unknown scenario " + cells[2]);
    }
    r.scenario_id = static_cast<std::size_t>(scenario);
    r.label = static_cast<int>(label);
    for (std::size_t i = 0; i < schema.fields().size(); ++i) {
      const auto& f = schema.fields()[i];
      auto value = parse_value(cells[4 + i], f, line_no);
      (f.side == Side::user ? r.user_features : r.item_features).push_back(std::move(value));
    }
    try {
      validate_record(r, schema);
    } catch (const Error& e) {
      throw ValidationError("line " + std::to_string(line_no) + ": " + e.what());
    }
    if (!catalog) seen_items.emplace(r.item_id, r.item_features);
    ds.records.push_back(std::move(r));
  }
  if (catalog) {
    ds.catalog = *catalog;
  } else {
    std::vector<CatalogItem> items;
    for (auto& [id, row] : seen_items) items.push_back({id, row});
    ds.catalog = Catalog(std::move(items));
  }
  return ds;
}

void write_items_csv(const Catalog& catalog, const FeatureSchema& schema, const std::filesystem::path& path) {
  std::ostringstream out;
  out << "item_id";
  for (auto i : schema.side_fields(Side::item)) out << ',' << schema.fields()[i].name;
  out << '\n';
  for (const auto& item : catalog.items()) {
    out << item.item_id;
    for (const auto& v : item.features) out << ',' << format_value(v);
    out << '\n';
  }
  write_text_atomic(path, out.str());
}

Catalog load_items_csv(const std::filesystem::path& path, const FeatureSchema& schema) {
  auto in = open_in(path);
  std::string line;
  if (!std::getline(in, line)) throw ValidationError("'" + path.string() + "': missing header row");
  std::vector<std::string> expected{"item_id"};
  for (auto i : schema.side_fields(Side::item)) expected.push_back(schema.fields()[i].name);
  if (split_line(strip_cr(line)) != expected) {
    throw ValidationError("'" + path.string() + "': header does not match the schema's item fields");
  }
  std::vector<CatalogItem> items;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    line = strip_cr(line);
    if (line.empty()) continue;
    const auto cells = split_line(line);
    if (cells.size() != expected.size()) {
      throw ValidationError("line " + std::to_string(line_no) + ": expected " + std::to_string(expected.size()) +
                            " columns, found " + std::to_string(cells.size()));
    }
    CatalogItem item;
    item.item_id = parse_int(cells[0], line_no, "item_id");
    for (std::size_t p = 0; p < schema.side_width(Side::item); ++p) {
      item.features.push_back(parse_value(cells[1 + p], schema.side_field(Side::item, p), line_no));
    }
    try {
      validate_row(item.features, schema, Side::item);
    } catch (const Error& e) {
      throw ValidationError("line " + std::to_string(line_no) + ": " + e.what());
    }
    items.push_back(std::move(item));
  }
  return Catalog(std::move(items));
}

void write_data_dir(const SynthData& data, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory '" + dir.string() + "': " + ec.message());
  write_text_atomic(dir / "schema.json", data.train.schema.to_json_text() + "\n");
  write_items_csv(data.train.catalog, data.train.schema, dir / "items.csv");
  write_csv(data.train, dir / "train.csv");
  write_csv(data.test, dir / "test.csv");
}

SynthData load_data_dir(const std::filesystem::path& dir) {
  const auto schema = FeatureSchema::from_json_text(read_text(dir / "schema.json"));
  const auto catalog = load_items_csv(dir / "items.csv", schema);
  SynthData out;
  out.train = load_csv(dir / "train.csv", schema, Split::train, &catalog);
  out.test = load_csv(dir / "test.csv", schema, Split::test, &catalog);
  for (const Dataset* ds : {&out.train, &out.test}) {
    for (const auto& r : ds->records) {
      if (!catalog.position(r.item_id)) {
        throw ValidationError("item " + std::to_string(r.item_id) + " in records is missing from items.csv");
      }
    }
  }
  return out;
}

std::size_t Table::column(const std::string& name) const {
  auto it = std::find(header.begin(), header.end(), name);
  if (it == header.end()) throw LookupError("table has no column '" + name + "'");
  return static_cast<std::size_t>(it - header.begin());
}

void write_table(const Table& table, const std::filesystem::path& path) {
  std::ostringstream out;
  auto emit = [&](const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (cells[i].find_first_of(",\n") != std::string::npos) {
        throw ValidationError("table cell '" + cells[i] + "' contains a separator");
      }
      out << (i ? "," : "") << cells[i];
    }
    out << '\n';
  };
  emit(table.header);
  for (const auto& row : table.rows) {
    if (row.size() != table.header.size()) throw DimensionError("table row width differs from header");
    emit(row);
  }
  write_text_atomic(path, out.str());
}

Table read_table(const std::filesystem::path& path) {
  auto in = open_in(path);
  Table t;
  std::string line;
  if (!std::getline(in, line)) throw ValidationError("'" + path.string() + "': missing header row");
  t.header = split_line(strip_cr(line));
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    line = strip_cr(line);
    if (line.empty()) continue;
    auto cells = split_line(line);
    if (cells.size() != t.header.size()) {
      throw ValidationError("'" + path.string() + "' line " + std::to_string(line_no) + ": expected " +
                            std::to_string(t.header.size()) + " columns, found " + std::to_string(cells.size()));
    }
    t.rows.push_back(std::move(cells));
  }
  return t;
}

void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    auto out = open_out(tmp);
    out << text;
    out.flush();
    if (!out) throw IoError("write to '" + tmp.string() + "' failed");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move '" + tmp.string() + "' into place: " + ec.message());
}

std::string read_text(const std::filesystem::path& path) {
  auto in = open_in(path);
  std::ostringstream out;
  out << in.rdbuf();
  return out.str();
}

}  // namespace dsmoe
