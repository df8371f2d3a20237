// Copyright 2026 The dsmoe Authors
// SPDX-License-Identifier: Apache-2.0

#include "dsmoe/config.hpp"

#include <functional>
#include <map>

#include "dsmoe/errors.hpp"
#include "json.hpp"

namespace dsmoe {

namespace {

using Json = nlohmann::json;
using Setter = std::function<void(const Json&, const std::string&)>;

std::size_t as_count(const Json& v, const std::string& key) {
  if (!v.is_number_unsigned()) {
    throw ConfigError("config key '" + key + "': expected a non-negative integer");
  }
  return v.get<std::size_t>();
}

double as_real(const Json& v, const std::string& key) {
  if (!v.is_number()) throw ConfigError("config key '" + key + "': expected a number");
  return v.get<double>();
}

bool as_bool(const Json& v, const std::string& key) {
  if (!v.is_boolean()) throw ConfigError("config key '" + key + "': expected true or false");
  return v.get<bool>();
}

std::vector<double> as_reals(const Json& v, const std::string& key) {
  if (!v.is_array()) throw ConfigError("config key '" + key + "': expected an array of numbers");
  std::vector<double> out;
  for (const auto& e : v) out.push_back(as_real(e, key));
  return out;
}

std::vector<std::size_t> as_counts(const Json& v, const std::string& key) {
  if (!v.is_array()) throw ConfigError("config key '" + key + "': expected an array of integers");
  std::vector<std::size_t> out;
  for (const auto& e : v) out.push_back(as_count(e, key));
  return out;
}

template <typename T>
Setter count(T& field) {
  return [&field](const Json& v, const std::string& key) { field = static_cast<T>(as_count(v, key)); };
}
Setter real(double& field) {
  return [&field](const Json& v, const std::string& key) { field = as_real(v, key); };
}
Setter boolean(bool& field) {
  return [&field](const Json& v, const std::string& key) { field = as_bool(v, key); };
}

void apply(const Json& section, const std::string& name, const std::map<std::string, Setter>& setters) {
  if (!section.is_object()) throw ConfigError("config section '" + name + "' must be an object");
  for (const auto& [key, value] : section.items()) {
    const std::string full = name + "." + key;
    auto it = setters.find(key);
    if (it == setters.end()) throw ConfigError("unknown config key '" + full + "'");
    it->second(value, full);
  }
}

}  // namespace

ExperimentConfig parse_config(std::string_view json_text) {
  Json root;
  try {
    root = Json::parse(json_text);
  } catch (const Json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!root.is_object()) throw ConfigError("config must be a JSON object");
  ExperimentConfig c;
  auto& t = c.train;
  auto& m = c.model;
  auto& d = c.data;
  const std::map<std::string, std::map<std::string, Setter>> sections{
      {"train",
       {{"learning_rate", real(t.learning_rate)},
        {"weight_decay", real(t.weight_decay)},
        {"batch_size", count(t.batch_size)},
        {"epochs", count(t.epochs)},
        {"distill_weight", real(t.distill_weight)},
        {"negatives_per_positive", count(t.negatives_per_positive)},
        {"seed", count(t.seed)},
        {"teacher_epochs", count(t.teacher_epochs)},
        {"teacher_learning_rate", real(t.teacher_learning_rate)}}},
      {"model",
       {{"hidden_dim", count(m.hidden_dim)},
        {"match_dim", count(m.match_dim)},
        {"experts", count(m.experts)},
        {"rank", count(m.rank)},
        {"embedding_dim", count(d.embedding_dim)},
        {"teacher_hidden", count(m.teacher_hidden)},
        {"teacher_layers", count(m.teacher_layers)},
        {"use_sap", boolean(m.use_sap)},
        {"use_dsbn", boolean(m.use_dsbn)},
        {"dsbn_momentum", real(m.dsbn.momentum)},
        {"dsbn_eps", real(m.dsbn.eps)}}},
      {"data",
       {{"n_users", count(d.n_users)},
        {"n_items", count(d.n_items)},
        {"n_scenarios", count(d.n_scenarios)},
        {"scenario_proportions",
         [&d](const Json& v, const std::string& key) { d.scenario_proportions = as_reals(v, key); }},
        {"latent_dim", count(d.latent_dim)},
        {"scenario_shift_strength", real(d.scenario_shift_strength)},
        {"interactions_total", count(d.interactions_total)},
        {"noise", real(d.noise)},
        {"n_categories", count(d.n_categories)},
        {"test_fraction", real(d.test_fraction)},
        {"seed", count(d.seed)}}},
      {"eval", {{"ks", [&c](const Json& v, const std::string& key) { c.eval.ks = as_counts(v, key); }}}},
  };
  const bool scenarios_given = root.contains("data") && root["data"].is_object() && root["data"].contains("n_scenarios");
  const bool proportions_given =
      root.contains("data") && root["data"].is_object() && root["data"].contains("scenario_proportions");
  for (const auto& [name, section] : root.items()) {
    auto it = sections.find(name);
    if (it == sections.end()) throw ConfigError("unknown config section '" + name + "'");
    apply(section, name, it->second);
  }
  if (scenarios_given && !proportions_given && d.n_scenarios != d.scenario_proportions.size()) {
    d.scenario_proportions.assign(d.n_scenarios, 1.0 / static_cast<double>(d.n_scenarios));
  }
  try {
    t.validate();
    d.validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(std::string("data: ") + e.what());
  }
  if (m.experts < 1) throw ConfigError("config key 'model.experts': must be >= 1");
  if (m.rank < 1) throw ConfigError("config key 'model.rank': must be >= 1");
  if (m.hidden_dim < 1 || m.match_dim < 1) throw ConfigError("model widths must be >= 1");
  if (!(m.dsbn.momentum >= 0.0 && m.dsbn.momentum <= 1.0)) {
    throw ConfigError("config key 'model.dsbn_momentum': must lie in [0, 1]");
  }
  if (!(m.dsbn.eps > 0.0)) throw ConfigError("config key 'model.dsbn_eps': must be positive");
  if (c.eval.ks.empty()) throw ConfigError("config key 'eval.ks': must not be empty");
  for (auto k : c.eval.ks)
    if (k < 1) throw ConfigError("config key 'eval.ks': values must be >= 1");
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) { return parse_config(read_text(path)); }

std::string config_json(const ExperimentConfig& c) {
  nlohmann::ordered_json j;
  const auto& t = c.train;
  const auto& m = c.model;
  const auto& d = c.data;
  j["train"] = {{"learning_rate", t.learning_rate},
                {"weight_decay", t.weight_decay},
                {"batch_size", t.batch_size},
                {"epochs", t.epochs},
                {"distill_weight", t.distill_weight},
                {"negatives_per_positive", t.negatives_per_positive},
                {"seed", t.seed},
                {"teacher_epochs", t.teacher_epochs},
                {"teacher_learning_rate", t.teacher_learning_rate}};
  j["model"] = {{"hidden_dim", m.hidden_dim},         {"match_dim", m.match_dim},
                {"experts", m.experts},               {"rank", m.rank},
                {"embedding_dim", d.embedding_dim},   {"teacher_hidden", m.teacher_hidden},
                {"teacher_layers", m.teacher_layers}, {"use_sap", m.use_sap},
                {"use_dsbn", m.use_dsbn},             {"dsbn_momentum", m.dsbn.momentum},
                {"dsbn_eps", m.dsbn.eps}};
  j["data"] = {{"n_users", d.n_users},
               {"n_items", d.n_items},
               {"n_scenarios", d.n_scenarios},
               {"scenario_proportions", d.scenario_proportions},
               {"latent_dim", d.latent_dim},
               {"scenario_shift_strength", d.scenario_shift_strength},
               {"interactions_total", d.interactions_total},
               {"noise", d.noise},
               {"n_categories", d.n_categories},
               {"test_fraction", d.test_fraction},
               {"seed", d.seed}};
  j["eval"] = {{"ks", c.eval.ks}};
  return j.dump(2) + "\n";
}

std::vector<std::size_t> parse_k_list(const std::string& text) {
  std::vector<std::size_t> out;
  std::size_t start = 0;
  while (true) {
    const auto comma = text.find(',', start);
    const std::string part = text.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
    std::size_t pos = 0;
    unsigned long v = 0;
    try {
      v = std::stoul(part, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (part.empty() || pos != part.size() || v == 0) throw ArgumentError("bad K value '" + part + "' in '" + text + "'");
    out.push_back(v);
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

}  // namespace dsmoe
