// Copyright 2026 The dsmoe Authors
// SPDX-License-Identifier: Apache-2.0

// Experiment configuration: JSON with sections train, model, data and eval.

#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "dsmoe/data.hpp"
#include "dsmoe/model.hpp"
#include "dsmoe/training.hpp"

namespace dsmoe {

struct EvalSettings {
  std::vector<std::size_t> ks{50, 100};

  bool operator==(const EvalSettings&) const = default;
};

struct ExperimentConfig {
  TrainConfig train;
  ModelConfig model;
  SynthSpec data;  // data.embedding_dim is the model's d_emb
  EvalSettings eval;

  FeatureSchema schema() const { return synth_schema(data); }
};

// Absent keys keep their defaults; unknown keys, wrong types and invalid
// values raise ConfigError naming the key.
ExperimentConfig parse_config(std::string_view json_text);
ExperimentConfig load_config(const std::filesystem::path& path);
// Fully resolved configuration; parse_config(config_json(c)) == c.
std::string config_json(const ExperimentConfig& config);

// "50,100" -> {50, 100}.
std::vector<std::size_t> parse_k_list(const std::string& text);

}  // namespace dsmoe
