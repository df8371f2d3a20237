// Copyright 2026 The dsmoe Authors
// SPDX-License-Identifier: Apache-2.0

// Finite-difference verification of student and teacher gradients on a tiny
// configuration (d_emb = 4, K = 2, R = 2, hidden widths of 8).

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dsmoe/model.hpp"
#include "dsmoe/tensor.hpp"

namespace dsmoe {

inline constexpr double kGradcheckTolerance = 1e-4;

FeatureSchema tiny_schema();
ModelConfig tiny_model_config();

struct GradcheckOutcome {
  std::uint64_t seed = 0;
  std::string model;  // "student" or "teacher"
  GradCheckResult result;
  std::string worst_parameter;
  std::size_t parameters = 0;

  bool passed() const { return result.max_relative_error < kGradcheckTolerance; }
};

// Student total loss (bce + kd against fixed teacher targets) and teacher
// bce, each checked over every trainable parameter.
std::vector<GradcheckOutcome> gradcheck_tiny(std::span<const std::uint64_t> seeds);

}  // namespace dsmoe
