// Copyright 2026 The dsmoe Authors
// SPDX-License-Identifier: Apache-2.0

// Losses, negative sampling, Adam and the two-phase training loop.

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "dsmoe/data.hpp"
#include "dsmoe/model.hpp"
#include "dsmoe/rng.hpp"
#include "dsmoe/tensor.hpp"

namespace dsmoe {

inline constexpr double kProbabilityClamp = 1e-7;

struct TrainConfig {
  double learning_rate = 1e-4;
  double weight_decay = 1e-6;
  std::size_t batch_size = 4096;
  std::size_t epochs = 50;
  double distill_weight = 1.0;  // lambda
  std::size_t negatives_per_positive = 4;
  std::uint64_t seed = 0;
  std::size_t teacher_epochs = 0;       // 0: same as epochs
  double teacher_learning_rate = 0.0;  // 0: same as learning_rate

  std::size_t resolved_teacher_epochs() const { return teacher_epochs == 0 ? epochs : teacher_epochs; }
  double resolved_teacher_learning_rate() const {
    return teacher_learning_rate == 0.0 ? learning_rate : teacher_learning_rate;
  }
  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

// Mean binary cross-entropy of probabilities in (0, 1); DomainError outside.
Tensor bce_loss(const Tensor& probabilities, std::span<const double> labels);
// Same loss from logits, evaluated as max(l, 0) - y l + log1p(exp(-|l|)).
Tensor bce_with_logits(const Tensor& logits, std::span<const double> labels);
// Mean KL(p_t || p_s) of Bernoulli pairs. Both sides are clamped into
// [1e-7, 1 - 1e-7]; p_t is a constant target.
Tensor kd_loss(const Tensor& teacher_probabilities, const Tensor& student_probabilities);
// bce + lambda * kd; lambda = 0 returns bce itself.
Tensor total_loss(const Tensor& bce, const Tensor& kd, double lambda);

// Uniform draw from [0, n) excluding `excluded`.
std::size_t sample_excluding(std::size_t excluded, std::size_t n, Rng& rng);
// Positives followed by `ratio` negatives per positive (same user, scenario
// and user features; item drawn uniformly from the rest of the catalog).
std::vector<InteractionRecord> sample_negatives(std::span<const InteractionRecord> positives,
                                                const Catalog& catalog, std::size_t ratio, Rng& rng);

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class AdamState {
 public:
  AdamState() = default;
  explicit AdamState(const ParamList& params, AdamOptions options = {});

  std::uint64_t step() const { return step_; }
  const AdamOptions& options() const { return options_; }
  std::span<const double> first_moment(std::size_t i) const { return m_.at(i); }
  std::span<const double> second_moment(std::size_t i) const { return v_.at(i); }

  // One bias-corrected update with coupled weight decay (g += wd * p).
  // Throws TrainingError naming the first parameter with a non-finite gradient.
  void update(const ParamList& params, double learning_rate, double weight_decay);

 private:
  AdamOptions options_;
  std::uint64_t step_ = 0;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
};

void adam_step(const ParamList& params, AdamState& state, double learning_rate, double weight_decay);

struct LossRecord {
  std::string phase;  // "teacher" or "student"
  std::size_t epoch = 0;
  std::size_t batch = 0;
  double bce = 0.0;
  double kd = 0.0;
  double total = 0.0;

  bool operator==(const LossRecord&) const = default;
};

struct TrainResult {
  std::vector<LossRecord> trace;
  std::size_t singleton_fallbacks = 0;
};

using TraceSink = std::function<void(const LossRecord&)>;

// Teacher alone on BCE for resolved_teacher_epochs().
TrainResult train_teacher(TeacherModel& teacher, const Dataset& train, const TrainConfig& config,
                          const TraceSink& sink = {});
// Student on total_loss against a frozen teacher. The teacher may be null
// only when distill_weight is 0.
TrainResult train_student(DsmoeModel& student, TeacherModel* teacher, const Dataset& train,
                          const TrainConfig& config, const TraceSink& sink = {});
// Both phases; the teacher phase is skipped when distill_weight is 0.
TrainResult train(DsmoeModel& student, TeacherModel* teacher, const Dataset& train, const TrainConfig& config,
                  const TraceSink& sink = {});

// Mean of each (phase, epoch) over its batches.
std::vector<LossRecord> epoch_means(std::span<const LossRecord> trace);

std::string to_json_line(const LossRecord& record);
void write_trace(std::span<const LossRecord> trace, const std::filesystem::path& path);
std::vector<LossRecord> read_trace(const std::filesystem::path& path);

}  // namespace dsmoe
