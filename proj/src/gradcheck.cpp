// Copyright 2026 The dsmoe Authors
// SPDX-License-Identifier: Apache-2.0

#include "dsmoe/gradcheck.hpp"

#include "dsmoe/ops.hpp"
#include "dsmoe/rng.hpp"
#include "dsmoe/training.hpp"

namespace dsmoe {

namespace {

constexpr std::size_t kTinyDim = 4;
constexpr std::size_t kTinyScenarios = 3;

struct TinyBatch {
  std::vector<FeatureRow> users;
  std::vector<FeatureRow> items;
  TowerBatch user_batch;
  TowerBatch item_batch;
  std::vector<double> labels;
};

// Scenario 0 and 1 hold three rows each, scenario 2 a single row so the
// running-statistics fallback is on the checked path.
TinyBatch make_batch(Rng& rng) {
  const std::vector<std::size_t> scenarios{0, 1, 0, 2, 1, 0, 1};
  TinyBatch b;
  for (std::size_t i = 0; i < scenarios.size(); ++i) {
    std::vector<std::int64_t> history(rng.index(4));
    for (auto& h : history) h = static_cast<std::int64_t>(rng.index(6));
    b.users.push_back({static_cast<std::int64_t>(rng.index(5)), history});
    b.items.push_back({static_cast<std::int64_t>(rng.index(7)), rng.normal()});
    b.labels.push_back(static_cast<double>(i % 2));
  }
  for (std::size_t i = 0; i < scenarios.size(); ++i) {
    b.user_batch.rows.push_back(&b.users[i]);
    b.item_batch.rows.push_back(&b.items[i]);
  }
  b.user_batch.scenarios = scenarios;
  b.item_batch.scenarios = scenarios;
  return b;
}

void randomize(Tensor& t, double bound, Rng& rng) {
  for (auto& v : t.mutable_values()) v = rng.uniform(-bound, bound);
}

void perturb(DsmoeModel& model, Rng& rng) {
  for (Side side : {Side::user, Side::item}) {
    auto& tower = model.tower(side);
    for (auto& e : tower.experts()) {
      randomize(e.sap().up(), 0.5, rng);
      randomize(e.sap().gen_bias(), 0.5, rng);
      auto& norm = e.norm();
      for (std::size_t s = 0; s < norm.slots(); ++s) {
        randomize(norm.beta(s), 0.3, rng);
        for (auto& g : norm.gamma(s).mutable_values()) g = rng.uniform(0.5, 1.5);
        for (auto& m : norm.running_mean(s)) m = rng.uniform(-0.3, 0.3);
        for (auto& v : norm.running_var(s)) v = rng.uniform(0.5, 2.0);
      }
    }
    randomize(tower.gate().bias(), 0.5, rng);
    randomize(tower.forward_sap().up(), 0.5, rng);
    randomize(tower.forward_sap().bias(), 0.2, rng);
  }
}

void perturb(TeacherModel& teacher, Rng& rng) {
  for (auto& layer : teacher.trunk()) {
    randomize(layer.up(), 0.5, rng);
    randomize(layer.bias(), 0.2, rng);
  }
}

GradcheckOutcome check(std::uint64_t seed, const std::string& name, const ParamList& params,
                       const std::function<Tensor()>& loss) {
  std::vector<Tensor> tensors;
  for (const auto& p : params) tensors.push_back(p.tensor);
  GradcheckOutcome out;
  out.seed = seed;
  out.model = name;
  out.parameters = params.size();
  out.result = grad_check(loss, tensors);
  out.worst_parameter = params.at(out.result.worst_param).name;
  return out;
}

}  // namespace

FeatureSchema tiny_schema() {
  return FeatureSchema({{"user_id", FieldKind::sparse, Side::user, 5, kTinyDim},
                        {"user_history", FieldKind::sequential, Side::user, 6, kTinyDim},
                        {"item_id", FieldKind::sparse, Side::item, 7, kTinyDim},
                        {"item_price", FieldKind::dense, Side::item, 0, kTinyDim}},
                       kTinyScenarios, kTinyDim);
}

ModelConfig tiny_model_config() {
  ModelConfig c;
  c.hidden_dim = 8;
  c.match_dim = 4;
  c.experts = 2;
  c.rank = 2;
  c.teacher_hidden = 8;
  c.teacher_layers = 2;
  c.dsbn.momentum = 0.0;  // keeps running statistics fixed across probes
  return c;
}

std::vector<GradcheckOutcome> gradcheck_tiny(std::span<const std::uint64_t> seeds) {
  std::vector<GradcheckOutcome> out;
  for (auto seed : seeds) {
    Rng rng = Rng::derive(seed, "gradcheck");
    DsmoeModel student(tiny_schema(), tiny_model_config(), seed);
    TeacherModel teacher(tiny_schema(), tiny_model_config(), seed);
    perturb(student, rng);
    perturb(teacher, rng);
    TinyBatch batch = make_batch(rng);
    Tensor targets;
    {
      NoGradGuard guard;
      targets = teacher.probabilities(batch.user_batch, batch.item_batch);
    }
    out.push_back(check(seed, "student", student.parameters(), [&] {
      Tensor logits = score_logits(student.user_encode(batch.user_batch, Mode::train),
                                   student.item_encode(batch.item_batch, Mode::train));
      return total_loss(bce_with_logits(logits, batch.labels), kd_loss(targets, sigmoid(logits)), 1.0);
    }));
    out.push_back(check(seed, "teacher", teacher.parameters(), [&] {
      return bce_with_logits(teacher.logits(batch.user_batch, batch.item_batch), batch.labels);
    }));
  }
  return out;
}

}  // namespace dsmoe
