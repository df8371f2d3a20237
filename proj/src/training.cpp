// Copyright 2026 The dsmoe Authors
// SPDX-License-Identifier: Apache-2.0

#include "dsmoe/training.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include "json.hpp"
#include <numeric>
#include <sstream>

#include "dsmoe/errors.hpp"
#include "dsmoe/ops.hpp"

namespace dsmoe {

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
    throw ConfigError("learning_rate must be positive, got " + format_double(learning_rate));
  }
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (!(distill_weight >= 0.0) || !std::isfinite(distill_weight)) {
    throw ConfigError("distill_weight must be >= 0");
  }
  if (negatives_per_positive < 1) throw ConfigError("negatives_per_positive must be >= 1");
  if (!(teacher_learning_rate >= 0.0) || !std::isfinite(teacher_learning_rate)) {
    throw ConfigError("teacher_learning_rate must be >= 0, got " + format_double(teacher_learning_rate));
  }
}

namespace {

void check_labels(const Tensor& x, std::span<const double> labels, const char* op) {
  if (x.dim() != 1 || x.size() != labels.size()) {
    throw DimensionError(std::string(op) + ": " + std::to_string(labels.size()) + " labels for shape " +
                         shape_string(x.shape()));
  }
  if (labels.empty()) throw DimensionError(std::string(op) + " of an empty batch");
  for (double y : labels)
    if (y != 0.0 && y != 1.0) throw DomainError(std::string(op) + ": labels must be 0 or 1");
}

double clamp_p(double p) { return std::clamp(p, kProbabilityClamp, 1.0 - kProbabilityClamp); }

}  // namespace

Tensor bce_loss(const Tensor& probabilities, std::span<const double> labels) {
  check_labels(probabilities, labels, "bce_loss");
  const auto p = probabilities.values();
  const double n = static_cast<double>(p.size());
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (!(p[i] > 0.0 && p[i] < 1.0)) {
      throw DomainError("bce_loss: probability " + format_double(p[i]) + " at row " + std::to_string(i) +
                        " is outside (0, 1)");
    }
    total -= labels[i] * std::log(p[i]) + (1.0 - labels[i]) * std::log1p(-p[i]);
  }
  std::vector<double> y(labels.begin(), labels.end());
  return make_result({}, {total / n}, {probabilities}, [y = std::move(y), n](Node& node) {
    Node& parent = *node.parents[0];
    if (!parent.requires_grad) return;
    auto& g = parent.grad_buffer();
    const double dy = node.grad[0] / n;
    for (std::size_t i = 0; i < y.size(); ++i) {
      const double p = parent.value[i];
      g[i] += dy * (-y[i] / p + (1.0 - y[i]) / (1.0 - p));
    }
  });
}

Tensor bce_with_logits(const Tensor& logits, std::span<const double> labels) {
  check_labels(logits, labels, "bce_with_logits");
  const auto l = logits.values();
  const double n = static_cast<double>(l.size());
  double total = 0.0;
  for (std::size_t i = 0; i < l.size(); ++i) {
    total += std::max(l[i], 0.0) - labels[i] * l[i] + std::log1p(std::exp(-std::abs(l[i])));
  }
  std::vector<double> y(labels.begin(), labels.end());
  return make_result({}, {total / n}, {logits}, [y = std::move(y), n](Node& node) {
    Node& parent = *node.parents[0];
    if (!parent.requires_grad) return;
    auto& g = parent.grad_buffer();
    const double dy = node.grad[0] / n;
    for (std::size_t i = 0; i < y.size(); ++i) {
      const double v = parent.value[i];
      const double s = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
      g[i] += dy * (s - y[i]);
    }
  });
}

Tensor kd_loss(const Tensor& teacher_probabilities, const Tensor& student_probabilities) {
  if (teacher_probabilities.shape() != student_probabilities.shape() || student_probabilities.dim() != 1) {
    throw DimensionError("kd_loss shapes differ: " + shape_string(teacher_probabilities.shape()) + " vs " +
                         shape_string(student_probabilities.shape()));
  }
  if (student_probabilities.size() == 0) throw DimensionError("kd_loss of an empty batch");
  const auto pt_raw = teacher_probabilities.values();
  const auto ps_raw = student_probabilities.values();
  const double n = static_cast<double>(ps_raw.size());
  std::vector<double> pt(pt_raw.size());
  double total = 0.0;
  for (std::size_t i = 0; i < pt.size(); ++i) {
    if (!std::isfinite(pt_raw[i]) || !std::isfinite(ps_raw[i])) throw DomainError("kd_loss: non-finite probability");
    pt[i] = clamp_p(pt_raw[i]);
    const double ps = clamp_p(ps_raw[i]);
    total += pt[i] * std::log(pt[i] / ps) + (1.0 - pt[i]) * std::log((1.0 - pt[i]) / (1.0 - ps));
  }
  return make_result({}, {total / n}, {student_probabilities}, [pt = std::move(pt), n](Node& node) {
    Node& parent = *node.parents[0];
    if (!parent.requires_grad) return;
    auto& g = parent.grad_buffer();
    const double dy = node.grad[0] / n;
    for (std::size_t i = 0; i < pt.size(); ++i) {
      const double raw = parent.value[i];
      if (raw < kProbabilityClamp || raw > 1.0 - kProbabilityClamp) continue;
      g[i] += dy * (-pt[i] / raw + (1.0 - pt[i]) / (1.0 - raw));
    }
  });
}

Tensor total_loss(const Tensor& bce, const Tensor& kd, double lambda) {
  if (!(lambda >= 0.0)) throw DomainError("distillation weight must be >= 0");
  if (lambda == 0.0) return bce;
  return add(bce, scale(kd, lambda));
}

std::size_t sample_excluding(std::size_t excluded, std::size_t n, Rng& rng) {
  if (n < 2) throw SamplingError("negative sampling needs at least 2 catalog items");
  const std::size_t j = rng.index(n - 1);
  return j >= excluded ? j + 1 : j;
}

std::vector<InteractionRecord> sample_negatives(std::span<const InteractionRecord> positives,
                                                const Catalog& catalog, std::size_t ratio, Rng& rng) {
  if (ratio < 1) throw SamplingError("negative ratio must be >= 1");
  if (catalog.size() < 2) throw SamplingError("negative sampling needs at least 2 catalog items");
  std::vector<InteractionRecord> out(positives.begin(), positives.end());
  out.reserve(positives.size() * (ratio + 1));
  for (const auto& pos : positives) {
    const auto at = catalog.position(pos.item_id);
    if (!at) throw LookupError("positive item " + std::to_string(pos.item_id) + " is not in the catalog");
    for (std::size_t k = 0; k < ratio; ++k) {
      const auto& item = catalog[sample_excluding(*at, catalog.size(), rng)];
      InteractionRecord neg = pos;
      neg.item_id = item.item_id;
      neg.item_features = item.features;
      neg.label = 0;
      out.push_back(std::move(neg));
    }
  }
  return out;
}

AdamState::AdamState(const ParamList& params, AdamOptions options) : options_(options) {
  for (const auto& p : params) {
    m_.emplace_back(p.tensor.size(), 0.0);
    v_.emplace_back(p.tensor.size(), 0.0);
  }
}

void AdamState::update(const ParamList& params, double learning_rate, double weight_decay) {
  if (params.size() != m_.size()) {
    throw DimensionError("optimizer tracks " + std::to_string(m_.size()) + " parameters, got " +
                         std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].tensor.size() != m_[i].size()) {
      throw DimensionError("parameter '" + params[i].name + "' changed size");
    }
    if (!params[i].tensor.has_grad()) continue;
    for (double g : params[i].tensor.grad()) {
      if (!std::isfinite(g)) throw TrainingError("non-finite gradient in parameter '" + params[i].name + "'");
    }
  }
  ++step_;
  const double b1 = options_.beta1, b2 = options_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(step_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(step_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor t = params[i].tensor;
    auto value = t.mutable_values();
    const bool has = t.has_grad();
    auto grad = has ? t.grad() : std::span<const double>();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < value.size(); ++j) {
      const double g = (has ? grad[j] : 0.0) + weight_decay * value[j];
      m[j] = b1 * m[j] + (1.0 - b1) * g;
      v[j] = b2 * v[j] + (1.0 - b2) * g * g;
      const double mhat = m[j] / c1;
      const double vhat = v[j] / c2;
      value[j] -= learning_rate * mhat / (std::sqrt(vhat) + options_.eps);
    }
  }
}

void adam_step(const ParamList& params, AdamState& state, double learning_rate, double weight_decay) {
  state.update(params, learning_rate, weight_decay);
}

namespace {

struct Batch {
  TowerBatch users;
  TowerBatch items;
  std::vector<double> labels;
  // One user row per positive; users row i repeats distinct_users row expand[i].
  TowerBatch distinct_users;
  std::vector<std::size_t> expand;
};

// Positive records plus catalog positions, and the per-epoch batch builder.
class BatchSource {
 public:
  BatchSource(const Dataset& data, const TrainConfig& config, std::string_view phase)
      : data_(data),
        config_(config),
        shuffle_rng_(Rng::derive(config.seed, std::string(phase) + "-shuffle")),
        negative_rng_(Rng::derive(config.seed, std::string(phase) + "-negatives")) {
    if (data.catalog.size() < 2) throw SamplingError("negative sampling needs at least 2 catalog items");
    for (std::size_t i = 0; i < data.records.size(); ++i) {
      const auto& r = data.records[i];
      if (r.label != 1) continue;
      const auto at = data.catalog.position(r.item_id);
      if (!at) throw LookupError("training item " + std::to_string(r.item_id) + " is not in the catalog");
      positives_.push_back(i);
      positions_.push_back(*at);
    }
    if (positives_.empty()) throw TrainingError("training data has no positive records");
    order_.resize(positives_.size());
  }

  std::size_t batches() const { return (positives_.size() + config_.batch_size - 1) / config_.batch_size; }

  void start_epoch() {
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    shuffle_rng_.shuffle(order_.begin(), order_.end());
  }

  Batch batch(std::size_t b) {
    const std::size_t begin = b * config_.batch_size;
    const std::size_t end = std::min(begin + config_.batch_size, order_.size());
    const std::size_t ratio = config_.negatives_per_positive;
    Batch out;
    const std::size_t n = (end - begin) * (ratio + 1);
    for (auto* side : {&out.users, &out.items}) {
      side->rows.reserve(n);
      side->scenarios.reserve(n);
    }
    out.labels.reserve(n);
    out.expand.reserve(n);
    for (std::size_t k = begin; k < end; ++k) {
      const auto& r = data_.records[positives_[order_[k]]];
      const std::size_t pos = positions_[order_[k]];
      out.distinct_users.rows.push_back(&r.user_features);
      out.distinct_users.scenarios.push_back(r.scenario_id);
      for (std::size_t j = 0; j <= ratio; ++j) {
        const std::size_t item = j == 0 ? pos : sample_excluding(pos, data_.catalog.size(), negative_rng_);
        out.users.rows.push_back(&r.user_features);
        out.users.scenarios.push_back(r.scenario_id);
        out.items.rows.push_back(&data_.catalog[item].features);
        out.items.scenarios.push_back(r.scenario_id);
        out.labels.push_back(j == 0 ? 1.0 : 0.0);
        out.expand.push_back(k - begin);
      }
    }
    return out;
  }

 private:
  const Dataset& data_;
  const TrainConfig& config_;
  Rng shuffle_rng_;
  Rng negative_rng_;
  std::vector<std::size_t> positives_;
  std::vector<std::size_t> positions_;
  std::vector<std::size_t> order_;
};

void zero_grads(const ParamList& params) {
  for (const auto& p : params) {
    Tensor t = p.tensor;
    t.zero_grad();
  }
}

void require_finite(double value, const char* phase, std::size_t epoch, std::size_t batch) {
  if (!std::isfinite(value)) {
    throw TrainingError(std::string("non-finite loss in ") + phase + " phase at epoch " + std::to_string(epoch) +
                        ", batch " + std::to_string(batch));
  }
}

std::size_t fallbacks(const DsmoeModel& model) {
  std::size_t total = 0;
  for (Side side : {Side::user, Side::item})
    for (const auto& e : model.tower(side).experts()) total += e.norm().singleton_fallbacks();
  return total;
}

}  // namespace

TrainResult train_teacher(TeacherModel& teacher, const Dataset& train, const TrainConfig& config,
                          const TraceSink& sink) {
  config.validate();
  BatchSource source(train, config, "teacher");
  const ParamList params = teacher.parameters();
  AdamState adam(params);
  TrainResult result;
  for (std::size_t epoch = 0; epoch < config.resolved_teacher_epochs(); ++epoch) {
    source.start_epoch();
    for (std::size_t b = 0; b < source.batches(); ++b) {
      Batch batch = source.batch(b);
      Tensor loss = bce_with_logits(teacher.logits(batch.users, batch.items), batch.labels);
      require_finite(loss.item(), "teacher", epoch, b);
      zero_grads(params);
      backward(loss);
      adam.update(params, config.resolved_teacher_learning_rate(), config.weight_decay);
      LossRecord rec{"teacher", epoch, b, loss.item(), 0.0, loss.item()};
      if (sink) sink(rec);
      result.trace.push_back(std::move(rec));
    }
  }
  return result;
}

TrainResult train_student(DsmoeModel& student, TeacherModel* teacher, const Dataset& train,
                          const TrainConfig& config, const TraceSink& sink) {
  config.validate();
  const double lambda = config.distill_weight;
  if (lambda > 0.0 && teacher == nullptr) throw ContractError("distillation requested without a teacher");
  if (!(train.schema == student.schema())) throw ContractError("training data schema differs from the model's");
  BatchSource source(train, config, "student");
  const ParamList params = student.parameters();
  AdamState adam(params);
  const std::size_t fallbacks_before = fallbacks(student);
  TrainResult result;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    source.start_epoch();
    for (std::size_t b = 0; b < source.batches(); ++b) {
      Batch batch = source.batch(b);
      // Every user row appears 1 + ratio times, so batch statistics over the
      // distinct rows equal those over the expanded batch.
      Tensor eu = gather_rows(student.user_encode(batch.distinct_users, Mode::train), batch.expand);
      Tensor ev = student.item_encode(batch.items, Mode::train);
      Tensor logits = score_logits(eu, ev);
      Tensor bce = bce_with_logits(logits, batch.labels);
      Tensor loss = bce;
      double kd_value = 0.0;
      if (lambda > 0.0) {
        Tensor p_t;
        {
          NoGradGuard guard;
          p_t = teacher->probabilities(batch.users, batch.items);
        }
        Tensor kd = kd_loss(p_t, sigmoid(logits));
        kd_value = kd.item();
        loss = total_loss(bce, kd, lambda);
      }
      require_finite(loss.item(), "student", epoch, b);
      zero_grads(params);
      backward(loss);
      adam.update(params, config.learning_rate, config.weight_decay);
      LossRecord rec{"student", epoch, b, bce.item(), kd_value, loss.item()};
      if (sink) sink(rec);
      result.trace.push_back(std::move(rec));
    }
  }
  result.singleton_fallbacks = fallbacks(student) - fallbacks_before;
  return result;
}

TrainResult train(DsmoeModel& student, TeacherModel* teacher, const Dataset& train, const TrainConfig& config,
                  const TraceSink& sink) {
  train.validate();
  config.validate();
  TrainResult result;
  if (config.distill_weight > 0.0) {
    if (teacher == nullptr) throw ContractError("distillation requested without a teacher");
    result = train_teacher(*teacher, train, config, sink);
  }
  TrainResult phase2 = train_student(student, teacher, train, config, sink);
  result.trace.insert(result.trace.end(), phase2.trace.begin(), phase2.trace.end());
  result.singleton_fallbacks = phase2.singleton_fallbacks;
  return result;
}

std::vector<LossRecord> epoch_means(std::span<const LossRecord> trace) {
  std::vector<LossRecord> out;
  std::size_t count = 0;
  for (const auto& r : trace) {
    if (out.empty() || out.back().phase != r.phase || out.back().epoch != r.epoch) {
      if (!out.empty()) {
        out.back().bce /= static_cast<double>(count);
        out.back().kd /= static_cast<double>(count);
        out.back().total /= static_cast<double>(count);
      }
      out.push_back({r.phase, r.epoch, 0, 0.0, 0.0, 0.0});
      count = 0;
    }
    out.back().bce += r.bce;
    out.back().kd += r.kd;
    out.back().total += r.total;
    out.back().batch = count++;
  }
  if (!out.empty()) {
    out.back().bce /= static_cast<double>(count);
    out.back().kd /= static_cast<double>(count);
    out.back().total /= static_cast<double>(count);
  }
  for (auto& r : out) r.batch += 1;  // batches per epoch
  return out;
}

std::string to_json_line(const LossRecord& r) {
  nlohmann::ordered_json j;
  j["phase"] = r.phase;
  j["epoch"] = r.epoch;
  j["batch"] = r.batch;
  j["bce"] = r.bce;
  j["kd"] = r.kd;
  j["total"] = r.total;
  return j.dump();
}

void write_trace(std::span<const LossRecord> trace, const std::filesystem::path& path) {
  std::string text;
  for (const auto& r : trace) text += to_json_line(r) + "\n";
  write_text_atomic(path, text);
}

std::vector<LossRecord> read_trace(const std::filesystem::path& path) {
  std::istringstream in(read_text(path));
  std::vector<LossRecord> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      out.push_back({j.at("phase").get<std::string>(), j.at("epoch").get<std::size_t>(),
                     j.at("batch").get<std::size_t>(), j.at("bce").get<double>(), j.at("kd").get<double>(),
                     j.at("total").get<double>()});
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError("trace line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace dsmoe
