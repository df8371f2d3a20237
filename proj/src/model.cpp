// Copyright 2026 The dsmoe Authors
// SPDX-License-Identifier: Apache-2.0

#include "dsmoe/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>

#include "dsmoe/errors.hpp"
#include "dsmoe/ops.hpp"
#include "json.hpp"

namespace dsmoe {
namespace {

MoeConfig tower_config(const FeatureSchema& schema, const ModelConfig& c, Side side) {
  MoeConfig m;
  m.in = schema.side_dim(side);
  m.hidden = c.hidden_dim;
  m.out = c.match_dim;
  m.experts = c.experts;
  m.rank = c.rank;
  m.scenario_dim = schema.scenario_dim();
  m.scenarios = schema.scenario_cardinality();
  m.use_sap = c.use_sap;
  m.use_dsbn = c.use_dsbn;
  m.dsbn = c.dsbn;
  return m;
}

std::size_t field_table_scalars(const FeatureSchema& schema, Side side) {
  std::size_t total = 0;
  for (auto i : schema.side_fields(side)) {
    const auto& f = schema.fields()[i];
    total += (f.kind == FieldKind::dense ? 1 : f.cardinality) * f.embedding_dim;
  }
  return total;
}

std::size_t field_flops(const FeatureSchema& schema, Side side) {
  std::size_t total = 0;
  for (auto i : schema.side_fields(side)) {
    const auto& f = schema.fields()[i];
    if (f.kind == FieldKind::dense) total += f.embedding_dim;  // value * projection row
  }
  return total;
}

void check_batch(const TowerBatch& batch) {
  if (batch.rows.empty()) throw DimensionError("empty batch");
  if (batch.rows.size() != batch.scenarios.size()) {
    throw DimensionError("batch has " + std::to_string(batch.rows.size()) + " rows but " +
                         std::to_string(batch.scenarios.size()) + " scenario ids");
  }
}

void copy_into(Tensor& target, const Tensor& source, const std::string& name) {
  if (target.shape() != source.shape()) {
    throw DimensionError("state tensor '" + name + "' has shape " + shape_string(source.shape()) +
                         ", model expects " + shape_string(target.shape()));
  }
  auto dst = target.mutable_values();
  auto src = source.values();
  std::copy(src.begin(), src.end(), dst.begin());
}

std::map<std::string, Tensor> by_name(const ParamList& list) {
  std::map<std::string, Tensor> out;
  for (const auto& p : list) {
    if (!out.emplace(p.name, p.tensor).second) throw ValidationError("duplicate state tensor '" + p.name + "'");
  }
  return out;
}

const Tensor& lookup(const std::map<std::string, Tensor>& m, const std::string& name) {
  auto it = m.find(name);
  if (it == m.end()) throw LookupError("state is missing tensor '" + name + "'");
  return it->second;
}

}  // namespace

DsmoeModel::DsmoeModel(FeatureSchema schema, ModelConfig config, std::uint64_t seed)
    : schema_(std::move(schema)), config_(config) {
  Rng rng = Rng::derive(seed, "student-init");
  user_fields_ = FieldEmbeddings(schema_, Side::user, rng);
  item_fields_ = FieldEmbeddings(schema_, Side::item, rng);
  scenarios_ = ScenarioEmbedding(schema_.scenario_cardinality(), schema_.scenario_dim(), rng);
  user_tower_ = MoeBlock(tower_config(schema_, config_, Side::user), rng);
  item_tower_ = MoeBlock(tower_config(schema_, config_, Side::item), rng);
}

Tensor DsmoeModel::encode(Side side, const TowerBatch& batch, Mode mode) {
  check_batch(batch);
  Tensor x = fields(side).assemble(batch.rows);
  Tensor e_s = scenarios_.embed(batch.scenarios);
  return tower(side).forward(x, e_s, batch.scenarios, mode);
}

ParamList DsmoeModel::parameters() const {
  ParamList out;
  user_fields_.collect(out, "user_fields.");
  item_fields_.collect(out, "item_fields.");
  scenarios_.collect(out, "scenario.");
  user_tower_.collect(out, "user_tower.");
  item_tower_.collect(out, "item_tower.");
  return out;
}

ParamList DsmoeModel::state() const {
  ParamList out;
  user_fields_.collect(out, "user_fields.");
  item_fields_.collect(out, "item_fields.");
  scenarios_.collect(out, "scenario.");
  user_tower_.collect_all(out, "user_tower.");
  item_tower_.collect_all(out, "item_tower.");
  auto user_buffers = user_tower_.buffers("user_tower.");
  auto item_buffers = item_tower_.buffers("item_tower.");
  out.insert(out.end(), user_buffers.begin(), user_buffers.end());
  out.insert(out.end(), item_buffers.begin(), item_buffers.end());
  return out;
}

void DsmoeModel::load_state(const ParamList& state) {
  const auto source = by_name(state);
  ParamList own;
  user_fields_.collect(own, "user_fields.");
  item_fields_.collect(own, "item_fields.");
  scenarios_.collect(own, "scenario.");
  user_tower_.collect_all(own, "user_tower.");
  item_tower_.collect_all(own, "item_tower.");
  std::size_t expected = own.size();
  for (auto& p : own) copy_into(p.tensor, lookup(source, p.name), p.name);
  for (Side side : {Side::user, Side::item}) {
    const std::string prefix = side == Side::user ? "user_tower." : "item_tower.";
    auto& tower = this->tower(side);
    for (std::size_t k = 0; k < tower.experts().size(); ++k) {
      auto& norm = tower.experts()[k].norm();
      const std::string base = prefix + "expert" + std::to_string(k) + ".norm.";
      for (std::size_t s = 0; s < norm.slots(); ++s) {
        norm.load_buffer(s, true, lookup(source, base + "running_mean." + std::to_string(s)).values());
        norm.load_buffer(s, false, lookup(source, base + "running_var." + std::to_string(s)).values());
        expected += 2;
      }
    }
  }
  if (expected != source.size()) {
    throw ValidationError("state holds " + std::to_string(source.size()) + " tensors, model expects " +
                          std::to_string(expected));
  }
}

Tensor score_logits(const Tensor& user_vectors, const Tensor& item_vectors) {
  return row_dot(user_vectors, item_vectors);
}

Tensor score(const Tensor& user_vectors, const Tensor& item_vectors) {
  return sigmoid(score_logits(user_vectors, item_vectors));
}

double score(std::span<const double> user_vector, std::span<const double> item_vector) {
  if (user_vector.size() != item_vector.size()) {
    throw DimensionError("score: vectors of length " + std::to_string(user_vector.size()) + " and " +
                         std::to_string(item_vector.size()));
  }
  double dot = 0.0;
  for (std::size_t i = 0; i < user_vector.size(); ++i) dot += user_vector[i] * item_vector[i];
  return sigmoid(Tensor::scalar(dot)).item();
}

TeacherModel::TeacherModel(FeatureSchema schema, ModelConfig config, std::uint64_t seed)
    : schema_(std::move(schema)), config_(config) {
  if (config_.teacher_layers < 1) throw DimensionError("teacher needs at least one hidden layer");
  Rng rng = Rng::derive(seed, "teacher-init");
  user_fields_ = FieldEmbeddings(schema_, Side::user, rng);
  item_fields_ = FieldEmbeddings(schema_, Side::item, rng);
  scenarios_ = ScenarioEmbedding(schema_.scenario_cardinality(), schema_.scenario_dim(), rng);
  std::size_t width = schema_.side_dim(Side::user) + schema_.side_dim(Side::item) + schema_.scenario_dim();
  for (std::size_t l = 0; l < config_.teacher_layers; ++l) {
    const SapDims dims{width, config_.teacher_hidden, std::min({config_.rank, width, config_.teacher_hidden}),
                       schema_.scenario_dim()};
    trunk_.emplace_back(dims, rng);
    slopes_.push_back(Tensor::scalar(0.25, true));
    width = config_.teacher_hidden;
  }
  head_weight_ = uniform_table(1, width, 1.0 / std::sqrt(static_cast<double>(width)), rng);
  head_bias_ = Tensor::zeros({1}, true);
}

Tensor TeacherModel::logits(const TowerBatch& users, const TowerBatch& items) {
  check_batch(users);
  check_batch(items);
  if (users.size() != items.size()) {
    throw DimensionError("teacher got " + std::to_string(users.size()) + " users and " +
                         std::to_string(items.size()) + " items");
  }
  Tensor e_s = scenarios_.embed(users.scenarios);
  std::vector<Tensor> parts{user_fields_.assemble(users.rows), item_fields_.assemble(items.rows), e_s};
  Tensor h = concat_cols(parts);
  for (std::size_t l = 0; l < trunk_.size(); ++l) h = prelu(trunk_[l].forward(h, e_s), slopes_[l]);
  Tensor out = add_rowwise(matmul(h, transpose(head_weight_)), head_bias_);  // [n x 1]
  return reshape(out, {users.size()});
}

Tensor TeacherModel::probabilities(const TowerBatch& users, const TowerBatch& items) {
  return sigmoid(logits(users, items));
}

ParamList TeacherModel::parameters() const {
  ParamList out;
  user_fields_.collect(out, "user_fields.");
  item_fields_.collect(out, "item_fields.");
  scenarios_.collect(out, "scenario.");
  for (std::size_t l = 0; l < trunk_.size(); ++l) {
    trunk_[l].collect(out, "trunk" + std::to_string(l) + ".");
    out.push_back({"trunk" + std::to_string(l) + ".prelu_slope", slopes_[l]});
  }
  out.push_back({"head.weight", head_weight_});
  out.push_back({"head.bias", head_bias_});
  return out;
}

void TeacherModel::load_state(const ParamList& state) {
  const auto source = by_name(state);
  auto own = parameters();
  if (own.size() != source.size()) {
    throw ValidationError("state holds " + std::to_string(source.size()) + " tensors, teacher expects " +
                          std::to_string(own.size()));
  }
  for (auto& p : own) copy_into(p.tensor, lookup(source, p.name), p.name);
}

ModelStats model_stats(const DsmoeModel& model) {
  const auto& schema = model.schema();
  ModelStats stats;
  stats.param_count = field_table_scalars(schema, Side::user) + field_table_scalars(schema, Side::item) +
                      schema.scenario_cardinality() * schema.scenario_dim() +
                      model.tower(Side::user).parameter_count() + model.tower(Side::item).parameter_count();
  const std::size_t match = model.config().match_dim;
  stats.flops_per_score = field_flops(schema, Side::user) + field_flops(schema, Side::item) +
                          model.tower(Side::user).flops() + model.tower(Side::item).flops() +
                          2 * match + 4;  // inner product, sigmoid
  return stats;
}

ModelStats model_stats(const TeacherModel& model) {
  const auto& schema = model.schema();
  const auto& c = model.config();
  ModelStats stats;
  stats.param_count = field_table_scalars(schema, Side::user) + field_table_scalars(schema, Side::item) +
                      schema.scenario_cardinality() * schema.scenario_dim();
  stats.flops_per_score = field_flops(schema, Side::user) + field_flops(schema, Side::item);
  std::size_t width = schema.side_dim(Side::user) + schema.side_dim(Side::item) + schema.scenario_dim();
  for (std::size_t l = 0; l < c.teacher_layers; ++l) {
    const SapDims dims{width, c.teacher_hidden, std::min({c.rank, width, c.teacher_hidden}), schema.scenario_dim()};
    stats.param_count += SapLayer::parameter_count(dims) + 1;
    stats.flops_per_score += SapLayer::flops(dims, true) + c.teacher_hidden;
    width = c.teacher_hidden;
  }
  stats.param_count += width + 1;
  stats.flops_per_score += 2 * width + 1 + 4;
  return stats;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[8] = {'D', 'S', 'M', 'O', 'E', 'C', 'K', 'P'};
constexpr std::uint32_t kVersion = 1;

class Writer {
 public:
  explicit Writer(const std::filesystem::path& path) : out_(path, std::ios::binary | std::ios::trunc) {
    if (!out_) throw IoError("cannot open '" + path.string() + "' for writing");
  }
  void bytes(const void* data, std::size_t n) { out_.write(static_cast<const char*>(data), static_cast<std::streamsize>(n)); }
  void u32(std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    bytes(b, 4);
  }
  void u64(std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    bytes(b, 8);
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void str32(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  void finish(const std::filesystem::path& path) {
    out_.flush();
    if (!out_) throw IoError("write to '" + path.string() + "' failed");
  }

 private:
  std::ofstream out_;
};

class Reader {
 public:
  explicit Reader(const std::filesystem::path& path) : in_(path, std::ios::binary), path_(path) {
    if (!in_) throw IoError("cannot open checkpoint '" + path.string() + "'");
  }
  void bytes(void* data, std::size_t n) {
    in_.read(static_cast<char*>(data), static_cast<std::streamsize>(n));
    if (!in_) throw IoError("checkpoint '" + path_.string() + "' is truncated");
  }
  std::uint32_t u32() {
    unsigned char b[4];
    bytes(b, 4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    unsigned char b[8];
    bytes(b, 8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str32(std::size_t limit) {
    const std::uint32_t n = u32();
    if (n > limit) throw IoError("checkpoint '" + path_.string() + "' has an implausible string length");
    std::string s(n, '\0');
    bytes(s.data(), n);
    return s;
  }

 private:
  std::ifstream in_;
  std::filesystem::path path_;
};

nlohmann::ordered_json config_json(const ModelConfig& c) {
  nlohmann::ordered_json j;
  j["hidden_dim"] = c.hidden_dim;
  j["match_dim"] = c.match_dim;
  j["experts"] = c.experts;
  j["rank"] = c.rank;
  j["teacher_hidden"] = c.teacher_hidden;
  j["teacher_layers"] = c.teacher_layers;
  j["use_sap"] = c.use_sap;
  j["use_dsbn"] = c.use_dsbn;
  j["dsbn_momentum"] = c.dsbn.momentum;
  j["dsbn_eps"] = c.dsbn.eps;
  return j;
}

ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.hidden_dim = j.at("hidden_dim").get<std::size_t>();
  c.match_dim = j.at("match_dim").get<std::size_t>();
  c.experts = j.at("experts").get<std::size_t>();
  c.rank = j.at("rank").get<std::size_t>();
  c.teacher_hidden = j.at("teacher_hidden").get<std::size_t>();
  c.teacher_layers = j.at("teacher_layers").get<std::size_t>();
  c.use_sap = j.at("use_sap").get<bool>();
  c.use_dsbn = j.at("use_dsbn").get<bool>();
  c.dsbn.momentum = j.at("dsbn_momentum").get<double>();
  c.dsbn.eps = j.at("dsbn_eps").get<double>();
  return c;
}

void write_checkpoint(const std::filesystem::path& path, CheckpointKind kind, const FeatureSchema& schema,
                      const ModelConfig& config, const ParamList& state) {
  nlohmann::ordered_json header;
  header["schema"] = nlohmann::ordered_json::parse(schema.to_json_text());
  header["config"] = config_json(config);
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    Writer w(tmp);
    w.bytes(kMagic, sizeof kMagic);
    w.u32(kVersion);
    w.u32(static_cast<std::uint32_t>(kind));
    w.u64(schema.fingerprint());
    w.str32(header.dump());
    w.u64(state.size());
    for (const auto& p : state) {
      w.str32(p.name);
      const auto& shape = p.tensor.shape();
      w.u32(static_cast<std::uint32_t>(shape.size()));
      for (auto e : shape) w.u64(e);
      for (double v : p.tensor.values()) w.f64(v);
    }
    w.finish(tmp);
  }
  std::filesystem::rename(tmp, path);
}

struct LoadedCheckpoint {
  CheckpointInfo info;
  ParamList state;
};

LoadedCheckpoint read_checkpoint(const std::filesystem::path& path, bool with_tensors) {
  Reader r(path);
  char magic[8];
  r.bytes(magic, sizeof magic);
  if (std::memcmp(magic, kMagic, sizeof magic) != 0) {
    throw IoError("'" + path.string() + "' is not a dsmoe checkpoint");
  }
  const auto version = r.u32();
  if (version != kVersion) throw IoError("unsupported checkpoint version " + std::to_string(version));
  LoadedCheckpoint out;
  const auto kind = r.u32();
  if (kind > 1) throw IoError("unknown checkpoint kind " + std::to_string(kind));
  out.info.kind = static_cast<CheckpointKind>(kind);
  out.info.fingerprint = r.u64();
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(r.str32(1u << 26));
    out.info.schema = FeatureSchema::from_json_text(header.at("schema").dump());
    out.info.config = config_from_json(header.at("config"));
  } catch (const nlohmann::json::exception& e) {
    throw IoError("checkpoint header is malformed: " + std::string(e.what()));
  }
  if (out.info.schema.fingerprint() != out.info.fingerprint) {
    throw ValidationError("checkpoint fingerprint " + fingerprint_hex(out.info.fingerprint) +
                          " does not match its stored schema (" + fingerprint_hex(out.info.schema.fingerprint()) + ")");
  }
  if (!with_tensors) return out;
  const auto count = r.u64();
  for (std::uint64_t t = 0; t < count; ++t) {
    std::string name = r.str32(4096);
    const auto ndim = r.u32();
    if (ndim > 8) throw IoError("tensor '" + name + "' has implausible rank");
    Shape shape(ndim);
    for (auto& e : shape) e = r.u64();
    const auto n = shape_size(shape);
    if (n > (std::size_t{1} << 32)) throw IoError("tensor '" + name + "' is implausibly large");
    std::vector<double> values(n);
    for (auto& v : values) v = r.f64();
    out.state.push_back({std::move(name), Tensor::from(std::move(shape), std::move(values))});
  }
  return out;
}

}  // namespace

void save_checkpoint(const DsmoeModel& model, const std::filesystem::path& path) {
  write_checkpoint(path, CheckpointKind::student, model.schema(), model.config(), model.state());
}

void save_checkpoint(const TeacherModel& model, const std::filesystem::path& path) {
  write_checkpoint(path, CheckpointKind::teacher, model.schema(), model.config(), model.state());
}

CheckpointInfo read_checkpoint_info(const std::filesystem::path& path) {
  return read_checkpoint(path, false).info;
}

DsmoeModel load_student(const std::filesystem::path& path) {
  auto loaded = read_checkpoint(path, true);
  if (loaded.info.kind != CheckpointKind::student) throw ValidationError("'" + path.string() + "' holds a teacher");
  DsmoeModel model(loaded.info.schema, loaded.info.config, 0);
  model.load_state(loaded.state);
  return model;
}

TeacherModel load_teacher(const std::filesystem::path& path) {
  auto loaded = read_checkpoint(path, true);
  if (loaded.info.kind != CheckpointKind::teacher) throw ValidationError("'" + path.string() + "' holds a student");
  TeacherModel model(loaded.info.schema, loaded.info.config, 0);
  model.load_state(loaded.state);
  return model;
}

}  // namespace dsmoe
