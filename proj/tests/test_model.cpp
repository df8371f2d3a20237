// Copyright 2026 The dsmoe Authors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>

#include "dsmoe/errors.hpp"
#include "dsmoe/model.hpp"
#include "dsmoe/ops.hpp"
#include "test_support.hpp"

using namespace dsmoe;
using namespace dsmoe::testing;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.hidden_dim = 6;
  c.match_dim = 5;
  c.experts = 3;
  c.rank = 2;
  c.teacher_hidden = 7;
  return c;
}

struct Rows {
  std::vector<FeatureRow> storage;
  TowerBatch batch(std::span<const std::size_t> scenarios) const {
    TowerBatch b;
    for (const auto& r : storage) b.rows.push_back(&r);
    b.scenarios.assign(scenarios.begin(), scenarios.end());
    return b;
  }
};

Rows users(std::size_t n, Rng& rng) {
  Rows r;
  for (std::size_t i = 0; i < n; ++i) r.storage.push_back(random_user(rng));
  return r;
}

Rows items(std::size_t n, Rng& rng) {
  Rows r;
  for (std::size_t i = 0; i < n; ++i) r.storage.push_back(random_item(rng));
  return r;
}

void perturb(DsmoeModel& m, Rng& rng) {
  for (Side side : {Side::user, Side::item}) {
    auto& tower = m.tower(side);
    for (auto& e : tower.experts()) {
      fill_uniform(e.sap().up(), rng, 0.5);
      fill_uniform(e.sap().gen_bias(), rng, 0.5);
      for (std::size_t s = 0; s < e.norm().slots(); ++s) {
        fill_uniform(e.norm().beta(s), rng, 0.5);
        for (auto& v : e.norm().running_mean(s)) v = rng.uniform(-0.5, 0.5);
        for (auto& v : e.norm().running_var(s)) v = rng.uniform(0.5, 2.0);
      }
    }
    fill_uniform(tower.gate().bias(), rng, 0.5);
    fill_uniform(tower.forward_sap().up(), rng, 0.5);
  }
}

double prelu_ref(double z, double a) { return z > 0 ? z : a * z; }

// y = W x + b for a row-major [out x in] weight.
std::vector<double> affine(const Tensor& w, const Tensor& b, const std::vector<double>& x) {
  std::vector<double> y(w.rows());
  for (std::size_t o = 0; o < w.rows(); ++o) {
    double z = b[o];
    for (std::size_t i = 0; i < w.cols(); ++i) z += w.at(o, i) * x[i];
    y[o] = z;
  }
  return y;
}

}  // namespace

TEST_CASE("encodings are deterministic in infer mode") {
  Rng rng(1);
  DsmoeModel m(small_schema(), small_config(), 7);
  perturb(m, rng);
  const Rows u = users(6, rng);
  const std::vector<std::size_t> s{0, 1, 2, 0, 1, 2};
  const Tensor a = m.user_encode(u.batch(s), Mode::infer);
  const Tensor b = m.user_encode(u.batch(s), Mode::infer);
  CHECK(a.shape() == Shape{6, 5});
  CHECK(bitwise_equal(a.values(), b.values()));
  DsmoeModel twin(small_schema(), small_config(), 7);
  perturb(twin, *std::make_unique<Rng>(1));
  CHECK(bitwise_equal(twin.user_encode(u.batch(s), Mode::infer).values(), a.values()));
}

TEST_CASE("same user in different scenarios encodes differently") {
  Rng rng(2);
  DsmoeModel m(small_schema(), small_config(), 3);
  const Rows u = users(1, rng);
  const std::vector<std::size_t> s0{0}, s1{1};
  const Tensor a = m.user_encode(u.batch(s0), Mode::infer);
  const Tensor b = m.user_encode(u.batch(s1), Mode::infer);
  CHECK_FALSE(bitwise_equal(a.values(), b.values()));
}

TEST_CASE("towers are independent") {
  Rng rng(3);
  DsmoeModel m(small_schema(), small_config(), 4);
  perturb(m, rng);
  const Rows it = items(5, rng);
  const std::vector<std::size_t> s{2, 0, 1, 1, 0};
  const Tensor before = m.item_encode(it.batch(s), Mode::infer);
  for (auto& v : m.fields(Side::user).table(0).mutable_values()) v += 1.0;
  for (auto& v : m.tower(Side::user).gate().bias().mutable_values()) v += 1.0;
  CHECK(bitwise_equal(before.values(), m.item_encode(it.batch(s), Mode::infer).values()));
  const Rows u = users(5, rng);
  const Tensor ub = m.user_encode(u.batch(s), Mode::infer);
  for (auto& v : m.fields(Side::item).table(0).mutable_values()) v += 1.0;
  CHECK(bitwise_equal(ub.values(), m.user_encode(u.batch(s), Mode::infer).values()));
}

TEST_CASE("batched catalog encoding equals row-by-row encoding") {
  Rng rng(4);
  DsmoeModel m(small_schema(), small_config(), 5);
  perturb(m, rng);
  const Rows it = items(9, rng);
  const std::vector<std::size_t> s(9, 1);
  const Tensor all = m.item_encode(it.batch(s), Mode::infer);
  for (std::size_t i = 0; i < 9; ++i) {
    TowerBatch one;
    one.rows = {&it.storage[i]};
    one.scenarios = {1};
    const Tensor row = m.item_encode(one, Mode::infer);
    CHECK(max_rel_error(row.values(), all.values().subspan(i * 5, 5)) < 1e-13);
  }
}

TEST_CASE("no-SAP single-scenario encoding matches a plain MLP-MMOE reference") {
  Rng rng(5);
  ModelConfig c = small_config();
  c.use_sap = false;
  DsmoeModel m(small_schema(1), c, 6);
  perturb(m, rng);
  const Rows u = users(4, rng);
  const std::vector<std::size_t> s(4, 0);
  const TowerBatch batch = u.batch(s);
  const Tensor got = m.user_encode(batch, Mode::infer);
  const Tensor x = m.fields(Side::user).assemble(batch.rows);
  const auto& tower = m.tower(Side::user);
  const Tensor& es = m.scenario_embedding().table();
  std::vector<double> logits(c.experts);
  for (std::size_t k = 0; k < c.experts; ++k) {
    logits[k] = tower.gate().bias()[k];
    for (std::size_t j = 0; j < es.cols(); ++j) logits[k] += tower.gate().weight().at(k, j) * es.at(0, j);
  }
  double zmax = *std::max_element(logits.begin(), logits.end()), zsum = 0.0;
  for (auto& l : logits) zsum += (l = std::exp(l - zmax));
  for (std::size_t r = 0; r < 4; ++r) {
    std::vector<double> xr(x.cols());
    for (std::size_t i = 0; i < x.cols(); ++i) xr[i] = x.at(r, i);
    std::vector<double> mix(c.hidden_dim, 0.0);
    for (std::size_t k = 0; k < c.experts; ++k) {
      const auto& e = tower.experts()[k];
      auto h = affine(e.sap().shared_weight(), e.sap().bias(), xr);
      for (std::size_t o = 0; o < h.size(); ++o) {
        const double a = prelu_ref(h[o], e.slope().item());
        const double n = (a - e.norm().running_mean(0)[o]) / std::sqrt(e.norm().running_var(0)[o] + c.dsbn.eps) *
                             e.norm().gamma(0)[o] +
                         e.norm().beta(0)[o];
        mix[o] += logits[k] / zsum * n;
      }
    }
    const auto want = affine(tower.forward_sap().shared_weight(), tower.forward_sap().bias(), mix);
    for (std::size_t o = 0; o < want.size(); ++o) CHECK(rel_error(got.at(r, o), want[o]) < 1e-12);
  }
}

TEST_CASE("score examples") {
  const std::vector<double> a{1.0, 0.0, 0.0}, b{0.0, 2.0, -1.0};
  CHECK(score(a, b) == 0.5);
  const std::vector<double> u{1.0, 1.0, 1.0};
  CHECK(rel_error(score(u, u), 1.0 / (1.0 + std::exp(-3.0))) < 1e-15);
  const std::vector<double> v{0.3, -1.2, 0.7}, nv{-0.3, 1.2, -0.7};
  CHECK(rel_error(score(u, nv), 1.0 - score(u, v)) < 1e-15);
  const Tensor ut = Tensor::from({2, 3}, {1, 1, 1, 1, 0, 0}), vt = Tensor::from({2, 3}, {1, 1, 1, 0, 1, 0});
  const Tensor p = score(ut, vt);
  CHECK(p[0] == score(u, u));
  CHECK(p[1] == 0.5);
  CHECK_THROWS_AS(score(Tensor::zeros({2, 3}), Tensor::zeros({2, 4})), DimensionError);
}

TEST_CASE("teacher with zero head gives one half") {
  Rng rng(6);
  TeacherModel t(small_schema(), small_config(), 8);
  const Rows u = users(5, rng), it = items(5, rng);
  const std::vector<std::size_t> s{0, 1, 2, 1, 0};
  for (double p : t.probabilities(u.batch(s), it.batch(s)).values()) {
    CHECK(p > 0.0);
    CHECK(p < 1.0);
  }
  for (auto& l : t.trunk()) {
    for (auto& v : l.shared_weight().mutable_values()) v = 0.0;
  }
  for (auto& v : t.head_weight().mutable_values()) v = 0.0;
  for (auto& v : t.head_bias().mutable_values()) v = 0.0;
  for (double p : t.probabilities(u.batch(s), it.batch(s)).values()) CHECK(p == 0.5);
}

TEST_CASE("teacher depends on user-item pairs jointly") {
  Rng rng(7);
  TeacherModel t(small_schema(), small_config(), 9);
  const Rows u = users(2, rng), it = items(2, rng);
  const std::vector<std::size_t> s{0, 0};
  const Tensor p = t.logits(u.batch(s), it.batch(s));
  Rows swapped = it;
  std::swap(swapped.storage[0], swapped.storage[1]);
  const Tensor q = t.logits(u.batch(s), swapped.batch(s));
  // An additive model would satisfy p0 + p1 == q0 + q1.
  CHECK(std::abs((p[0] + p[1]) - (q[0] + q[1])) > 1e-9);
}

TEST_CASE("teacher gradients pass grad_check") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    TeacherModel t(small_schema(), small_config(), seed);
    for (auto& l : t.trunk()) {
      fill_uniform(l.up(), rng, 0.5);
      fill_uniform(l.gen_bias(), rng, 0.5);
    }
    const Rows u = users(6, rng), it = items(6, rng);
    const std::vector<std::size_t> s{0, 1, 2, 1, 0, 2};
    const std::vector<double> y{1, 0, 1, 1, 0, 0};
    ParamList named = t.parameters();
    std::vector<Tensor> params;
    for (const auto& p : named) params.push_back(p.tensor);
    const auto res = grad_check(
        [&] { return mean(mul(sigmoid(t.logits(u.batch(s), it.batch(s))), Tensor::from({6}, y))); }, params);
    CHECK(res.max_relative_error < 1e-4);
  }
}

TEST_CASE("parameter counts equal enumeration for random architectures") {
  Rng rng(8);
  for (int trial = 0; trial < 10; ++trial) {
    ModelConfig c;
    c.hidden_dim = 4 + rng.index(6);
    c.match_dim = 4 + rng.index(4);
    c.experts = 1 + rng.index(4);
    c.rank = 1 + rng.index(4);
    c.teacher_hidden = 2 + rng.index(8);
    c.teacher_layers = 1 + rng.index(3);
    c.use_sap = rng.index(2) == 0;
    c.use_dsbn = rng.index(2) == 0;
    const auto schema = small_schema(1 + rng.index(4), 2 + rng.index(4));
    const DsmoeModel m(schema, c, trial);
    CHECK(model_stats(m).param_count == count_scalars(m.parameters()));
    const TeacherModel t(schema, c, trial);
    CHECK(model_stats(t).param_count == count_scalars(t.parameters()));
  }
}

TEST_CASE("disabling SAP removes exactly the adaptive parameters") {
  ModelConfig c = small_config();
  const auto schema = small_schema(3, 4);
  const DsmoeModel full(schema, c, 1);
  c.use_sap = false;
  const DsmoeModel plain(schema, c, 1);
  std::size_t adaptive = 0;
  for (Side side : {Side::user, Side::item})
    for (const SapLayer* l : full.tower(side).sap_layers()) adaptive += SapLayer::adaptive_parameter_count(l->dims());
  CHECK(model_stats(full).param_count - model_stats(plain).param_count == adaptive);
  CHECK(adaptive == 2 * (3 * (2 * (8 + 6) + 2 * 4 + 2) + (2 * (6 + 5) + 2 * 4 + 2)));
}

TEST_CASE("shared low-rank adaptation is cheaper than per-scenario matrices") {
  const SapDims d{64, 64, 4, 16};
  const std::size_t adaptive = SapLayer::adaptive_parameter_count(d);
  CHECK(adaptive == 4 * (64 + 64) + 4 * 16 + 4);
  CHECK(adaptive < (4 - 1) * 64 * 64);
}

TEST_CASE("flops cover both towers") {
  const DsmoeModel m(small_schema(), small_config(), 1);
  const auto stats = model_stats(m);
  CHECK(stats.flops_per_score > m.tower(Side::user).flops() + m.tower(Side::item).flops());
}

TEST_CASE("checkpoint round trip reproduces scores bitwise") {
  Rng rng(9);
  const auto dir = std::filesystem::temp_directory_path() / "dsmoe_test_model";
  std::filesystem::create_directories(dir);
  DsmoeModel m(small_schema(), small_config(), 10);
  perturb(m, rng);
  save_checkpoint(m, dir / "student.ckpt");
  DsmoeModel loaded = load_student(dir / "student.ckpt");
  CHECK(loaded.config() == m.config());
  const Rows u = users(1000, rng), it = items(1000, rng);
  std::vector<std::size_t> s(1000);
  for (auto& v : s) v = rng.index(3);
  const Tensor a = score(m.user_encode(u.batch(s), Mode::infer), m.item_encode(it.batch(s), Mode::infer));
  const Tensor b =
      score(loaded.user_encode(u.batch(s), Mode::infer), loaded.item_encode(it.batch(s), Mode::infer));
  CHECK(bitwise_equal(a.values(), b.values()));

  TeacherModel t(small_schema(), small_config(), 11);
  save_checkpoint(t, dir / "teacher.ckpt");
  TeacherModel tl = load_teacher(dir / "teacher.ckpt");
  CHECK(bitwise_equal(t.logits(u.batch(s), it.batch(s)).values(), tl.logits(u.batch(s), it.batch(s)).values()));
  CHECK(read_checkpoint_info(dir / "teacher.ckpt").kind == CheckpointKind::teacher);
  CHECK_THROWS_AS(load_student(dir / "teacher.ckpt"), Error);
  std::filesystem::remove_all(dir);
}

TEST_CASE("corrupt checkpoint is rejected") {
  const auto dir = std::filesystem::temp_directory_path() / "dsmoe_test_model_bad";
  std::filesystem::create_directories(dir);
  DsmoeModel m(small_schema(), small_config(), 1);
  save_checkpoint(m, dir / "m.ckpt");
  std::filesystem::resize_file(dir / "m.ckpt", std::filesystem::file_size(dir / "m.ckpt") - 9);
  CHECK_THROWS_AS(load_student(dir / "m.ckpt"), Error);
  CHECK_THROWS_AS(load_student(dir / "missing.ckpt"), Error);
  std::filesystem::remove_all(dir);
}
