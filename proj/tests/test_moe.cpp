// Copyright 2026 The dsmoe Authors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "dsmoe/errors.hpp"
#include "dsmoe/moe.hpp"
#include "dsmoe/ops.hpp"
#include "test_support.hpp"

using namespace dsmoe;
using namespace dsmoe::testing;

namespace {

void randomize_affine(Dsbn& bn, Rng& rng) {
  for (std::size_t s = 0; s < bn.slots(); ++s) {
    for (auto& g : bn.gamma(s).mutable_values()) g = rng.uniform(0.5, 1.5);
    fill_uniform(bn.beta(s), rng, 0.5);
  }
}

MoeConfig small_moe(std::size_t experts = 3, std::size_t scenarios = 3) {
  MoeConfig c;
  c.in = 6;
  c.hidden = 5;
  c.out = 4;
  c.experts = experts;
  c.rank = 2;
  c.scenario_dim = 3;
  c.scenarios = scenarios;
  return c;
}

void randomize_block(MoeBlock& block, Rng& rng) {
  for (auto& e : block.experts()) {
    fill_uniform(e.sap().up(), rng, 0.5);
    fill_uniform(e.sap().gen_bias(), rng, 0.5);
    randomize_affine(e.norm(), rng);
  }
  fill_uniform(block.gate().bias(), rng, 0.5);
  fill_uniform(block.forward_sap().up(), rng, 0.5);
}

}  // namespace

TEST_CASE("train mode standardizes a single-scenario batch") {
  Rng rng(1);
  Dsbn bn(4, 2, true);
  Tensor x = random_tensor({7, 4}, rng, 3.0);
  const std::vector<std::size_t> ids(7, 1);
  const Tensor y = bn.forward(x, ids, Mode::train);
  for (std::size_t c = 0; c < 4; ++c) {
    double mu = 0.0, var = 0.0;
    for (std::size_t r = 0; r < 7; ++r) mu += y.at(r, c);
    mu /= 7.0;
    for (std::size_t r = 0; r < 7; ++r) var += (y.at(r, c) - mu) * (y.at(r, c) - mu);
    var /= 7.0;
    CHECK(std::abs(mu) < 1e-8);
    CHECK(std::abs(var - 1.0) < 1e-4);  // eps in the denominator
  }
}

TEST_CASE("train mode normalizes each scenario partition on its own") {
  Rng rng(2);
  Dsbn bn(3, 3, true);
  randomize_affine(bn, rng);
  Tensor x = random_tensor({8, 3}, rng, 2.0);
  const std::vector<std::size_t> ids{0, 2, 2, 0, 0, 2, 0, 2};
  const Tensor y = bn.forward(x, ids, Mode::train);
  const double eps = bn.options().eps;
  for (std::size_t s : {0u, 2u}) {
    std::vector<std::size_t> rows;
    for (std::size_t r = 0; r < ids.size(); ++r)
      if (ids[r] == s) rows.push_back(r);
    for (std::size_t c = 0; c < 3; ++c) {
      double mu = 0.0, var = 0.0;
      for (auto r : rows) mu += x.at(r, c);
      mu /= static_cast<double>(rows.size());
      for (auto r : rows) var += (x.at(r, c) - mu) * (x.at(r, c) - mu);
      var /= static_cast<double>(rows.size());
      for (auto r : rows) {
        const double want = bn.gamma(s)[c] * (x.at(r, c) - mu) / std::sqrt(var + eps) + bn.beta(s)[c];
        CHECK(rel_error(y.at(r, c), want) < 1e-12);
      }
    }
  }
  // Scenario 1 was absent, so its statistics are untouched.
  for (double m : bn.running_mean(1)) CHECK(m == 0.0);
  for (double v : bn.running_var(1)) CHECK(v == 1.0);
  for (double m : bn.running_mean(0)) CHECK(m != 0.0);
}

TEST_CASE("running statistics follow the moving average") {
  Dsbn bn(1, 1, true, {0.1, 1e-5});
  Tensor x = Tensor::from({3, 1}, {1.0, 2.0, 6.0});
  const std::vector<std::size_t> ids(3, 0);
  bn.forward(x, ids, Mode::train);
  CHECK(bn.running_mean(0)[0] == doctest::Approx(0.9 * 0.0 + 0.1 * 3.0));
  CHECK(bn.running_var(0)[0] == doctest::Approx(0.9 * 1.0 + 0.1 * 7.0));  // unbiased sample variance 7
}

TEST_CASE("infer mode closed form") {
  Rng rng(3);
  Dsbn bn(3, 2, true);
  randomize_affine(bn, rng);
  for (std::size_t s = 0; s < 2; ++s) {
    for (auto& m : bn.running_mean(s)) m = rng.uniform(-1, 1);
    for (auto& v : bn.running_var(s)) v = rng.uniform(0.5, 2);
  }
  Tensor x = random_tensor({4, 3}, rng);
  const std::vector<std::size_t> ids{1, 0, 1, 1};
  const Tensor y = bn.forward(x, ids, Mode::infer);
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 3; ++c) {
      const std::size_t s = ids[r];
      const double want = (x.at(r, c) - bn.running_mean(s)[c]) / std::sqrt(bn.running_var(s)[c] + bn.options().eps) *
                              bn.gamma(s)[c] +
                          bn.beta(s)[c];
      CHECK(rel_error(y.at(r, c), want) < 1e-15);
    }
}

TEST_CASE("isolation across scenarios") {
  Rng rng(4);
  Dsbn bn(3, 3, true);
  randomize_affine(bn, rng);
  Tensor x = random_tensor({5, 3}, rng);
  const std::vector<std::size_t> ids{0, 1, 0, 2, 0};
  const Tensor before = bn.forward(x, ids, Mode::infer);
  for (auto& m : bn.running_mean(1)) m += 5.0;
  for (auto& v : bn.running_var(2)) v *= 3.0;
  const Tensor after = bn.forward(x, ids, Mode::infer);
  for (std::size_t r : {0u, 2u, 4u}) CHECK(bitwise_equal(before.values().subspan(r * 3, 3), after.values().subspan(r * 3, 3)));
  CHECK_FALSE(bitwise_equal(before.values().subspan(3, 3), after.values().subspan(3, 3)));
}

TEST_CASE("singleton partition falls back to running statistics") {
  Rng rng(5);
  Dsbn bn(3, 3, true);
  Tensor x = random_tensor({4, 3}, rng);
  const std::vector<std::size_t> ids{0, 0, 2, 0};
  const Tensor y = bn.forward(x, ids, Mode::train);
  for (double v : y.values()) CHECK(std::isfinite(v));
  CHECK(bn.singleton_fallbacks() == 1);
  for (double m : bn.running_mean(2)) CHECK(m == 0.0);
  const double scale = 1.0 / std::sqrt(1.0 + bn.options().eps);
  for (std::size_t c = 0; c < 3; ++c) CHECK(rel_error(y.at(2, c), x.at(2, c) * scale) < 1e-15);
}

TEST_CASE("unknown scenario and shared slot") {
  Dsbn bn(2, 2, true);
  CHECK_THROWS_AS(bn.forward(Tensor::zeros({2, 2}), std::vector<std::size_t>{0, 2}, Mode::infer), LookupError);
  Dsbn shared(2, 4, false);
  CHECK(shared.slots() == 1);
  CHECK(shared.slot_for(3) == 0);
}

TEST_CASE("DSBN gradients pass grad_check") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    Dsbn bn(3, 3, true, {0.0, 1e-5});
    randomize_affine(bn, rng);
    Tensor x = random_tensor({7, 3}, rng);
    Tensor w = random_tensor({3}, rng);
    const std::vector<std::size_t> ids{0, 1, 0, 1, 2, 0, 1};
    std::vector<Tensor> params{x, bn.gamma(0), bn.beta(0), bn.gamma(1), bn.beta(1), bn.gamma(2), bn.beta(2)};
    for (Mode mode : {Mode::train, Mode::infer}) {
      const auto res = grad_check([&] { return sum(sigmoid(mul_rowwise(bn.forward(x, ids, mode), w))); }, params);
      CHECK(res.max_relative_error < 1e-4);
    }
  }
}

TEST_CASE("expert collapses to PReLU of the shared map") {
  Rng rng(6);
  Expert e({6, 5, 2, 3}, 2, true, {}, rng);
  fill_uniform(e.sap().bias(), rng, 0.5);
  for (std::size_t s = 0; s < 2; ++s)
    for (auto& v : e.norm().running_var(s)) v = 1.0 - e.norm().options().eps;
  Tensor x = random_tensor({3, 6}, rng), es = random_tensor({3, 3}, rng);
  const std::vector<std::size_t> ids{0, 1, 0};
  const Tensor y = e.forward(x, es, ids, Mode::infer);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t o = 0; o < 5; ++o) {
      double z = e.sap().bias()[o];
      for (std::size_t i = 0; i < 6; ++i) z += e.sap().shared_weight().at(o, i) * x.at(r, i);
      const double want = z > 0 ? z : 0.25 * z;
      CHECK(rel_error(y.at(r, o), want) < 1e-14);
    }
}

TEST_CASE("expert rows are isolated in infer mode") {
  Rng rng(7);
  Expert e({6, 5, 2, 3}, 2, true, {}, rng);
  fill_uniform(e.sap().up(), rng, 0.5);
  randomize_affine(e.norm(), rng);
  Tensor x = random_tensor({3, 6}, rng), es = random_tensor({3, 3}, rng);
  const std::vector<std::size_t> ids{0, 1, 0};
  const Tensor y = e.forward(x, es, ids, Mode::infer);
  std::vector<double> xv(x.values().begin(), x.values().end());
  for (std::size_t i = 6; i < 12; ++i) xv[i] += 1.0;  // perturb row 1 only
  const Tensor y2 = e.forward(Tensor::from({3, 6}, xv), es, ids, Mode::infer);
  CHECK(bitwise_equal(y.values().subspan(0, 5), y2.values().subspan(0, 5)));
  CHECK(bitwise_equal(y.values().subspan(10, 5), y2.values().subspan(10, 5)));
}

TEST_CASE("gate weights") {
  Rng rng(8);
  GateNetwork gate(3, 4, rng);
  for (auto& v : gate.weight().mutable_values()) v = 0.0;
  for (double a : gate.weights(random_tensor({4}, rng)).values()) CHECK(a == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  gate.bias().mutable_values()[0] = 10.0;
  const Tensor a = gate.weights(random_tensor({4}, rng));
  const double z = std::exp(10.0) + 2.0;
  CHECK(rel_error(a[0], std::exp(10.0) / z) < 1e-14);
  CHECK(rel_error(a[2], 1.0 / z) < 1e-14);
  GateNetwork one(1, 4, rng);
  CHECK(one.weights(random_tensor({4}, rng)).item() == 1.0);
}

TEST_CASE("gate simplex over 1000 embeddings") {
  Rng rng(9);
  GateNetwork gate(5, 16, rng);
  fill_uniform(gate.bias(), rng, 2.0);
  for (int i = 0; i < 1000; ++i) {
    const Tensor a = gate.weights(random_tensor({16}, rng, 5.0));
    double total = 0.0;
    for (double v : a.values()) {
      CHECK(v >= 0.0);
      total += v;
    }
    CHECK(std::abs(total - 1.0) < 1e-12);
  }
}

TEST_CASE("single expert mixture is the expert output") {
  Rng rng(10);
  MoeBlock block(small_moe(1), rng);
  randomize_block(block, rng);
  Tensor x = random_tensor({4, 6}, rng), es = random_tensor({4, 3}, rng);
  const std::vector<std::size_t> ids{0, 1, 2, 1};
  const Tensor mix = block.mixture(x, es, ids, Mode::infer);
  const Tensor expert = block.experts()[0].forward(x, es, ids, Mode::infer);
  CHECK(bitwise_equal(mix.values(), expert.values()));
}

TEST_CASE("saturated gate selects one expert") {
  Rng rng(11);
  MoeBlock block(small_moe(3), rng);
  randomize_block(block, rng);
  for (auto& v : block.gate().weight().mutable_values()) v = 0.0;
  auto b = block.gate().bias().mutable_values();
  b[0] = 0.0;
  b[1] = 800.0;
  b[2] = 0.0;
  Tensor x = random_tensor({4, 6}, rng), es = random_tensor({4, 3}, rng);
  const std::vector<std::size_t> ids{0, 1, 2, 1};
  const Tensor mix = block.mixture(x, es, ids, Mode::infer);
  const Tensor expert = block.experts()[1].forward(x, es, ids, Mode::infer);
  CHECK(max_rel_error(mix.values(), expert.values()) < 1e-9);
}

TEST_CASE("identical experts make the mixture independent of the gate") {
  Rng rng(12);
  MoeBlock block(small_moe(3), rng);
  randomize_block(block, rng);
  auto& experts = block.experts();
  ParamList first;
  experts[0].collect(first, "");
  for (std::size_t k = 1; k < experts.size(); ++k) {
    ParamList other;
    experts[k].collect(other, "");
    REQUIRE(other.size() == first.size());
    for (std::size_t p = 0; p < other.size(); ++p) {
      auto dst = other[p].tensor.mutable_values();
      std::copy(first[p].tensor.values().begin(), first[p].tensor.values().end(), dst.begin());
    }
  }
  Tensor x = random_tensor({4, 6}, rng), es = random_tensor({4, 3}, rng);
  const std::vector<std::size_t> ids{0, 1, 2, 1};
  const Tensor a = block.mixture(x, es, ids, Mode::infer);
  fill_uniform(block.gate().weight(), rng, 3.0);
  fill_uniform(block.gate().bias(), rng, 3.0);
  const Tensor b = block.mixture(x, es, ids, Mode::infer);
  const Tensor single = experts[0].forward(x, es, ids, Mode::infer);
  CHECK(max_rel_error(a.values(), b.values()) < 1e-12);
  CHECK(max_rel_error(a.values(), single.values()) < 1e-12);
}

TEST_CASE("mixture is a convex combination") {
  Rng rng(13);
  MoeBlock block(small_moe(3), rng);
  randomize_block(block, rng);
  Tensor x = random_tensor({5, 6}, rng), es = random_tensor({5, 3}, rng);
  const std::vector<std::size_t> ids{0, 1, 2, 1, 0};
  const Tensor mix = block.mixture(x, es, ids, Mode::infer);
  std::vector<Tensor> outs;
  for (auto& e : block.experts()) outs.push_back(e.forward(x, es, ids, Mode::infer));
  for (std::size_t i = 0; i < mix.size(); ++i) {
    double lo = INFINITY, hi = -INFINITY;
    for (const auto& o : outs) {
      lo = std::min(lo, o[i]);
      hi = std::max(hi, o[i]);
    }
    CHECK(mix[i] >= lo - 1e-12);
    CHECK(mix[i] <= hi + 1e-12);
  }
}

TEST_CASE("block parameter count matches enumeration") {
  Rng rng(14);
  for (bool sap : {true, false})
    for (bool dsbn : {true, false}) {
      MoeConfig c = small_moe(3, 4);
      c.use_sap = sap;
      c.use_dsbn = dsbn;
      MoeBlock block(c, rng);
      ParamList p;
      block.collect(p, "");
      CHECK(count_scalars(p) == block.parameter_count());
    }
}

TEST_CASE("block gradients pass grad_check over ten seeds") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    MoeConfig c = small_moe(3, 3);
    c.dsbn.momentum = 0.0;
    MoeBlock block(c, rng);
    randomize_block(block, rng);
    Tensor x = random_tensor({7, 6}, rng), es_table = random_tensor({3, 3}, rng);
    const std::vector<std::size_t> ids{0, 1, 0, 1, 2, 0, 1};
    ParamList named;
    block.collect(named, "");
    std::vector<Tensor> params{x, es_table};
    for (const auto& p : named) params.push_back(p.tensor);
    for (Mode mode : {Mode::train, Mode::infer}) {
      const auto res = grad_check(
          [&] { return sum(sigmoid(block.forward(x, gather_rows(es_table, ids), ids, mode))); }, params);
      INFO("seed " << seed);
      CHECK(res.max_relative_error < 1e-4);
    }
  }
}
