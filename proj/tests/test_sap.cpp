// Copyright 2026 The dsmoe Authors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <Eigen/SVD>

#include "dsmoe/errors.hpp"
#include "dsmoe/ops.hpp"
#include "dsmoe/sap.hpp"
#include "test_support.hpp"

using namespace dsmoe;
using namespace dsmoe::testing;

namespace {

SapLayer random_layer(SapDims dims, Rng& rng) {
  SapLayer layer(dims, rng);
  fill_uniform(layer.up(), rng, 0.5);
  fill_uniform(layer.gen_bias(), rng, 0.5);
  fill_uniform(layer.bias(), rng, 0.5);
  return layer;
}

// W_shared x + bias + dW^T x with dW materialized.
std::vector<double> dense_oracle(const SapLayer& layer, const Tensor& x, const Tensor& e_s) {
  const auto& d = layer.dims();
  const Tensor delta = layer.materialize_delta(e_s);
  std::vector<double> y(d.out);
  for (std::size_t o = 0; o < d.out; ++o) {
    double acc = layer.bias()[o];
    for (std::size_t i = 0; i < d.in; ++i) acc += (layer.shared_weight().at(o, i) + delta.at(i, o)) * x[i];
    y[o] = acc;
  }
  return y;
}

}  // namespace

TEST_CASE("construction rules") {
  Rng rng(1);
  CHECK_THROWS_AS(SapLayer({4, 3, 4, 2}, rng), Error);
  CHECK_THROWS_AS(SapLayer({4, 3, 0, 2}, rng), Error);
  SapLayer layer({6, 5, 2, 3}, rng);
  for (double v : layer.up().values()) CHECK(v == 0.0);
  ParamList all;
  layer.collect(all, "");
  CHECK(count_scalars(all) == SapLayer::parameter_count({6, 5, 2, 3}));
}

TEST_CASE("parameter_count formula") {
  Rng rng(2);
  for (std::size_t in : {1, 3, 8})
    for (std::size_t out : {1, 4, 7})
      for (std::size_t e : {1, 5}) {
        const std::size_t r = std::min(in, out);
        SapLayer layer({in, out, r, e}, rng);
        ParamList p;
        layer.collect(p, "");
        CHECK(count_scalars(p) == out * in + out + r * (in + out) + r * e + r);
        CHECK(SapLayer::adaptive_parameter_count({in, out, r, e}) == r * (in + out) + r * e + r);
      }
}

TEST_CASE("scenario_bias") {
  Rng rng(3);
  SapLayer layer({5, 5, 2, 3}, rng);
  Tensor e1 = random_tensor({3}, rng), e2 = random_tensor({3}, rng);
  for (auto& v : layer.gen_weight().mutable_values()) v = 0.0;
  for (double v : layer.scenario_bias(e1).values()) CHECK(v == 0.0);
  for (auto& v : layer.gen_bias().mutable_values()) v = 0.7;
  CHECK(bitwise_equal(layer.scenario_bias(e1).values(), layer.scenario_bias(e2).values()));

  SapLayer r = random_layer({5, 5, 2, 3}, rng);
  const Tensor b = r.scenario_bias(e1);
  for (std::size_t k = 0; k < 2; ++k) {
    double want = r.gen_bias()[k];
    for (std::size_t j = 0; j < 3; ++j) want += r.gen_weight().at(k, j) * e1[j];
    CHECK(rel_error(b[k], want) < 1e-14);
  }
  CHECK_THROWS_AS(r.scenario_bias(random_tensor({4}, rng)), DimensionError);
}

TEST_CASE("zero generator leaves the shared affine map") {
  Rng rng(4);
  SapLayer layer = random_layer({6, 4, 3, 2}, rng);
  for (auto& v : layer.gen_weight().mutable_values()) v = 0.0;
  for (auto& v : layer.gen_bias().mutable_values()) v = 0.0;
  Tensor x = random_tensor({6}, rng), e = random_tensor({2}, rng);
  const Tensor y = layer.forward(x, e);
  for (std::size_t o = 0; o < 4; ++o) {
    double want = layer.bias()[o];
    for (std::size_t i = 0; i < 6; ++i) want += layer.shared_weight().at(o, i) * x[i];
    CHECK(rel_error(y[o], want) < 1e-14);
  }
  for (double v : layer.materialize_delta(e).values()) CHECK(v == 0.0);
}

TEST_CASE("rank-one outer product") {
  Rng rng(5);
  SapLayer layer({4, 3, 1, 2}, rng);
  for (auto& v : layer.shared_weight().mutable_values()) v = 0.0;
  for (auto& v : layer.down().mutable_values()) v = 1.0;
  for (auto& v : layer.up().mutable_values()) v = 1.0;
  for (auto& v : layer.gen_weight().mutable_values()) v = 0.0;
  layer.gen_bias().mutable_values()[0] = 2.5;
  Tensor x = Tensor::vector({1, -2, 0.5, 4});
  const Tensor y = layer.forward(x, Tensor::vector({0.3, 0.1}));
  for (double v : y.values()) CHECK(v == 2.5 * 3.5);
}

TEST_CASE("coefficient masking") {
  Rng rng(6);
  SapLayer layer = random_layer({5, 4, 2, 3}, rng);
  for (auto& v : layer.gen_weight().mutable_values()) v = 0.0;
  layer.gen_bias().mutable_values()[0] = 1.0;
  layer.gen_bias().mutable_values()[1] = 0.0;
  const Tensor delta = layer.materialize_delta(random_tensor({3}, rng));
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t o = 0; o < 4; ++o) CHECK(delta.at(i, o) == layer.down().at(i, 0) * layer.up().at(0, o));
}

TEST_CASE("factored forward equals the dense oracle on 100 instances") {
  Rng rng(7);
  const std::size_t ranks[] = {1, 2, 4, 8};
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t r = ranks[trial % 4];
    const std::size_t in = r + rng.index(24), out = r + rng.index(24), e = 1 + rng.index(16);
    SapLayer layer = random_layer({in, out, r, e}, rng);
    Tensor x = random_tensor({in}, rng), es = random_tensor({e}, rng);
    const Tensor y = layer.forward(x, es);
    const auto want = dense_oracle(layer, x, es);
    worst = std::max(worst, max_rel_error(y.values(), want));
  }
  CHECK(worst < 1e-10);
}

TEST_CASE("batched forward matches row by row") {
  Rng rng(8);
  SapLayer layer = random_layer({6, 5, 2, 3}, rng);
  Tensor x = random_tensor({4, 6}, rng), e = random_tensor({4, 3}, rng);
  const Tensor y = layer.forward(x, e);
  for (std::size_t r = 0; r < 4; ++r) {
    const Tensor yr = layer.forward(Tensor::from({6}, {x.values().begin() + r * 6, x.values().begin() + r * 6 + 6}),
                                    Tensor::from({3}, {e.values().begin() + r * 3, e.values().begin() + r * 3 + 3}));
    CHECK(max_rel_error(y.values().subspan(r * 5, 5), yr.values()) < 1e-14);
  }
}

TEST_CASE("delta rank is at most R") {
  Rng rng(9);
  for (std::size_t r : {1, 2, 3}) {
    SapLayer layer = random_layer({10, 9, r, 4}, rng);
    const Tensor delta = layer.materialize_delta(random_tensor({4}, rng));
    Eigen::MatrixXd m(10, 9);
    for (std::size_t i = 0; i < 10; ++i)
      for (std::size_t o = 0; o < 9; ++o) m(i, o) = delta.at(i, o);
    const Eigen::JacobiSVD<Eigen::MatrixXd> svd(m);
    const auto sv = svd.singularValues();
    CHECK(sv(r - 1) > 1e-8);
    for (Eigen::Index k = static_cast<Eigen::Index>(r); k < sv.size(); ++k) CHECK(sv(k) < 1e-10 * sv(0));
  }
}

TEST_CASE("linearity in x with zero bias") {
  Rng rng(10);
  SapLayer layer = random_layer({5, 4, 2, 3}, rng);
  for (auto& v : layer.bias().mutable_values()) v = 0.0;
  Tensor x1 = random_tensor({5}, rng), x2 = random_tensor({5}, rng), e = random_tensor({3}, rng);
  const double a = 1.7;
  const Tensor lhs = layer.forward(add(scale(x1, a), x2), e);
  const Tensor rhs = add(scale(layer.forward(x1, e), a), layer.forward(x2, e));
  CHECK(max_rel_error(lhs.values(), rhs.values()) < 1e-12);
}

TEST_CASE("distinct scenarios give distinct outputs") {
  Rng rng(11);
  SapLayer layer = random_layer({5, 4, 2, 3}, rng);
  Tensor x = random_tensor({5}, rng);
  const Tensor y1 = layer.forward(x, random_tensor({3}, rng));
  const Tensor y2 = layer.forward(x, random_tensor({3}, rng));
  CHECK_FALSE(bitwise_equal(y1.values(), y2.values()));
}

TEST_CASE("non-adaptive layer drops the low-rank path") {
  Rng rng(12);
  SapLayer layer = random_layer({5, 4, 2, 3}, rng);
  layer.set_adaptive(false);
  ParamList p;
  layer.collect(p, "");
  CHECK(p.size() == 2);
  Tensor x = random_tensor({2, 5}, rng), e = random_tensor({2, 3}, rng);
  backward(sum(layer.forward(x, e)));
  for (const Tensor* t : {&layer.down(), &layer.up(), &layer.gen_weight(), &layer.gen_bias()}) {
    for (double g : t->grad()) CHECK(g == 0.0);
  }
}

TEST_CASE("SAP gradients pass grad_check over ten seeds") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    SapLayer layer = random_layer({5, 4, 2, 3}, rng);
    Tensor x = random_tensor({6, 5}, rng), e = random_tensor({6, 3}, rng);
    std::vector<Tensor> params{layer.shared_weight(), layer.bias(), layer.down(), layer.up(),
                               layer.gen_weight(), layer.gen_bias(), x, e};
    const auto res = grad_check([&] { return sum(sigmoid(layer.forward(x, e))); }, params);
    CHECK(res.max_relative_error < 1e-4);
  }
}

TEST_CASE("flops") {
  const SapDims d{64, 64, 4, 16};
  CHECK(SapLayer::flops(d, true) > SapLayer::flops(d, false));
  CHECK(SapLayer::flops(d, false) == 2 * 64 * 64 + 64);
}
