// Copyright 2026 The dsmoe Authors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "dsmoe/errors.hpp"
#include "dsmoe/features.hpp"
#include "dsmoe/ops.hpp"
#include "test_support.hpp"

using namespace dsmoe;
using namespace dsmoe::testing;

TEST_CASE("schema validation") {
  CHECK_NOTHROW(small_schema());
  CHECK_THROWS_AS(FeatureSchema({{"a", FieldKind::sparse, Side::user, 3, 4}, {"a", FieldKind::sparse, Side::item, 3, 4}}, 2),
                  ValidationError);
  CHECK_THROWS_AS(FeatureSchema({{"a", FieldKind::sparse, Side::user, 0, 4}, {"b", FieldKind::sparse, Side::item, 3, 4}}, 2),
                  ValidationError);
  CHECK_THROWS_AS(FeatureSchema({{"a", FieldKind::sparse, Side::user, 3, 4}, {"b", FieldKind::sparse, Side::user, 3, 8},
                                 {"c", FieldKind::sparse, Side::item, 3, 4}},
                                2),
                  ValidationError);
  CHECK_THROWS_AS(FeatureSchema({{"a", FieldKind::sparse, Side::user, 3, 4}}, 2), ValidationError);
  const auto s = small_schema();
  CHECK(s.side_dim(Side::user) == 8);
  CHECK(s.side_width(Side::item) == 2);
  CHECK(s.find("item_price") == 3u);
  CHECK_FALSE(s.find("missing").has_value());
}

TEST_CASE("schema JSON round trip and fingerprint") {
  const auto s = small_schema();
  const auto back = FeatureSchema::from_json_text(s.to_json_text());
  CHECK(back == s);
  CHECK(back.fingerprint() == s.fingerprint());
  CHECK(small_schema(4).fingerprint() != s.fingerprint());
  CHECK(fingerprint_hex(s.fingerprint()).size() == 16);
}

TEST_CASE("record validation") {
  const auto s = small_schema();
  InteractionRecord r{1, 2, 0, 1, {std::int64_t{1}, std::vector<std::int64_t>{}}, {std::int64_t{2}, 0.5}};
  CHECK_NOTHROW(validate_record(r, s));
  auto bad = r;
  bad.label = 2;
  CHECK_THROWS_AS(validate_record(bad, s), ValidationError);
  bad = r;
  bad.scenario_id = 3;
  CHECK_THROWS_AS(validate_record(bad, s), Error);
  bad = r;
  bad.user_features[0] = std::int64_t{6};
  CHECK_THROWS_AS(validate_record(bad, s), LookupError);
  bad = r;
  bad.item_features[1] = std::nan("");
  CHECK_THROWS_AS(validate_record(bad, s), ValidationError);
  bad = r;
  bad.user_features[1] = std::vector<std::int64_t>{0, 5};
  CHECK_THROWS_AS(validate_record(bad, s), LookupError);
}

TEST_CASE("embed_value conventions") {
  Rng rng(1);
  const auto s = small_schema();
  FieldEmbeddings user(s, Side::user, rng);
  FieldEmbeddings item(s, Side::item, rng);
  const Tensor& ids = user.table(0);
  const Tensor row0 = embed_value(std::int64_t{0}, s.fields()[0], ids);
  CHECK(bitwise_equal(row0.values(), ids.values().subspan(0, 4)));

  const Tensor zero = embed_value(0.0, s.fields()[3], item.table(1));
  for (double v : zero.values()) CHECK(v == 0.0);

  const Tensor& hist = user.table(1);
  const Tensor one = embed_value(std::vector<std::int64_t>{3}, s.fields()[1], hist);
  const Tensor two = embed_value(std::vector<std::int64_t>{3, 3}, s.fields()[1], hist);
  CHECK(bitwise_equal(one.values(), two.values()));
  const Tensor empty = embed_value(std::vector<std::int64_t>{}, s.fields()[1], hist);
  for (double v : empty.values()) CHECK(v == 0.0);

  const Tensor ab = embed_value(std::vector<std::int64_t>{1, 4, 2}, s.fields()[1], hist);
  const Tensor ba = embed_value(std::vector<std::int64_t>{2, 1, 4}, s.fields()[1], hist);
  CHECK(max_rel_error(ab.values(), ba.values()) < 1e-15);

  CHECK_THROWS_AS(embed_value(std::int64_t{6}, s.fields()[0], ids), LookupError);
  CHECK_THROWS_AS(embed_value(std::int64_t{-1}, s.fields()[0], ids), LookupError);
}

TEST_CASE("init bound") {
  Rng rng(2);
  const auto s = small_schema(3, 16);
  FieldEmbeddings user(s, Side::user, rng);
  for (double v : user.table(0).values()) CHECK(std::abs(v) <= 0.25);
}

TEST_CASE("assemble concatenates fields in schema order") {
  Rng rng(3);
  const auto s = small_schema();
  FieldEmbeddings user(s, Side::user, rng);
  const FeatureRow a{std::int64_t{2}, std::vector<std::int64_t>{1, 4}};
  const FeatureRow b{std::int64_t{5}, std::vector<std::int64_t>{}};
  std::vector<const FeatureRow*> rows{&a, &b};
  const Tensor x = user.assemble(rows);
  CHECK(x.shape() == Shape{2, 8});
  const Tensor f0 = embed_value(a[0], s.fields()[0], user.table(0));
  const Tensor f1 = embed_value(a[1], s.fields()[1], user.table(1));
  for (std::size_t c = 0; c < 4; ++c) {
    CHECK(x.at(0, c) == f0[c]);
    CHECK(x.at(0, 4 + c) == f1[c]);
    CHECK(x.at(1, 4 + c) == 0.0);
  }

  const auto one_field = FeatureSchema({{"u", FieldKind::sparse, Side::user, 3, 4}, {"i", FieldKind::sparse, Side::item, 3, 4}}, 1, 4);
  FieldEmbeddings single(one_field, Side::user, rng);
  const FeatureRow r{std::int64_t{1}};
  std::vector<const FeatureRow*> one{&r};
  const Tensor y = single.assemble(one);
  CHECK(bitwise_equal(y.values(), single.table(0).values().subspan(4, 4)));
}

TEST_CASE("embedding gradients pass grad_check") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    const auto s = small_schema();
    FieldEmbeddings user(s, Side::user, rng), item(s, Side::item, rng);
    std::vector<FeatureRow> users, items;
    for (int i = 0; i < 5; ++i) {
      users.push_back(random_user(rng));
      items.push_back(random_item(rng));
    }
    std::vector<const FeatureRow*> ur, ir;
    for (int i = 0; i < 5; ++i) {
      ur.push_back(&users[i]);
      ir.push_back(&items[i]);
    }
    Tensor w = random_tensor({8, 1}, rng);
    std::vector<Tensor> params{user.table(0), user.table(1), item.table(0), item.table(1)};
    const auto res = grad_check(
        [&] {
          Tensor z = mul(user.assemble(ur), item.assemble(ir));
          return sum(sigmoid(matmul(z, w)));
        },
        params);
    CHECK(res.max_relative_error < 1e-4);
  }
}

TEST_CASE("scenario embedding") {
  Rng rng(4);
  ScenarioEmbedding se(3, 4, rng);
  CHECK(bitwise_equal(se.embed_one(0).values(), se.table().values().subspan(0, 4)));
  CHECK_FALSE(bitwise_equal(se.embed_one(0).values(), se.embed_one(1).values()));
  CHECK(bitwise_equal(se.embed_one(2).values(), se.embed_one(2).values()));
  CHECK_THROWS_AS(se.embed_one(3), LookupError);

  // Only rows of scenarios present in the batch receive gradient.
  const std::vector<std::size_t> ids{0, 2, 2};
  backward(sum(mul(se.embed(ids), se.embed(ids))));
  const auto g = se.table().grad();
  for (std::size_t c = 0; c < 4; ++c) {
    CHECK(g[4 + c] == 0.0);
    CHECK(g[c] != 0.0);
    CHECK(g[8 + c] != 0.0);
  }
}
