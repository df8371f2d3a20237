// Copyright 2026 The dsmoe Authors
// SPDX-License-Identifier: Apache-2.0

// Shared helpers for the unit tests.

#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "dsmoe/features.hpp"
#include "dsmoe/rng.hpp"
#include "dsmoe/tensor.hpp"

namespace dsmoe::testing {

inline Tensor random_tensor(Shape shape, Rng& rng, double bound = 1.0, bool grad = true) {
  std::vector<double> v(shape_size(shape));
  for (auto& x : v) x = rng.uniform(-bound, bound);
  return Tensor::from(std::move(shape), std::move(v), grad);
}

inline void fill_uniform(Tensor& t, Rng& rng, double bound) {
  for (auto& v : t.mutable_values()) v = rng.uniform(-bound, bound);
}

inline double rel_error(double got, double want) {
  return std::abs(got - want) / std::max(1.0, std::abs(want));
}

inline double max_rel_error(std::span<const double> got, std::span<const double> want) {
  double worst = 0.0;
  for (std::size_t i = 0; i < got.size(); ++i) worst = std::max(worst, rel_error(got[i], want[i]));
  return worst;
}

inline bool bitwise_equal(std::span<const double> a, std::span<const double> b) {
  return a.size() == b.size() && std::equal(a.begin(), a.end(), b.begin());
}

// Two fields per side covering every field kind.
inline FeatureSchema small_schema(std::size_t scenarios = 3, std::size_t dim = 4) {
  return FeatureSchema({{"user_id", FieldKind::sparse, Side::user, 6, dim},
                        {"user_history", FieldKind::sequential, Side::user, 5, dim},
                        {"item_id", FieldKind::sparse, Side::item, 9, dim},
                        {"item_price", FieldKind::dense, Side::item, 0, dim}},
                       scenarios, dim);
}

inline FeatureRow random_user(Rng& rng) {
  std::vector<std::int64_t> h(rng.index(4));
  for (auto& v : h) v = static_cast<std::int64_t>(rng.index(5));
  return {static_cast<std::int64_t>(rng.index(6)), h};
}

inline FeatureRow random_item(Rng& rng) { return {static_cast<std::int64_t>(rng.index(9)), rng.normal()}; }

}  // namespace dsmoe::testing
