#include <doctest.h>

#include <cmath>

#include "rsicam/error.hpp"
#include "rsicam/fixtures.hpp"
#include "rsicam/tensor.hpp"

using namespace rsicam;

namespace {

Heatmap raw_map(Tensor grid) { return Heatmap{std::move(grid), HeatmapStage::raw, "test", "layer", 0}; }

Tensor random_tensor(FixtureRng& rng, Shape shape, float lo = -5.0f, float hi = 5.0f) {
  std::vector<float> v(shape_size(shape));
  for (float& x : v) x = rng.uniform(lo, hi);
  return Tensor(std::move(shape), std::move(v));
}

bool all_finite(const Tensor& t) {
  for (float v : t.values()) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

} // namespace

TEST_CASE("tensor construction enforces its invariants") {
  CHECK_THROWS_AS(Tensor({2, 2}, {1.0f, 2.0f, 3.0f}), DimensionError);
  CHECK_THROWS_AS(Tensor({0, 2}, {}), DimensionError);
  CHECK_THROWS_AS(Tensor({1}, {NAN}), NumericError);
  CHECK_THROWS_AS(Tensor({1}, {INFINITY}), NumericError);
  const auto t = Tensor({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(t.reshape({3, 2}).values().size() == 6);
  CHECK_THROWS_AS(t.reshape({4, 2}), DimensionError);
  CHECK(t.at(1, 2) == 6.0f);
  CHECK(t.sum() == 21.0);
}

TEST_CASE("hadamard") {
  const auto a = Tensor::from_rows({{1, 2}, {3, 4}});
  const auto b = Tensor::from_rows({{2, 0}, {1, 3}});
  CHECK(hadamard(a, b) == Tensor::from_rows({{2, 0}, {3, 12}}));
  CHECK(hadamard(a, Tensor::filled({2, 2}, 1.0f)) == a);

  SUBCASE("rank-2 grid broadcast into each channel") {
    const auto grid = Tensor::from_rows({{0.5f}});
    const auto image = Tensor::filled({3, 1, 1}, 4.0f);
    CHECK(hadamard(grid, image) == Tensor::filled({3, 1, 1}, 2.0f));
    CHECK(hadamard(image, grid) == Tensor::filled({3, 1, 1}, 2.0f));
  }

  SUBCASE("mismatch names both shapes") {
    try {
      hadamard(a, Tensor::zeros({3, 2}));
      FAIL("expected DimensionError");
    } catch (const DimensionError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("[2x2]") != std::string::npos);
      CHECK(msg.find("[3x2]") != std::string::npos);
    }
  }
}

TEST_CASE("minmax_normalize") {
  SUBCASE("forced arithmetic") {
    const auto h = minmax_normalize(raw_map(Tensor({1, 4}, {0, 2, 4, 8})), 0.0);
    CHECK(h.stage == HeatmapStage::normalized);
    CHECK(h.grid == Tensor({1, 4}, {0.0f, 0.25f, 0.5f, 1.0f}));
  }
  SUBCASE("constant grid maps to zeros") {
    CHECK(minmax_normalize(raw_map(Tensor({2, 2}, {3, 3, 3, 3})), 1e-8).grid == Tensor::zeros({2, 2}));
    CHECK(minmax_normalize(raw_map(Tensor({2, 2}, {3, 3, 3, 3})), 0.0).grid == Tensor::zeros({2, 2}));
  }
  SUBCASE("tiny range with epsilon gives a dark map") {
    const auto h = minmax_normalize(raw_map(Tensor({1, 2}, {0.0f, 1e-9f})), 1e-8);
    // Oracle: direct substitution, computed from the stored float value.
    const double expected = static_cast<double>(1e-9f) / (static_cast<double>(1e-9f) + 1e-8);
    CHECK(h.grid.max() == doctest::Approx(expected).epsilon(1e-6));
    CHECK(h.grid.max() == doctest::Approx(0.0909).epsilon(1e-3));
    CHECK(h.grid.max() < 0.5f);
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(minmax_normalize(raw_map(Tensor({1, 2}, {0, 1})), -1e-3), ParameterError);
    auto normalized = minmax_normalize(raw_map(Tensor({1, 2}, {0, 1})), 0.0);
    CHECK_THROWS_AS(minmax_normalize(normalized, 0.0), ParameterError);
  }
}

TEST_CASE("bilinear_upsample uses align-corners") {
  SUBCASE("constant extension") {
    const auto h = bilinear_upsample(raw_map(Tensor::from_rows({{5}})), 7, 7);
    CHECK(h.grid == Tensor::filled({7, 7}, 5.0f));
    CHECK(h.stage == HeatmapStage::upsampled);
  }
  SUBCASE("2x2 to 3x3 hand computation") {
    const auto h = bilinear_upsample(raw_map(Tensor::from_rows({{0, 1}, {1, 0}})), 3, 3);
    CHECK(h.grid == Tensor::from_rows({{0, 0.5f, 1}, {0.5f, 0.5f, 0.5f}, {1, 0.5f, 0}}));
  }
  SUBCASE("corners are preserved") {
    FixtureRng rng(7);
    const auto src = random_tensor(rng, {3, 5});
    const auto up = bilinear_upsample(raw_map(src), 32, 17).grid;
    CHECK(up.at(0, 0) == src.at(0, 0));
    CHECK(up.at(0, 16) == src.at(0, 4));
    CHECK(up.at(31, 0) == src.at(2, 0));
    CHECK(up.at(31, 16) == src.at(2, 4));
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(bilinear_upsample(raw_map(Tensor::from_rows({{1}})), 0, 3), ParameterError);
    CHECK_THROWS_AS(bilinear_upsample(raw_map(Tensor::zeros({1, 2, 2})), 3, 3), DimensionError);
  }
}

TEST_CASE("channel_sum and relu_map") {
  const auto t = Tensor({2, 2, 2}, {1, 2, 3, 4, -1, 0, 1, 2});
  CHECK(channel_sum(t) == Tensor::from_rows({{0, 2}, {4, 6}}));
  const auto single = Tensor({1, 2, 2}, {1, 2, 3, 4});
  CHECK(channel_sum(single) == Tensor::from_rows({{1, 2}, {3, 4}}));
  const auto copies = Tensor({3, 1, 2}, {1.5f, -2, 1.5f, -2, 1.5f, -2});
  CHECK(channel_sum(copies) == Tensor::from_rows({{4.5f, -6}}));
  CHECK_THROWS_AS(channel_sum(Tensor::zeros({2, 2})), DimensionError);

  CHECK(relu_map(Tensor({3}, {-1, 0, 2})) == Tensor({3}, {0, 0, 2}));
  const auto nonneg = Tensor({3}, {0, 1, 2});
  CHECK(relu_map(nonneg) == nonneg);
}

TEST_CASE("tensor-core properties on random inputs") {
  FixtureRng rng(42);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t c = 1 + rng.below(4), h = 1 + rng.below(6), w = 1 + rng.below(6);
    const auto a = random_tensor(rng, {c, h, w});
    const auto b = random_tensor(rng, {c, h, w});
    const auto g = random_tensor(rng, {h, w});

    // Finiteness after every public operation.
    CHECK(all_finite(hadamard(a, b)));
    CHECK(all_finite(channel_sum(a)));
    CHECK(all_finite(relu_map(a)));
    const auto norm = minmax_normalize(raw_map(g), 1e-8);
    CHECK(all_finite(norm.grid));
    CHECK(norm.grid.min() >= 0.0f);
    CHECK(norm.grid.max() <= 1.0f);

    // Idempotent ReLU.
    CHECK(relu_map(relu_map(a)) == relu_map(a));

    // Exact 0 and 1 at the extremes when epsilon = 0.
    if (g.max() > g.min()) {
      const auto exact = minmax_normalize(raw_map(g), 0.0).grid;
      CHECK(exact.min() == 0.0f);
      CHECK(exact.max() == 1.0f);
    }

    // Convexity of interpolation weights.
    const auto up = bilinear_upsample(raw_map(g), 1 + rng.below(20), 1 + rng.below(20)).grid;
    CHECK(up.min() >= g.min());
    CHECK(up.max() <= g.max());

    // Linearity in each argument.
    const auto lhs = hadamard(add(a, b), g);
    const auto rhs = add(hadamard(a, g), hadamard(b, g));
    const auto s1 = channel_sum(add(a, b));
    const auto s2 = add(channel_sum(a), channel_sum(b));
    for (std::size_t i = 0; i < lhs.size(); ++i) CHECK(std::abs(lhs[i] - rhs[i]) <= 1e-5 * (1 + std::abs(rhs[i])));
    for (std::size_t i = 0; i < s1.size(); ++i) CHECK(std::abs(s1[i] - s2[i]) <= 1e-5 * (1 + std::abs(s2[i])));
  }
}
