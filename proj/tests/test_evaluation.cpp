#include <doctest.h>

#include <algorithm>
#include <random>

#include "oracles.hpp"
#include "rsicam/error.hpp"
#include "rsicam/evaluation.hpp"
#include "rsicam/fixtures.hpp"
#include "test_util.hpp"

using namespace rsicam;

namespace {

Heatmap map_of(Tensor grid, HeatmapStage stage = HeatmapStage::upsampled) {
  return Heatmap{std::move(grid), stage, "test", "layer", 0};
}

Tensor grid4(std::initializer_list<std::pair<std::size_t, std::size_t>> hot, float on = 1.0f, float off = 0.0f) {
  std::vector<float> v(16, off);
  for (auto [r, c] : hot) v[r * 4 + c] = on;
  return Tensor({4, 4}, v);
}

std::vector<std::vector<double>> nested(const Tensor& g) {
  std::vector<std::vector<double>> out(g.dim(0), std::vector<double>(g.dim(1)));
  for (std::size_t r = 0; r < g.dim(0); ++r)
    for (std::size_t c = 0; c < g.dim(1); ++c) out[r][c] = g.at(r, c);
  return out;
}

EvalRecord rec(std::string id, double y, double o) { return make_record(std::move(id), 0, y, o); }

} // namespace

TEST_CASE("explanation_map") {
  const auto image = Tensor({2, 1, 2}, {0.2f, 0.4f, 0.6f, 0.8f});
  CHECK(explanation_map(map_of(Tensor::filled({1, 2}, 1.0f)), image) == image);
  CHECK(explanation_map(map_of(Tensor::zeros({1, 2})), image) == Tensor::zeros({2, 1, 2}));
  CHECK(explanation_map(map_of(Tensor::filled({1, 2}, 0.5f)), image) == Tensor({2, 1, 2}, {0.1f, 0.2f, 0.3f, 0.4f}));
  CHECK_THROWS_AS(explanation_map(map_of(Tensor::zeros({2, 2})), image), DimensionError);
}

TEST_CASE("average drop and increase in confidence") {
  CHECK(average_drop(std::vector{rec("a", 0.8, 0.6)}) == doctest::Approx(0.25));
  CHECK(average_drop(std::vector{rec("a", 0.8, 0.9), rec("b", 0.3, 0.3)}) == 0.0);
  // 0.8 and 0.6 are not binary fractions, so the decimal case can only match
  // to within their representation error. The dyadic case is exact.
  CHECK(average_drop(std::vector{rec("a", 0.8, 0.6), rec("b", 0.5, 0.5)}) == doctest::Approx(0.125).epsilon(1e-15));
  CHECK(average_drop(std::vector{rec("a", 0.5, 0.375), rec("b", 0.25, 0.25)}) == 0.125);
  CHECK(increase_in_confidence(std::vector{rec("a", 0.8, 0.9), rec("b", 0.1, 0.2)}) == 1.0);
  CHECK(increase_in_confidence(std::vector{rec("a", 0.8, 0.8), rec("b", 0.3, 0.2)}) == 0.0);
  CHECK(increase_in_confidence(std::vector{rec("a", 0.8, 0.9), rec("b", 0.8, 0.6)}) == 0.5);

  CHECK_THROWS_AS(average_drop(std::vector<EvalRecord>{}), EvaluationError);
  CHECK_THROWS_AS(increase_in_confidence(std::vector<EvalRecord>{}), EvaluationError);
  CHECK_THROWS_AS(drop_term(0.0, 0.3), EvaluationError);
  CHECK(rec("a", 0.5, 0.7).confidence_increased);

  SUBCASE("permutation invariance") {
    FixtureRng rng(5);
    std::vector<EvalRecord> records;
    for (int i = 0; i < 40; ++i)
      records.push_back(rec(std::to_string(i), rng.uniform(0.01f, 1.0f), rng.uniform(0.0f, 1.0f)));
    const double ad = average_drop(records);
    const double ic = increase_in_confidence(records);
    std::mt19937 g(9);
    for (int t = 0; t < 5; ++t) {
      std::shuffle(records.begin(), records.end(), g);
      CHECK(average_drop(records) == doctest::Approx(ad).epsilon(1e-12));
      CHECK(increase_in_confidence(records) == ic);
    }
  }
}

TEST_CASE("pixel energy") {
  const BoundingBox box{0, 0, 2, 2};
  CHECK(pixel_energy(map_of(Tensor::filled({4, 4}, 0.3f)), box).value() == 0.25);
  CHECK(pixel_energy(map_of(grid4({{0, 0}, {1, 1}})), box).value() == 1.0);
  {
    const auto h = map_of(grid4({{3, 3}}, 1.0f, 0.1f));
    CHECK(pixel_energy(h, box).value() == doctest::Approx(0.16).epsilon(1e-6));
  }
  CHECK_FALSE(pixel_energy(map_of(Tensor::zeros({4, 4})), box).has_value());

  SUBCASE("scale invariance") {
    FixtureRng rng(8);
    for (int t = 0; t < 20; ++t) {
      std::vector<float> v(64);
      for (float& x : v) x = rng.uniform(0.0f, 1.0f);
      const Tensor g({8, 8}, v);
      const BoundingBox b{rng.below(4), rng.below(4), 1 + rng.below(4), 1 + rng.below(4)};
      const double e = pixel_energy(map_of(g), b).value();
      CHECK(e >= 0.0);
      CHECK(e <= 1.0);
      CHECK(pixel_energy(map_of(scale(g, 3.5f)), b).value() == doctest::Approx(e).epsilon(1e-6));
    }
  }
}

TEST_CASE("jaccard metrics") {
  const auto R = map_of(grid4({{0, 0}, {0, 1}, {1, 0}, {1, 1}}));
  const auto j = jaccard_metrics(R, BoundingBox{1, 1, 2, 2}, 0.5);
  CHECK(std::abs(j.iou - 1.0 / 7.0) <= 1e-12);
  CHECK(std::abs(j.iob - 0.25) <= 1e-12);
  CHECK(std::abs(j.ior.value() - 0.25) <= 1e-12);

  const auto same = jaccard_metrics(R, BoundingBox{0, 0, 2, 2}, 0.5);
  CHECK(same.iou == 1.0);
  CHECK(same.iob == 1.0);
  CHECK(same.ior.value() == 1.0);

  const auto disjoint = jaccard_metrics(R, BoundingBox{2, 2, 2, 2}, 0.5);
  CHECK(disjoint.iou == 0.0);
  CHECK(disjoint.iob == 0.0);
  CHECK(disjoint.ior.value() == 0.0);

  const auto empty = jaccard_metrics(map_of(Tensor::zeros({4, 4})), BoundingBox{0, 0, 2, 2}, 0.5);
  CHECK(empty.iou == 0.0);
  CHECK(empty.iob == 0.0);
  CHECK_FALSE(empty.ior.has_value());

  CHECK_THROWS_AS(jaccard_metrics(R, BoundingBox{0, 0, 2, 2}, 0.0), ParameterError);
  CHECK_THROWS_AS(jaccard_metrics(R, BoundingBox{0, 0, 2, 2}, 1.0), ParameterError);

  SUBCASE("random grids agree with set enumeration") {
    FixtureRng rng(12);
    for (int t = 0; t < 100; ++t) {
      const std::size_t h = 2 + rng.below(8), w = 2 + rng.below(8);
      std::vector<float> v(h * w);
      for (float& x : v) x = rng.uniform(0.0f, 1.0f);
      const Tensor g({h, w}, v);
      const std::size_t bx = rng.below(static_cast<std::uint32_t>(w)), by = rng.below(static_cast<std::uint32_t>(h));
      const BoundingBox b{bx, by, 1 + rng.below(static_cast<std::uint32_t>(w - bx)),
                          1 + rng.below(static_cast<std::uint32_t>(h - by))};
      const double thr = rng.uniform(0.05f, 0.95f);
      const auto got = jaccard_metrics(map_of(g), b, thr);
      const auto want = oracle::jaccard(nested(g), b.x, b.y, b.w, b.h, thr);
      CHECK(std::abs(got.iou - want.iou) <= 1e-12);
      CHECK(std::abs(got.iob - want.iob) <= 1e-12);
      CHECK(got.ior.has_value() == want.ior_defined);
      if (got.ior) {
        CHECK(std::abs(*got.ior - want.ior) <= 1e-12);
        CHECK(got.iou <= std::min(got.iob, *got.ior) + 1e-15);
      }
    }
  }
}

TEST_CASE("dark heatmaps") {
  const auto constant = map_of(Tensor::filled({3, 3}, 2.0f), HeatmapStage::raw);
  for (double eps : {1e-12, 1e-3, 1.0}) CHECK(dark_heatmap_flag(constant, eps));
  CHECK(dark_heatmap_flag(map_of(Tensor({1, 2}, {0.0f, 1e-9f}), HeatmapStage::raw), 1e-8));
  CHECK_FALSE(dark_heatmap_flag(map_of(Tensor({1, 2}, {0.0f, 1e-7f}), HeatmapStage::raw), 1e-8));

  std::vector<DarkSample> samples{{1e-9, 0.9}, {1e-6, 0.8}, {1e-3, 0.7}};
  const std::vector<double> eps{1e-8};
  const auto counts = dark_heatmap_count(samples, eps);
  CHECK(counts.at(1e-8).count == 1);
  CHECK(counts.at(1e-8).avg_p.value() == doctest::Approx(0.9));

  const std::vector<double> tiny{1e-12};
  CHECK_FALSE(dark_heatmap_count(samples, tiny).at(1e-12).avg_p.has_value());

  SUBCASE("monotone in epsilon") {
    FixtureRng rng(3);
    for (int t = 0; t < 200; ++t) {
      const float a = rng.uniform(0.0f, 1.0f);
      const float d = std::pow(10.0f, rng.uniform(-11.0f, -1.0f));
      const auto h = map_of(Tensor({1, 2}, {a, a + d}), HeatmapStage::raw);
      bool prev = false;
      for (double e : {1e-12, 1e-10, 1e-8, 1e-6, 1e-4, 1e-2, 1.0}) {
        const bool now = dark_heatmap_flag(h, e);
        CHECK((!prev || now));
        prev = now;
      }
    }
  }
}

TEST_CASE("rolling window average") {
  std::vector<EvalRecord> records;
  for (int i = 0; i < 4; ++i) {
    auto r = rec("img" + std::to_string(i), 0.1 * (i + 1), 0.0);
    r.energy = (i % 2 == 0) ? 0.0 : 1.0;
    records.push_back(r);
  }
  const MetricSelector energy = [](const EvalRecord& r) { return r.energy; };

  const auto pts = rolling_window_average(records, 2, energy);
  REQUIRE(pts.size() == 3);
  for (const auto& p : pts) CHECK(p.mean_metric.value() == doctest::Approx(0.5));
  CHECK(pts[0].mean_y == doctest::Approx(0.15));

  const auto whole = rolling_window_average(records, 4, energy);
  REQUIRE(whole.size() == 1);
  CHECK(whole[0].mean_y == doctest::Approx(0.25));

  std::reverse(records.begin(), records.end());
  const auto single = rolling_window_average(records, 1, energy);
  REQUIRE(single.size() == 4);
  CHECK(single[0].mean_y == doctest::Approx(0.1));
  CHECK(single[3].mean_metric.value() == 1.0);

  CHECK_THROWS_AS(rolling_window_average(records, 5, energy), ParameterError);
  CHECK_THROWS_AS(rolling_window_average(records, 0, energy), ParameterError);
}

TEST_CASE("manifest filtering") {
  const std::vector<ManifestEntry> entries{
      {"a.png", 1, {{0, 0, 2, 2}}},
      {"b.png", 2, {{0, 0, 2, 2}}},
      {"c.png", 1, {{0, 0, 2, 2}, {1, 1, 1, 1}}},
      {"d.png", 1, {{0, 0, 6, 10}}},
      {"e.png", 1, {}},
  };
  const std::vector<Prediction> preds{{1, 0.9, 10, 10}, {3, 0.9, 10, 10}, {1, 0.9, 10, 10}, {1, 0.9, 10, 10},
                                      {1, 0.9, 10, 10}};
  const auto kept = filter_manifest(entries, preds, 0.5);
  REQUIRE(kept.size() == 1);
  CHECK(kept[0].image_path == "a.png");

  SUBCASE("subset and idempotent on random data") {
    FixtureRng rng(17);
    std::vector<ManifestEntry> es;
    std::vector<Prediction> ps;
    for (int i = 0; i < 60; ++i) {
      ManifestEntry e{"img" + std::to_string(i), rng.below(3), {}};
      const auto nb = rng.below(3);
      for (std::uint32_t b = 0; b < nb; ++b) e.boxes.push_back({0, 0, 1 + rng.below(16), 1 + rng.below(16)});
      es.push_back(e);
      ps.push_back({rng.below(3), 0.5, 16, 16});
    }
    const auto idx = filter_manifest_indices(es, ps, 0.5);
    const auto once = filter_manifest(es, ps, 0.5);
    REQUIRE(once.size() == idx.size());
    std::vector<Prediction> kept_preds;
    for (std::size_t i = 0; i < idx.size(); ++i) {
      CHECK(once[i] == es[idx[i]]);
      kept_preds.push_back(ps[idx[i]]);
    }
    CHECK(filter_manifest(once, kept_preds, 0.5) == once);
  }
}

TEST_CASE("manifest parsing") {
  testutil::TempDir dir;
  testutil::spit(dir / "m.jsonl",
                 "{\"image\": \"x.png\", \"label\": 3, \"boxes\": [[1, 2, 3, 4]]}\n\n"
                 "{\"image\": \"/abs/y.ppm\", \"label\": 0, \"boxes\": []}\n");
  const auto j = read_manifest(dir / "m.jsonl");
  REQUIRE(j.size() == 2);
  CHECK(j[0].image_path == (dir.path() / "x.png").string());
  CHECK(j[0].label == 3);
  CHECK(j[0].boxes == std::vector<BoundingBox>{{1, 2, 3, 4}});
  CHECK(j[1].image_path == "/abs/y.ppm");

  testutil::spit(dir / "m.csv", "image,label,boxes\nx.png,3,1 2 3 4;0 0 1 1\n");
  const auto c = read_manifest(dir / "m.csv");
  REQUIRE(c.size() == 1);
  CHECK(c[0].boxes.size() == 2);

  testutil::spit(dir / "bad.jsonl", "{\"image\": \"x.png\"}\n");
  CHECK_THROWS_AS(read_manifest(dir / "bad.jsonl"), FormatError);
  CHECK_THROWS_AS(read_manifest(dir / "missing.jsonl"), IoError);

  const auto fixture = read_manifest(testutil::fixture("manifest.jsonl"));
  CHECK(fixture.size() == 10);
}
