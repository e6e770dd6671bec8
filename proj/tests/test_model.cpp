#include <doctest.h>

#include <nlohmann/json.hpp>

#include <cmath>
#include <numeric>

#include "oracles.hpp"
#include "rsicam/error.hpp"
#include "rsicam/fixtures.hpp"
#include "rsicam/model.hpp"
#include "test_util.hpp"

using namespace rsicam;
using testutil::TempDir;

namespace {

float toy_forward(const Model& m, float x) {
  return forward_with_tape(m, Tensor({1, 1, 1, 1}, {x})).outputs[0];
}

float toy_input_gradient(const Model& m, float x, BackwardOptions opts = {}) {
  const auto tape = forward_with_tape(m, Tensor({1, 1, 1, 1}, {x}));
  return gradients_at_layer(m, tape, Model::kInputLayer, 0, opts)[0];
}

} // namespace

TEST_CASE("toy one-ReLU network") {
  const auto m = build_toy_relu_net();
  CHECK(toy_forward(m, 0.0f) == 0.0f);
  CHECK(toy_forward(m, 0.5f) == 0.5f);
  CHECK(toy_forward(m, 2.0f) == 1.0f);
  CHECK(toy_input_gradient(m, 0.5f) == 1.0f);
  CHECK(toy_input_gradient(m, 2.0f) == 0.0f);
  // At the kink the pre-activation is exactly 0 and the subgradient is 0.
  CHECK(toy_input_gradient(m, 1.0f) == 0.0f);
  CHECK(toy_input_gradient(m, 1.0f, BackwardOptions{1.0f}) == 1.0f);
}

TEST_CASE("conv2d same and valid padding") {
  const std::vector<float> ones(9, 1.0f);
  LayerParams p{Tensor({1, 1, 3, 3}, ones), Tensor({1}, {0.0f})};
  const auto input = Tensor({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});

  const Model same("same", {1, 3, 3}, 9, {LayerSpec::conv2d("c", 1, 1, 3), LayerSpec::flatten("f")}, {p, {}});
  CHECK(forward_with_tape(same, input).outputs == Tensor({1, 9}, {12, 21, 16, 27, 45, 33, 24, 39, 28}));

  const Model valid("valid", {1, 3, 3}, 1,
                    {LayerSpec::conv2d("c", 1, 1, 3, Padding::valid), LayerSpec::flatten("f")}, {p, {}});
  CHECK(forward_with_tape(valid, input).outputs == Tensor({1, 1}, {45}));
}

TEST_CASE("max-pool routes a tied gradient to the first maximum") {
  const Model m("pool", {1, 2, 2}, 1,
                {LayerSpec::maxpool2d("pool", 2, 2), LayerSpec::flatten("f")}, {{}, {}});
  const auto tape = forward_with_tape(m, Tensor({1, 1, 2, 2}, {3, 3, 1, 3}));
  CHECK(tape.outputs[0] == 3.0f);
  CHECK(gradients_at_layer(m, tape, Model::kInputLayer, 0) == Tensor({1, 1, 2, 2}, {1, 0, 0, 0}));
}

TEST_CASE("model validation") {
  SUBCASE("layer lookup names the valid layers") {
    const auto m = build_toy_relu_net();
    try {
      (void)m.slot_of("conv9");
      FAIL("expected LookupError");
    } catch (const LookupError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("conv9") != std::string::npos);
      CHECK(msg.find("hidden") != std::string::npos);
    }
  }

  SUBCASE("shape chain mismatch names the layer") {
    TempDir dir;
    const auto probe = build_linear_probe_net();
    save_model(probe, dir / "m.json", dir / "m.rsaw");
    auto doc = nlohmann::json::parse(testutil::slurp(dir / "m.json"));
    doc["input_shape"] = {1, 8, 8};
    doc["layers"][1]["in_features"] = 100;
    testutil::spit(dir / "bad.json", doc.dump());
    try {
      (void)load_model(dir / "bad.json", dir / "m.rsaw");
      FAIL("expected ValidationError");
    } catch (const ValidationError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("sum") != std::string::npos);
      CHECK(msg.find("100") != std::string::npos);
      CHECK(msg.find("64") != std::string::npos);
    }
  }

  SUBCASE("softmax must be last and the output must match the class count") {
    CHECK_THROWS_AS(Model("m", {1, 1, 1}, 1, {LayerSpec::softmax("s"), LayerSpec::flatten("f")}, {{}, {}}),
                    ValidationError);
    CHECK_THROWS_AS(Model("m", {1, 2, 2}, 3, {LayerSpec::flatten("f")}, {{}}), ValidationError);
  }

  SUBCASE("duplicate names") {
    CHECK_THROWS_AS(Model("m", {1, 2, 2}, 4, {LayerSpec::relu("a"), LayerSpec::flatten("a")}, {{}, {}}),
                    ValidationError);
  }
}

TEST_CASE("model files") {
  TempDir dir;
  const auto m = generate_mini_cnn();
  save_model(m, dir / "m.json", dir / "m.rsaw");

  SUBCASE("round trip") {
    const auto loaded = load_model(dir / "m.json", dir / "m.rsaw");
    CHECK(loaded.layer_names() == m.layer_names());
    REQUIRE(loaded.params().size() == m.params().size());
    for (std::size_t i = 0; i < m.params().size(); ++i) {
      CHECK(loaded.params()[i].kernel == m.params()[i].kernel);
      CHECK(loaded.params()[i].bias == m.params()[i].bias);
    }
  }

  SUBCASE("truncated and padded weights") {
    const auto bytes = testutil::slurp(dir / "m.rsaw");
    testutil::spit(dir / "short.rsaw", bytes.substr(0, bytes.size() - 4));
    CHECK_THROWS_AS(load_model(dir / "m.json", dir / "short.rsaw"), FormatError);
    testutil::spit(dir / "long.rsaw", bytes + "xxxx");
    CHECK_THROWS_AS(load_model(dir / "m.json", dir / "long.rsaw"), FormatError);
    testutil::spit(dir / "magic.rsaw", "NOPE" + bytes.substr(4));
    CHECK_THROWS_AS(load_model(dir / "m.json", dir / "magic.rsaw"), FormatError);
  }

  SUBCASE("missing files and malformed descriptors") {
    CHECK_THROWS_AS(load_model(dir / "nope.json", dir / "m.rsaw"), IoError);
    CHECK_THROWS_AS(load_model(dir / "m.json", dir / "nope.rsaw"), IoError);
    testutil::spit(dir / "junk.json", "{not json");
    CHECK_THROWS_AS(load_model(dir / "junk.json", dir / "m.rsaw"), FormatError);
  }
}

TEST_CASE("checked-in fixtures match their generators") {
  const auto loaded = load_model(testutil::fixture("mini_cnn.json"), testutil::fixture("mini_cnn.rsaw"));
  const auto generated = generate_mini_cnn(kMiniCnnSeed);
  REQUIRE(loaded.params().size() == generated.params().size());
  for (std::size_t i = 0; i < generated.params().size(); ++i) {
    CHECK(loaded.params()[i].kernel == generated.params()[i].kernel);
    CHECK(loaded.params()[i].bias == generated.params()[i].bias);
  }

  TempDir dir;
  write_fixture_set(dir.path());
  for (const auto& entry : std::filesystem::recursive_directory_iterator(testutil::fixture(""))) {
    if (!entry.is_regular_file()) continue;
    const auto rel = std::filesystem::relative(entry.path(), testutil::fixture(""));
    CAPTURE(rel.string());
    CHECK(testutil::slurp(entry.path()) == testutil::slurp(dir.path() / rel));
  }
}

TEST_CASE("forward_from_layer agrees with the full forward pass") {
  const auto m = generate_mini_cnn();
  const auto x = oracle::batch1(oracle::random_input(m, 5, -1.0f, 1.0f));
  const auto full = forward_with_tape(m, x);
  const auto upper = forward_from_layer(m, "pool1", full.activation("pool1"));
  CHECK(upper.outputs == full.outputs);
  CHECK(upper.activation("conv2") == full.activation("conv2"));
  CHECK_FALSE(upper.contains("conv1"));
}

TEST_CASE("strip_softmax keeps the argmax") {
  const auto m = generate_mini_cnn();
  const auto stripped = m.strip_softmax();
  CHECK(m.has_softmax());
  CHECK_FALSE(stripped.has_softmax());
  CHECK(stripped.softmax_stripped());
  for (std::uint32_t s = 0; s < 5; ++s) {
    const auto x = oracle::batch1(oracle::random_input(m, 100 + s, -1.0f, 1.0f));
    const auto full = forward_with_tape(m, x);
    const auto logits = forward_with_tape(stripped, x);
    const auto p = full.outputs.values();
    const auto z = logits.outputs.values();
    CHECK(std::max_element(p.begin(), p.end()) - p.begin() == std::max_element(z.begin(), z.end()) - z.begin());
    CHECK(std::accumulate(p.begin(), p.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-5));
  }
}

TEST_CASE("reverse-mode gradients agree with finite differences on random nets") {
  for (std::uint32_t seed = 1; seed <= 8; ++seed) {
    const auto m = oracle::random_small_net(seed);
    const auto x = oracle::batch1(oracle::random_input(m, seed * 31));
    const auto tape = forward_with_tape(m, x);
    for (const auto& layer : m.layer_names()) {
      if (layer == "softmax") continue;
      const auto grads = gradients_at_layer(m, tape, layer, 0);
      std::vector<std::size_t> units(grads.size());
      std::iota(units.begin(), units.end(), 0);
      const auto fd = finite_diff_units(m, x, layer, 0, 1e-4, 0, units);
      for (const auto& s : fd) {
        if (s.crosses_kink) continue;
        CAPTURE(seed);
        CAPTURE(layer);
        CHECK(std::abs(grads[s.unit] - s.gradient) <= std::max(1e-3 * std::abs(s.gradient), 1e-5));
      }
    }
  }
}

TEST_CASE("batched gradients equal per-item gradients") {
  const auto m = generate_mini_cnn();
  std::vector<Tensor> items;
  for (std::uint32_t s = 0; s < 3; ++s) items.push_back(oracle::random_input(m, 900 + s));
  const auto tape = forward_with_tape(m, stack(items));
  const auto batched = gradients_at_layer(m, tape, "pool2", 4);
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto single = gradients_at_layer(m, forward_with_tape(m, oracle::batch1(items[i])), "pool2", 4);
    const auto b = batch_item(batched, i);
    for (std::size_t u = 0; u < b.size(); ++u) CHECK(std::abs(b[u] - single[u]) <= 1e-6);
  }
}
