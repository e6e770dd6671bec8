#include "rsicam/fixtures.hpp"

#include <cmath>
#include <fstream>
#include <string>

#include <nlohmann/json.hpp>

#include "rsicam/error.hpp"
#include "rsicam/image_io.hpp"

namespace rsicam {

namespace {

LayerParams dense_params(std::size_t out, std::size_t in, std::vector<float> kernel, std::vector<float> bias) {
  LayerParams p;
  p.kernel = Tensor({out, in}, std::move(kernel));
  p.bias = Tensor({out}, std::move(bias));
  return p;
}

LayerParams he_uniform(FixtureRng& rng, Shape kernel_shape, std::size_t fan_in, float bias_range) {
  const float limit = std::sqrt(6.0f / static_cast<float>(fan_in));
  std::vector<float> kernel(shape_size(kernel_shape));
  for (float& w : kernel) w = rng.uniform(-limit, limit);
  std::vector<float> bias(kernel_shape[0]);
  for (float& b : bias) b = rng.uniform(-bias_range, bias_range);
  LayerParams p;
  p.kernel = Tensor(kernel_shape, std::move(kernel));
  p.bias = Tensor({kernel_shape[0]}, std::move(bias));
  return p;
}

std::size_t argmax(std::span<const float> values) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[best]) best = i;
  }
  return best;
}

std::size_t predict(const Model& model, const Image8& image) {
  const auto input = image_to_tensor(image, model.preprocessing(), model.input_shape()[0]);
  const auto tape = forward_with_tape(model, input.reshape({1, input.dim(0), input.dim(1), input.dim(2)}));
  return argmax(tape.outputs.values());
}

void write_manifest_line(std::ofstream& os, const std::string& image, std::size_t label, std::size_t x,
                         std::size_t y, std::size_t w, std::size_t h) {
  nlohmann::json line{{"image", image}, {"label", label}, {"boxes", {{x, y, w, h}}}};
  os << line.dump() << "\n";
}

} // namespace

float FixtureRng::uniform(float lo, float hi) {
  const double unit = static_cast<double>(engine_() >> 8) / 16777216.0;
  return static_cast<float>(lo + (hi - lo) * unit);
}

std::uint32_t FixtureRng::below(std::uint32_t n) {
  return static_cast<std::uint32_t>((static_cast<std::uint64_t>(engine_()) * n) >> 32);
}

Model build_toy_relu_net() {
  std::vector<LayerSpec> layers{LayerSpec::dense("hidden", 1, 1), LayerSpec::relu("relu"),
                                LayerSpec::dense("output", 1, 1)};
  std::vector<LayerParams> params{dense_params(1, 1, {-1.0f}, {1.0f}), {}, dense_params(1, 1, {-1.0f}, {1.0f})};
  Preprocessing pre;
  pre.scale = 1.0f;
  return Model("toy-relu", {1, 1, 1}, 1, std::move(layers), std::move(params), pre);
}

Model build_linear_probe_net() {
  std::vector<LayerSpec> layers{LayerSpec::flatten("flatten"), LayerSpec::dense("sum", 4, 1)};
  std::vector<LayerParams> params{{}, dense_params(1, 4, {1.0f, 1.0f, 1.0f, 1.0f}, {0.0f})};
  Preprocessing pre;
  pre.scale = 1.0f;
  return Model("linear-probe", {1, 2, 2}, 1, std::move(layers), std::move(params), pre);
}

Model generate_mini_cnn(std::uint32_t seed) {
  FixtureRng rng(seed);
  std::vector<LayerSpec> layers{
      LayerSpec::conv2d("conv1", 3, 8, 3),   LayerSpec::relu("relu1"),      LayerSpec::maxpool2d("pool1", 2, 2),
      LayerSpec::conv2d("conv2", 8, 16, 3),  LayerSpec::relu("relu2"),      LayerSpec::maxpool2d("pool2", 2, 2),
      LayerSpec::flatten("flatten"),         LayerSpec::dense("fc1", 1024, 32), LayerSpec::relu("relu3"),
      LayerSpec::dense("fc2", 32, 10),       LayerSpec::softmax("softmax")};
  std::vector<LayerParams> params(layers.size());
  params[0] = he_uniform(rng, {8, 3, 3, 3}, 27, 0.05f);
  params[3] = he_uniform(rng, {16, 8, 3, 3}, 72, 0.05f);
  params[7] = he_uniform(rng, {32, 1024}, 1024, 0.05f);
  params[9] = he_uniform(rng, {10, 32}, 32, 0.05f);
  return Model("mini-cnn", {3, 32, 32}, 10, std::move(layers), std::move(params));
}

Model build_saturated_net(float logit_scale) {
  std::vector<LayerSpec> layers{LayerSpec::conv2d("conv", 3, 2, 3),  LayerSpec::relu("relu"),
                                LayerSpec::maxpool2d("pool", 2, 2),   LayerSpec::flatten("flatten"),
                                LayerSpec::dense("logits", 128, 2),   LayerSpec::softmax("softmax")};
  std::vector<float> kernel(2 * 3 * 3 * 3, 0.0f);
  for (std::size_t i = 0; i < 27; ++i) kernel[i] = 1.0f / 27.0f;
  for (std::size_t c = 0; c < 3; ++c) kernel[27 + c * 9 + 4] = 1.0f / 3.0f;
  LayerParams conv;
  conv.kernel = Tensor({2, 3, 3, 3}, std::move(kernel));
  conv.bias = Tensor::zeros({2});
  std::vector<float> dense(2 * 128);
  for (std::size_t j = 0; j < 128; ++j) {
    dense[j] = logit_scale / 128.0f;
    dense[128 + j] = -logit_scale / 128.0f;
  }
  std::vector<LayerParams> params{conv, {}, {}, {}, dense_params(2, 128, std::move(dense), {0.0f, 0.0f}), {}};
  return Model("saturated", {3, 16, 16}, 2, std::move(layers), std::move(params));
}

void write_fixture_set(const std::filesystem::path& dir, std::uint32_t seed) {
  std::filesystem::create_directories(dir / "images");

  const Model mini = generate_mini_cnn(seed);
  save_model(mini, dir / "mini_cnn.json", dir / "mini_cnn.rsaw");
  const Model saturated = build_saturated_net();
  save_model(saturated, dir / "saturated.json", dir / "saturated.rsaw");

  // Scene stream is independent of the weight stream.
  FixtureRng rng(seed ^ 0x5eed5eedu);
  {
    std::ofstream manifest(dir / "manifest.jsonl");
    if (!manifest) throw IoError("cannot write manifest in " + dir.string());
    for (int i = 0; i < 10; ++i) {
      Image8 img{32, 32, 3, std::vector<std::uint8_t>(32 * 32 * 3)};
      for (auto& p : img.pixels) p = static_cast<std::uint8_t>(rng.below(64));
      const std::size_t w = 8 + rng.below(13);
      const std::size_t h = 8 + rng.below(13);
      const std::size_t x = rng.below(static_cast<std::uint32_t>(33 - w));
      const std::size_t y = rng.below(static_cast<std::uint32_t>(33 - h));
      std::uint8_t color[3];
      for (auto& c : color) c = static_cast<std::uint8_t>(96 + rng.below(160));
      for (std::size_t yy = y; yy < y + h; ++yy) {
        for (std::size_t xx = x; xx < x + w; ++xx) {
          for (std::size_t c = 0; c < 3; ++c) img.pixels[(yy * 32 + xx) * 3 + c] = color[c];
        }
      }
      char name[32];
      std::snprintf(name, sizeof name, "images/scene_%02d.%s", i, i % 2 == 0 ? "ppm" : "png");
      write_image(dir / name, img);
      write_manifest_line(manifest, name, predict(mini, img), x, y, w, h);
    }
  }
  {
    std::ofstream manifest(dir / "saturated.jsonl");
    if (!manifest) throw IoError("cannot write manifest in " + dir.string());
    for (int i = 0; i < 4; ++i) {
      Image8 img{16, 16, 3, std::vector<std::uint8_t>(16 * 16 * 3, 0)};
      const std::size_t x = rng.below(9);
      const std::size_t y = rng.below(9);
      for (std::size_t yy = y; yy < y + 8; ++yy) {
        for (std::size_t xx = x; xx < x + 8; ++xx) {
          for (std::size_t c = 0; c < 3; ++c) img.pixels[(yy * 16 + xx) * 3 + c] = 255;
        }
      }
      char name[32];
      std::snprintf(name, sizeof name, "images/bright_%02d.ppm", i);
      write_image(dir / name, img);
      write_manifest_line(manifest, name, predict(saturated, img), x, y, 8, 8);
    }
  }
}

} // namespace rsicam
