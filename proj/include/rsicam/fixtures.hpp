#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <vector>

#include "rsicam/model.hpp"

namespace rsicam {

// Seed behind the checked-in mini-CNN weights and evaluation images.
inline constexpr std::uint32_t kMiniCnnSeed = 20230117u;

// f(x) = 1 - ReLU(1 - x), built as dense(-1, +1) -> relu -> dense(-1, +1) on a
// 1 x 1 x 1 input. Layers: "hidden", "relu", "output".
Model build_toy_relu_net();

// y = sum of a single 1 x 2 x 2 input map (flatten -> dense of ones).
Model build_linear_probe_net();

// Two conv blocks (8 and 16 channels) on a 3 x 32 x 32 input, a 32-unit hidden
// dense layer and 10 softmax classes. Weights are He-uniform draws from a
// mt19937 stream; values are derived from the raw 32-bit outputs so the
// sequence does not depend on the standard library's distributions.
Model generate_mini_cnn(std::uint32_t seed = kMiniCnnSeed);

// Small conv net whose two-class softmax saturates on bright inputs: the final
// dense layer pushes logit 0 up and logit 1 down by `logit_scale` times the
// mean pooled activation, and the black image sits exactly at p = 0.5.
// Layers: "conv", "relu", "pool", "flatten", "logits", "softmax".
Model build_saturated_net(float logit_scale = 100.0f);

// Deterministic uniform draws in [lo, hi) from the top 24 bits of mt19937.
class FixtureRng {
public:
  explicit FixtureRng(std::uint32_t seed) : engine_(seed) {}
  float uniform(float lo, float hi);
  std::uint32_t below(std::uint32_t n);

private:
  std::mt19937 engine_;
};

// Writes the evaluation fixture set into `dir`:
//   mini_cnn.json / mini_cnn.rsaw        the seeded mini-CNN
//   saturated.json / saturated.rsaw      the saturated two-class net
//   images/scene_XX.{ppm,png}            10 mini-CNN scenes with one box each
//   images/bright_XX.ppm                 saturated-net inputs
//   manifest.jsonl, saturated.jsonl      manifests labelled with the model's
//                                        own predictions
void write_fixture_set(const std::filesystem::path& dir, std::uint32_t seed = kMiniCnnSeed);

} // namespace rsicam
