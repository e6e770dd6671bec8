#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "rsicam/model.hpp"
#include "rsicam/tensor.hpp"

namespace rsicam {

enum class Method { gradcam, layer_ig, igradcam, rsi_gradcam };

const char* method_name(Method method);
// Accepts the CLI spellings (gradcam, ig, igradcam, rsi) and the long names.
Method parse_method(std::string_view text);

struct AttributionConfig {
  Method method = Method::rsi_gradcam;
  std::string layer;
  // Empty means "argmax of the model output".
  std::optional<std::size_t> class_index;
  std::size_t steps = 50;
  // Empty means the black image (zero bytes run through the preprocessing).
  std::optional<Tensor> baseline;
  double epsilon = 1e-8;
  bool positive_gradients = false;
  // RSI-Grad-CAM only: keep units whose final activation, integrated
  // gradient and total activation increment are all positive.
  bool unit_selection = false;
  std::size_t batch_size = 32;
  BackwardOptions backward;

  void validate() const;
};

// Per-feature-map weights w_k and the feature map size Z they were averaged over.
struct WeightVector {
  std::vector<double> weights;
  std::size_t units_per_map = 0;
};

// gamma(alpha_l) = baseline + (l / m) (input - baseline), l = 0..m. The first
// point is the baseline and the last is the input, bit for bit.
struct InterpolationPath {
  std::vector<double> alphas;
  std::vector<Tensor> points;
};

InterpolationPath interpolate_path(const Tensor& baseline, const Tensor& input, std::size_t steps);

Tensor black_baseline(const Model& model);

// Argmax of the model output on `input`. Softmax does not change the
// argmax, so a stripped model resolves to the same class as the original.
std::size_t predict_class(const Model& model, const Tensor& input);
std::size_t resolve_class(const Model& model, const Tensor& input, const AttributionConfig& cfg);

// Activations and gradients at the target layer for every point of a path,
// evaluated in chunks of `batch_size`.
struct PathSamples {
  std::vector<Tensor> activations;
  std::vector<Tensor> gradients;
};

PathSamples sample_path(const Model& model, const std::vector<Tensor>& points, const std::string& layer,
                        std::size_t class_index, std::size_t batch_size, const BackwardOptions& backward = {});

// --- Grad-CAM --------------------------------------------------------------
WeightVector grad_cam_weights(const Model& model, const Tensor& input, const AttributionConfig& cfg);
Heatmap grad_cam(const Model& model, const Tensor& input, const AttributionConfig& cfg);

// --- Layer Integrated Gradients --------------------------------------------
// Interpolates the layer's activations between the baseline-induced and the
// input-induced values and integrates the gradient of the layers above.
// Returns the C x H x W attribution before the channel sum.
Tensor layer_ig_attributions(const Model& model, const Tensor& input, const AttributionConfig& cfg);
Heatmap layer_integrated_gradients(const Model& model, const Tensor& input, const AttributionConfig& cfg);

// --- Integrated Grad-CAM ---------------------------------------------------
Heatmap integrated_grad_cam(const Model& model, const Tensor& input, const AttributionConfig& cfg);

// --- RSI-Grad-CAM ----------------------------------------------------------
// Per-unit Riemann-Stieltjes integrated gradients
//   sum_{l=1..m} dy/dA(alpha_l) * (A(alpha_l) - A(alpha_{l-1}))
// as a C x H x W tensor.
Tensor rsi_integrated_gradients(const Model& model, const Tensor& input, const AttributionConfig& cfg);
WeightVector rsi_weights(const Model& model, const Tensor& input, const AttributionConfig& cfg);
Heatmap rsi_grad_cam(const Model& model, const Tensor& input, const AttributionConfig& cfg);

// Dispatches on cfg.method.
Heatmap attribute(const Model& model, const Tensor& input, const AttributionConfig& cfg);

// Normalize with cfg.epsilon, then bilinear-upsample to out_h x out_w.
Heatmap finalize_heatmap(const Heatmap& raw, const AttributionConfig& cfg, std::size_t out_h, std::size_t out_w);

using Rgb = std::array<float, 3>;

// 256-entry blue -> cyan -> yellow -> red lookup table; colormap(0) is pure
// blue and colormap(1) pure red.
Rgb colormap(float heat);

// (1 - alpha) * image + alpha * colormap(heat), per pixel. `image` is
// 3 x H x W (a 1-channel image is treated as gray).
Tensor render_overlay(const Heatmap& h, const Tensor& image, float alpha);

} // namespace rsicam
