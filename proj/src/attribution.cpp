#include "rsicam/attribution.hpp"

#include <algorithm>
#include <cmath>

#include "rsicam/error.hpp"

namespace rsicam {

const char* method_name(Method method) {
  switch (method) {
    case Method::gradcam: return "gradcam";
    case Method::layer_ig: return "ig";
    case Method::igradcam: return "igradcam";
    case Method::rsi_gradcam: return "rsi";
  }
  return "unknown";
}

Method parse_method(std::string_view text) {
  if (text == "gradcam" || text == "grad_cam") return Method::gradcam;
  if (text == "ig" || text == "layer_ig") return Method::layer_ig;
  if (text == "igradcam" || text == "integrated_gradcam") return Method::igradcam;
  if (text == "rsi" || text == "rsi_gradcam") return Method::rsi_gradcam;
  throw ParameterError("unknown method '" + std::string(text) + "' (expected gradcam, ig, igradcam or rsi)");
}

void AttributionConfig::validate() const {
  if (steps < 1) throw ParameterError("steps must be >= 1");
  if (batch_size < 1) throw ParameterError("batch size must be >= 1");
  if (!(epsilon >= 0.0) || !std::isfinite(epsilon)) throw ParameterError("epsilon must be finite and >= 0");
  if (unit_selection && method != Method::rsi_gradcam) {
    throw ParameterError("unit selection only applies to rsi");
  }
}

InterpolationPath interpolate_path(const Tensor& baseline, const Tensor& input, std::size_t steps) {
  if (steps < 1) throw ParameterError("interpolate_path: steps must be >= 1");
  if (baseline.shape() != input.shape()) {
    throw DimensionError("interpolate_path: baseline " + shape_to_string(baseline.shape()) + " vs input " +
                         shape_to_string(input.shape()));
  }
  InterpolationPath path;
  path.alphas.reserve(steps + 1);
  path.points.reserve(steps + 1);
  const auto x0 = baseline.values();
  const auto x1 = input.values();
  for (std::size_t l = 0; l <= steps; ++l) {
    const double alpha = static_cast<double>(l) / static_cast<double>(steps);
    path.alphas.push_back(alpha);
    if (l == 0) {
      path.points.push_back(baseline);
    } else if (l == steps) {
      path.points.push_back(input);
    } else {
      std::vector<float> point(x0.size());
      for (std::size_t i = 0; i < point.size(); ++i) {
        point[i] = static_cast<float>(x0[i] + alpha * (static_cast<double>(x1[i]) - x0[i]));
      }
      path.points.emplace_back(input.shape(), std::move(point));
    }
  }
  return path;
}

Tensor black_baseline(const Model& model) {
  const auto& shape = model.input_shape();
  const auto& mean = model.preprocessing().mean;
  std::vector<float> data(shape_size(shape), 0.0f);
  if (!mean.empty()) {
    const std::size_t plane = shape[1] * shape[2];
    for (std::size_t i = 0; i < data.size(); ++i) data[i] = -mean[i / plane];
  }
  return Tensor(shape, std::move(data));
}

namespace {

Tensor as_batch(const Tensor& sample) {
  Shape shape{1};
  shape.insert(shape.end(), sample.shape().begin(), sample.shape().end());
  return sample.reshape(std::move(shape));
}

void check_input(const Model& model, const Tensor& input) {
  if (input.shape() != model.input_shape()) {
    throw DimensionError("input shape " + shape_to_string(input.shape()) + " does not match model input " +
                         shape_to_string(model.input_shape()));
  }
}

void require_method(const AttributionConfig& cfg, Method expected) {
  cfg.validate();
  if (cfg.method != expected) {
    throw ParameterError(std::string("configuration selects ") + method_name(cfg.method) + ", expected " +
                         method_name(expected));
  }
}

// Target layer must hold feature maps so the result is a 2-D map.
void require_feature_maps(const Model& model, const std::string& layer) {
  const auto& shape = model.activation_shape(layer);
  if (shape.size() != 3) {
    throw DimensionError("layer '" + layer + "' has activation shape " + shape_to_string(shape) +
                         "; heatmap methods need C x H x W feature maps");
  }
}

Tensor baseline_for(const Model& model, const Tensor& input, const AttributionConfig& cfg) {
  if (!cfg.baseline) return black_baseline(model);
  if (cfg.baseline->shape() != input.shape()) {
    throw DimensionError("baseline shape " + shape_to_string(cfg.baseline->shape()) + " does not match input " +
                         shape_to_string(input.shape()));
  }
  return *cfg.baseline;
}

Heatmap make_heatmap(const Shape& layer_shape, const std::vector<double>& values, Method method,
                     const AttributionConfig& cfg, std::size_t class_index) {
  std::vector<float> grid(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) grid[i] = static_cast<float>(std::max(values[i], 0.0));
  Heatmap h{Tensor({layer_shape[1], layer_shape[2]}, std::move(grid)), HeatmapStage::raw, method_name(method),
            cfg.layer, static_cast<int>(class_index)};
  return h;
}

// sum_k w_k A^k, accumulated in double, before the final ReLU.
std::vector<double> combine_maps(const WeightVector& w, const Tensor& activation) {
  const std::size_t channels = activation.dim(0);
  const std::size_t plane = w.units_per_map;
  std::vector<double> out(plane, 0.0);
  const auto a = activation.values();
  for (std::size_t k = 0; k < channels; ++k) {
    for (std::size_t i = 0; i < plane; ++i) out[i] += w.weights[k] * a[k * plane + i];
  }
  return out;
}

struct RsiState {
  std::size_t class_index = 0;
  Tensor final_activation = Tensor::zeros({1});
  std::vector<double> integrated;  // per unit
  std::vector<double> increment;   // A(1) - A(0) per unit
};

RsiState rsi_state(const Model& model, const Tensor& input, const AttributionConfig& cfg) {
  check_input(model, input);
  require_feature_maps(model, cfg.layer);
  RsiState state;
  state.class_index = resolve_class(model, input, cfg);
  const auto path = interpolate_path(baseline_for(model, input, cfg), input, cfg.steps);
  const auto samples = sample_path(model, path.points, cfg.layer, state.class_index, cfg.batch_size, cfg.backward);
  const std::size_t units = samples.activations.front().size();
  state.integrated.assign(units, 0.0);
  // Ascending l keeps the accumulation order fixed.
  for (std::size_t l = 1; l <= cfg.steps; ++l) {
    const auto g = samples.gradients[l].values();
    const auto a = samples.activations[l].values();
    const auto a_prev = samples.activations[l - 1].values();
    for (std::size_t u = 0; u < units; ++u) {
      state.integrated[u] += static_cast<double>(g[u]) * (static_cast<double>(a[u]) - static_cast<double>(a_prev[u]));
    }
  }
  const auto first = samples.activations.front().values();
  const auto last = samples.activations.back().values();
  state.increment.resize(units);
  for (std::size_t u = 0; u < units; ++u) {
    state.increment[u] = static_cast<double>(last[u]) - static_cast<double>(first[u]);
  }
  state.final_activation = samples.activations.back();
  return state;
}

WeightVector rsi_weights_from(const RsiState& state, const AttributionConfig& cfg) {
  const auto& shape = state.final_activation.shape();
  WeightVector w;
  w.units_per_map = shape[1] * shape[2];
  w.weights.assign(shape[0], 0.0);
  const auto a = state.final_activation.values();
  for (std::size_t k = 0; k < shape[0]; ++k) {
    double acc = 0.0;
    for (std::size_t i = 0; i < w.units_per_map; ++i) {
      const std::size_t u = k * w.units_per_map + i;
      const double ig = state.integrated[u];
      if (cfg.unit_selection && !(a[u] > 0.0f && ig > 0.0 && state.increment[u] > 0.0)) continue;
      acc += cfg.positive_gradients ? std::max(ig, 0.0) : ig;
    }
    w.weights[k] = acc / static_cast<double>(w.units_per_map);
  }
  return w;
}

} // namespace

std::size_t predict_class(const Model& model, const Tensor& input) {
  check_input(model, input);
  const auto tape = forward_with_tape(model, as_batch(input));
  const auto out = tape.outputs.values();
  return static_cast<std::size_t>(std::max_element(out.begin(), out.end()) - out.begin());
}

std::size_t resolve_class(const Model& model, const Tensor& input, const AttributionConfig& cfg) {
  if (cfg.class_index) {
    if (*cfg.class_index >= model.class_count()) {
      throw LookupError("class index " + std::to_string(*cfg.class_index) + " out of range for " +
                        std::to_string(model.class_count()) + " classes");
    }
    return *cfg.class_index;
  }
  return predict_class(model, input);
}

PathSamples sample_path(const Model& model, const std::vector<Tensor>& points, const std::string& layer,
                        std::size_t class_index, std::size_t batch_size, const BackwardOptions& backward) {
  if (batch_size < 1) throw ParameterError("batch size must be >= 1");
  PathSamples samples;
  samples.activations.reserve(points.size());
  samples.gradients.reserve(points.size());
  for (std::size_t start = 0; start < points.size(); start += batch_size) {
    const std::size_t end = std::min(points.size(), start + batch_size);
    const auto batch = stack(std::span<const Tensor>(points).subspan(start, end - start));
    const auto tape = forward_with_tape(model, batch);
    const auto grads = gradients_at_layer(model, tape, layer, class_index, backward);
    const auto& acts = tape.activation(layer);
    for (std::size_t i = 0; i < end - start; ++i) {
      samples.activations.push_back(batch_item(acts, i));
      samples.gradients.push_back(batch_item(grads, i));
    }
  }
  return samples;
}

WeightVector grad_cam_weights(const Model& model, const Tensor& input, const AttributionConfig& cfg) {
  require_method(cfg, Method::gradcam);
  check_input(model, input);
  require_feature_maps(model, cfg.layer);
  const std::size_t c = resolve_class(model, input, cfg);
  const auto tape = forward_with_tape(model, as_batch(input));
  const auto grads = gradients_at_layer(model, tape, cfg.layer, c, cfg.backward);
  const auto& shape = model.activation_shape(cfg.layer);
  WeightVector w;
  w.units_per_map = shape[1] * shape[2];
  w.weights.assign(shape[0], 0.0);
  const auto g = grads.values();
  for (std::size_t k = 0; k < shape[0]; ++k) {
    double acc = 0.0;
    for (std::size_t i = 0; i < w.units_per_map; ++i) {
      const double v = g[k * w.units_per_map + i];
      acc += cfg.positive_gradients ? std::max(v, 0.0) : v;
    }
    w.weights[k] = acc / static_cast<double>(w.units_per_map);
  }
  return w;
}

Heatmap grad_cam(const Model& model, const Tensor& input, const AttributionConfig& cfg) {
  const auto w = grad_cam_weights(model, input, cfg);
  const std::size_t c = resolve_class(model, input, cfg);
  const auto tape = forward_with_tape(model, as_batch(input));
  const auto activation = batch_item(tape.activation(cfg.layer), 0);
  return make_heatmap(activation.shape(), combine_maps(w, activation), Method::gradcam, cfg, c);
}

Tensor layer_ig_attributions(const Model& model, const Tensor& input, const AttributionConfig& cfg) {
  require_method(cfg, Method::layer_ig);
  check_input(model, input);
  require_feature_maps(model, cfg.layer);
  const std::size_t c = resolve_class(model, input, cfg);
  const auto endpoints = stack(std::vector<Tensor>{baseline_for(model, input, cfg), input});
  const auto tape = forward_with_tape(model, endpoints);
  const auto a0 = batch_item(tape.activation(cfg.layer), 0);
  const auto a1 = batch_item(tape.activation(cfg.layer), 1);

  // Interpolation happens at the layer; l = 0 carries no gradient term.
  const auto path = interpolate_path(a0, a1, cfg.steps);
  std::vector<double> grad_sum(a0.size(), 0.0);
  for (std::size_t start = 1; start <= cfg.steps; start += cfg.batch_size) {
    const std::size_t end = std::min(cfg.steps + 1, start + cfg.batch_size);
    const auto batch = stack(std::span<const Tensor>(path.points).subspan(start, end - start));
    const auto upper = forward_from_layer(model, cfg.layer, batch);
    const auto grads = gradients_at_layer(model, upper, cfg.layer, c, cfg.backward);
    const auto g = grads.values();
    for (std::size_t i = 0; i < end - start; ++i) {
      for (std::size_t u = 0; u < grad_sum.size(); ++u) grad_sum[u] += g[i * grad_sum.size() + u];
    }
  }
  std::vector<float> out(a0.size());
  const auto v0 = a0.values();
  const auto v1 = a1.values();
  for (std::size_t u = 0; u < out.size(); ++u) {
    const double delta = static_cast<double>(v1[u]) - static_cast<double>(v0[u]);
    out[u] = static_cast<float>(delta * grad_sum[u] / static_cast<double>(cfg.steps));
  }
  return Tensor(a0.shape(), std::move(out));
}

Heatmap layer_integrated_gradients(const Model& model, const Tensor& input, const AttributionConfig& cfg) {
  const auto attributions = layer_ig_attributions(model, input, cfg);
  const std::size_t c = resolve_class(model, input, cfg);
  const auto summed = channel_sum(attributions);
  std::vector<double> values(summed.values().begin(), summed.values().end());
  return make_heatmap(attributions.shape(), values, Method::layer_ig, cfg, c);
}

Heatmap integrated_grad_cam(const Model& model, const Tensor& input, const AttributionConfig& cfg) {
  require_method(cfg, Method::igradcam);
  check_input(model, input);
  require_feature_maps(model, cfg.layer);
  const std::size_t c = resolve_class(model, input, cfg);
  const auto path = interpolate_path(baseline_for(model, input, cfg), input, cfg.steps);
  const auto samples = sample_path(model, path.points, cfg.layer, c, cfg.batch_size, cfg.backward);
  const auto& shape = samples.activations.front().shape();
  const std::size_t channels = shape[0];
  const std::size_t plane = shape[1] * shape[2];
  const auto base = samples.activations.front().values();

  std::vector<double> total(plane, 0.0);
  std::vector<double> step_map(plane);
  for (std::size_t l = 1; l <= cfg.steps; ++l) {
    const auto g = samples.gradients[l].values();
    const auto a = samples.activations[l].values();
    std::fill(step_map.begin(), step_map.end(), 0.0);
    for (std::size_t k = 0; k < channels; ++k) {
      double grad_total = 0.0;
      for (std::size_t i = 0; i < plane; ++i) grad_total += g[k * plane + i];
      for (std::size_t i = 0; i < plane; ++i) {
        step_map[i] += grad_total * (static_cast<double>(a[k * plane + i]) - static_cast<double>(base[k * plane + i]));
      }
    }
    for (std::size_t i = 0; i < plane; ++i) total[i] += std::max(step_map[i], 0.0);
  }
  for (double& v : total) v /= static_cast<double>(cfg.steps);
  return make_heatmap(shape, total, Method::igradcam, cfg, c);
}

Tensor rsi_integrated_gradients(const Model& model, const Tensor& input, const AttributionConfig& cfg) {
  require_method(cfg, Method::rsi_gradcam);
  const auto state = rsi_state(model, input, cfg);
  return Tensor(state.final_activation.shape(), std::vector<float>(state.integrated.begin(), state.integrated.end()));
}

WeightVector rsi_weights(const Model& model, const Tensor& input, const AttributionConfig& cfg) {
  require_method(cfg, Method::rsi_gradcam);
  return rsi_weights_from(rsi_state(model, input, cfg), cfg);
}

Heatmap rsi_grad_cam(const Model& model, const Tensor& input, const AttributionConfig& cfg) {
  require_method(cfg, Method::rsi_gradcam);
  const auto state = rsi_state(model, input, cfg);
  const auto w = rsi_weights_from(state, cfg);
  return make_heatmap(state.final_activation.shape(), combine_maps(w, state.final_activation), Method::rsi_gradcam,
                      cfg, state.class_index);
}

Heatmap attribute(const Model& model, const Tensor& input, const AttributionConfig& cfg) {
  switch (cfg.method) {
    case Method::gradcam: return grad_cam(model, input, cfg);
    case Method::layer_ig: return layer_integrated_gradients(model, input, cfg);
    case Method::igradcam: return integrated_grad_cam(model, input, cfg);
    case Method::rsi_gradcam: return rsi_grad_cam(model, input, cfg);
  }
  throw ParameterError("unknown method");
}

Heatmap finalize_heatmap(const Heatmap& raw, const AttributionConfig& cfg, std::size_t out_h, std::size_t out_w) {
  return bilinear_upsample(minmax_normalize(raw, cfg.epsilon), out_h, out_w);
}

namespace {

Rgb colormap_formula(double t) {
  // Knots: 0 blue, 1/3 cyan, 2/3 yellow, 1 red.
  if (t <= 1.0 / 3.0) {
    const double s = t * 3.0;
    return {0.0f, static_cast<float>(s), 1.0f};
  }
  if (t <= 2.0 / 3.0) {
    const double s = (t - 1.0 / 3.0) * 3.0;
    return {static_cast<float>(s), 1.0f, static_cast<float>(1.0 - s)};
  }
  const double s = (t - 2.0 / 3.0) * 3.0;
  return {1.0f, static_cast<float>(1.0 - s), 0.0f};
}

const std::array<Rgb, 256>& colormap_table() {
  static const std::array<Rgb, 256> table = [] {
    std::array<Rgb, 256> t{};
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = colormap_formula(static_cast<double>(i) / 255.0);
    return t;
  }();
  return table;
}

} // namespace

Rgb colormap(float heat) {
  const float clamped = std::clamp(heat, 0.0f, 1.0f);
  return colormap_table()[static_cast<std::size_t>(std::lround(clamped * 255.0f))];
}

Tensor render_overlay(const Heatmap& h, const Tensor& image, float alpha) {
  if (!(alpha >= 0.0f && alpha <= 1.0f)) throw ParameterError("overlay alpha must be in [0, 1]");
  if (image.rank() != 3 || (image.dim(0) != 3 && image.dim(0) != 1)) {
    throw DimensionError("overlay image must be 3 x H x W or 1 x H x W, got " + shape_to_string(image.shape()));
  }
  if (h.grid.rank() != 2 || h.height() != image.dim(1) || h.width() != image.dim(2)) {
    throw DimensionError("overlay: heatmap " + shape_to_string(h.grid.shape()) + " does not match image " +
                         shape_to_string(image.shape()));
  }
  const std::size_t height = image.dim(1), width = image.dim(2);
  const std::size_t plane = height * width;
  const bool gray = image.dim(0) == 1;
  std::vector<float> out(3 * plane);
  const auto heat = h.grid.values();
  const auto px = image.values();
  for (std::size_t i = 0; i < plane; ++i) {
    const Rgb color = colormap(heat[i]);
    for (std::size_t c = 0; c < 3; ++c) {
      const float base = px[(gray ? 0 : c) * plane + i];
      out[c * plane + i] = (1.0f - alpha) * base + alpha * color[c];
    }
  }
  return Tensor({3, height, width}, std::move(out));
}

} // namespace rsicam
