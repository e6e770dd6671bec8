#include "rsicam/model.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <set>

#include <nlohmann/json.hpp>

#include "rsicam/error.hpp"

namespace rsicam {

using nlohmann::json;

const char* layer_kind_name(LayerKind kind) {
  switch (kind) {
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::relu: return "relu";
    case LayerKind::maxpool2d: return "maxpool2d";
    case LayerKind::flatten: return "flatten";
    case LayerKind::dense: return "dense";
    case LayerKind::softmax: return "softmax";
  }
  return "unknown";
}

LayerSpec LayerSpec::conv2d(std::string name, std::size_t in, std::size_t out, std::size_t kernel, Padding padding) {
  LayerSpec s;
  s.name = std::move(name);
  s.kind = LayerKind::conv2d;
  s.in_channels = in;
  s.out_channels = out;
  s.kernel_h = kernel;
  s.kernel_w = kernel;
  s.padding = padding;
  return s;
}

LayerSpec LayerSpec::relu(std::string name) {
  LayerSpec s;
  s.name = std::move(name);
  s.kind = LayerKind::relu;
  return s;
}

LayerSpec LayerSpec::maxpool2d(std::string name, std::size_t window, std::size_t stride) {
  LayerSpec s;
  s.name = std::move(name);
  s.kind = LayerKind::maxpool2d;
  s.window = window;
  s.stride = stride;
  return s;
}

LayerSpec LayerSpec::flatten(std::string name) {
  LayerSpec s;
  s.name = std::move(name);
  s.kind = LayerKind::flatten;
  return s;
}

LayerSpec LayerSpec::dense(std::string name, std::size_t in, std::size_t out) {
  LayerSpec s;
  s.name = std::move(name);
  s.kind = LayerKind::dense;
  s.in_features = in;
  s.out_features = out;
  return s;
}

LayerSpec LayerSpec::softmax(std::string name) {
  LayerSpec s;
  s.name = std::move(name);
  s.kind = LayerKind::softmax;
  return s;
}

namespace {

struct ConvGeometry {
  std::size_t out_h = 0;
  std::size_t out_w = 0;
  std::size_t pad_top = 0;
  std::size_t pad_left = 0;
};

ConvGeometry conv_geometry(const LayerSpec& spec, std::size_t in_h, std::size_t in_w) {
  ConvGeometry g;
  const std::size_t s = spec.stride;
  if (spec.padding == Padding::same) {
    g.out_h = (in_h + s - 1) / s;
    g.out_w = (in_w + s - 1) / s;
    const std::size_t need_h = (g.out_h - 1) * s + spec.kernel_h;
    const std::size_t need_w = (g.out_w - 1) * s + spec.kernel_w;
    g.pad_top = need_h > in_h ? (need_h - in_h) / 2 : 0;
    g.pad_left = need_w > in_w ? (need_w - in_w) / 2 : 0;
  } else {
    g.out_h = (in_h - spec.kernel_h) / s + 1;
    g.out_w = (in_w - spec.kernel_w) / s + 1;
  }
  return g;
}

[[noreturn]] void chain_error(const LayerSpec& spec, const std::string& what) {
  throw ValidationError("layer '" + spec.name + "' (" + layer_kind_name(spec.kind) + "): " + what);
}

Shape infer_output_shape(const LayerSpec& spec, const Shape& in) {
  switch (spec.kind) {
    case LayerKind::conv2d: {
      if (in.size() != 3) chain_error(spec, "expects a C x H x W input, got " + shape_to_string(in));
      if (in[0] != spec.in_channels) {
        chain_error(spec, "expects " + std::to_string(spec.in_channels) + " input channels, got " +
                              std::to_string(in[0]));
      }
      if (spec.out_channels == 0 || spec.kernel_h == 0 || spec.kernel_w == 0 || spec.stride == 0) {
        chain_error(spec, "channel, kernel and stride sizes must be positive");
      }
      if (spec.padding == Padding::valid && (spec.kernel_h > in[1] || spec.kernel_w > in[2])) {
        chain_error(spec, "kernel larger than input " + shape_to_string(in));
      }
      const auto g = conv_geometry(spec, in[1], in[2]);
      return {spec.out_channels, g.out_h, g.out_w};
    }
    case LayerKind::relu:
      return in;
    case LayerKind::maxpool2d: {
      if (in.size() != 3) chain_error(spec, "expects a C x H x W input, got " + shape_to_string(in));
      if (spec.window == 0 || spec.stride == 0) chain_error(spec, "window and stride must be positive");
      if (spec.window > in[1] || spec.window > in[2]) {
        chain_error(spec, "window larger than input " + shape_to_string(in));
      }
      return {in[0], (in[1] - spec.window) / spec.stride + 1, (in[2] - spec.window) / spec.stride + 1};
    }
    case LayerKind::flatten:
      return {shape_size(in)};
    case LayerKind::dense:
      if (spec.in_features == 0 || spec.out_features == 0) chain_error(spec, "feature sizes must be positive");
      if (shape_size(in) != spec.in_features) {
        chain_error(spec, "expects " + std::to_string(spec.in_features) + " inputs but receives " +
                              std::to_string(shape_size(in)));
      }
      return {spec.out_features};
    case LayerKind::softmax:
      if (in.size() != 1) chain_error(spec, "expects a flat input, got " + shape_to_string(in));
      return in;
  }
  chain_error(spec, "unknown layer kind");
}

void check_params(const LayerSpec& spec, const LayerParams& p) {
  auto expect = [&](const std::optional<Tensor>& t, const Shape& shape, const char* what) {
    if (!t) chain_error(spec, std::string("missing ") + what);
    if (t->shape() != shape) {
      chain_error(spec, std::string(what) + " shape " + shape_to_string(t->shape()) + " does not match " +
                            shape_to_string(shape));
    }
  };
  switch (spec.kind) {
    case LayerKind::conv2d:
      expect(p.kernel, {spec.out_channels, spec.in_channels, spec.kernel_h, spec.kernel_w}, "kernel");
      expect(p.bias, {spec.out_channels}, "bias");
      break;
    case LayerKind::dense:
      expect(p.kernel, {spec.out_features, spec.in_features}, "kernel");
      expect(p.bias, {spec.out_features}, "bias");
      break;
    default:
      if (p.kernel || p.bias) chain_error(spec, "this layer kind has no parameters");
  }
}

// ---------------------------------------------------------------------------
// Per-sample kernels. Forward is templated so the finite-difference oracle can
// run the same network in double precision. `pattern`, when given, records
// every ReLU sign and max-pool winner, which identifies the linear region.

template <typename T>
void forward_layer(const LayerSpec& spec, const LayerParams& p, const Shape& in_shape, const Shape& out_shape,
                   std::span<const T> in, std::vector<T>& out, std::vector<std::uint32_t>* pattern) {
  out.assign(shape_size(out_shape), T(0));
  switch (spec.kind) {
    case LayerKind::conv2d: {
      const std::size_t C = in_shape[0], H = in_shape[1], W = in_shape[2];
      const auto g = conv_geometry(spec, H, W);
      const auto w = p.kernel->values();
      const auto b = p.bias->values();
      const std::size_t kh = spec.kernel_h, kw = spec.kernel_w;
      for (std::size_t o = 0; o < spec.out_channels; ++o) {
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            double acc = b[o];
            for (std::size_t c = 0; c < C; ++c) {
              for (std::size_t ky = 0; ky < kh; ++ky) {
                const auto iy = static_cast<std::ptrdiff_t>(oy * spec.stride + ky) -
                                static_cast<std::ptrdiff_t>(g.pad_top);
                if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
                for (std::size_t kx = 0; kx < kw; ++kx) {
                  const auto ix = static_cast<std::ptrdiff_t>(ox * spec.stride + kx) -
                                  static_cast<std::ptrdiff_t>(g.pad_left);
                  if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
                  acc += static_cast<double>(w[((o * C + c) * kh + ky) * kw + kx]) *
                         static_cast<double>(in[(c * H + static_cast<std::size_t>(iy)) * W + static_cast<std::size_t>(ix)]);
                }
              }
            }
            out[(o * g.out_h + oy) * g.out_w + ox] = static_cast<T>(acc);
          }
        }
      }
      break;
    }
    case LayerKind::relu:
      for (std::size_t i = 0; i < in.size(); ++i) {
        out[i] = in[i] > T(0) ? in[i] : T(0);
        if (pattern) pattern->push_back(in[i] > T(0) ? 1u : 0u);
      }
      break;
    case LayerKind::maxpool2d: {
      const std::size_t C = in_shape[0], H = in_shape[1], W = in_shape[2];
      const std::size_t OH = out_shape[1], OW = out_shape[2];
      for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t oy = 0; oy < OH; ++oy) {
          for (std::size_t ox = 0; ox < OW; ++ox) {
            std::size_t best = (c * H + oy * spec.stride) * W + ox * spec.stride;
            for (std::size_t ky = 0; ky < spec.window; ++ky) {
              for (std::size_t kx = 0; kx < spec.window; ++kx) {
                const std::size_t idx = (c * H + oy * spec.stride + ky) * W + ox * spec.stride + kx;
                if (in[idx] > in[best]) best = idx;
              }
            }
            out[(c * OH + oy) * OW + ox] = in[best];
            if (pattern) pattern->push_back(static_cast<std::uint32_t>(best));
          }
        }
      }
      break;
    }
    case LayerKind::flatten:
      std::copy(in.begin(), in.end(), out.begin());
      break;
    case LayerKind::dense: {
      const auto w = p.kernel->values();
      const auto b = p.bias->values();
      const std::size_t n_in = spec.in_features;
      for (std::size_t o = 0; o < spec.out_features; ++o) {
        double acc = b[o];
        for (std::size_t j = 0; j < n_in; ++j) {
          acc += static_cast<double>(w[o * n_in + j]) * static_cast<double>(in[j]);
        }
        out[o] = static_cast<T>(acc);
      }
      break;
    }
    case LayerKind::softmax: {
      double peak = -std::numeric_limits<double>::infinity();
      for (T v : in) peak = std::max(peak, static_cast<double>(v));
      double total = 0.0;
      std::vector<double> e(in.size());
      for (std::size_t i = 0; i < in.size(); ++i) {
        e[i] = std::exp(static_cast<double>(in[i]) - peak);
        total += e[i];
      }
      for (std::size_t i = 0; i < in.size(); ++i) out[i] = static_cast<T>(e[i] / total);
      break;
    }
  }
}

void backward_layer(const LayerSpec& spec, const LayerParams& p, const Shape& in_shape, const Shape& out_shape,
                    std::span<const float> in, std::span<const float> out, std::span<const double> grad_out,
                    std::vector<double>& grad_in, const BackwardOptions& options) {
  grad_in.assign(shape_size(in_shape), 0.0);
  switch (spec.kind) {
    case LayerKind::conv2d: {
      const std::size_t C = in_shape[0], H = in_shape[1], W = in_shape[2];
      const auto g = conv_geometry(spec, H, W);
      const auto w = p.kernel->values();
      const std::size_t kh = spec.kernel_h, kw = spec.kernel_w;
      for (std::size_t o = 0; o < spec.out_channels; ++o) {
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const double go = grad_out[(o * g.out_h + oy) * g.out_w + ox];
            if (go == 0.0) continue;
            for (std::size_t c = 0; c < C; ++c) {
              for (std::size_t ky = 0; ky < kh; ++ky) {
                const auto iy = static_cast<std::ptrdiff_t>(oy * spec.stride + ky) -
                                static_cast<std::ptrdiff_t>(g.pad_top);
                if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
                for (std::size_t kx = 0; kx < kw; ++kx) {
                  const auto ix = static_cast<std::ptrdiff_t>(ox * spec.stride + kx) -
                                  static_cast<std::ptrdiff_t>(g.pad_left);
                  if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
                  grad_in[(c * H + static_cast<std::size_t>(iy)) * W + static_cast<std::size_t>(ix)] +=
                      static_cast<double>(w[((o * C + c) * kh + ky) * kw + kx]) * go;
                }
              }
            }
          }
        }
      }
      break;
    }
    case LayerKind::relu:
      for (std::size_t i = 0; i < in.size(); ++i) {
        const double slope = in[i] > 0.0f ? 1.0 : (in[i] == 0.0f ? options.relu_grad_at_zero : 0.0);
        grad_in[i] = grad_out[i] * slope;
      }
      break;
    case LayerKind::maxpool2d: {
      const std::size_t C = in_shape[0], H = in_shape[1], W = in_shape[2];
      const std::size_t OH = out_shape[1], OW = out_shape[2];
      for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t oy = 0; oy < OH; ++oy) {
          for (std::size_t ox = 0; ox < OW; ++ox) {
            // First maximal element in row-major window order takes the gradient.
            std::size_t best = (c * H + oy * spec.stride) * W + ox * spec.stride;
            for (std::size_t ky = 0; ky < spec.window; ++ky) {
              for (std::size_t kx = 0; kx < spec.window; ++kx) {
                const std::size_t idx = (c * H + oy * spec.stride + ky) * W + ox * spec.stride + kx;
                if (in[idx] > in[best]) best = idx;
              }
            }
            grad_in[best] += grad_out[(c * OH + oy) * OW + ox];
          }
        }
      }
      break;
    }
    case LayerKind::flatten:
      std::copy(grad_out.begin(), grad_out.end(), grad_in.begin());
      break;
    case LayerKind::dense: {
      const auto w = p.kernel->values();
      const std::size_t n_in = spec.in_features;
      for (std::size_t o = 0; o < spec.out_features; ++o) {
        const double go = grad_out[o];
        if (go == 0.0) continue;
        for (std::size_t j = 0; j < n_in; ++j) grad_in[j] += static_cast<double>(w[o * n_in + j]) * go;
      }
      break;
    }
    case LayerKind::softmax: {
      double dot = 0.0;
      for (std::size_t i = 0; i < out.size(); ++i) dot += grad_out[i] * static_cast<double>(out[i]);
      for (std::size_t i = 0; i < out.size(); ++i) grad_in[i] = static_cast<double>(out[i]) * (grad_out[i] - dot);
      break;
    }
  }
}

// Runs layers [first_layer, end) on a single sample.
template <typename T>
std::vector<T> run_segment(const Model& model, std::size_t first_layer, std::vector<T> value,
                           std::vector<std::uint32_t>* pattern) {
  std::vector<T> next;
  for (std::size_t i = first_layer; i < model.layers().size(); ++i) {
    forward_layer<T>(model.layers()[i], model.params()[i], model.slot_shape(i), model.slot_shape(i + 1),
                     std::span<const T>(value), next, pattern);
    value.swap(next);
  }
  return value;
}

ForwardTape run_tape(const Model& model, std::size_t first_slot, const Tensor& batch) {
  const Shape& sample_shape = model.slot_shape(first_slot);
  Shape expected{batch.dim(0)};
  expected.insert(expected.end(), sample_shape.begin(), sample_shape.end());
  if (batch.shape() != expected) {
    throw DimensionError("batch shape " + shape_to_string(batch.shape()) + " does not match expected " +
                         shape_to_string(expected) + " at '" + model.slot_name(first_slot) + "'");
  }
  const std::size_t n = batch.dim(0);
  const std::size_t slots = model.slot_count();
  std::vector<std::vector<float>> buffers(slots);
  for (std::size_t s = first_slot; s < slots; ++s) buffers[s].reserve(n * shape_size(model.slot_shape(s)));

  const std::size_t in_size = shape_size(sample_shape);
  std::vector<float> current;
  std::vector<float> next;
  for (std::size_t b = 0; b < n; ++b) {
    auto values = batch.values().subspan(b * in_size, in_size);
    current.assign(values.begin(), values.end());
    buffers[first_slot].insert(buffers[first_slot].end(), current.begin(), current.end());
    for (std::size_t s = first_slot; s + 1 < slots; ++s) {
      forward_layer<float>(model.layers()[s], model.params()[s], model.slot_shape(s), model.slot_shape(s + 1),
                           std::span<const float>(current), next, nullptr);
      current.swap(next);
      buffers[s + 1].insert(buffers[s + 1].end(), current.begin(), current.end());
    }
  }

  ForwardTape tape;
  tape.batch_size = n;
  tape.first_slot = first_slot;
  for (std::size_t s = first_slot; s < slots; ++s) {
    Shape shape{n};
    shape.insert(shape.end(), model.slot_shape(s).begin(), model.slot_shape(s).end());
    tape.names.push_back(model.slot_name(s));
    tape.activations.emplace_back(std::move(shape), std::move(buffers[s]));
  }
  tape.outputs = tape.activations.back().reshape({n, model.class_count()});
  return tape;
}

// ---------------------------------------------------------------------------
// Weights file: "RSAW", u32 version, then float32 blobs, all little-endian.

constexpr std::array<char, 4> kMagic{'R', 'S', 'A', 'W'};
constexpr std::uint32_t kWeightsVersion = 1;

void put_u32(std::ostream& os, std::uint32_t v) {
  const std::array<char, 4> bytes{static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                                  static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  os.write(bytes.data(), 4);
}

std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

void put_floats(std::ostream& os, std::span<const float> values) {
  for (float v : values) {
    std::uint32_t bits = 0;
    std::memcpy(&bits, &v, sizeof bits);
    put_u32(os, bits);
  }
}

json layer_to_json(const LayerSpec& s) {
  json j{{"name", s.name}, {"kind", layer_kind_name(s.kind)}};
  switch (s.kind) {
    case LayerKind::conv2d:
      j["in_channels"] = s.in_channels;
      j["out_channels"] = s.out_channels;
      j["kernel"] = {s.kernel_h, s.kernel_w};
      j["stride"] = s.stride;
      j["padding"] = s.padding == Padding::same ? "same" : "valid";
      break;
    case LayerKind::maxpool2d:
      j["window"] = s.window;
      j["stride"] = s.stride;
      break;
    case LayerKind::dense:
      j["in_features"] = s.in_features;
      j["out_features"] = s.out_features;
      break;
    default:
      break;
  }
  return j;
}

LayerSpec layer_from_json(const json& j) {
  LayerSpec s;
  s.name = j.at("name").get<std::string>();
  const auto kind = j.at("kind").get<std::string>();
  if (kind == "conv2d") {
    s.kind = LayerKind::conv2d;
    s.in_channels = j.at("in_channels").get<std::size_t>();
    s.out_channels = j.at("out_channels").get<std::size_t>();
    const auto& k = j.at("kernel");
    if (k.is_array()) {
      if (k.size() != 2) throw FormatError("layer '" + s.name + "': kernel must be [h, w]");
      s.kernel_h = k[0].get<std::size_t>();
      s.kernel_w = k[1].get<std::size_t>();
    } else {
      s.kernel_h = s.kernel_w = k.get<std::size_t>();
    }
    s.stride = j.value("stride", std::size_t{1});
    const auto padding = j.value("padding", std::string("same"));
    if (padding == "same") {
      s.padding = Padding::same;
    } else if (padding == "valid") {
      s.padding = Padding::valid;
    } else {
      throw FormatError("layer '" + s.name + "': unknown padding '" + padding + "'");
    }
  } else if (kind == "relu") {
    s.kind = LayerKind::relu;
  } else if (kind == "maxpool2d") {
    s.kind = LayerKind::maxpool2d;
    s.window = j.at("window").get<std::size_t>();
    s.stride = j.value("stride", s.window);
  } else if (kind == "flatten") {
    s.kind = LayerKind::flatten;
  } else if (kind == "dense") {
    s.kind = LayerKind::dense;
    s.in_features = j.at("in_features").get<std::size_t>();
    s.out_features = j.at("out_features").get<std::size_t>();
  } else if (kind == "softmax") {
    s.kind = LayerKind::softmax;
  } else {
    throw FormatError("layer '" + s.name + "': unknown kind '" + kind + "'");
  }
  return s;
}

std::vector<float> extract_sample(const Tensor& batched, std::size_t index) {
  const std::size_t per = batched.size() / batched.dim(0);
  auto v = batched.values().subspan(index * per, per);
  return {v.begin(), v.end()};
}

} // namespace

Model::Model(std::string name, Shape input_shape, std::size_t class_count, std::vector<LayerSpec> layers,
             std::vector<LayerParams> params, Preprocessing preprocessing)
    : name_(std::move(name)),
      input_shape_(std::move(input_shape)),
      class_count_(class_count),
      layers_(std::move(layers)),
      params_(std::move(params)),
      preprocessing_(std::move(preprocessing)) {
  if (input_shape_.size() != 3 || shape_size(input_shape_) == 0) {
    throw ValidationError("model input shape must be C x H x W with positive sizes, got " +
                          shape_to_string(input_shape_));
  }
  if (layers_.empty()) throw ValidationError("model has no layers");
  if (params_.size() != layers_.size()) throw ValidationError("parameter list does not match layer list");
  if (!preprocessing_.mean.empty() && preprocessing_.mean.size() != input_shape_[0]) {
    throw ValidationError("preprocessing mean must have one entry per input channel");
  }
  std::set<std::string> seen{kInputLayer};
  shapes_.push_back(input_shape_);
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const auto& spec = layers_[i];
    if (spec.name.empty()) throw ValidationError("layer " + std::to_string(i) + " has an empty name");
    if (!seen.insert(spec.name).second) throw ValidationError("duplicate layer name '" + spec.name + "'");
    if (spec.kind == LayerKind::softmax && i + 1 != layers_.size()) {
      chain_error(spec, "softmax is only allowed as the final layer");
    }
    shapes_.push_back(infer_output_shape(spec, shapes_.back()));
    check_params(spec, params_[i]);
  }
  if (shapes_.back() != Shape{class_count_}) {
    throw ValidationError("final layer '" + layers_.back().name + "' produces " + shape_to_string(shapes_.back()) +
                          " but the model declares " + std::to_string(class_count_) + " classes");
  }
}

bool Model::has_softmax() const { return layers_.back().kind == LayerKind::softmax; }

std::size_t Model::slot_of(const std::string& layer) const {
  if (layer == kInputLayer) return 0;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    if (layers_[i].name == layer) return i + 1;
  }
  std::string valid;
  for (const auto& n : layer_names()) valid += (valid.empty() ? "" : ", ") + n;
  throw LookupError("unknown layer '" + layer + "'; valid layers: " + valid);
}

std::string Model::slot_name(std::size_t slot) const {
  return slot == 0 ? std::string(kInputLayer) : layers_[slot - 1].name;
}

std::vector<std::string> Model::layer_names() const {
  std::vector<std::string> names{kInputLayer};
  for (const auto& l : layers_) names.push_back(l.name);
  return names;
}

Model Model::strip_softmax() const {
  if (!has_softmax()) return *this;
  auto layers = layers_;
  auto params = params_;
  layers.pop_back();
  params.pop_back();
  Model stripped(name_, input_shape_, class_count_, std::move(layers), std::move(params), preprocessing_);
  stripped.softmax_stripped_ = true;
  return stripped;
}

Model load_model(const std::filesystem::path& descriptor_path, const std::filesystem::path& weights_path) {
  std::ifstream desc(descriptor_path);
  if (!desc) throw IoError("cannot open model descriptor " + descriptor_path.string());
  json doc;
  try {
    doc = json::parse(desc);
  } catch (const json::exception& e) {
    throw FormatError("model descriptor " + descriptor_path.string() + ": " + e.what());
  }

  std::string name;
  Shape input_shape;
  std::size_t class_count = 0;
  std::vector<LayerSpec> layers;
  Preprocessing pre;
  try {
    name = doc.value("name", std::string("model"));
    input_shape = doc.at("input_shape").get<Shape>();
    class_count = doc.at("class_count").get<std::size_t>();
    for (const auto& l : doc.at("layers")) layers.push_back(layer_from_json(l));
    if (doc.contains("preprocessing")) {
      const auto& p = doc["preprocessing"];
      pre.scale = p.value("scale", pre.scale);
      pre.mean = p.value("mean", std::vector<float>{});
    }
  } catch (const json::exception& e) {
    throw FormatError("model descriptor " + descriptor_path.string() + ": " + e.what());
  }

  // Validate the shape chain before touching the weights.
  {
    Shape shape = input_shape;
    if (shape.size() != 3) throw ValidationError("model input shape must be C x H x W");
    for (const auto& spec : layers) shape = infer_output_shape(spec, shape);
  }

  std::ifstream wfile(weights_path, std::ios::binary);
  if (!wfile) throw IoError("cannot open weights file " + weights_path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(wfile)), std::istreambuf_iterator<char>());
  if (bytes.size() < 8 || !std::equal(kMagic.begin(), kMagic.end(), bytes.begin())) {
    throw FormatError("weights file " + weights_path.string() + ": bad magic");
  }
  if (const auto version = get_u32(bytes.data() + 4); version != kWeightsVersion) {
    throw FormatError("weights file " + weights_path.string() + ": unsupported version " + std::to_string(version));
  }
  std::size_t offset = 8;
  auto take = [&](Shape shape, const std::string& layer) {
    const std::size_t count = shape_size(shape);
    if (bytes.size() - offset < count * 4) {
      throw FormatError("weights file " + weights_path.string() + ": truncated in layer '" + layer + "'");
    }
    std::vector<float> values(count);
    for (std::size_t i = 0; i < count; ++i) {
      const std::uint32_t bits = get_u32(bytes.data() + offset + 4 * i);
      std::memcpy(&values[i], &bits, sizeof bits);
      if (!std::isfinite(values[i])) {
        throw FormatError("weights file " + weights_path.string() + ": non-finite value in layer '" + layer + "'");
      }
    }
    offset += count * 4;
    return Tensor(std::move(shape), std::move(values));
  };

  std::vector<LayerParams> params(layers.size());
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& s = layers[i];
    if (s.kind == LayerKind::conv2d) {
      params[i].kernel = take({s.out_channels, s.in_channels, s.kernel_h, s.kernel_w}, s.name);
      params[i].bias = take({s.out_channels}, s.name);
    } else if (s.kind == LayerKind::dense) {
      params[i].kernel = take({s.out_features, s.in_features}, s.name);
      params[i].bias = take({s.out_features}, s.name);
    }
  }
  if (offset != bytes.size()) {
    throw FormatError("weights file " + weights_path.string() + ": " + std::to_string(bytes.size() - offset) +
                      " unexpected trailing bytes");
  }
  return Model(std::move(name), std::move(input_shape), class_count, std::move(layers), std::move(params),
               std::move(pre));
}

void save_model(const Model& model, const std::filesystem::path& descriptor_path,
                const std::filesystem::path& weights_path) {
  json doc;
  doc["format"] = "rsicam-model";
  doc["version"] = 1;
  doc["name"] = model.name();
  doc["input_shape"] = model.input_shape();
  doc["class_count"] = model.class_count();
  doc["preprocessing"] = {{"scale", model.preprocessing().scale}, {"mean", model.preprocessing().mean}};
  doc["layers"] = json::array();
  for (const auto& l : model.layers()) doc["layers"].push_back(layer_to_json(l));
  {
    std::ofstream os(descriptor_path);
    if (!os) throw IoError("cannot write " + descriptor_path.string());
    os << doc.dump(2) << "\n";
  }
  std::ofstream os(weights_path, std::ios::binary);
  if (!os) throw IoError("cannot write " + weights_path.string());
  os.write(kMagic.data(), kMagic.size());
  put_u32(os, kWeightsVersion);
  for (const auto& p : model.params()) {
    if (p.kernel) put_floats(os, p.kernel->values());
    if (p.bias) put_floats(os, p.bias->values());
  }
  if (!os) throw IoError("failed writing " + weights_path.string());
}

bool ForwardTape::contains(const std::string& layer) const {
  return std::find(names.begin(), names.end(), layer) != names.end();
}

const Tensor& ForwardTape::activation(const std::string& layer) const {
  const auto it = std::find(names.begin(), names.end(), layer);
  if (it == names.end()) throw LookupError("layer '" + layer + "' not recorded on this tape");
  return activations[static_cast<std::size_t>(it - names.begin())];
}

ForwardTape forward_with_tape(const Model& model, const Tensor& batch) {
  if (batch.rank() != 4) throw DimensionError("expected a rank-4 batch, got " + shape_to_string(batch.shape()));
  return run_tape(model, 0, batch);
}

ForwardTape forward_from_layer(const Model& model, const std::string& layer, const Tensor& activations) {
  return run_tape(model, model.slot_of(layer), activations);
}

Tensor batch_item(const Tensor& batched, std::size_t index) {
  if (batched.rank() < 2 || index >= batched.dim(0)) {
    throw DimensionError("batch_item: index " + std::to_string(index) + " out of range for " +
                         shape_to_string(batched.shape()));
  }
  Shape shape(batched.shape().begin() + 1, batched.shape().end());
  return Tensor(std::move(shape), extract_sample(batched, index));
}

Tensor stack(std::span<const Tensor> items) {
  if (items.empty()) throw DimensionError("stack: no items");
  Shape shape{items.size()};
  shape.insert(shape.end(), items.front().shape().begin(), items.front().shape().end());
  std::vector<float> data;
  data.reserve(shape_size(shape));
  for (const auto& t : items) {
    if (t.shape() != items.front().shape()) throw DimensionError("stack: items have different shapes");
    data.insert(data.end(), t.values().begin(), t.values().end());
  }
  return Tensor(std::move(shape), std::move(data));
}

Tensor gradients_at_layer(const Model& model, const ForwardTape& tape, const std::string& layer,
                          std::size_t class_index, const BackwardOptions& options) {
  if (class_index >= model.class_count()) {
    throw LookupError("class index " + std::to_string(class_index) + " out of range for " +
                      std::to_string(model.class_count()) + " classes");
  }
  const std::size_t target = model.slot_of(layer);
  if (target < tape.first_slot) throw LookupError("layer '" + layer + "' not recorded on this tape");
  const std::size_t last = model.slot_count() - 1;
  const std::size_t n = tape.batch_size;
  const std::size_t target_size = shape_size(model.slot_shape(target));

  std::vector<float> result;
  result.reserve(n * target_size);
  std::vector<double> grad;
  std::vector<double> grad_in;
  for (std::size_t b = 0; b < n; ++b) {
    grad.assign(model.class_count(), 0.0);
    grad[class_index] = 1.0;
    for (std::size_t s = last; s > target; --s) {
      const auto in = tape.activations[s - 1 - tape.first_slot].values();
      const auto out = tape.activations[s - tape.first_slot].values();
      const std::size_t in_size = shape_size(model.slot_shape(s - 1));
      const std::size_t out_size = shape_size(model.slot_shape(s));
      backward_layer(model.layers()[s - 1], model.params()[s - 1], model.slot_shape(s - 1), model.slot_shape(s),
                     in.subspan(b * in_size, in_size), out.subspan(b * out_size, out_size), grad, grad_in, options);
      grad.swap(grad_in);
    }
    for (double g : grad) result.push_back(static_cast<float>(g));
  }
  Shape shape{n};
  shape.insert(shape.end(), model.slot_shape(target).begin(), model.slot_shape(target).end());
  return Tensor(std::move(shape), std::move(result));
}

std::vector<FiniteDiffSample> finite_diff_units(const Model& model, const Tensor& batch, const std::string& layer,
                                                std::size_t class_index, double step, std::size_t batch_index,
                                                std::span<const std::size_t> units) {
  if (!(step > 0.0)) throw ParameterError("finite difference step must be positive");
  if (class_index >= model.class_count()) {
    throw LookupError("class index " + std::to_string(class_index) + " out of range");
  }
  const std::size_t slot = model.slot_of(layer);
  const auto tape = forward_with_tape(model, batch);
  const auto& recorded = tape.activation(layer);
  const auto base_f = extract_sample(recorded, batch_index);
  const std::vector<double> base(base_f.begin(), base_f.end());

  std::vector<std::uint32_t> base_pattern;
  run_segment<double>(model, slot, base, &base_pattern);

  std::vector<FiniteDiffSample> samples;
  samples.reserve(units.size());
  std::vector<std::uint32_t> pattern;
  for (std::size_t unit : units) {
    if (unit >= base.size()) throw DimensionError("unit index out of range for layer '" + layer + "'");
    FiniteDiffSample sample;
    sample.unit = unit;
    auto probe = base;
    probe[unit] = base[unit] + step;
    pattern.clear();
    const double plus = run_segment<double>(model, slot, probe, &pattern)[class_index];
    sample.crosses_kink = pattern != base_pattern;
    probe[unit] = base[unit] - step;
    pattern.clear();
    const double minus = run_segment<double>(model, slot, probe, &pattern)[class_index];
    sample.crosses_kink = sample.crosses_kink || pattern != base_pattern;
    sample.gradient = (plus - minus) / (2.0 * step);
    samples.push_back(sample);
  }
  return samples;
}

Tensor finite_diff_gradient(const Model& model, const Tensor& batch, const std::string& layer,
                            std::size_t class_index, double step) {
  const std::size_t slot = model.slot_of(layer);
  const std::size_t per = shape_size(model.slot_shape(slot));
  std::vector<std::size_t> units(per);
  for (std::size_t i = 0; i < per; ++i) units[i] = i;
  std::vector<float> data;
  data.reserve(batch.dim(0) * per);
  for (std::size_t b = 0; b < batch.dim(0); ++b) {
    for (const auto& s : finite_diff_units(model, batch, layer, class_index, step, b, units)) {
      data.push_back(static_cast<float>(s.gradient));
    }
  }
  Shape shape{batch.dim(0)};
  shape.insert(shape.end(), model.slot_shape(slot).begin(), model.slot_shape(slot).end());
  return Tensor(std::move(shape), std::move(data));
}

} // namespace rsicam
