#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rsicam/tensor.hpp"

namespace rsicam {

enum class LayerKind { conv2d, relu, maxpool2d, flatten, dense, softmax };
enum class Padding { same, valid };

const char* layer_kind_name(LayerKind kind);

// Hyperparameters for one layer. Only the fields relevant to `kind` are read.
struct LayerSpec {
  std::string name;
  LayerKind kind = LayerKind::relu;

  // conv2d
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel_h = 0;
  std::size_t kernel_w = 0;
  std::size_t stride = 1;  // conv2d and maxpool2d
  Padding padding = Padding::same;

  // maxpool2d
  std::size_t window = 0;

  // dense
  std::size_t in_features = 0;
  std::size_t out_features = 0;

  static LayerSpec conv2d(std::string name, std::size_t in, std::size_t out, std::size_t kernel,
                          Padding padding = Padding::same);
  static LayerSpec relu(std::string name);
  static LayerSpec maxpool2d(std::string name, std::size_t window, std::size_t stride);
  static LayerSpec flatten(std::string name);
  static LayerSpec dense(std::string name, std::size_t in, std::size_t out);
  static LayerSpec softmax(std::string name);
};

// Trainable parameters. conv2d: kernel out x in x kh x kw, bias out.
// dense: kernel out x in, bias out. Other kinds carry neither.
struct LayerParams {
  std::optional<Tensor> kernel;
  std::optional<Tensor> bias;
};

// Pixel preprocessing declared by the descriptor: value = byte * scale - mean[c].
struct Preprocessing {
  float scale = 1.0f / 255.0f;
  std::vector<float> mean;
};

// Immutable sequential network. The pseudo-layer "input" names the network
// input so gradients with respect to the image use the same API as hidden
// layers.
class Model {
public:
  static constexpr const char* kInputLayer = "input";

  Model(std::string name, Shape input_shape, std::size_t class_count, std::vector<LayerSpec> layers,
        std::vector<LayerParams> params, Preprocessing preprocessing = {});

  const std::string& name() const { return name_; }
  const Shape& input_shape() const { return input_shape_; }
  std::size_t class_count() const { return class_count_; }
  const std::vector<LayerSpec>& layers() const { return layers_; }
  const std::vector<LayerParams>& params() const { return params_; }
  const Preprocessing& preprocessing() const { return preprocessing_; }
  bool softmax_stripped() const { return softmax_stripped_; }
  bool has_softmax() const;

  // Slot 0 is "input"; slot i + 1 is the output of layers()[i].
  std::size_t slot_of(const std::string& layer) const;
  std::string slot_name(std::size_t slot) const;
  std::size_t slot_count() const { return layers_.size() + 1; }
  // Statically inferred per-sample shape at a slot.
  const Shape& slot_shape(std::size_t slot) const { return shapes_[slot]; }
  const Shape& activation_shape(const std::string& layer) const { return shapes_[slot_of(layer)]; }
  std::vector<std::string> layer_names() const;

  // Copy with a trailing softmax removed; the outputs become logits.
  Model strip_softmax() const;

private:
  std::string name_;
  Shape input_shape_;
  std::size_t class_count_;
  std::vector<LayerSpec> layers_;
  std::vector<LayerParams> params_;
  Preprocessing preprocessing_;
  bool softmax_stripped_ = false;
  std::vector<Shape> shapes_;
};

Model load_model(const std::filesystem::path& descriptor_path, const std::filesystem::path& weights_path);
void save_model(const Model& model, const std::filesystem::path& descriptor_path,
                const std::filesystem::path& weights_path);

// Activations recorded by one forward pass over a batch. Each recorded
// tensor has shape N x (per-sample shape). A tape produced by
// forward_from_layer only records slots at and above its starting slot.
struct ForwardTape {
  std::size_t batch_size = 0;
  std::size_t first_slot = 0;
  std::vector<std::string> names;
  std::vector<Tensor> activations;
  Tensor outputs = Tensor::zeros({1});

  bool contains(const std::string& layer) const;
  const Tensor& activation(const std::string& layer) const;
};

ForwardTape forward_with_tape(const Model& model, const Tensor& batch);

// Feed `activations` (N x slot shape) in place of the named layer's output
// and run the layers above it.
ForwardTape forward_from_layer(const Model& model, const std::string& layer, const Tensor& activations);

// Per-sample extraction along the leading batch axis.
Tensor batch_item(const Tensor& batched, std::size_t index);
Tensor stack(std::span<const Tensor> items);

struct BackwardOptions {
  // Subgradient of ReLU at exactly 0. Changing it is a fault-injection hook.
  float relu_grad_at_zero = 0.0f;
};

// d y^c / d A for every unit of `layer`, per batch element. Same shape as the
// recorded activation.
Tensor gradients_at_layer(const Model& model, const ForwardTape& tape, const std::string& layer,
                          std::size_t class_index, const BackwardOptions& options = {});

// Central-difference estimate of d y^c / d A at selected units (flat
// per-sample indices) for one batch element. The part of the network above
// the layer is re-evaluated in double precision.
struct FiniteDiffSample {
  std::size_t unit = 0;
  double gradient = 0.0;
  // The +/- step changed a ReLU sign or a max-pool winner above the layer,
  // so the difference straddles a kink.
  bool crosses_kink = false;
};

std::vector<FiniteDiffSample> finite_diff_units(const Model& model, const Tensor& batch, const std::string& layer,
                                                std::size_t class_index, double step, std::size_t batch_index,
                                                std::span<const std::size_t> units);

// Full central-difference gradient tensor, same shape as gradients_at_layer.
Tensor finite_diff_gradient(const Model& model, const Tensor& batch, const std::string& layer,
                            std::size_t class_index, double step);

} // namespace rsicam
