#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace rsicam {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_to_string(const Shape& shape);

// Dense row-major float32 tensor. Immutable after construction: every
// operation returns a new value. Construction validates the shape and
// rejects non-finite values.
class Tensor {
public:
  Tensor(Shape shape, std::vector<float> data);

  static Tensor zeros(Shape shape);
  static Tensor filled(Shape shape, float value);
  // Convenience for tests and fixtures: a rank-2 tensor from nested rows.
  static Tensor from_rows(std::initializer_list<std::initializer_list<float>> rows);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const { return data_.size(); }

  std::span<const float> values() const { return data_; }
  float operator[](std::size_t flat_index) const { return data_[flat_index]; }

  // Rank-2 and rank-3 element access.
  float at(std::size_t row, std::size_t col) const;
  float at(std::size_t channel, std::size_t row, std::size_t col) const;

  Tensor reshape(Shape shape) const;

  float min() const;
  float max() const;
  // Accumulated in double.
  double sum() const;
  double mean() const;

  friend bool operator==(const Tensor&, const Tensor&) = default;

private:
  Shape shape_;
  std::vector<float> data_;
};

enum class HeatmapStage { raw, normalized, upsampled };

const char* stage_name(HeatmapStage stage);

// A 2-D localization map plus where it came from. The attribution pipeline
// normalizes before upsampling.
struct Heatmap {
  Tensor grid;
  HeatmapStage stage = HeatmapStage::raw;
  std::string method;
  std::string layer;
  int class_index = -1;

  std::size_t height() const { return grid.dim(0); }
  std::size_t width() const { return grid.dim(1); }
};

// Element-wise product. Either equal shapes, or a rank-2 H x W grid (b)
// multiplied into every channel of a rank-3 C x H x W tensor (a).
Tensor hadamard(const Tensor& a, const Tensor& b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor subtract(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& t, float factor);

// (v - min) / (max - min + epsilon). A constant grid maps to all zeros.
Heatmap minmax_normalize(const Heatmap& h, double epsilon);

// Align-corners bilinear resampling: the four corner samples of the source
// land exactly on the four corners of the output.
Heatmap bilinear_upsample(const Heatmap& h, std::size_t out_h, std::size_t out_w);

// C x H x W -> H x W, summing over channels.
Tensor channel_sum(const Tensor& t);

Tensor relu_map(const Tensor& t);

} // namespace rsicam
