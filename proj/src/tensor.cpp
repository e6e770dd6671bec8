#include "rsicam/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

#include "rsicam/error.hpp"

namespace rsicam {

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string shape_to_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i > 0) out += "x";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

Tensor::Tensor(Shape shape, std::vector<float> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_.empty()) throw DimensionError("tensor shape must have at least one dimension");
  for (std::size_t d : shape_) {
    if (d == 0) throw DimensionError("tensor shape " + shape_to_string(shape_) + " has a zero dimension");
  }
  if (data_.size() != shape_size(shape_)) {
    throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                         " does not match shape " + shape_to_string(shape_));
  }
  for (float v : data_) {
    if (!std::isfinite(v)) throw NumericError("non-finite value in tensor of shape " + shape_to_string(shape_));
  }
}

Tensor Tensor::zeros(Shape shape) { return filled(std::move(shape), 0.0f); }

Tensor Tensor::filled(Shape shape, float value) {
  std::vector<float> data(shape_size(shape), value);
  return Tensor(std::move(shape), std::move(data));
}

Tensor Tensor::from_rows(std::initializer_list<std::initializer_list<float>> rows) {
  const std::size_t h = rows.size();
  const std::size_t w = h == 0 ? 0 : rows.begin()->size();
  std::vector<float> data;
  data.reserve(h * w);
  for (const auto& row : rows) {
    if (row.size() != w) throw DimensionError("ragged rows in from_rows");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor({h, w}, std::move(data));
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " + shape_to_string(shape_));
  }
  return shape_[axis];
}

float Tensor::at(std::size_t row, std::size_t col) const {
  return data_[row * shape_[1] + col];
}

float Tensor::at(std::size_t channel, std::size_t row, std::size_t col) const {
  return data_[(channel * shape_[1] + row) * shape_[2] + col];
}

Tensor Tensor::reshape(Shape shape) const {
  if (shape_size(shape) != data_.size()) {
    throw DimensionError("cannot reshape " + shape_to_string(shape_) + " to " + shape_to_string(shape));
  }
  return Tensor(std::move(shape), data_);
}

float Tensor::min() const { return *std::min_element(data_.begin(), data_.end()); }
float Tensor::max() const { return *std::max_element(data_.begin(), data_.end()); }

double Tensor::sum() const {
  double acc = 0.0;
  for (float v : data_) acc += v;
  return acc;
}

double Tensor::mean() const { return sum() / static_cast<double>(data_.size()); }

const char* stage_name(HeatmapStage stage) {
  switch (stage) {
    case HeatmapStage::raw: return "raw";
    case HeatmapStage::normalized: return "normalized";
    case HeatmapStage::upsampled: return "upsampled";
  }
  return "unknown";
}

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_to_string(a.shape()) +
                         " vs " + shape_to_string(b.shape()));
  }
}

template <typename F>
Tensor zip(const Tensor& a, const Tensor& b, const char* op, F f) {
  require_same_shape(a, b, op);
  std::vector<float> out(a.size());
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i], bv[i]);
  return Tensor(a.shape(), std::move(out));
}

void require_grid(const Heatmap& h, const char* op) {
  if (h.grid.rank() != 2) {
    throw DimensionError(std::string(op) + ": heatmap grid must be rank 2, got " + shape_to_string(h.grid.shape()));
  }
}

} // namespace

Tensor hadamard(const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) {
    return zip(a, b, "hadamard", [](float x, float y) { return x * y; });
  }
  const bool grid_first = a.rank() == 2 && b.rank() == 3;
  const Tensor& grid = grid_first ? a : b;
  const Tensor& volume = grid_first ? b : a;
  if (grid.rank() != 2 || volume.rank() != 3 || volume.dim(1) != grid.dim(0) || volume.dim(2) != grid.dim(1)) {
    throw DimensionError("hadamard: incompatible shapes " + shape_to_string(a.shape()) + " and " +
                         shape_to_string(b.shape()));
  }
  const std::size_t plane = grid.size();
  std::vector<float> out(volume.size());
  auto g = grid.values();
  auto v = volume.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = v[i] * g[i % plane];
  return Tensor(volume.shape(), std::move(out));
}

Tensor add(const Tensor& a, const Tensor& b) {
  return zip(a, b, "add", [](float x, float y) { return x + y; });
}

Tensor subtract(const Tensor& a, const Tensor& b) {
  return zip(a, b, "subtract", [](float x, float y) { return x - y; });
}

Tensor scale(const Tensor& t, float factor) {
  std::vector<float> out(t.values().begin(), t.values().end());
  for (float& v : out) v *= factor;
  return Tensor(t.shape(), std::move(out));
}

Heatmap minmax_normalize(const Heatmap& h, double epsilon) {
  if (!(epsilon >= 0.0) || !std::isfinite(epsilon)) {
    throw ParameterError("minmax_normalize: epsilon must be finite and non-negative");
  }
  if (h.stage != HeatmapStage::raw) {
    throw ParameterError(std::string("minmax_normalize: expected a raw heatmap, got ") + stage_name(h.stage));
  }
  require_grid(h, "minmax_normalize");
  const double lo = h.grid.min();
  const double range = static_cast<double>(h.grid.max()) - lo;
  std::vector<float> out(h.grid.size(), 0.0f);
  if (range > 0.0) {
    const double denom = range + epsilon;
    auto v = h.grid.values();
    for (std::size_t i = 0; i < out.size(); ++i) {
      out[i] = static_cast<float>((static_cast<double>(v[i]) - lo) / denom);
    }
  }
  Heatmap result = h;
  result.grid = Tensor(h.grid.shape(), std::move(out));
  result.stage = HeatmapStage::normalized;
  return result;
}

Heatmap bilinear_upsample(const Heatmap& h, std::size_t out_h, std::size_t out_w) {
  if (out_h == 0 || out_w == 0) throw ParameterError("bilinear_upsample: output dimensions must be >= 1");
  require_grid(h, "bilinear_upsample");
  const std::size_t in_h = h.height();
  const std::size_t in_w = h.width();
  // Source coordinate of output index i: i * (in - 1) / (out - 1).
  auto coord = [](std::size_t i, std::size_t in, std::size_t out) {
    if (out == 1 || in == 1) return 0.0;
    return static_cast<double>(i) * static_cast<double>(in - 1) / static_cast<double>(out - 1);
  };
  std::vector<float> out(out_h * out_w);
  for (std::size_t y = 0; y < out_h; ++y) {
    const double sy = coord(y, in_h, out_h);
    const auto y0 = std::min(static_cast<std::size_t>(sy), in_h - 1);
    const std::size_t y1 = std::min(y0 + 1, in_h - 1);
    const double fy = sy - static_cast<double>(y0);
    for (std::size_t x = 0; x < out_w; ++x) {
      const double sx = coord(x, in_w, out_w);
      const auto x0 = std::min(static_cast<std::size_t>(sx), in_w - 1);
      const std::size_t x1 = std::min(x0 + 1, in_w - 1);
      const double fx = sx - static_cast<double>(x0);
      const double top = (1.0 - fx) * h.grid.at(y0, x0) + fx * h.grid.at(y0, x1);
      const double bottom = (1.0 - fx) * h.grid.at(y1, x0) + fx * h.grid.at(y1, x1);
      double v = (1.0 - fy) * top + fy * bottom;
      // Rounding may push a convex combination just past its inputs.
      v = std::clamp(v, static_cast<double>(h.grid.min()), static_cast<double>(h.grid.max()));
      out[y * out_w + x] = static_cast<float>(v);
    }
  }
  Heatmap result = h;
  result.grid = Tensor({out_h, out_w}, std::move(out));
  result.stage = HeatmapStage::upsampled;
  return result;
}

Tensor channel_sum(const Tensor& t) {
  if (t.rank() != 3) throw DimensionError("channel_sum: expected rank 3, got " + shape_to_string(t.shape()));
  const std::size_t channels = t.dim(0);
  const std::size_t plane = t.dim(1) * t.dim(2);
  std::vector<double> acc(plane, 0.0);
  auto v = t.values();
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t i = 0; i < plane; ++i) acc[i] += v[c * plane + i];
  }
  return Tensor({t.dim(1), t.dim(2)}, std::vector<float>(acc.begin(), acc.end()));
}

Tensor relu_map(const Tensor& t) {
  std::vector<float> out(t.values().begin(), t.values().end());
  for (float& v : out) v = std::max(v, 0.0f);
  return Tensor(t.shape(), std::move(out));
}

} // namespace rsicam
