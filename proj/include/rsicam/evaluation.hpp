#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rsicam/tensor.hpp"

namespace rsicam {

// Pixel rectangle, top-left origin: columns [x, x + w), rows [y, y + h).
struct BoundingBox {
  std::size_t x = 0;
  std::size_t y = 0;
  std::size_t w = 0;
  std::size_t h = 0;

  std::size_t area() const { return w * h; }
  bool fits(std::size_t height, std::size_t width) const {
    return w > 0 && h > 0 && x + w <= width && y + h <= height;
  }
  bool contains(std::size_t row, std::size_t col) const {
    return col >= x && col < x + w && row >= y && row < y + h;
  }
  friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

struct ManifestEntry {
  std::string image_path;
  std::size_t label = 0;
  std::vector<BoundingBox> boxes;
  friend bool operator==(const ManifestEntry&, const ManifestEntry&) = default;
};

// Line-delimited manifest. `.csv` files use the columns image,label,boxes
// with boxes written as "x y w h" groups separated by ';' (a header line is
// optional). Anything else is read as JSON lines:
//   {"image": "a.png", "label": 3, "boxes": [[x, y, w, h], ...]}
// Relative image paths are resolved against the manifest's directory.
std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path);

struct Prediction {
  std::size_t class_index = 0;
  double probability = 0.0;
  std::size_t height = 0;
  std::size_t width = 0;
};

// Keeps correctly classified entries with a single box smaller than
// `max_box_fraction` of the image.
std::vector<std::size_t> filter_manifest_indices(std::span<const ManifestEntry> entries,
                                                 std::span<const Prediction> predictions,
                                                 double max_box_fraction = 0.5);
std::vector<ManifestEntry> filter_manifest(std::span<const ManifestEntry> entries,
                                           std::span<const Prediction> predictions, double max_box_fraction = 0.5);

struct JaccardScores {
  double iou = 0.0;
  double iob = 0.0;
  // Undefined when the thresholded region is empty.
  std::optional<double> ior;
};

struct RawStats {
  double min = 0.0;
  double max = 0.0;
  double mean = 0.0;
};

RawStats raw_stats(const Heatmap& raw);

struct EvalRecord {
  std::string image_id;
  std::size_t predicted_class = 0;
  double y = 0.0;  // score on the original image
  double o = 0.0;  // score on the explanation map
  double drop_term = 0.0;
  bool confidence_increased = false;
  std::optional<double> energy;
  std::map<double, JaccardScores> jaccard;
  RawStats raw;
  bool dark = false;
};

// max(0, Y - O) / Y. Throws EvaluationError when Y <= 0.
double drop_term(double y, double o);
EvalRecord make_record(std::string image_id, std::size_t predicted_class, double y, double o);

// e_ijk = l_ij * p_ijk for a normalized H x W heatmap and a C x H x W image.
Tensor explanation_map(const Heatmap& h, const Tensor& image);

double average_drop(std::span<const EvalRecord> records);
double increase_in_confidence(std::span<const EvalRecord> records);

// Share of heatmap mass inside the box; empty when the map sums to zero.
std::optional<double> pixel_energy(const Heatmap& h, const BoundingBox& box);

JaccardScores jaccard_metrics(const Heatmap& h, const BoundingBox& box, double threshold);

// A raw map is dark when its normalized peak (max - min) / (max - min + eps)
// falls below `threshold`, i.e. max - min < eps * threshold / (1 - threshold).
bool dark_heatmap_flag(const Heatmap& raw, double epsilon, double threshold = 0.5);

struct DarkSample {
  double peak_to_peak = 0.0;
  double probability = 0.0;
};

DarkSample dark_sample(const Heatmap& raw, double probability);

struct DarkCount {
  std::size_t count = 0;
  // Mean model probability over the dark images; empty when count is 0.
  std::optional<double> avg_p;
};

std::map<double, DarkCount> dark_heatmap_count(std::span<const DarkSample> maps, std::span<const double> epsilons,
                                               double threshold = 0.5);

struct RollingPoint {
  double mean_y = 0.0;
  std::optional<double> mean_metric;
};

using MetricSelector = std::function<std::optional<double>(const EvalRecord&)>;

// Sliding-window means over records ordered by ascending Y (ties by image
// id). Undefined metric values are skipped inside a window.
std::vector<RollingPoint> rolling_window_average(std::span<const EvalRecord> records, std::size_t window,
                                                 const MetricSelector& metric);

} // namespace rsicam
