#include "rsicam/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "rsicam/error.hpp"

namespace rsicam {

namespace {

std::string trim(std::string s) {
  const auto not_space = [](unsigned char c) { return !std::isspace(c); };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
  s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
  return s;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> parts;
  std::string part;
  std::istringstream is(s);
  while (std::getline(is, part, sep)) parts.push_back(part);
  if (!s.empty() && s.back() == sep) parts.emplace_back();
  return parts;
}

std::string resolve(const std::filesystem::path& base, const std::string& image) {
  const std::filesystem::path p(image);
  return p.is_absolute() ? p.string() : (base / p).lexically_normal().string();
}

ManifestEntry parse_json_line(const std::string& line, const std::filesystem::path& base, std::size_t lineno) {
  try {
    const auto j = nlohmann::json::parse(line);
    ManifestEntry e;
    e.image_path = resolve(base, j.at("image").get<std::string>());
    e.label = j.at("label").get<std::size_t>();
    for (const auto& b : j.value("boxes", nlohmann::json::array())) {
      if (!b.is_array() || b.size() != 4) throw FormatError("box must be [x, y, w, h]");
      e.boxes.push_back({b[0].get<std::size_t>(), b[1].get<std::size_t>(), b[2].get<std::size_t>(),
                         b[3].get<std::size_t>()});
    }
    return e;
  } catch (const nlohmann::json::exception& ex) {
    throw FormatError("manifest line " + std::to_string(lineno) + ": " + ex.what());
  } catch (const FormatError& ex) {
    throw FormatError("manifest line " + std::to_string(lineno) + ": " + ex.what());
  }
}

ManifestEntry parse_csv_line(const std::string& line, const std::filesystem::path& base, std::size_t lineno) {
  const auto fields = split(line, ',');
  if (fields.size() < 2 || fields.size() > 3) {
    throw FormatError("manifest line " + std::to_string(lineno) + ": expected image,label[,boxes]");
  }
  ManifestEntry e;
  e.image_path = resolve(base, trim(fields[0]));
  try {
    e.label = std::stoul(trim(fields[1]));
    if (fields.size() == 3) {
      for (const auto& group : split(fields[2], ';')) {
        if (trim(group).empty()) continue;
        std::istringstream is(group);
        BoundingBox b;
        if (!(is >> b.x >> b.y >> b.w >> b.h)) throw std::invalid_argument("bad box");
        e.boxes.push_back(b);
      }
    }
  } catch (const std::exception&) {
    throw FormatError("manifest line " + std::to_string(lineno) + ": malformed label or box");
  }
  return e;
}

void require_grid(const Heatmap& h, const char* op) {
  if (h.grid.rank() != 2) throw DimensionError(std::string(op) + ": heatmap must be rank 2");
}

void require_box(const Heatmap& h, const BoundingBox& box, const char* op) {
  require_grid(h, op);
  if (!box.fits(h.height(), h.width())) {
    throw DimensionError(std::string(op) + ": box (" + std::to_string(box.x) + "," + std::to_string(box.y) + "," +
                         std::to_string(box.w) + "," + std::to_string(box.h) + ") outside " +
                         shape_to_string(h.grid.shape()));
  }
}

} // namespace

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open manifest " + path.string());
  const bool csv = path.extension() == ".csv";
  const auto base = path.parent_path();
  std::vector<ManifestEntry> entries;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    line = trim(line);
    if (line.empty() || line.front() == '#') continue;
    if (csv) {
      if (lineno == 1 && line.rfind("image", 0) == 0) continue;
      entries.push_back(parse_csv_line(line, base, lineno));
    } else {
      entries.push_back(parse_json_line(line, base, lineno));
    }
  }
  return entries;
}

std::vector<std::size_t> filter_manifest_indices(std::span<const ManifestEntry> entries,
                                                 std::span<const Prediction> predictions, double max_box_fraction) {
  if (predictions.size() != entries.size()) {
    throw ParameterError("filter_manifest: " + std::to_string(predictions.size()) + " predictions for " +
                         std::to_string(entries.size()) + " entries");
  }
  std::vector<std::size_t> kept;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& e = entries[i];
    const auto& p = predictions[i];
    if (p.class_index != e.label || e.boxes.size() != 1) continue;
    const double image_area = static_cast<double>(p.height) * static_cast<double>(p.width);
    if (image_area <= 0.0 || static_cast<double>(e.boxes[0].area()) / image_area >= max_box_fraction) continue;
    kept.push_back(i);
  }
  return kept;
}

std::vector<ManifestEntry> filter_manifest(std::span<const ManifestEntry> entries,
                                           std::span<const Prediction> predictions, double max_box_fraction) {
  std::vector<ManifestEntry> out;
  for (std::size_t i : filter_manifest_indices(entries, predictions, max_box_fraction)) out.push_back(entries[i]);
  return out;
}

RawStats raw_stats(const Heatmap& raw) {
  return {raw.grid.min(), raw.grid.max(), raw.grid.mean()};
}

double drop_term(double y, double o) {
  if (!(y > 0.0)) throw EvaluationError("average drop undefined for a record with Y <= 0");
  return std::max(0.0, y - o) / y;
}

EvalRecord make_record(std::string image_id, std::size_t predicted_class, double y, double o) {
  EvalRecord r;
  r.image_id = std::move(image_id);
  r.predicted_class = predicted_class;
  r.y = y;
  r.o = o;
  r.drop_term = drop_term(y, o);
  r.confidence_increased = y < o;
  return r;
}

Tensor explanation_map(const Heatmap& h, const Tensor& image) {
  require_grid(h, "explanation_map");
  if (image.rank() != 3 || image.dim(1) != h.height() || image.dim(2) != h.width()) {
    throw DimensionError("explanation_map: heatmap " + shape_to_string(h.grid.shape()) + " vs image " +
                         shape_to_string(image.shape()));
  }
  return hadamard(h.grid, image);
}

double average_drop(std::span<const EvalRecord> records) {
  if (records.empty()) throw EvaluationError("average drop of an empty record set");
  double total = 0.0;
  for (const auto& r : records) total += drop_term(r.y, r.o);
  return total / static_cast<double>(records.size());
}

double increase_in_confidence(std::span<const EvalRecord> records) {
  if (records.empty()) throw EvaluationError("increase in confidence of an empty record set");
  std::size_t up = 0;
  for (const auto& r : records) up += r.y < r.o ? 1 : 0;
  return static_cast<double>(up) / static_cast<double>(records.size());
}

std::optional<double> pixel_energy(const Heatmap& h, const BoundingBox& box) {
  require_box(h, box, "pixel_energy");
  double inside = 0.0;
  double total = 0.0;
  for (std::size_t r = 0; r < h.height(); ++r) {
    for (std::size_t c = 0; c < h.width(); ++c) {
      const double v = h.grid.at(r, c);
      total += v;
      if (box.contains(r, c)) inside += v;
    }
  }
  if (total == 0.0) return std::nullopt;
  return inside / total;
}

JaccardScores jaccard_metrics(const Heatmap& h, const BoundingBox& box, double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0)) throw ParameterError("jaccard threshold must be in (0, 1)");
  require_box(h, box, "jaccard_metrics");
  std::size_t region = 0;
  std::size_t overlap = 0;
  for (std::size_t r = 0; r < h.height(); ++r) {
    for (std::size_t c = 0; c < h.width(); ++c) {
      if (h.grid.at(r, c) > threshold) {
        ++region;
        if (box.contains(r, c)) ++overlap;
      }
    }
  }
  JaccardScores s;
  const auto inter = static_cast<double>(overlap);
  s.iou = inter / static_cast<double>(region + box.area() - overlap);
  s.iob = inter / static_cast<double>(box.area());
  if (region > 0) s.ior = inter / static_cast<double>(region);
  return s;
}

bool dark_heatmap_flag(const Heatmap& raw, double epsilon, double threshold) {
  if (!(epsilon >= 0.0)) throw ParameterError("dark_heatmap_flag: epsilon must be non-negative");
  if (!(threshold > 0.0 && threshold < 1.0)) throw ParameterError("dark threshold must be in (0, 1)");
  const double range = static_cast<double>(raw.grid.max()) - static_cast<double>(raw.grid.min());
  return range < epsilon * threshold / (1.0 - threshold);
}

DarkSample dark_sample(const Heatmap& raw, double probability) {
  return {static_cast<double>(raw.grid.max()) - static_cast<double>(raw.grid.min()), probability};
}

std::map<double, DarkCount> dark_heatmap_count(std::span<const DarkSample> maps, std::span<const double> epsilons,
                                               double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0)) throw ParameterError("dark threshold must be in (0, 1)");
  std::map<double, DarkCount> out;
  for (double eps : epsilons) {
    if (!(eps >= 0.0)) throw ParameterError("epsilon sweep values must be non-negative");
    const double cutoff = eps * threshold / (1.0 - threshold);
    DarkCount dc;
    double p_total = 0.0;
    for (const auto& m : maps) {
      if (m.peak_to_peak < cutoff) {
        ++dc.count;
        p_total += m.probability;
      }
    }
    if (dc.count > 0) dc.avg_p = p_total / static_cast<double>(dc.count);
    out[eps] = dc;
  }
  return out;
}

std::vector<RollingPoint> rolling_window_average(std::span<const EvalRecord> records, std::size_t window,
                                                 const MetricSelector& metric) {
  if (window == 0 || window > records.size()) {
    throw ParameterError("rolling window " + std::to_string(window) + " invalid for " +
                         std::to_string(records.size()) + " records");
  }
  std::vector<const EvalRecord*> sorted;
  for (const auto& r : records) sorted.push_back(&r);
  std::stable_sort(sorted.begin(), sorted.end(), [](const EvalRecord* a, const EvalRecord* b) {
    if (a->y != b->y) return a->y < b->y;
    return a->image_id < b->image_id;
  });
  std::vector<std::optional<double>> values;
  for (const auto* r : sorted) values.push_back(metric(*r));

  std::vector<RollingPoint> points;
  for (std::size_t start = 0; start + window <= sorted.size(); ++start) {
    double y_sum = 0.0;
    double m_sum = 0.0;
    std::size_t defined = 0;
    for (std::size_t i = start; i < start + window; ++i) {
      y_sum += sorted[i]->y;
      if (values[i]) {
        m_sum += *values[i];
        ++defined;
      }
    }
    RollingPoint p;
    p.mean_y = y_sum / static_cast<double>(window);
    if (defined > 0) p.mean_metric = m_sum / static_cast<double>(defined);
    points.push_back(p);
  }
  return points;
}

} // namespace rsicam
