#include "rsicam/app.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <map>
#include <sstream>

#include <nlohmann/json.hpp>

#include "rsicam/error.hpp"
#include "rsicam/evaluation.hpp"
#include "rsicam/image_io.hpp"

namespace rsicam {

using nlohmann::json;

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const IoError*>(&e)) return kExitIo;
  if (dynamic_cast<const EvaluationError*>(&e)) return kExitEvaluation;
  if (dynamic_cast<const Error*>(&e)) return kExitValidation;
  return kExitValidation;
}

void RunConfig::validate() const {
  if (methods.empty()) throw ParameterError("at least one method is required");
  if (steps < 1) throw ParameterError("--steps must be >= 1");
  if (batch_size < 1) throw ParameterError("--batch-size must be >= 1");
  if (!(epsilon >= 0.0) || !std::isfinite(epsilon)) throw ParameterError("--eps must be finite and >= 0");
  if (unit_selection && std::any_of(methods.begin(), methods.end(), [](Method m) { return m != Method::rsi_gradcam; })) {
    throw ParameterError("--unit-selection only applies to --method rsi");
  }
  for (double t : thresholds) {
    if (!(t > 0.0 && t < 1.0)) throw ParameterError("--thresholds values must lie in (0, 1)");
  }
  if (window < 1) throw ParameterError("--window must be >= 1");
  for (double e : eps_sweep) {
    if (!(e > 0.0) || !std::isfinite(e)) throw ParameterError("--eps-sweep values must be positive");
  }
  if (!(max_box_fraction > 0.0 && max_box_fraction <= 1.0)) throw ParameterError("max box fraction must be in (0, 1]");
  if (!(dark_threshold > 0.0 && dark_threshold < 1.0)) throw ParameterError("dark threshold must be in (0, 1)");
  if (!(overlay_alpha >= 0.0f && overlay_alpha <= 1.0f)) throw ParameterError("overlay alpha must be in [0, 1]");
}

AttributionConfig attribution_config(const RunConfig& cfg, Method method) {
  AttributionConfig a;
  a.method = method;
  a.layer = cfg.layer;
  a.class_index = cfg.class_index;
  a.steps = cfg.steps;
  a.epsilon = cfg.epsilon;
  a.positive_gradients = cfg.positive_gradients;
  a.unit_selection = cfg.unit_selection && method == Method::rsi_gradcam;
  a.batch_size = cfg.batch_size;
  if (cfg.inject_relu_fault) a.backward.relu_grad_at_zero = 1.0f;
  return a;
}

void write_file_atomic(const std::filesystem::path& path, const std::string& contents) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write " + tmp.string());
    os << contents;
    os.flush();
    if (!os) throw IoError("failed writing " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

namespace {

void write_image_atomic(const std::filesystem::path& path, const Image8& image) {
  auto tmp = path;
  tmp += ".tmp.png";
  write_png(tmp, image);
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

std::string format_number(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

std::string timestamp_utc() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

void ensure_out_dir(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory " + dir.string() + ": " + ec.message());
}

struct LoadedModels {
  Model full;
  Model attribution;
};

LoadedModels load_models(const RunConfig& cfg) {
  Model full = load_model(cfg.model_path, cfg.weights_path);
  Model attr = cfg.strip_softmax ? full.strip_softmax() : full;
  return {std::move(full), std::move(attr)};
}

std::string default_layer(const Model& model) {
  // The last pooling layer, else the last feature-map layer.
  std::string fallback;
  for (const auto& l : model.layers()) {
    if (l.kind == LayerKind::maxpool2d) fallback = l.name;
  }
  if (!fallback.empty()) return fallback;
  for (std::size_t s = 1; s < model.slot_count(); ++s) {
    if (model.slot_shape(s).size() == 3) fallback = model.slot_name(s);
  }
  return fallback.empty() ? std::string(Model::kInputLayer) : fallback;
}

struct LoadedImage {
  Image8 image;
  Tensor input;   // preprocessed, model-ready
  Tensor pixels;  // bytes scaled to [0, 1], same channel count as the model
};

LoadedImage load_image(const std::filesystem::path& path, const Model& model) {
  Image8 image = read_image(path);
  const std::size_t channels = model.input_shape()[0];
  Tensor input = image_to_tensor(image, model.preprocessing(), channels);
  if (input.shape() != model.input_shape()) {
    throw DimensionError("image " + path.string() + " has shape " + shape_to_string(input.shape()) +
                         " but the model expects " + shape_to_string(model.input_shape()));
  }
  Preprocessing unit;
  unit.scale = 1.0f / 255.0f;
  Tensor pixels = image_to_tensor(image, unit, channels);
  return {std::move(image), std::move(input), std::move(pixels)};
}

double class_score(const Model& model, const Tensor& input, std::size_t class_index) {
  const auto tape = forward_with_tape(model, input.reshape({1, input.dim(0), input.dim(1), input.dim(2)}));
  return tape.outputs.values()[class_index];
}

// Explanation map in pixel space, then the model's preprocessing.
Tensor explanation_input(const Heatmap& h, const LoadedImage& img, const Model& model) {
  const auto e = explanation_map(h, img.pixels);
  const auto& pre = model.preprocessing();
  std::vector<float> data(e.values().begin(), e.values().end());
  const float rescale = 255.0f * pre.scale;
  const std::size_t plane = e.dim(1) * e.dim(2);
  for (std::size_t i = 0; i < data.size(); ++i) {
    data[i] = data[i] * rescale - (pre.mean.empty() ? 0.0f : pre.mean[i / plane]);
  }
  return Tensor(e.shape(), std::move(data));
}

AttributionConfig resolved_config(const RunConfig& cfg, const Model& model, Method method,
                                  const std::optional<Tensor>& baseline) {
  auto a = attribution_config(cfg, method);
  if (a.layer.empty()) a.layer = default_layer(model);
  a.baseline = baseline;
  return a;
}

std::optional<Tensor> load_baseline(const RunConfig& cfg, const Model& model) {
  if (cfg.baseline == "black") return std::nullopt;
  return load_image(cfg.baseline, model).input;
}

json config_json(const RunConfig& cfg, const std::string& layer) {
  json methods = json::array();
  for (Method m : cfg.methods) methods.push_back(method_name(m));
  return {{"methods", methods},
          {"layer", layer},
          {"class", cfg.class_index ? json(*cfg.class_index) : json("auto")},
          {"steps", cfg.steps},
          {"baseline", cfg.baseline},
          {"epsilon", cfg.epsilon},
          {"positive_gradients", cfg.positive_gradients},
          {"unit_selection", cfg.unit_selection},
          {"batch_size", cfg.batch_size},
          {"strip_softmax", cfg.strip_softmax},
          {"thresholds", cfg.thresholds},
          {"window", cfg.window},
          {"eps_sweep", cfg.eps_sweep},
          {"max_box_fraction", cfg.max_box_fraction},
          {"dark_threshold", cfg.dark_threshold}};
}

struct Dataset {
  std::vector<ManifestEntry> entries;
  std::vector<LoadedImage> images;
  std::vector<Prediction> predictions;
  std::size_t manifest_size = 0;
  json failures = json::array();
};

// Loads and predicts every manifest image before filtering.
Dataset load_dataset(const RunConfig& cfg, const Model& full) {
  const auto manifest = read_manifest(cfg.manifest_path);
  Dataset all;
  all.manifest_size = manifest.size();
  for (const auto& entry : manifest) {
    try {
      auto img = load_image(entry.image_path, full);
      const std::size_t c = predict_class(full, img.input);
      const double p = class_score(full, img.input, c);
      all.predictions.push_back({c, p, img.image.height, img.image.width});
      all.images.push_back(std::move(img));
      all.entries.push_back(entry);
    } catch (const Error& e) {
      all.failures.push_back({{"image", entry.image_path}, {"stage", "load"}, {"error", e.what()}});
    }
  }
  Dataset kept;
  kept.manifest_size = all.manifest_size;
  kept.failures = all.failures;
  for (std::size_t i : filter_manifest_indices(all.entries, all.predictions, cfg.max_box_fraction)) {
    kept.entries.push_back(all.entries[i]);
    kept.images.push_back(std::move(all.images[i]));
    kept.predictions.push_back(all.predictions[i]);
  }
  if (kept.entries.empty()) throw EvaluationError("empty dataset after filtering");
  return kept;
}

} // namespace

std::vector<ExplainOutputs> run_explain(const RunConfig& cfg) {
  cfg.validate();
  if (cfg.image_path.empty()) throw ParameterError("explain requires --image");
  const auto models = load_models(cfg);
  const auto img = load_image(cfg.image_path, models.full);
  const auto baseline = load_baseline(cfg, models.full);

  struct Rendered {
    std::string stem;
    std::string dump;
    Image8 heatmap;
    Image8 overlay;
    json sidecar;
  };
  // Everything is computed before anything is written.
  std::vector<Rendered> rendered;
  for (const Method method : cfg.methods) {
    auto acfg = resolved_config(cfg, models.attribution, method, baseline);
    acfg.class_index = resolve_class(models.full, img.input, acfg);

    const Heatmap raw = attribute(models.attribution, img.input, acfg);
    const Heatmap final_map = finalize_heatmap(raw, acfg, img.image.height, img.image.width);
    const Tensor overlay = render_overlay(final_map, img.pixels, cfg.overlay_alpha);
    const RawStats stats = raw_stats(raw);
    const bool dark = dark_heatmap_flag(raw, acfg.epsilon, cfg.dark_threshold);

    std::ostringstream dump;
    dump << "# raw heatmap method=" << method_name(method) << " layer=" << acfg.layer
         << " class=" << *acfg.class_index << "\n"
         << raw.height() << " " << raw.width() << "\n";
    for (float v : raw.grid.values()) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.9g\n", static_cast<double>(v));
      dump << buf;
    }

    json sidecar{{"method", method_name(method)},
                 {"layer", acfg.layer},
                 {"class", *acfg.class_index},
                 {"steps", acfg.steps},
                 {"epsilon", acfg.epsilon},
                 {"baseline", cfg.baseline},
                 {"positive_gradients", acfg.positive_gradients},
                 {"unit_selection", acfg.unit_selection},
                 {"strip_softmax", cfg.strip_softmax},
                 {"image", cfg.image_path.string()},
                 {"raw", {{"min", stats.min}, {"max", stats.max}, {"mean", stats.mean}, {"height", raw.height()},
                          {"width", raw.width()}}},
                 {"dark", dark},
                 {"metadata", {{"generated_at", timestamp_utc()}}}};
    rendered.push_back({cfg.image_path.stem().string() + "." + method_name(method), dump.str(),
                        grid_to_image(final_map.grid), tensor_to_image(overlay), std::move(sidecar)});
  }

  ensure_out_dir(cfg.out_dir);
  std::vector<ExplainOutputs> outputs;
  for (const auto& r : rendered) {
    ExplainOutputs out{cfg.out_dir / (r.stem + ".raw.txt"), cfg.out_dir / (r.stem + ".heatmap.png"),
                       cfg.out_dir / (r.stem + ".overlay.png"), cfg.out_dir / (r.stem + ".json")};
    write_file_atomic(out.raw_dump, r.dump);
    write_image_atomic(out.heatmap_png, r.heatmap);
    write_image_atomic(out.overlay_png, r.overlay);
    write_file_atomic(out.sidecar_json, r.sidecar.dump(2) + "\n");
    outputs.push_back(std::move(out));
  }
  return outputs;
}

ReportOutputs run_evaluate(const RunConfig& cfg) {
  cfg.validate();
  if (cfg.manifest_path.empty()) throw ParameterError("evaluate requires --manifest");
  const auto models = load_models(cfg);
  const auto baseline = load_baseline(cfg, models.full);
  Dataset data = load_dataset(cfg, models.full);
  if (cfg.window > data.entries.size()) {
    throw EvaluationError("rolling window " + std::to_string(cfg.window) + " exceeds the " +
                          std::to_string(data.entries.size()) + " images left after filtering");
  }
  const std::string layer = cfg.layer.empty() ? default_layer(models.attribution) : cfg.layer;

  json report;
  report["metadata"] = {{"generated_at", timestamp_utc()}, {"tool", "rsicam evaluate"}};
  report["config"] = config_json(cfg, layer);
  json images = json::array();
  for (const auto& e : data.entries) images.push_back(e.image_path);
  report["dataset"] = {{"manifest", cfg.manifest_path.string()},
                       {"entries", data.manifest_size},
                       {"kept", data.entries.size()},
                       {"images", images}};
  report["methods"] = json::array();

  std::ostringstream csv;
  csv << "method,layer,metric,point,x,value\n";
  auto row = [&](const char* method, const std::string& metric, const std::string& point, const std::string& x,
                 const std::optional<double>& value) {
    csv << method << "," << layer << "," << metric << "," << point << "," << x << ","
        << (value ? format_number(*value) : std::string("")) << "\n";
  };

  for (Method method : cfg.methods) {
    auto acfg = resolved_config(cfg, models.attribution, method, baseline);
    acfg.layer = layer;
    std::vector<EvalRecord> records;
    for (std::size_t i = 0; i < data.entries.size(); ++i) {
      const auto& entry = data.entries[i];
      const auto& img = data.images[i];
      try {
        acfg.class_index = data.predictions[i].class_index;
        const Heatmap raw = attribute(models.attribution, img.input, acfg);
        const Heatmap h = finalize_heatmap(raw, acfg, img.image.height, img.image.width);
        const double o = class_score(models.full, explanation_input(h, img, models.full), *acfg.class_index);
        EvalRecord r = make_record(entry.image_path, *acfg.class_index, data.predictions[i].probability, o);
        r.energy = pixel_energy(h, entry.boxes.front());
        for (double t : cfg.thresholds) r.jaccard[t] = jaccard_metrics(h, entry.boxes.front(), t);
        r.raw = raw_stats(raw);
        r.dark = dark_heatmap_flag(raw, acfg.epsilon, cfg.dark_threshold);
        records.push_back(std::move(r));
      } catch (const Error& e) {
        data.failures.push_back({{"image", entry.image_path}, {"method", method_name(method)}, {"error", e.what()}});
      }
    }
    if (records.empty()) throw EvaluationError(std::string("no images could be evaluated with ") + method_name(method));
    std::sort(records.begin(), records.end(),
              [](const EvalRecord& a, const EvalRecord& b) { return a.image_id < b.image_id; });

    const char* mname = method_name(method);
    json section;
    section["method"] = mname;
    section["layer"] = layer;

    json rec_json = json::array();
    for (const auto& r : records) {
      json jac = json::array();
      for (const auto& [t, s] : r.jaccard) {
        jac.push_back({{"threshold", t}, {"iou", s.iou}, {"iob", s.iob}, {"ior", optional_json(s.ior)}});
      }
      rec_json.push_back({{"image", r.image_id},
                          {"class", r.predicted_class},
                          {"y", r.y},
                          {"o", r.o},
                          {"drop", r.drop_term},
                          {"confidence_increased", r.confidence_increased},
                          {"energy", optional_json(r.energy)},
                          {"jaccard", jac},
                          {"raw", {{"min", r.raw.min}, {"max", r.raw.max}, {"mean", r.raw.mean}}},
                          {"dark", r.dark}});
    }
    section["records"] = rec_json;

    const double drop = average_drop(records);
    const double increase = increase_in_confidence(records);
    std::optional<double> energy;
    {
      double total = 0.0;
      std::size_t n = 0;
      for (const auto& r : records) {
        if (r.energy) {
          total += *r.energy;
          ++n;
        }
      }
      if (n > 0) energy = total / static_cast<double>(n);
    }
    std::size_t dark_count = 0;
    for (const auto& r : records) dark_count += r.dark ? 1 : 0;

    json summary{{"images", records.size()},
                 {"average_drop", drop},
                 {"increase_in_confidence", increase},
                 {"mean_energy", optional_json(energy)},
                 {"dark_count", dark_count}};
    row(mname, "average_drop", "all", "", drop);
    row(mname, "increase_in_confidence", "all", "", increase);
    row(mname, "mean_energy", "all", "", energy);
    row(mname, "dark_count", "all", "", static_cast<double>(dark_count));

    json jac_summary = json::array();
    for (double t : cfg.thresholds) {
      double iou = 0.0, iob = 0.0, ior = 0.0;
      std::size_t ior_n = 0;
      for (const auto& r : records) {
        const auto& s = r.jaccard.at(t);
        iou += s.iou;
        iob += s.iob;
        if (s.ior) {
          ior += *s.ior;
          ++ior_n;
        }
      }
      const double n = static_cast<double>(records.size());
      std::optional<double> ior_mean;
      if (ior_n > 0) ior_mean = ior / static_cast<double>(ior_n);
      jac_summary.push_back({{"threshold", t}, {"iou", iou / n}, {"iob", iob / n}, {"ior", optional_json(ior_mean)}});
      row(mname, "iou", "threshold", format_number(t), iou / n);
      row(mname, "iob", "threshold", format_number(t), iob / n);
      row(mname, "ior", "threshold", format_number(t), ior_mean);
    }
    summary["jaccard"] = jac_summary;
    section["summary"] = summary;

    // Rolling-window series over records ordered by Y.
    std::vector<std::pair<std::string, MetricSelector>> selectors{
        {"drop", [](const EvalRecord& r) -> std::optional<double> { return r.drop_term; }},
        {"increase_in_confidence",
         [](const EvalRecord& r) -> std::optional<double> { return r.confidence_increased ? 1.0 : 0.0; }},
        {"energy", [](const EvalRecord& r) { return r.energy; }}};
    for (double t : cfg.thresholds) {
      const std::string suffix = "@" + format_number(t);
      selectors.emplace_back("iou" + suffix,
                             [t](const EvalRecord& r) -> std::optional<double> { return r.jaccard.at(t).iou; });
      selectors.emplace_back("iob" + suffix,
                             [t](const EvalRecord& r) -> std::optional<double> { return r.jaccard.at(t).iob; });
      selectors.emplace_back("ior" + suffix, [t](const EvalRecord& r) { return r.jaccard.at(t).ior; });
    }
    json rolling{{"window", cfg.window}};
    json series = json::object();
    for (const auto& [metric, selector] : selectors) {
      const auto points = rolling_window_average(records, cfg.window, selector);
      json pts = json::array();
      for (std::size_t p = 0; p < points.size(); ++p) {
        pts.push_back({{"mean_y", points[p].mean_y}, {"value", optional_json(points[p].mean_metric)}});
        row(mname, "rolling_" + metric, std::to_string(p), format_number(points[p].mean_y), points[p].mean_metric);
      }
      series[metric] = pts;
    }
    rolling["series"] = series;
    section["rolling"] = rolling;
    report["methods"].push_back(section);
  }
  report["failures"] = data.failures;

  ensure_out_dir(cfg.out_dir);
  ReportOutputs out{cfg.out_dir / "evaluation.json", cfg.out_dir / "evaluation.csv"};
  write_file_atomic(out.json, report.dump(2) + "\n");
  write_file_atomic(out.csv, csv.str());
  return out;
}

ReportOutputs run_stability(const RunConfig& cfg) {
  cfg.validate();
  if (cfg.manifest_path.empty()) throw ParameterError("stability requires --manifest");
  if (cfg.eps_sweep.empty()) throw ParameterError("--eps-sweep must not be empty");
  const auto models = load_models(cfg);
  const auto baseline = load_baseline(cfg, models.full);
  Dataset data = load_dataset(cfg, models.full);
  const std::string layer = cfg.layer.empty() ? default_layer(models.attribution) : cfg.layer;

  json report;
  report["metadata"] = {{"generated_at", timestamp_utc()}, {"tool", "rsicam stability"}};
  report["config"] = config_json(cfg, layer);
  report["dataset"] = {{"manifest", cfg.manifest_path.string()},
                       {"entries", data.manifest_size},
                       {"kept", data.entries.size()}};
  report["methods"] = json::array();
  std::ostringstream csv;
  csv << "method,layer,epsilon,count,avg_p\n";

  for (Method method : cfg.methods) {
    auto acfg = resolved_config(cfg, models.attribution, method, baseline);
    acfg.layer = layer;
    std::vector<DarkSample> samples;
    json maps = json::array();
    for (std::size_t i = 0; i < data.entries.size(); ++i) {
      try {
        acfg.class_index = data.predictions[i].class_index;
        const Heatmap raw = attribute(models.attribution, data.images[i].input, acfg);
        samples.push_back(dark_sample(raw, data.predictions[i].probability));
        maps.push_back({{"image", data.entries[i].image_path},
                        {"peak_to_peak", samples.back().peak_to_peak},
                        {"p", samples.back().probability}});
      } catch (const Error& e) {
        data.failures.push_back(
            {{"image", data.entries[i].image_path}, {"method", method_name(method)}, {"error", e.what()}});
      }
    }
    const auto counts = dark_heatmap_count(samples, cfg.eps_sweep, cfg.dark_threshold);
    json sweep = json::array();
    for (double eps : cfg.eps_sweep) {
      const auto& dc = counts.at(eps);
      sweep.push_back({{"epsilon", eps}, {"count", dc.count}, {"avg_p", optional_json(dc.avg_p)}});
      csv << method_name(method) << "," << layer << "," << format_number(eps) << "," << dc.count << ","
          << (dc.avg_p ? format_number(*dc.avg_p) : std::string("")) << "\n";
    }
    report["methods"].push_back(
        {{"method", method_name(method)}, {"layer", layer}, {"images", samples.size()}, {"sweep", sweep}, {"maps", maps}});
  }
  report["failures"] = data.failures;

  ensure_out_dir(cfg.out_dir);
  ReportOutputs out{cfg.out_dir / "stability.json", cfg.out_dir / "stability.csv"};
  write_file_atomic(out.json, report.dump(2) + "\n");
  write_file_atomic(out.csv, csv.str());
  return out;
}

} // namespace rsicam
