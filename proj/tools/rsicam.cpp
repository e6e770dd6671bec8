// rsicam: heatmap attribution and evaluation from the command line.
//
//   rsicam explain    --model m.json --weights m.rsaw --image x.png --method rsi --out dir
//   rsicam evaluate   --model ... --manifest list.jsonl --method gradcam,rsi --window 5 --out dir
//   rsicam stability  --model ... --manifest list.jsonl --eps-sweep 1e-3,1e-8 --out dir
//   rsicam selftest

#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "rsicam/app.hpp"
#include "rsicam/error.hpp"

namespace {

using rsicam::RunConfig;

struct Flags {
  std::string method = "rsi";
  std::string class_text = "auto";
  std::string fault;
};

void add_model_flags(CLI::App* cmd, RunConfig& cfg, bool required) {
  auto* m = cmd->add_option("--model", cfg.model_path, "Model descriptor (JSON)");
  auto* w = cmd->add_option("--weights", cfg.weights_path, "Model weights (RSAW binary)");
  if (required) {
    m->required();
    w->required();
  }
}

void add_attribution_flags(CLI::App* cmd, RunConfig& cfg, Flags& flags) {
  cmd->add_option("--method", flags.method, "gradcam|ig|igradcam|rsi; comma-separated for several")
      ->capture_default_str();
  cmd->add_option("--layer", cfg.layer, "Target layer (default: last pooling layer)");
  cmd->add_option("--class", flags.class_text, "Class index or 'auto' for the predicted class")->capture_default_str();
  cmd->add_option("--steps", cfg.steps, "Interpolation steps m")->capture_default_str();
  cmd->add_option("--baseline", cfg.baseline, "'black' or a baseline image path")->capture_default_str();
  cmd->add_option("--eps", cfg.epsilon, "Normalization epsilon")->capture_default_str();
  cmd->add_flag("--positive-gradients", cfg.positive_gradients, "Clamp (integrated) gradients at zero");
  cmd->add_flag("--unit-selection", cfg.unit_selection, "RSI only: keep units with positive A, IG and increment");
  cmd->add_option("--batch-size", cfg.batch_size, "Interpolation batch size")->capture_default_str();
  cmd->add_flag("--strip-softmax", cfg.strip_softmax, "Attribute against logits instead of probabilities");
  cmd->add_option("--out", cfg.out_dir, "Output directory")->capture_default_str();
}

void finish_flags(RunConfig& cfg, const Flags& flags) {
  cfg.methods.clear();
  std::size_t start = 0;
  while (start <= flags.method.size()) {
    const auto comma = flags.method.find(',', start);
    const auto token = flags.method.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
    if (!token.empty()) cfg.methods.push_back(rsicam::parse_method(token));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  if (flags.class_text == "auto") {
    cfg.class_index.reset();
  } else {
    try {
      std::size_t used = 0;
      const long value = std::stol(flags.class_text, &used);
      if (used != flags.class_text.size() || value < 0) throw std::invalid_argument("class");
      cfg.class_index = static_cast<std::size_t>(value);
    } catch (const std::exception&) {
      throw rsicam::ParameterError("--class must be a non-negative integer or 'auto'");
    }
  }
  if (!flags.fault.empty()) {
    if (flags.fault != "relu-at-zero") throw rsicam::ParameterError("unknown fault '" + flags.fault + "'");
    cfg.inject_relu_fault = true;
  }
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"Grad-CAM family heatmaps with Riemann-Stieltjes integrated gradients"};
  app.require_subcommand(1);
  RunConfig cfg;
  Flags flags;

  auto* explain = app.add_subcommand("explain", "Explain one image: raw dump, heatmap, overlay, JSON sidecar");
  add_model_flags(explain, cfg, true);
  explain->add_option("--image", cfg.image_path, "Input image (PNG or PPM)")->required();
  add_attribution_flags(explain, cfg, flags);

  auto* evaluate = app.add_subcommand("evaluate", "Average Drop, Increase in Confidence, energy and Jaccard report");
  add_model_flags(evaluate, cfg, true);
  evaluate->add_option("--manifest", cfg.manifest_path, "Manifest (JSON lines or CSV)")->required();
  add_attribution_flags(evaluate, cfg, flags);
  evaluate->add_option("--thresholds", cfg.thresholds, "Jaccard thresholds")->delimiter(',')->capture_default_str();
  evaluate->add_option("--window", cfg.window, "Rolling window width")->capture_default_str();
  evaluate->add_option("--max-box-fraction", cfg.max_box_fraction, "Drop boxes covering this share of the image")
      ->capture_default_str();

  auto* stability = app.add_subcommand("stability", "Dark-heatmap counts across an epsilon sweep");
  add_model_flags(stability, cfg, true);
  stability->add_option("--manifest", cfg.manifest_path, "Manifest (JSON lines or CSV)")->required();
  add_attribution_flags(stability, cfg, flags);
  stability->add_option("--eps-sweep", cfg.eps_sweep, "Epsilon values")->delimiter(',')->capture_default_str();
  stability->add_option("--dark-threshold", cfg.dark_threshold, "Normalized peak below which a map is dark")
      ->capture_default_str();
  stability->add_option("--max-box-fraction", cfg.max_box_fraction, "Drop boxes covering this share of the image")
      ->capture_default_str();

  auto* selftest = app.add_subcommand("selftest", "Run the built-in numerical checks");
  add_model_flags(selftest, cfg, false);
  selftest->add_option("--layer", cfg.layer, "Layer for the completeness check (default: last pooling layer)");
  selftest->add_option("--units", cfg.selftest_units, "Sampled units per layer for the gradient check")
      ->capture_default_str();
  selftest->add_option("--fault", flags.fault, "Test hook: inject a known fault (relu-at-zero)")->group("");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return rsicam::kExitUsage;
  }

  try {
    finish_flags(cfg, flags);
    if (*explain) {
      for (const auto& out : rsicam::run_explain(cfg)) {
        std::cout << out.raw_dump.string() << "\n"
                  << out.heatmap_png.string() << "\n"
                  << out.overlay_png.string() << "\n"
                  << out.sidecar_json.string() << "\n";
      }
    } else if (*evaluate) {
      const auto out = rsicam::run_evaluate(cfg);
      std::cout << out.json.string() << "\n" << out.csv.string() << "\n";
    } else if (*stability) {
      const auto out = rsicam::run_stability(cfg);
      std::cout << out.json.string() << "\n" << out.csv.string() << "\n";
    } else if (*selftest) {
      return rsicam::run_selftest(cfg, std::cout);
    }
  } catch (const rsicam::ParameterError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return rsicam::kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return rsicam::exit_code_for(e);
  }
  return rsicam::kExitOk;
}
