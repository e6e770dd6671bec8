#pragma once

#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "rsicam/attribution.hpp"

namespace rsicam {

enum ExitCode : int {
  kExitOk = 0,
  kExitCheckFailed = 1,
  kExitUsage = 2,
  kExitIo = 3,
  kExitValidation = 4,
  kExitEvaluation = 5,
};

// Maps an exception thrown by the library onto the process exit code.
int exit_code_for(const std::exception& e);

struct RunConfig {
  std::filesystem::path model_path;
  std::filesystem::path weights_path;
  std::filesystem::path image_path;
  std::filesystem::path manifest_path;
  std::filesystem::path out_dir = ".";

  std::vector<Method> methods{Method::rsi_gradcam};
  std::string layer;
  std::optional<std::size_t> class_index;  // empty: argmax ("auto")
  std::size_t steps = 50;
  std::string baseline = "black";  // "black" or an image path
  double epsilon = 1e-8;
  bool positive_gradients = false;
  bool unit_selection = false;
  std::size_t batch_size = 32;
  bool strip_softmax = false;

  std::vector<double> thresholds{0.25, 0.5, 0.75};
  std::size_t window = 1000;
  std::vector<double> eps_sweep{1e-3, 1e-5, 1e-8, 1e-12};
  double max_box_fraction = 0.5;
  double dark_threshold = 0.5;
  float overlay_alpha = 0.5f;

  // selftest: sample count per layer for the finite-difference check and the
  // fault-injection hook that flips the ReLU subgradient at 0 to 1.
  std::size_t selftest_units = 20;
  bool inject_relu_fault = false;

  // Throws ParameterError on the first invalid flag.
  void validate() const;
};

// Attribution settings for one method, class left to per-image resolution.
AttributionConfig attribution_config(const RunConfig& cfg, Method method);

struct ExplainOutputs {
  std::filesystem::path raw_dump;
  std::filesystem::path heatmap_png;
  std::filesystem::path overlay_png;
  std::filesystem::path sidecar_json;
};

// One set of outputs per requested method.
std::vector<ExplainOutputs> run_explain(const RunConfig& cfg);

struct ReportOutputs {
  std::filesystem::path json;
  std::filesystem::path csv;
};

ReportOutputs run_evaluate(const RunConfig& cfg);
ReportOutputs run_stability(const RunConfig& cfg);

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

// Built-in numerical checks on the toy net and the mini-CNN.
std::vector<CheckResult> run_selftest_checks(const RunConfig& cfg);
// Prints the pass/fail table and returns the exit code.
int run_selftest(const RunConfig& cfg, std::ostream& out);

// Writes `contents` to `path` through a temporary file and a rename.
void write_file_atomic(const std::filesystem::path& path, const std::string& contents);

} // namespace rsicam
