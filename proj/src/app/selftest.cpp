#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <set>

#include "rsicam/app.hpp"
#include "rsicam/error.hpp"
#include "rsicam/fixtures.hpp"

namespace rsicam {

namespace {

std::string fmt(const char* pattern, double a, double b = 0.0, double c = 0.0) {
  char buf[160];
  std::snprintf(buf, sizeof buf, pattern, a, b, c);
  return buf;
}

Tensor scalar_input(float x) { return Tensor({1, 1, 1}, {x}); }

Tensor random_image(const Model& model, std::uint32_t seed) {
  FixtureRng rng(seed);
  std::vector<float> data(shape_size(model.input_shape()));
  for (float& v : data) v = rng.uniform(0.0f, 1.0f);
  return Tensor(model.input_shape(), std::move(data));
}

double toy_gradient(const Model& toy, float x, const BackwardOptions& opts) {
  const auto tape = forward_with_tape(toy, scalar_input(x).reshape({1, 1, 1, 1}));
  return gradients_at_layer(toy, tape, Model::kInputLayer, 0, opts).values()[0];
}

void toy_checks(const RunConfig& cfg, std::vector<CheckResult>& out) {
  const Model toy = build_toy_relu_net();
  BackwardOptions opts;
  if (cfg.inject_relu_fault) opts.relu_grad_at_zero = 1.0f;

  const double flat = toy_gradient(toy, 2.0f, opts);
  out.push_back({"toy: plain gradient at x=2 is 0 (saturated)", flat == 0.0, fmt("gradient = %.9g", flat)});

  const double kink = toy_gradient(toy, 1.0f, opts);
  out.push_back({"toy: ReLU subgradient at the kink x=1 is 0", kink == 0.0, fmt("gradient = %.9g", kink)});

  for (std::size_t m : {std::size_t{50}, std::size_t{500}}) {
    const double expected = m == 50 ? 0.96 : 0.996;
    AttributionConfig a;
    a.layer = Model::kInputLayer;
    a.class_index = 0;
    a.steps = m;
    a.baseline = scalar_input(0.0f);
    a.backward = opts;

    a.method = Method::layer_ig;
    const double ig = layer_ig_attributions(toy, scalar_input(2.0f), a).values()[0];
    out.push_back({"toy: layer-IG attribution m=" + std::to_string(m), std::abs(ig - expected) <= 1e-6,
                   fmt("value = %.9g, expected %.9g", ig, expected)});

    a.method = Method::rsi_gradcam;
    const double rsi = rsi_integrated_gradients(toy, scalar_input(2.0f), a).values()[0];
    out.push_back({"toy: RSI integrated gradient m=" + std::to_string(m), std::abs(rsi - expected) <= 1e-6,
                   fmt("value = %.9g, expected %.9g", rsi, expected)});
  }
}

std::string last_pool(const Model& model) {
  std::string name;
  for (const auto& l : model.layers()) {
    if (l.kind == LayerKind::maxpool2d) name = l.name;
  }
  return name;
}

void completeness_check(const RunConfig& cfg, const Model& model, std::vector<CheckResult>& out) {
  const Model stripped = model.strip_softmax();
  const std::string layer = cfg.layer.empty() ? last_pool(stripped) : cfg.layer;
  const Tensor input = random_image(stripped, kMiniCnnSeed + 1);
  const Tensor baseline = black_baseline(stripped);
  const std::size_t c = predict_class(model, input);

  const auto ends = forward_with_tape(stripped, stack(std::vector<Tensor>{baseline, input}));
  const double expected = static_cast<double>(ends.outputs.values()[c + stripped.class_count()]) -
                          static_cast<double>(ends.outputs.values()[c]);

  std::vector<double> errors;
  for (std::size_t m : {std::size_t{16}, std::size_t{64}, std::size_t{256}}) {
    AttributionConfig a;
    a.method = Method::rsi_gradcam;
    a.layer = layer;
    a.class_index = c;
    a.steps = m;
    a.baseline = baseline;
    if (cfg.inject_relu_fault) a.backward.relu_grad_at_zero = 1.0f;
    errors.push_back(std::abs(rsi_integrated_gradients(stripped, input, a).sum() - expected));
  }
  const bool monotone = errors[1] <= errors[0] && errors[2] <= errors[1];
  const double rel = errors[2] / std::max(std::abs(expected), 1e-12);
  out.push_back({"completeness at '" + layer + "': errors non-increasing over m=16,64,256", monotone,
                 fmt("abs errors %.3g, %.3g, %.3g", errors[0], errors[1], errors[2])});
  out.push_back({"completeness at '" + layer + "': relative error <= 5% at m=256", rel <= 0.05,
                 fmt("relative error %.3g (target y(1)-y(0) = %.6g)", rel, expected)});
}

void gradient_check(const RunConfig& cfg, const Model& model, std::vector<CheckResult>& out) {
  const Tensor input = random_image(model, kMiniCnnSeed + 2);
  const Tensor batch = input.reshape({1, input.dim(0), input.dim(1), input.dim(2)});
  const auto tape = forward_with_tape(model, batch);
  const std::size_t c = predict_class(model, input);
  BackwardOptions opts;
  if (cfg.inject_relu_fault) opts.relu_grad_at_zero = 1.0f;

  FixtureRng rng(kMiniCnnSeed + 3);
  std::set<std::string> kinds_seen;
  std::size_t compared = 0;
  std::size_t failed = 0;
  double worst = 0.0;
  for (std::size_t slot = 0; slot < model.slot_count(); ++slot) {
    const std::string name = model.slot_name(slot);
    kinds_seen.insert(slot == 0 ? "input" : layer_kind_name(model.layers()[slot - 1].kind));
    const auto grads = gradients_at_layer(model, tape, name, c, opts);
    const auto units_total = static_cast<std::uint32_t>(grads.size());
    std::size_t accepted = 0;
    for (std::size_t attempt = 0; attempt < 20 * cfg.selftest_units && accepted < cfg.selftest_units; ++attempt) {
      const std::size_t unit = rng.below(units_total);
      const auto fd = finite_diff_units(model, batch, name, c, 1e-3, 0, std::span<const std::size_t>(&unit, 1));
      if (fd[0].crosses_kink) continue;
      ++accepted;
      ++compared;
      const double analytic = grads.values()[unit];
      const double diff = std::abs(analytic - fd[0].gradient);
      const double tol = std::max(1e-3 * std::abs(fd[0].gradient), 1e-5);
      worst = std::max(worst, diff / tol);
      if (diff > tol) ++failed;
    }
  }
  out.push_back({"reverse-mode gradients match central differences", failed == 0 && compared > 0,
                 fmt("%.0f units over %.0f layer kinds, %.0f mismatches", static_cast<double>(compared),
                     static_cast<double>(kinds_seen.size()), static_cast<double>(failed)) +
                     fmt(", worst error/tolerance %.3g", worst)});
}

} // namespace

std::vector<CheckResult> run_selftest_checks(const RunConfig& cfg) {
  std::vector<CheckResult> results;
  toy_checks(cfg, results);
  const Model model = cfg.model_path.empty() ? generate_mini_cnn() : load_model(cfg.model_path, cfg.weights_path);
  completeness_check(cfg, model, results);
  gradient_check(cfg, model, results);
  return results;
}

int run_selftest(const RunConfig& cfg, std::ostream& out) {
  const auto results = run_selftest_checks(cfg);
  bool all = true;
  for (const auto& r : results) {
    out << (r.passed ? "PASS  " : "FAIL  ") << r.name << "  [" << r.detail << "]\n";
    all = all && r.passed;
  }
  out << (all ? "selftest: all checks passed\n" : "selftest: FAILED\n");
  return all ? kExitOk : kExitCheckFailed;
}

} // namespace rsicam
