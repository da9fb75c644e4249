#include "dexpr/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "dexpr/random.hpp"

namespace dexpr {

namespace {

Tensor64 random_tensor(Rng& rng, Shape shape, double lo, double hi) {
  Tensor64 t(std::move(shape));
  for (double& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

double projection(const Tensor64& weights, const Tensor64& out) {
  double acc = 0.0;
  for (std::size_t i = 0; i < out.size(); ++i) acc += weights[i] * out[i];
  return acc;
}

GradientProbe probe(std::string name, Tensor64& values, const Tensor64& analytic) {
  return GradientProbe{std::move(name), values.data(), analytic.data()};
}

void negate(Tensor64& t) {
  for (double& v : t.data()) v = -v;
}

void merge(GradCheckReport& into, const GradCheckReport& part, const std::string& label) {
  if (part.max_relative_error > into.max_relative_error || into.worst_coordinate.empty()) {
    into.max_relative_error = std::max(into.max_relative_error, part.max_relative_error);
    into.worst_coordinate = label + "/" + part.worst_coordinate;
    into.worst_analytic = part.worst_analytic;
    into.worst_numeric = part.worst_numeric;
  }
  into.checked += part.checked;
  into.skipped += part.skipped;
  into.passed = into.passed && part.passed;
}

GradCheckReport check_conv(std::uint64_t seed, const GradCheckOptions& options, bool bug) {
  GradCheckReport report;
  const ConvSpec configs[] = {{1, 1, 3, 3, 1, 0}, {2, 3, 3, 3, 2, 1}, {3, 2, 1, 1, 1, 0}};
  const std::size_t sides[] = {4, 5, 3};
  for (std::size_t c = 0; c < std::size(configs); ++c) {
    const ConvSpec& spec = configs[c];
    Rng rng(derive_seed(seed, c));
    Tensor64 x = random_tensor(rng, Shape{spec.in_channels, sides[c], sides[c]}, -1, 1);
    Tensor64 w = random_tensor(rng, spec.weight_shape(), -1, 1);
    Tensor64 b = random_tensor(rng, spec.bias_shape(), -1, 1);
    const Tensor64 r = random_tensor(rng, spec.output_shape(x.shape()), -1, 1);
    auto grads = conv_backward(x, spec, w, r);
    if (bug) negate(grads.input);
    auto objective = [&] { return ObjectiveValue{projection(r, conv_forward(x, spec, w, b)), 0}; };
    merge(report,
          check_gradients(objective, {probe("input", x, grads.input), probe("weights", w, grads.weights),
                                      probe("bias", b, grads.bias)},
                          options),
          "config" + std::to_string(c));
  }
  return report;
}

GradCheckReport check_fc(std::uint64_t seed, const GradCheckOptions& options, bool bug) {
  const FcSpec spec{12, 5};
  Rng rng(seed);
  Tensor64 x = random_tensor(rng, Shape{3, 2, 2}, -1, 1);
  Tensor64 w = random_tensor(rng, spec.weight_shape(), -1, 1);
  Tensor64 b = random_tensor(rng, spec.bias_shape(), -1, 1);
  const Tensor64 r = random_tensor(rng, Shape{spec.out_dim}, -1, 1);
  auto grads = fc_backward(x, spec, w, r);
  if (bug) negate(grads.input);
  auto objective = [&] { return ObjectiveValue{projection(r, fc_forward(x, spec, w, b)), 0}; };
  return check_gradients(
      objective,
      {probe("input", x, grads.input), probe("weights", w, grads.weights), probe("bias", b, grads.bias)}, options);
}

GradCheckReport check_lrn(std::uint64_t seed, const GradCheckOptions& options, bool bug) {
  GradCheckReport report;
  const LrnSpec configs[] = {LrnSpec{}, LrnSpec{3, 0.5, 0.75, 2.0}, LrnSpec{5, 2.0, 0.6, 1.0}};
  for (std::size_t c = 0; c < std::size(configs); ++c) {
    Rng rng(derive_seed(seed, c));
    Tensor64 x = random_tensor(rng, Shape{4, 2, 2}, -1.5, 1.5);
    const Tensor64 r = random_tensor(rng, x.shape(), -1, 1);
    Tensor64 gx = lrn_backward(x, configs[c], r);
    if (bug) negate(gx);
    auto objective = [&] { return ObjectiveValue{projection(r, lrn_forward(x, configs[c])), 0}; };
    merge(report, check_gradients(objective, {probe("input", x, gx)}, options), "config" + std::to_string(c));
  }
  return report;
}

GradCheckReport check_maxpool(std::uint64_t seed, const GradCheckOptions& options, bool bug) {
  GradCheckReport report;
  const PoolSpec configs[] = {{3, 1, 0}, {3, 2, 1}, {2, 2, 0}};
  for (std::size_t c = 0; c < std::size(configs); ++c) {
    Rng rng(derive_seed(seed, c));
    // Distinct values 0.05 apart: no ties and no reordering within +/- epsilon.
    Tensor64 x(Shape{2, 6, 6});
    std::vector<std::size_t> order(x.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(order);
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = 0.05 * static_cast<double>(order[i]) - 1.0;
    auto pooled = maxpool_forward(x, configs[c]);
    const Tensor64 r = random_tensor(rng, pooled.output.shape(), -1, 1);
    Tensor64 gx = maxpool_backward(pooled.indices, r);
    if (bug) negate(gx);
    auto objective = [&] { return ObjectiveValue{projection(r, maxpool_forward(x, configs[c]).output), 0}; };
    merge(report, check_gradients(objective, {probe("input", x, gx)}, options), "config" + std::to_string(c));
  }
  return report;
}

GradCheckReport check_relu(std::uint64_t seed, const GradCheckOptions& options, bool bug) {
  Rng rng(seed);
  Tensor64 x(Shape{3, 4, 4});
  for (double& v : x.data()) v = (rng.uniform() < 0.5 ? -1.0 : 1.0) * (0.1 + rng.uniform());
  const Tensor64 r = random_tensor(rng, x.shape(), -1, 1);
  Tensor64 gx = relu_backward(x, r);
  if (bug) negate(gx);
  auto objective = [&] { return ObjectiveValue{projection(r, relu_forward(x)), 0}; };
  return check_gradients(objective, {probe("input", x, gx)}, options);
}

}  // namespace

std::string GradCheckReport::summary() const {
  char buffer[512];
  std::snprintf(buffer, sizeof(buffer),
                "%s: %s max_rel_err=%.3e at %s (analytic %.6e, numeric %.6e; checked %zu, skipped %zu, tol %.1e)",
                subject.c_str(), passed ? "PASS" : "FAIL", max_relative_error,
                worst_coordinate.empty() ? "-" : worst_coordinate.c_str(), worst_analytic, worst_numeric, checked,
                skipped, tolerance);
  return buffer;
}

GradCheckReport check_gradients(const std::function<ObjectiveValue()>& objective,
                                const std::vector<GradientProbe>& probes, const GradCheckOptions& options) {
  GradCheckReport report;
  report.tolerance = options.tolerance;
  const std::uint64_t base_region = objective().region;
  for (const GradientProbe& p : probes) {
    if (p.values.size() != p.analytic.size()) throw ShapeError("probe '" + p.name + "' has mismatched gradient size");
    for (std::size_t i = 0; i < p.values.size(); ++i) {
      const double saved = p.values[i];
      p.values[i] = saved + options.epsilon;
      const ObjectiveValue plus = objective();
      p.values[i] = saved - options.epsilon;
      const ObjectiveValue minus = objective();
      p.values[i] = saved;
      if (plus.region != base_region || minus.region != base_region) {
        ++report.skipped;
        continue;
      }
      const double numeric = (plus.value - minus.value) / (2.0 * options.epsilon);
      const double analytic = p.analytic[i];
      const double scale = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
      const double rel = std::abs(analytic - numeric) / scale;
      ++report.checked;
      if (rel > report.max_relative_error || report.worst_coordinate.empty()) {
        report.max_relative_error = std::max(rel, report.max_relative_error);
        report.worst_coordinate = p.name + "[" + std::to_string(i) + "]";
        report.worst_analytic = analytic;
        report.worst_numeric = numeric;
      }
    }
  }
  report.passed = report.max_relative_error < options.tolerance;
  return report;
}

std::vector<std::string> checkable_layers() { return {"conv", "fc", "lrn", "maxpool", "relu"}; }

GradCheckReport check_layer(std::string_view layer, std::uint64_t seed, const GradCheckOptions& options,
                            bool inject_sign_bug) {
  GradCheckReport report;
  if (layer == "conv") {
    report = check_conv(seed, options, inject_sign_bug);
  } else if (layer == "fc") {
    report = check_fc(seed, options, inject_sign_bug);
  } else if (layer == "lrn") {
    report = check_lrn(seed, options, inject_sign_bug);
  } else if (layer == "maxpool") {
    report = check_maxpool(seed, options, inject_sign_bug);
  } else if (layer == "relu") {
    report = check_relu(seed, options, inject_sign_bug);
  } else {
    throw ConfigError("unknown layer '" + std::string(layer) + "' (expected conv, fc, lrn, maxpool or relu)");
  }
  report.subject = std::string(layer);
  report.tolerance = options.tolerance;
  report.passed = report.max_relative_error < options.tolerance;
  return report;
}

GradCheckReport check_network(const NetworkGraph& graph, std::uint64_t seed, const GradCheckOptions& options) {
  Rng rng(seed);
  Parameters<double> params = init_parameters(graph, seed).cast<double>();
  for (auto& [key, t] : params.tensors()) {
    if (key.ends_with(".bias")) {
      for (double& v : t.data()) v = rng.uniform(-0.1, 0.1);
    }
  }
  const Tensor64 input = random_tensor(rng, graph.input_shape(), 0, 1);
  const std::size_t target = static_cast<std::size_t>(rng.below(graph.num_classes()));

  const BackwardResult<double> analytic = backward(graph, params, input, target);
  ForwardOptions fo;
  fo.pattern_signature = true;
  auto objective = [&] {
    const auto result = forward(graph, params, input, fo);
    return ObjectiveValue{cross_entropy<double>(result.logits.data(), target), result.pattern};
  };
  std::vector<GradientProbe> probes;
  for (auto& [key, t] : params.tensors()) probes.push_back(GradientProbe{key, t.data(), analytic.gradients.get(key).data()});
  GradCheckReport report = check_gradients(objective, probes, options);
  report.subject = "network";
  return report;
}

}  // namespace dexpr
