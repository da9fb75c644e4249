#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dexpr/network.hpp"

namespace dexpr {

struct GradCheckOptions {
  double epsilon = 1e-3;
  double tolerance = 1e-4;
};

struct GradCheckReport {
  std::string subject;
  double max_relative_error = 0.0;
  std::string worst_coordinate;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t checked = 0;
  /// Coordinates whose +/- epsilon probes landed in a different piecewise region.
  std::size_t skipped = 0;
  double tolerance = 0.0;
  bool passed = true;

  std::string summary() const;
};

/// A block of coordinates to perturb, with the analytic gradient for each.
struct GradientProbe {
  std::string name;
  std::span<double> values;
  std::span<const double> analytic;
};

/// Value of the scalar objective plus an identifier of the smooth region it
/// was evaluated in (0 when the objective is smooth everywhere).
struct ObjectiveValue {
  double value = 0.0;
  std::uint64_t region = 0;
};

/// Compares each analytic derivative against the central difference
/// (f(x+e) - f(x-e)) / 2e using
///   |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
/// Coordinates whose probes change region are skipped and counted.
GradCheckReport check_gradients(const std::function<ObjectiveValue()>& objective,
                                const std::vector<GradientProbe>& probes, const GradCheckOptions& options);

/// Layer names accepted by check_layer.
std::vector<std::string> checkable_layers();

/// Random-input check of one primitive: "conv", "fc", "lrn", "maxpool" or "relu".
/// Inputs are drawn away from the ReLU kink and pooling ties. With
/// `inject_sign_bug` the analytic input gradient is negated (a checker self-test).
GradCheckReport check_layer(std::string_view layer, std::uint64_t seed, const GradCheckOptions& options = {},
                            bool inject_sign_bug = false);

/// End-to-end check of the cross-entropy gradient for every parameter of
/// `graph` on a random input, in 64-bit arithmetic. Biases are randomized so
/// ReLU units are not all at their kink.
GradCheckReport check_network(const NetworkGraph& graph, std::uint64_t seed, const GradCheckOptions& options);

}  // namespace dexpr
