#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "dexpr/frameselect.hpp"

namespace dexpr {

// Procedural stand-ins for expression datasets: a cartoon face whose mouth and
// brows take one of seven class-specific geometric configurations, with random
// placement, scale, and pixel noise.

struct SyntheticOptions {
  std::size_t per_class = 100;
  std::size_t image_size = kInputSize;
  double noise = 0.08;   // std-dev of additive Gaussian pixel noise
  double jitter = 0.05;  // max center offset as a fraction of the image size
  std::uint64_t seed = 7;
};

/// "anger", "contempt", "disgust", "fear", "happiness", "sadness", "surprise"
const std::vector<std::string>& synthetic_class_names();

/// One face of class `label`; `strength` in [0, 1] blends from neutral to the full expression.
Tensor render_synthetic_face(std::size_t label, std::size_t size, double strength, double dx, double dy, double scale);

/// per_class images of every class, interleaved by class, values in [0, 1].
LabeledDataset make_synthetic_dataset(const SyntheticOptions& options);

/// A recording of one face that starts neutral, ramps into its expression over
/// the middle of the sequence, and holds it, with slight head drift and noise.
std::vector<Tensor> make_synthetic_sequence(std::size_t frames, std::size_t size, std::uint64_t seed);

}  // namespace dexpr
