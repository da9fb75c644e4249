#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "dexpr/tensor.hpp"

namespace dexpr {

inline constexpr std::size_t kInputSize = 224;

struct Sample {
  Tensor image;  // [1, H, W], values in [0, 1]
  std::size_t label = 0;
  std::string source_id;
};

struct LabeledDataset {
  std::vector<Sample> samples;
  std::vector<std::string> class_names;

  std::size_t size() const { return samples.size(); }
  std::size_t num_classes() const { return class_names.size(); }
  /// Throws DatasetError if any label is out of range.
  void validate() const;
  /// Subject key of each sample: the file stem up to its first '_' (e.g. "S119").
  std::vector<std::string> subject_keys() const;
};

/// Ordered grayscale frames of one recording.
struct FrameSequence {
  std::string session;
  std::vector<Tensor> frames;  // each [1, H, W]
  std::vector<std::string> frame_ids;
};

// --- images -----------------------------------------------------------------

/// PNG, JPEG or PGM to a [1, H, W] tensor in [0, 1]. Color images are reduced
/// with luma weights 0.299 R + 0.587 G + 0.114 B.
Tensor load_image(const std::filesystem::path& path);

/// Writes a [1, H, W] tensor as an 8-bit grayscale PNG (values clamped to [0, 1]).
void save_png(const std::filesystem::path& path, const Tensor& image);

/// Bilinear resampling with half-pixel centers and edge clamping.
Tensor resize_bilinear(const Tensor& image, std::size_t height, std::size_t width);

/// Resize to the network input ([1, size, size]).
Tensor resize_to_input(const Tensor& image, std::size_t size = kInputSize);

/// Separable Gaussian blur, radius ceil(3 sigma), normalized taps, mirrored borders.
Tensor gaussian_smooth(const Tensor& frame, double sigma);

// --- representative frames --------------------------------------------------

enum class DifferenceMetric { mean_absolute, mean_squared };

/// scores[t - 1] = mean |smooth(frame t) - smooth(frame t - 1)| for t = 1 .. N-1.
std::vector<double> frame_differences(std::span<const Tensor> frames, double sigma,
                                      DifferenceMetric metric = DifferenceMetric::mean_absolute);

/// Picks `count` frames that each mark a distinct change event.
///
/// `scores[j]` is the difference score of frame j + 1. A shrinking maximum
/// filter runs over the scores: with window w (starting at N = scores + 1 and
/// halving down to 3), frame t is chosen when its score is the first maximum
/// within the w-wide window centered on it. Picks accumulate across windows
/// until `count` are collected; the round that overshoots keeps its highest
/// scores (earlier frame on equal scores). If the width-3 round still leaves
/// a shortfall, the highest remaining scores fill it. Returns ascending frame
/// indices in [1, N-1].
std::vector<std::size_t> select_representative_frames(std::span<const double> scores, std::size_t count = 20);

struct ExtractionOptions {
  double sigma = 1.0;
  std::size_t count = 20;
  std::size_t discard = 2;
  DifferenceMetric metric = DifferenceMetric::mean_absolute;
  std::size_t output_size = kInputSize;
};

struct Extraction {
  std::vector<std::size_t> selected;   // all `count` picks, ascending
  std::vector<std::size_t> discarded;  // the `discard` earliest picks
  std::vector<std::size_t> kept;
  std::vector<Tensor> images;          // original frames of `kept`, resized
};

/// Select representative frames, drop the earliest (neutral) ones, and resize
/// the rest to the network input.
Extraction extract_representative_frames(std::span<const Tensor> frames, const ExtractionOptions& options = {});

// --- directory layouts ------------------------------------------------------

/// Images of one session directory, ordered by the last number in each file name.
FrameSequence load_frame_sequence(const std::filesystem::path& dir);

/// One subdirectory per class; class index = lexicographic rank of the
/// directory name; samples sorted by path; images resized to `input_size`.
LabeledDataset load_class_directory_dataset(const std::filesystem::path& root, std::size_t input_size = kInputSize);

bool is_supported_image(const std::filesystem::path& path);

}  // namespace dexpr
