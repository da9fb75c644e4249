#include "dexpr/frameselect.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <regex>

namespace dexpr {

namespace {

// Range query for the first (lowest-index) maximum.
class FirstMaxTable {
 public:
  explicit FirstMaxTable(std::span<const double> values) : values_(values) {
    const std::size_t n = values.size();
    levels_.push_back(std::vector<std::size_t>(n));
    for (std::size_t i = 0; i < n; ++i) levels_[0][i] = i;
    for (std::size_t span = 2; span <= n; span *= 2) {
      const auto& prev = levels_.back();
      std::vector<std::size_t> next(n - span + 1);
      for (std::size_t i = 0; i + span <= n; ++i) next[i] = better(prev[i], prev[i + span / 2]);
      levels_.push_back(std::move(next));
    }
  }

  /// Index of the first maximum in [lo, hi].
  std::size_t query(std::size_t lo, std::size_t hi) const {
    const std::size_t len = hi - lo + 1;
    const std::size_t level = std::bit_width(len) - 1;
    return better(levels_[level][lo], levels_[level][hi + 1 - (std::size_t{1} << level)]);
  }

 private:
  std::size_t better(std::size_t a, std::size_t b) const {
    if (values_[a] != values_[b]) return values_[a] > values_[b] ? a : b;
    return std::min(a, b);
  }

  std::span<const double> values_;
  std::vector<std::vector<std::size_t>> levels_;
};

void take_best(std::vector<std::size_t>& candidates, std::span<const double> scores, std::size_t needed,
               std::vector<std::size_t>& picked) {
  std::stable_sort(candidates.begin(), candidates.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a < b;
  });
  candidates.resize(std::min(needed, candidates.size()));
  picked.insert(picked.end(), candidates.begin(), candidates.end());
}

}  // namespace

void LabeledDataset::validate() const {
  for (const Sample& s : samples) {
    if (s.label >= class_names.size()) {
      throw DatasetError("sample '" + s.source_id + "' has label " + std::to_string(s.label) + " but only " +
                         std::to_string(class_names.size()) + " classes exist");
    }
  }
}

std::vector<std::string> LabeledDataset::subject_keys() const {
  std::vector<std::string> keys;
  keys.reserve(samples.size());
  for (const Sample& s : samples) {
    const std::string stem = std::filesystem::path(s.source_id).stem().string();
    keys.push_back(stem.substr(0, stem.find('_')));
  }
  return keys;
}

std::vector<double> frame_differences(std::span<const Tensor> frames, double sigma, DifferenceMetric metric) {
  if (frames.size() < 2) throw DatasetError("frame differences need at least 2 frames");
  std::vector<double> scores;
  scores.reserve(frames.size() - 1);
  Tensor previous = gaussian_smooth(frames[0], sigma);
  for (std::size_t t = 1; t < frames.size(); ++t) {
    if (frames[t].shape() != frames[0].shape()) {
      throw ShapeError("frame " + std::to_string(t) + " has shape " + frames[t].shape().to_string() +
                       ", expected " + frames[0].shape().to_string());
    }
    Tensor current = gaussian_smooth(frames[t], sigma);
    double acc = 0;
    for (std::size_t i = 0; i < current.size(); ++i) {
      const double diff = static_cast<double>(current[i]) - static_cast<double>(previous[i]);
      acc += metric == DifferenceMetric::mean_absolute ? std::abs(diff) : diff * diff;
    }
    scores.push_back(acc / static_cast<double>(current.size()));
    previous = std::move(current);
  }
  return scores;
}

std::vector<std::size_t> select_representative_frames(std::span<const double> scores, std::size_t count) {
  if (scores.size() < count) {
    throw DatasetError("too few frames: " + std::to_string(scores.size()) + " difference scores for " +
                       std::to_string(count) + " representative frames");
  }
  std::vector<std::size_t> picked;
  if (count == 0) return picked;
  const std::size_t n = scores.size();
  const FirstMaxTable table(scores);
  std::vector<bool> taken(n, false);

  for (std::size_t window = n + 1;; window = std::max<std::size_t>(3, window / 2)) {
    const std::size_t half = window / 2;
    std::vector<std::size_t> round;
    for (std::size_t t = 0; t < n; ++t) {
      if (taken[t]) continue;
      const std::size_t lo = t >= half ? t - half : 0;
      const std::size_t hi = std::min(n - 1, t + half);
      if (table.query(lo, hi) == t) round.push_back(t);
    }
    if (picked.size() + round.size() >= count) {
      take_best(round, scores, count - picked.size(), picked);
      break;
    }
    for (std::size_t t : round) taken[t] = true;
    picked.insert(picked.end(), round.begin(), round.end());
    if (window <= 3) break;
  }
  if (picked.size() < count) {
    std::vector<std::size_t> rest;
    for (std::size_t t = 0; t < n; ++t) {
      if (!taken[t]) rest.push_back(t);
    }
    take_best(rest, scores, count - picked.size(), picked);
  }
  std::sort(picked.begin(), picked.end());
  for (std::size_t& t : picked) ++t;  // score j belongs to frame j + 1
  return picked;
}

Extraction extract_representative_frames(std::span<const Tensor> frames, const ExtractionOptions& options) {
  if (options.discard > options.count) throw ConfigError("cannot discard more frames than are selected");
  if (frames.size() < options.count + 1) {
    throw DatasetError("too few frames: " + std::to_string(frames.size()) + " frames cannot yield " +
                       std::to_string(options.count) + " representative frames");
  }
  const std::vector<double> scores = frame_differences(frames, options.sigma, options.metric);
  Extraction result;
  result.selected = select_representative_frames(scores, options.count);
  result.discarded.assign(result.selected.begin(), result.selected.begin() + static_cast<std::ptrdiff_t>(options.discard));
  result.kept.assign(result.selected.begin() + static_cast<std::ptrdiff_t>(options.discard), result.selected.end());
  for (std::size_t t : result.kept) result.images.push_back(resize_to_input(frames[t], options.output_size));
  return result;
}

namespace {

std::vector<std::filesystem::path> image_files(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.is_regular_file() && is_supported_image(entry.path())) files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  return files;
}

long long trailing_number(const std::string& stem) {
  static const std::regex digits("(\\d+)(?!.*\\d)");
  std::smatch m;
  if (std::regex_search(stem, m, digits)) return std::stoll(m[1].str().substr(0, 18));
  return -1;
}

}  // namespace

FrameSequence load_frame_sequence(const std::filesystem::path& dir) {
  std::error_code ec;
  if (!std::filesystem::is_directory(dir, ec)) throw IoError("frame directory '" + dir.string() + "' not found");
  auto files = image_files(dir);
  std::stable_sort(files.begin(), files.end(), [](const auto& a, const auto& b) {
    return trailing_number(a.stem().string()) < trailing_number(b.stem().string());
  });
  FrameSequence seq;
  seq.session = dir.filename().string();
  for (const auto& f : files) {
    seq.frames.push_back(load_image(f));
    seq.frame_ids.push_back(f.filename().string());
  }
  return seq;
}

LabeledDataset load_class_directory_dataset(const std::filesystem::path& root, std::size_t input_size) {
  std::error_code ec;
  if (!std::filesystem::is_directory(root, ec)) throw IoError("dataset directory '" + root.string() + "' not found");
  std::vector<std::filesystem::path> class_dirs;
  for (const auto& entry : std::filesystem::directory_iterator(root)) {
    if (entry.is_directory()) class_dirs.push_back(entry.path());
  }
  if (class_dirs.empty()) throw DatasetError("no class directories under '" + root.string() + "'");
  std::sort(class_dirs.begin(), class_dirs.end(),
            [](const auto& a, const auto& b) { return a.filename().string() < b.filename().string(); });

  LabeledDataset dataset;
  for (std::size_t label = 0; label < class_dirs.size(); ++label) {
    const auto files = image_files(class_dirs[label]);
    if (files.empty()) throw DatasetError("class directory '" + class_dirs[label].string() + "' contains no images");
    dataset.class_names.push_back(class_dirs[label].filename().string());
    for (const auto& f : files) {
      dataset.samples.push_back(Sample{resize_to_input(load_image(f), input_size), label,
                                       (class_dirs[label].filename() / f.filename()).string()});
    }
  }
  return dataset;
}

}  // namespace dexpr
