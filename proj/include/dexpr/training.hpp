#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dexpr/frameselect.hpp"
#include "dexpr/network.hpp"
#include "json.hpp"

namespace dexpr {

/// Mini-batch SGD with momentum, L2 weight decay on weights (not biases), and
/// step learning-rate decay.
struct TrainConfig {
  double learning_rate = 0.001;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  /// lr *= lr_step_factor every lr_step_interval epochs (0 disables decay).
  double lr_step_factor = 0.1;
  std::size_t lr_step_interval = 10;
  std::uint64_t seed = 1;
  /// Worker threads for per-sample gradients within a batch; results do not
  /// depend on the thread count.
  std::size_t threads = 1;

  void validate() const;
  double learning_rate_at(std::size_t epoch) const;

  bool operator==(const TrainConfig&) const = default;
};

nlohmann::json to_json(const TrainConfig& config);
/// Missing keys keep the values already in `base`; unknown keys are rejected.
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double loss = 0.0;      // mean cross-entropy over the epoch
  double accuracy = 0.0;  // training accuracy of the forward passes in the epoch
};

struct TrainResult {
  Parameters<float> params;
  std::vector<EpochRecord> curve;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Trains from init_parameters(graph, config.seed) on `indices` (all samples
/// when empty). Fully deterministic for a given config. Throws DivergenceError
/// on a non-finite batch loss.
TrainResult train(const NetworkGraph& graph, const LabeledDataset& dataset, const TrainConfig& config,
                  std::span<const std::size_t> indices = {}, const EpochCallback& on_epoch = {});

/// Same, starting from the given parameters.
TrainResult train_from(const NetworkGraph& graph, Parameters<float> params, const LabeledDataset& dataset,
                       const TrainConfig& config, std::span<const std::size_t> indices = {},
                       const EpochCallback& on_epoch = {});

/// -log p[target] for a probability vector (clamped away from log 0). Prefer
/// the logit form in layers.hpp, which is exact for saturated outputs.
double cross_entropy_from_probabilities(std::span<const double> probabilities, std::size_t target);

// --- metrics ------------------------------------------------------------------

/// Rows are true classes, columns predicted classes.
class ConfusionMatrix {
 public:
  ConfusionMatrix() = default;
  explicit ConfusionMatrix(std::vector<std::string> class_names);

  void add(std::size_t truth, std::size_t predicted, std::size_t count = 1);
  std::size_t count(std::size_t truth, std::size_t predicted) const { return counts_[truth * size() + predicted]; }
  std::size_t size() const { return names_.size(); }
  const std::vector<std::string>& class_names() const { return names_; }

  std::size_t total() const;
  std::size_t trace() const;
  std::size_t row_sum(std::size_t truth) const;
  /// trace / total (0 for an empty matrix).
  double accuracy() const;
  /// Each row divided by its sum: per-true-class rates; empty rows stay 0.
  std::vector<std::vector<double>> row_normalized() const;

  ConfusionMatrix& operator+=(const ConfusionMatrix& other);
  bool operator==(const ConfusionMatrix&) const = default;

 private:
  std::vector<std::string> names_;
  std::vector<std::size_t> counts_;
};

struct Prediction {
  std::size_t index = 0;  // sample index in the dataset
  std::string source_id;
  std::size_t truth = 0;
  std::size_t predicted = 0;
  std::vector<double> probabilities;
};

struct Evaluation {
  double accuracy = 0.0;
  ConfusionMatrix confusion;
  std::vector<Prediction> predictions;
};

using ProbabilityModel = std::function<std::vector<double>(const Tensor&)>;

/// Evaluates any probability model on `indices` (all samples when empty).
Evaluation evaluate_model(const ProbabilityModel& model, const LabeledDataset& dataset,
                          std::span<const std::size_t> indices = {});

/// Network evaluation; the dataset class count must match the classifier.
Evaluation evaluate(const NetworkGraph& graph, const Parameters<float>& params, const LabeledDataset& dataset,
                    std::span<const std::size_t> indices = {}, std::size_t threads = 1);

// --- cross-validation ---------------------------------------------------------

class FoldPlan {
 public:
  FoldPlan(std::size_t k, std::vector<std::size_t> assignments);

  std::size_t k() const { return k_; }
  std::size_t size() const { return assignments_.size(); }
  const std::vector<std::size_t>& assignments() const { return assignments_; }

  std::vector<std::size_t> test_indices(std::size_t fold) const;
  std::vector<std::size_t> train_indices(std::size_t fold) const;
  std::vector<std::size_t> fold_sizes() const;

  bool operator==(const FoldPlan&) const = default;

 private:
  std::size_t k_;
  std::vector<std::size_t> assignments_;
};

/// Seeded shuffle of the sample indices, then round-robin assignment to folds.
FoldPlan make_folds(std::size_t n_samples, std::size_t k, std::uint64_t seed);

/// Whole groups (e.g. subjects) per fold: seeded group order, each group goes
/// to the currently smallest fold. Fold sizes may then differ by more than 1.
FoldPlan make_group_folds(std::span<const std::string> groups, std::size_t k, std::uint64_t seed);

struct FoldReport {
  std::size_t fold = 0;
  std::size_t train_size = 0;
  std::size_t test_size = 0;
  double accuracy = 0.0;
  ConfusionMatrix confusion;
  std::vector<EpochRecord> curve;
};

struct CrossValidationResult {
  std::vector<FoldReport> folds;
  double mean_accuracy = 0.0;
  /// Element-wise sum of the fold matrices; row_normalized() gives the averaged rates.
  ConfusionMatrix confusion;
};

struct FoldModel {
  ProbabilityModel model;
  std::vector<EpochRecord> curve;
};

/// Fits a model on the training indices of one fold.
using FoldTrainer = std::function<FoldModel(std::size_t fold, std::span<const std::size_t> train_indices)>;

/// Runs every fold: train on the other folds, evaluate on this one. Asserts
/// train and test sets are disjoint and cover the dataset. Folds run on up to
/// `parallel_folds` threads; results are identical for any thread count.
CrossValidationResult cross_validate(const LabeledDataset& dataset, const FoldPlan& plan, const FoldTrainer& trainer,
                                     std::size_t parallel_folds = 1);

struct CrossValidationOptions {
  std::size_t k = 10;
  bool group_by_subject = false;
  std::size_t parallel_folds = 1;
  /// Called after every epoch of every fold.
  std::function<void(std::size_t fold, const EpochRecord&)> on_epoch;
};

/// Network cross-validation; the fold plan is seeded with config.seed.
CrossValidationResult cross_validate(const NetworkGraph& graph, const LabeledDataset& dataset,
                                     const TrainConfig& config, const CrossValidationOptions& options);

// --- reports ------------------------------------------------------------------

struct MetricRow {
  std::size_t fold = 0;
  EpochRecord record;
};

/// "fold,epoch,loss,accuracy"
void write_metrics_csv(std::ostream& out, std::span<const MetricRow> rows);
/// Header row and column of class names; cells are counts or per-true-class percentages.
void write_confusion_csv(std::ostream& out, const ConfusionMatrix& matrix, bool percentages);
/// "fold,train_size,test_size,accuracy", one row per fold.
void write_fold_csv(std::ostream& out, const CrossValidationResult& result);
/// Whitespace-separated "epoch loss accuracy" table.
void write_loss_table(std::ostream& out, std::span<const EpochRecord> curve);

}  // namespace dexpr
