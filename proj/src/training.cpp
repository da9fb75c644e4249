#include "dexpr/training.hpp"

#include <algorithm>
#include <cfloat>
#include <cmath>
#include <cstdio>
#include <map>
#include <memory>
#include <numeric>
#include <ostream>

#include "dexpr/random.hpp"
#include "parallel.hpp"

namespace dexpr {

using nlohmann::json;

// --- configuration --------------------------------------------------------------

void TrainConfig::validate() const {
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate must be >= 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must be in [0, 1)");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
  if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
  if (!(lr_step_factor > 0.0)) throw ConfigError("lr_step_factor must be > 0");
}

double TrainConfig::learning_rate_at(std::size_t epoch) const {
  if (lr_step_interval == 0) return learning_rate;
  return learning_rate * std::pow(lr_step_factor, static_cast<double>(epoch / lr_step_interval));
}

json to_json(const TrainConfig& c) {
  return {{"learning_rate", c.learning_rate}, {"momentum", c.momentum},
          {"weight_decay", c.weight_decay},   {"epochs", c.epochs},
          {"batch_size", c.batch_size},       {"lr_step_factor", c.lr_step_factor},
          {"lr_step_interval", c.lr_step_interval}, {"seed", c.seed},
          {"threads", c.threads}};
}

TrainConfig train_config_from_json(const json& j, TrainConfig c) {
  if (!j.is_object()) throw ConfigError("training configuration must be a JSON object");
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "learning_rate") c.learning_rate = value.get<double>();
      else if (key == "momentum") c.momentum = value.get<double>();
      else if (key == "weight_decay") c.weight_decay = value.get<double>();
      else if (key == "epochs") c.epochs = value.get<std::size_t>();
      else if (key == "batch_size") c.batch_size = value.get<std::size_t>();
      else if (key == "lr_step_factor") c.lr_step_factor = value.get<double>();
      else if (key == "lr_step_interval") c.lr_step_interval = value.get<std::size_t>();
      else if (key == "seed") c.seed = value.get<std::uint64_t>();
      else if (key == "threads") c.threads = value.get<std::size_t>();
      else throw ConfigError("unknown configuration key '" + key + "'");
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid configuration value: ") + e.what());
  }
  c.validate();
  return c;
}

// --- training -------------------------------------------------------------------

namespace {

std::vector<std::size_t> resolve_indices(const LabeledDataset& dataset, std::span<const std::size_t> indices) {
  std::vector<std::size_t> out;
  if (indices.empty()) {
    out.resize(dataset.size());
    std::iota(out.begin(), out.end(), std::size_t{0});
  } else {
    out.assign(indices.begin(), indices.end());
    for (std::size_t i : out) {
      if (i >= dataset.size()) throw DatasetError("sample index " + std::to_string(i) + " out of range");
    }
  }
  if (out.empty()) throw DatasetError("empty dataset");
  return out;
}

void require_matching_classes(const NetworkGraph& graph, const LabeledDataset& dataset) {
  dataset.validate();
  if (dataset.num_classes() != graph.num_classes()) {
    throw DatasetError("dataset has " + std::to_string(dataset.num_classes()) + " classes but the network expects " +
                       std::to_string(graph.num_classes()));
  }
}

}  // namespace

TrainResult train(const NetworkGraph& graph, const LabeledDataset& dataset, const TrainConfig& config,
                  std::span<const std::size_t> indices, const EpochCallback& on_epoch) {
  return train_from(graph, init_parameters(graph, config.seed), dataset, config, indices, on_epoch);
}

TrainResult train_from(const NetworkGraph& graph, Parameters<float> params, const LabeledDataset& dataset,
                       const TrainConfig& config, std::span<const std::size_t> indices,
                       const EpochCallback& on_epoch) {
  config.validate();
  require_matching_classes(graph, dataset);
  const std::vector<std::size_t> order = resolve_indices(dataset, indices);

  TrainResult result;
  Parameters<float> velocity = params.zeros_like();
  const auto momentum = static_cast<float>(config.momentum);
  const auto decay = static_cast<float>(config.weight_decay);

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const auto lr = static_cast<float>(config.learning_rate_at(epoch));
    std::vector<std::size_t> perm = order;
    Rng(derive_seed(config.seed, 0x5eed0000 + epoch)).shuffle(perm);

    double loss_sum = 0.0;
    std::size_t correct = 0;
    std::size_t batch_index = 0;
    for (std::size_t start = 0; start < perm.size(); start += config.batch_size, ++batch_index) {
      const std::size_t count = std::min(config.batch_size, perm.size() - start);
      std::vector<BackwardResult<float>> per_sample(count);
      detail::parallel_for(count, config.threads, [&](std::size_t i) {
        const Sample& s = dataset.samples[perm[start + i]];
        per_sample[i] = backward(graph, params, s.image, s.label);
      });

      // Summed in sample order so the result does not depend on threading.
      Parameters<float> grad = params.zeros_like();
      double batch_loss = 0.0;
      for (std::size_t i = 0; i < count; ++i) {
        grad += per_sample[i].gradients;
        batch_loss += per_sample[i].loss;
        const std::size_t label = dataset.samples[perm[start + i]].label;
        if (argmax_class<float>(per_sample[i].probabilities.data()) == label) ++correct;
      }
      per_sample.clear();
      if (!std::isfinite(batch_loss)) throw DivergenceError(epoch + 1, batch_index);
      loss_sum += batch_loss;

      const float inv_count = 1.0f / static_cast<float>(count);
      for (auto& [key, w] : params.tensors()) {
        const bool is_weight = key.ends_with(".weights");
        auto g = grad.get(key).data();
        auto v = velocity.get(key).data();
        auto values = w.data();
        for (std::size_t i = 0; i < values.size(); ++i) {
          float step = g[i] * inv_count;
          if (is_weight) step += decay * values[i];
          v[i] = momentum * v[i] + lr * step;
          values[i] -= v[i];
        }
      }
    }
    EpochRecord record{epoch + 1, loss_sum / static_cast<double>(perm.size()),
                       static_cast<double>(correct) / static_cast<double>(perm.size())};
    result.curve.push_back(record);
    if (on_epoch) on_epoch(record);
  }
  result.params = std::move(params);
  return result;
}

double cross_entropy_from_probabilities(std::span<const double> probabilities, std::size_t target) {
  if (target >= probabilities.size()) throw DatasetError("target class out of range");
  return -std::log(std::max(probabilities[target], DBL_MIN));
}

// --- metrics --------------------------------------------------------------------

ConfusionMatrix::ConfusionMatrix(std::vector<std::string> class_names)
    : names_(std::move(class_names)), counts_(names_.size() * names_.size(), 0) {}

void ConfusionMatrix::add(std::size_t truth, std::size_t predicted, std::size_t count) {
  if (truth >= size() || predicted >= size()) throw DatasetError("class index out of range in confusion matrix");
  counts_[truth * size() + predicted] += count;
}

std::size_t ConfusionMatrix::total() const { return std::accumulate(counts_.begin(), counts_.end(), std::size_t{0}); }

std::size_t ConfusionMatrix::trace() const {
  std::size_t t = 0;
  for (std::size_t i = 0; i < size(); ++i) t += count(i, i);
  return t;
}

std::size_t ConfusionMatrix::row_sum(std::size_t truth) const {
  std::size_t s = 0;
  for (std::size_t p = 0; p < size(); ++p) s += count(truth, p);
  return s;
}

double ConfusionMatrix::accuracy() const {
  const std::size_t n = total();
  return n == 0 ? 0.0 : static_cast<double>(trace()) / static_cast<double>(n);
}

std::vector<std::vector<double>> ConfusionMatrix::row_normalized() const {
  std::vector<std::vector<double>> rates(size(), std::vector<double>(size(), 0.0));
  for (std::size_t t = 0; t < size(); ++t) {
    const std::size_t row = row_sum(t);
    if (row == 0) continue;
    for (std::size_t p = 0; p < size(); ++p) {
      rates[t][p] = static_cast<double>(count(t, p)) / static_cast<double>(row);
    }
  }
  return rates;
}

ConfusionMatrix& ConfusionMatrix::operator+=(const ConfusionMatrix& other) {
  if (names_.empty() && counts_.empty()) {
    *this = other;
    return *this;
  }
  if (other.size() != size()) throw DatasetError("cannot add confusion matrices of different sizes");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
  return *this;
}

Evaluation evaluate_model(const ProbabilityModel& model, const LabeledDataset& dataset,
                          std::span<const std::size_t> indices) {
  dataset.validate();
  const std::vector<std::size_t> order = resolve_indices(dataset, indices);
  Evaluation eval;
  eval.confusion = ConfusionMatrix(dataset.class_names);
  for (std::size_t i : order) {
    const Sample& s = dataset.samples[i];
    Prediction p{i, s.source_id, s.label, 0, model(s.image)};
    if (p.probabilities.size() != dataset.num_classes()) {
      throw DatasetError("model produced " + std::to_string(p.probabilities.size()) + " probabilities for " +
                         std::to_string(dataset.num_classes()) + " classes");
    }
    p.predicted = argmax_class<double>(p.probabilities);
    eval.confusion.add(p.truth, p.predicted);
    eval.predictions.push_back(std::move(p));
  }
  eval.accuracy = eval.confusion.accuracy();
  return eval;
}

Evaluation evaluate(const NetworkGraph& graph, const Parameters<float>& params, const LabeledDataset& dataset,
                    std::span<const std::size_t> indices, std::size_t threads) {
  require_matching_classes(graph, dataset);
  const std::vector<std::size_t> order = resolve_indices(dataset, indices);
  std::vector<std::vector<double>> probs(order.size());
  detail::parallel_for(order.size(), threads, [&](std::size_t i) {
    const auto result = forward(graph, params, dataset.samples[order[i]].image);
    probs[i].assign(result.probabilities.data().begin(), result.probabilities.data().end());
  });
  std::size_t cursor = 0;
  return evaluate_model([&](const Tensor&) { return std::move(probs[cursor++]); }, dataset, order);
}

// --- folds ----------------------------------------------------------------------

FoldPlan::FoldPlan(std::size_t k, std::vector<std::size_t> assignments) : k_(k), assignments_(std::move(assignments)) {
  if (k_ < 2) throw ConfigError("cross-validation needs k >= 2");
  for (std::size_t a : assignments_) {
    if (a >= k_) throw ConfigError("fold assignment out of range");
  }
}

std::vector<std::size_t> FoldPlan::test_indices(std::size_t fold) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < assignments_.size(); ++i) {
    if (assignments_[i] == fold) out.push_back(i);
  }
  return out;
}

std::vector<std::size_t> FoldPlan::train_indices(std::size_t fold) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < assignments_.size(); ++i) {
    if (assignments_[i] != fold) out.push_back(i);
  }
  return out;
}

std::vector<std::size_t> FoldPlan::fold_sizes() const {
  std::vector<std::size_t> sizes(k_, 0);
  for (std::size_t a : assignments_) ++sizes[a];
  return sizes;
}

FoldPlan make_folds(std::size_t n_samples, std::size_t k, std::uint64_t seed) {
  if (k < 2) throw ConfigError("cross-validation needs k >= 2");
  if (n_samples < k) {
    throw DatasetError("too few samples: " + std::to_string(n_samples) + " samples cannot fill " + std::to_string(k) +
                       " folds");
  }
  std::vector<std::size_t> perm(n_samples);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng(seed).shuffle(perm);
  std::vector<std::size_t> assignments(n_samples);
  for (std::size_t p = 0; p < n_samples; ++p) assignments[perm[p]] = p % k;
  return FoldPlan(k, std::move(assignments));
}

FoldPlan make_group_folds(std::span<const std::string> groups, std::size_t k, std::uint64_t seed) {
  if (k < 2) throw ConfigError("cross-validation needs k >= 2");
  std::map<std::string, std::vector<std::size_t>> members;
  for (std::size_t i = 0; i < groups.size(); ++i) members[groups[i]].push_back(i);
  if (members.size() < k) {
    throw DatasetError("too few groups: " + std::to_string(members.size()) + " groups cannot fill " +
                       std::to_string(k) + " folds");
  }
  std::vector<const std::vector<std::size_t>*> order;
  for (const auto& [name, idx] : members) order.push_back(&idx);
  Rng(seed).shuffle(order);
  std::vector<std::size_t> sizes(k, 0);
  std::vector<std::size_t> assignments(groups.size());
  for (const auto* idx : order) {
    const std::size_t fold = static_cast<std::size_t>(std::min_element(sizes.begin(), sizes.end()) - sizes.begin());
    for (std::size_t i : *idx) assignments[i] = fold;
    sizes[fold] += idx->size();
  }
  return FoldPlan(k, std::move(assignments));
}

CrossValidationResult cross_validate(const LabeledDataset& dataset, const FoldPlan& plan, const FoldTrainer& trainer,
                                     std::size_t parallel_folds) {
  if (plan.size() != dataset.size()) throw DatasetError("fold plan does not match the dataset size");
  CrossValidationResult result;
  result.folds.resize(plan.k());
  detail::parallel_for(plan.k(), parallel_folds, [&](std::size_t fold) {
    const std::vector<std::size_t> train_idx = plan.train_indices(fold);
    const std::vector<std::size_t> test_idx = plan.test_indices(fold);
    std::vector<int> seen(dataset.size(), 0);
    for (std::size_t i : train_idx) ++seen[i];
    for (std::size_t i : test_idx) ++seen[i];
    if (std::any_of(seen.begin(), seen.end(), [](int c) { return c != 1; })) {
      throw Error("fold " + std::to_string(fold) + ": train and test sets overlap or miss samples");
    }
    if (test_idx.empty()) throw DatasetError("fold " + std::to_string(fold) + " is empty");
    FoldModel fitted;
    try {
      fitted = trainer(fold, train_idx);
    } catch (const DivergenceError& e) {
      throw e.with_fold(fold);
    }
    Evaluation eval = evaluate_model(fitted.model, dataset, test_idx);
    result.folds[fold] = FoldReport{fold, train_idx.size(), test_idx.size(), eval.accuracy,
                                    std::move(eval.confusion), std::move(fitted.curve)};
  });
  result.confusion = ConfusionMatrix(dataset.class_names);
  double acc = 0.0;
  for (const FoldReport& f : result.folds) {
    result.confusion += f.confusion;
    acc += f.accuracy;
  }
  result.mean_accuracy = acc / static_cast<double>(plan.k());
  return result;
}

CrossValidationResult cross_validate(const NetworkGraph& graph, const LabeledDataset& dataset,
                                     const TrainConfig& config, const CrossValidationOptions& options) {
  require_matching_classes(graph, dataset);
  const FoldPlan plan = options.group_by_subject
                            ? make_group_folds(dataset.subject_keys(), options.k, config.seed)
                            : make_folds(dataset.size(), options.k, config.seed);
  TrainConfig fold_config = config;
  if (options.parallel_folds > 1) fold_config.threads = 1;
  auto trainer = [&](std::size_t fold, std::span<const std::size_t> train_idx) {
    EpochCallback hook;
    if (options.on_epoch) hook = [&, fold](const EpochRecord& r) { options.on_epoch(fold, r); };
    auto trained = std::make_shared<TrainResult>(train(graph, dataset, fold_config, train_idx, hook));
    ProbabilityModel model = [&graph, trained](const Tensor& image) {
      const auto out = forward(graph, trained->params, image);
      return std::vector<double>(out.probabilities.data().begin(), out.probabilities.data().end());
    };
    return FoldModel{std::move(model), trained->curve};
  };
  return cross_validate(dataset, plan, trainer, options.parallel_folds);
}

// --- reports --------------------------------------------------------------------

namespace {

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string quoted = "\"";
  for (char c : s) {
    if (c == '"') quoted += '"';
    quoted += c;
  }
  return quoted + "\"";
}

std::string num(double v, const char* format = "%.9g") {
  char buffer[64];
  std::snprintf(buffer, sizeof(buffer), format, v);
  return buffer;
}

}  // namespace

void write_metrics_csv(std::ostream& out, std::span<const MetricRow> rows) {
  out << "fold,epoch,loss,accuracy\n";
  for (const MetricRow& r : rows) {
    out << r.fold << ',' << r.record.epoch << ',' << num(r.record.loss) << ',' << num(r.record.accuracy) << '\n';
  }
}

void write_confusion_csv(std::ostream& out, const ConfusionMatrix& matrix, bool percentages) {
  out << (percentages ? "true\\predicted (%)" : "true\\predicted");
  for (const auto& name : matrix.class_names()) out << ',' << csv_field(name);
  out << '\n';
  const auto rates = matrix.row_normalized();
  for (std::size_t t = 0; t < matrix.size(); ++t) {
    out << csv_field(matrix.class_names()[t]);
    for (std::size_t p = 0; p < matrix.size(); ++p) {
      out << ',';
      if (percentages) {
        out << num(100.0 * rates[t][p], "%.2f");
      } else {
        out << matrix.count(t, p);
      }
    }
    out << '\n';
  }
}

void write_fold_csv(std::ostream& out, const CrossValidationResult& result) {
  out << "fold,train_size,test_size,accuracy\n";
  for (const FoldReport& f : result.folds) {
    out << f.fold << ',' << f.train_size << ',' << f.test_size << ',' << num(f.accuracy) << '\n';
  }
}

void write_loss_table(std::ostream& out, std::span<const EpochRecord> curve) {
  out << "# epoch loss accuracy\n";
  for (const EpochRecord& r : curve) out << r.epoch << ' ' << num(r.loss) << ' ' << num(r.accuracy) << '\n';
}

}  // namespace dexpr
