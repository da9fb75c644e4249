// Acceptance suite: one PASS/FAIL line per criterion. Exit status 0 only if all pass.
//
//   acceptance            run every criterion
//   acceptance 2 7        run only the listed criteria

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "cli.hpp"
#include "dexpr/checkpoint.hpp"
#include "dexpr/gradcheck.hpp"
#include "dexpr/layers.hpp"
#include "dexpr/random.hpp"
#include "dexpr/synthetic.hpp"
#include "dexpr/training.hpp"
#include "frame_replay.hpp"

using namespace dexpr;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail += (detail.empty() ? "" : "; ") + what;
    }
  }
  void note(const std::string& what) { detail += (detail.empty() ? "" : "; ") + what; }
};

std::string fmt(const char* f, double v) {
  char buffer[64];
  std::snprintf(buffer, sizeof(buffer), f, v);
  return buffer;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int run_cli(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  if (code != 0) std::cerr << "  cli failed (" << code << "): " << err.str();
  return code;
}

class ScratchDir {
 public:
  ScratchDir() : path_(fs::temp_directory_path() / ("dexpr_acceptance_" + std::to_string(::getpid()))) {
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~ScratchDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  fs::path operator/(const std::string& s) const { return path_ / s; }

 private:
  fs::path path_;
};

// --- 1 -----------------------------------------------------------------------------

Outcome shape_conformance() {
  Outcome o;
  const std::vector<std::pair<std::string, Shape>> rows = {
      {"Data", Shape{1, 224, 224}},          {"Convolution 1", Shape{64, 112, 112}},
      {"Pooling 1", Shape{64, 56, 56}},      {"LRN 1", Shape{64, 56, 56}},
      {"Convolution 2a", Shape{96, 56, 56}}, {"Convolution 2b", Shape{208, 56, 56}},
      {"Pooling 2a", Shape{64, 56, 56}},     {"Convolution 2c", Shape{64, 56, 56}},
      {"Concat 2", Shape{272, 56, 56}},      {"Pooling 2b", Shape{272, 28, 28}},
      {"Convolution 3a", Shape{96, 28, 28}}, {"Convolution 3b", Shape{208, 28, 28}},
      {"Pooling 3a", Shape{272, 28, 28}},    {"Convolution 3c", Shape{64, 28, 28}},
      {"Concat 3", Shape{272, 28, 28}},      {"Pooling 3b", Shape{272, 14, 14}},
      {"Classifier", Shape{7}},
  };
  const auto start = std::chrono::steady_clock::now();
  const ShapeTable table = infer_shapes(build_dexpression(7));
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  std::map<std::string, Shape> got(table.begin(), table.end());
  for (const auto& [name, shape] : rows) {
    const auto it = got.find(name);
    o.require(it != got.end() && it->second == shape,
              name + " is " + (it == got.end() ? std::string("missing") : it->second.to_string()));
  }
  o.require(seconds < 1.0, "took " + fmt("%.3f", seconds) + " s");
  o.note(std::to_string(rows.size()) + " rows checked in " + fmt("%.3f", seconds) + " s");
  return o;
}

// --- 2 -----------------------------------------------------------------------------

Outcome gradient_correctness() {
  Outcome o;
  const auto start = std::chrono::steady_clock::now();
  double worst = 0.0;
  for (const std::string& layer : checkable_layers()) {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
      GradCheckOptions options;
      options.epsilon = 1e-3;
      options.tolerance = 1e-4;
      const GradCheckReport r = check_layer(layer, seed, options);
      worst = std::max(worst, r.max_relative_error);
      o.require(r.passed && r.checked > 0, r.summary());
    }
  }
  for (std::size_t classes : {2u, 7u}) {
    GradCheckOptions options;
    options.epsilon = 1e-3;
    options.tolerance = 1e-3;
    const GradCheckReport r = check_network(build_dexpression(small_dexpression_options(classes)), 11, options);
    o.require(r.passed, r.summary());
    o.note("network (" + std::to_string(classes) + " classes) max_rel_err=" + fmt("%.2e", r.max_relative_error) +
           " over " + std::to_string(r.checked) + " parameters");
  }
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  o.require(seconds < 120.0, "took " + fmt("%.1f", seconds) + " s");
  o.note("layers max_rel_err=" + fmt("%.2e", worst) + ", " + fmt("%.1f", seconds) + " s");
  return o;
}

// --- 3 -----------------------------------------------------------------------------

Outcome softmax_identities() {
  Outcome o;
  Rng rng(3);
  double worst_sum = 0.0;
  bool shift_ok = true;
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<double> x(7);
    for (double& v : x) v = rng.uniform(-50.0, 50.0);
    const auto p = softmax<double>(x);
    double s = 0.0;
    for (double v : p) s += v;
    worst_sum = std::max(worst_sum, std::abs(s - 1.0));

    // Dyadic logits and shifts keep x + c exact, so the shifted softmax must match bit for bit.
    std::vector<float> xf(7), shifted(7);
    const float c = static_cast<float>(rng.below(64)) - 32.0f;
    for (std::size_t i = 0; i < 7; ++i) {
      xf[i] = static_cast<float>(rng.below(256)) / 8.0f - 16.0f;
      shifted[i] = xf[i] + c;
    }
    const auto a = softmax<float>(xf), b = softmax<float>(shifted);
    shift_ok = shift_ok && std::equal(a.begin(), a.end(), b.begin(),
                                      [](float u, float v) { return std::bit_cast<std::uint32_t>(u) ==
                                                                    std::bit_cast<std::uint32_t>(v); });
  }
  const double loss = cross_entropy<double>(std::vector<double>(7, 0.25), 4);
  o.require(worst_sum <= 1e-6, "sum deviates by " + fmt("%.2e", worst_sum));
  o.require(shift_ok, "shift changed a bit");
  o.require(std::abs(loss - std::log(7.0)) <= 1e-9, "uniform loss " + fmt("%.12f", loss));
  o.note("max |sum-1|=" + fmt("%.1e", worst_sum) + ", |loss-ln7|=" + fmt("%.1e", std::abs(loss - std::log(7.0))));
  return o;
}

// --- 4 -----------------------------------------------------------------------------

// Left-bright vs right-bright 16x16 images.
LabeledDataset toy_set() {
  LabeledDataset d;
  d.class_names = {"left", "right"};
  Rng rng(1);
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t label = 0; label < 2; ++label) {
      Tensor img(Shape{1, 16, 16});
      for (std::size_t h = 0; h < 16; ++h) {
        for (std::size_t w = 0; w < 16; ++w) {
          img.at(0, h, w) = static_cast<float>(((w < 8) == (label == 0) ? 0.8 : 0.2) + rng.uniform(-0.1, 0.1));
        }
      }
      d.samples.push_back({std::move(img), label, "toy_" + std::to_string(2 * i + label)});
    }
  }
  return d;
}

std::size_t first_perfect_epoch(const std::vector<EpochRecord>& curve) {
  for (const EpochRecord& e : curve) {
    if (e.accuracy == 1.0) return e.epoch;
  }
  return 0;
}

Outcome overfit_capacity() {
  Outcome o;
  const auto start = std::chrono::steady_clock::now();
  {
    const LabeledDataset d = toy_set();
    const NetworkGraph g = build_dexpression(small_dexpression_options(2));
    TrainConfig c;
    c.learning_rate = 0.01;
    c.momentum = 0.9;
    c.weight_decay = 0.0;
    c.batch_size = 4;
    c.lr_step_interval = 0;
    c.epochs = 200;
    c.seed = 3;
    const TrainResult r = train(g, d, c);
    const double acc = evaluate(g, r.params, d).accuracy;
    o.require(acc == 1.0, "toy accuracy " + fmt("%.3f", acc));
    double best = r.curve.front().loss, bump = 1.0;
    for (const EpochRecord& e : r.curve) {
      bump = std::max(bump, e.loss / best);
      best = std::min(best, e.loss);
    }
    o.require(bump <= 1.05, "toy loss rose " + fmt("%.1f", 100 * (bump - 1)) + "% above its best");
    o.note("toy: 100% from epoch " + std::to_string(first_perfect_epoch(r.curve)) + ", final loss " +
           fmt("%.2e", r.curve.back().loss));
  }
  {
    SyntheticOptions so;
    so.per_class = 2;
    so.seed = 21;
    LabeledDataset d = make_synthetic_dataset(so);
    d.samples.resize(8);
    const NetworkGraph g = build_dexpression(7);
    TrainConfig c;
    c.learning_rate = 0.005;
    c.momentum = 0.9;
    c.weight_decay = 5e-4;
    c.batch_size = 8;
    c.lr_step_interval = 0;
    c.epochs = 50;
    c.seed = 1;
    const TrainResult r = train(g, d, c);
    const double acc = evaluate(g, r.params, d).accuracy;
    o.require(acc == 1.0, "full-size accuracy " + fmt("%.3f", acc));
    o.note("full-size: 100% from epoch " + std::to_string(first_perfect_epoch(r.curve)) + ", final loss " +
           fmt("%.2e", r.curve.back().loss));
  }
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  o.require(seconds < 600.0, "took " + fmt("%.0f", seconds) + " s");
  o.note(fmt("%.0f", seconds) + " s");
  return o;
}

// --- 5 and 9 -----------------------------------------------------------------------

// Hyperparameters for the 700-image synthetic cross-validation.
TrainConfig synthetic_cv_config() {
  TrainConfig c;
  c.learning_rate = 0.01;
  c.momentum = 0.9;
  c.weight_decay = 5e-4;
  c.batch_size = 16;
  c.epochs = 5;
  c.lr_step_interval = 0;
  c.seed = 1;
  return c;
}

struct PooledResult {
  CrossValidationResult cv;
  std::vector<std::size_t> class_counts;
};
const PooledResult* g_cv_result = nullptr;

std::vector<std::size_t> class_counts(const LabeledDataset& d) {
  std::vector<std::size_t> counts(d.num_classes(), 0);
  for (const Sample& s : d.samples) ++counts[s.label];
  return counts;
}

Outcome synthetic_classification() {
  Outcome o;
  const auto start = std::chrono::steady_clock::now();
  SyntheticOptions so;
  so.per_class = 100;
  so.image_size = 224;
  const LabeledDataset d = make_synthetic_dataset(so);
  o.require(d.size() == 700, "dataset has " + std::to_string(d.size()) + " images");
  const TrainConfig c = synthetic_cv_config();
  CrossValidationOptions cv;
  cv.k = 10;
  cv.on_epoch = [](std::size_t fold, const EpochRecord& e) {
    std::cerr << "  [5] fold " << fold << " epoch " << e.epoch << " loss " << e.loss << " acc " << e.accuracy << '\n';
  };
  static PooledResult pooled;
  pooled.cv = cross_validate(build_dexpression(7), d, c, cv);
  pooled.class_counts = class_counts(d);
  g_cv_result = &pooled;
  const CrossValidationResult& result = pooled.cv;
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  std::string folds;
  for (const FoldReport& f : result.folds) folds += (folds.empty() ? "" : " ") + fmt("%.3f", f.accuracy);
  o.require(result.folds.size() == 10, "expected 10 folds");
  o.require(result.mean_accuracy >= 0.95, "mean accuracy " + fmt("%.4f", result.mean_accuracy) + " < 0.95");
  o.require(seconds < 7200.0, "took " + fmt("%.0f", seconds) + " s");
  o.note("mean accuracy " + fmt("%.4f", result.mean_accuracy) + " [" + folds + "], " + fmt("%.0f", seconds) + " s");
  return o;
}

Outcome confusion_semantics() {
  Outcome o;
  if (g_cv_result == nullptr) {
    SyntheticOptions so;
    so.per_class = 10;
    so.image_size = 32;
    const LabeledDataset d = make_synthetic_dataset(so);
    static PooledResult pooled;
    pooled.class_counts = class_counts(d);
    pooled.cv = cross_validate(d, make_folds(d.size(), 10, 1), [](std::size_t, std::span<const std::size_t>) {
      FoldModel m;
      m.model = [](const Tensor& x) {
        std::vector<double> p(7, 0.0);
        p[static_cast<std::size_t>(x[0] * 1000.0f) % 7] = 1.0;
        return p;
      };
      return m;
    });
    g_cv_result = &pooled;
    o.note("fixed-rule classifier");
  }
  const CrossValidationResult& r = g_cv_result->cv;
  const ConfusionMatrix& m = r.confusion;

  o.require(std::abs(static_cast<double>(m.trace()) / static_cast<double>(m.total()) - m.accuracy()) < 1e-15,
            "trace/total differs from accuracy");
  std::size_t fold_correct = 0;
  for (const FoldReport& f : r.folds) {
    o.require(std::abs(static_cast<double>(f.confusion.trace()) / f.confusion.total() - f.accuracy) < 1e-12,
              "fold " + std::to_string(f.fold) + " accuracy disagrees with its matrix");
    fold_correct += f.confusion.trace();
  }
  o.require(fold_correct == m.trace(), "pooled trace differs from the sum of fold traces");
  for (std::size_t t = 0; t < m.size(); ++t) {
    o.require(m.row_sum(t) == g_cv_result->class_counts[t],
              "row " + m.class_names()[t] + " sums to " + std::to_string(m.row_sum(t)));
  }

  std::ostringstream report;
  write_confusion_csv(report, m, true);
  std::istringstream lines(report.str());
  std::string line;
  std::getline(lines, line);
  o.require(line.rfind("true\\predicted (%),anger,contempt,disgust,fear,happiness,sadness,surprise", 0) == 0,
            "header is '" + line + "'");
  std::size_t rows = 0;
  while (std::getline(lines, line)) {
    std::istringstream cells(line);
    std::string cell;
    std::getline(cells, cell, ',');
    double sum = 0.0;
    while (std::getline(cells, cell, ',')) sum += std::stod(cell);
    o.require(std::abs(sum - 100.0) <= 0.01 * m.size(), "row '" + line + "' sums to " + fmt("%.2f", sum));
    ++rows;
  }
  o.require(rows == m.size(), "report has " + std::to_string(rows) + " rows");
  o.note("accuracy " + fmt("%.4f", m.accuracy()) + ", " + std::to_string(m.total()) + " predictions");
  return o;
}

// --- 6 -----------------------------------------------------------------------------

Outcome fold_hygiene() {
  Outcome o;
  Rng rng(6);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 2 + rng.below(2000);
    const std::size_t k = 2 + rng.below(std::min<std::size_t>(n - 1, 20));
    const FoldPlan plan = make_folds(n, k, rng.next());
    const auto sizes = plan.fold_sizes();
    const auto [lo, hi] = std::minmax_element(sizes.begin(), sizes.end());
    o.require(*hi - *lo <= 1, "fold sizes differ by " + std::to_string(*hi - *lo));
    std::vector<int> seen(n, 0);
    for (std::size_t f = 0; f < k; ++f) {
      const auto test = plan.test_indices(f);
      const auto train = plan.train_indices(f);
      const std::set<std::size_t> test_set(test.begin(), test.end());
      bool overlap = false;
      for (std::size_t i : train) overlap = overlap || test_set.contains(i);
      o.require(!overlap, "train/test overlap in fold " + std::to_string(f));
      o.require(test.size() + train.size() == n, "fold does not cover the dataset");
      for (std::size_t i : test) ++seen[i];
    }
    o.require(std::all_of(seen.begin(), seen.end(), [](int s) { return s == 1; }),
              "a sample is not tested exactly once");
    if (!o.pass) break;
  }
  const auto sizes = make_folds(5870, 10, 1).fold_sizes();
  o.require(std::all_of(sizes.begin(), sizes.end(), [](std::size_t s) { return s == 587; }), "5870/10 not 587");
  o.note("100 random plans, 5870 -> 10 x 587");
  return o;
}

// --- 7 -----------------------------------------------------------------------------

Outcome frame_selection(const ScratchDir& scratch) {
  Outcome o;
  Rng rng(7);
  std::size_t mismatches = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 20 + rng.below(181);
    std::vector<double> d(n);
    const bool quantized = trial % 3 == 0;
    for (double& v : d) v = quantized ? static_cast<double>(rng.below(5)) : rng.uniform();
    const std::size_t count = trial % 4 == 0 ? 1 + rng.below(n) : std::min<std::size_t>(20, n);
    if (select_representative_frames(d, count) != oracles::replay_selection(d, count).selected) ++mismatches;
  }
  o.require(mismatches == 0, std::to_string(mismatches) + " of 1000 vectors differ from the replay");

  const fs::path frames = scratch / "c7_frames";
  if (run_cli({"synth", "--kind", "frames", "--out", frames.string(), "--sessions", "3", "--frames", "30", "--size",
               "96", "--seed", "7"}) != 0 ||
      run_cli({"extract", "--frames", frames.string(), "--out", (scratch / "c7_out").string()}) != 0) {
    o.require(false, "extraction command failed");
    return o;
  }
  for (const auto& session : fs::directory_iterator(scratch / "c7_out")) {
    if (!session.is_directory()) continue;
    std::size_t images = 0;
    for (const auto& f : fs::directory_iterator(session.path())) images += f.path().extension() == ".png";
    o.require(images == 18, session.path().filename().string() + " has " + std::to_string(images) + " images");
  }
  o.note("1000 replays agree; 3 sessions x 18 images");
  return o;
}

// --- 8 -----------------------------------------------------------------------------

Outcome determinism(const ScratchDir& scratch) {
  Outcome o;
  const std::string data = (scratch / "c8_data").string();
  const std::string frames = (scratch / "c8_frames").string();
  o.require(run_cli({"synth", "--out", data, "--per-class", "3", "--size", "32", "--seed", "8"}) == 0, "synth");
  o.require(run_cli({"synth", "--kind", "frames", "--out", frames, "--sessions", "2", "--frames", "30", "--size",
                     "48"}) == 0,
            "synth frames");
  const std::vector<std::string> net = {"--input-size", "32", "--channel-divisor", "8", "--seed", "5"};
  auto runs = [&](const std::string& tag) {
    const fs::path base = scratch / ("c8_" + tag);
    auto with = [&](std::vector<std::string> a) {
      a.insert(a.end(), net.begin(), net.end());
      return a;
    };
    bool ok = run_cli(with({"train", "--data", data, "--epochs", "3", "--lr", "0.01", "--batch-size", "4", "--out",
                            (base / "train").string()})) == 0;
    ok = ok && run_cli(with({"crossval", "--data", data, "--k", "3", "--epochs", "2", "--batch-size", "4", "--out",
                             (base / "cv").string()})) == 0;
    ok = ok && run_cli({"evaluate", "--checkpoint", (base / "train/model.dxpr").string(), "--data", data, "--out",
                        (base / "eval").string()}) == 0;
    ok = ok && run_cli({"extract", "--frames", frames, "--size", "32", "--out", (base / "extract").string()}) == 0;
    return ok;
  };
  if (!runs("a") || !runs("b")) {
    o.require(false, "a command failed");
    return o;
  }
  std::size_t compared = 0;
  for (const auto& entry : fs::recursive_directory_iterator(scratch / "c8_a")) {
    if (!entry.is_regular_file() || entry.path().filename() == "manifest.json") continue;
    const fs::path twin = scratch / "c8_b" / fs::relative(entry.path(), scratch / "c8_a");
    o.require(read_file(entry.path()) == read_file(twin), fs::relative(entry.path(), scratch / "c8_a").string() + " differs");
    ++compared;
  }
  o.note(std::to_string(compared) + " files identical across reruns (manifests excluded: timestamps)");
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  const ScratchDir scratch;

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"shape conformance", shape_conformance},
      {"gradient correctness", gradient_correctness},
      {"softmax/loss identities", softmax_identities},
      {"overfit capacity", overfit_capacity},
      {"synthetic 7-class 10-fold CV >= 95%", synthetic_classification},
      {"cross-validation hygiene", fold_hygiene},
      {"frame selection", [&] { return frame_selection(scratch); }},
      {"determinism", [&] { return determinism(scratch); }},
      {"confusion-matrix semantics", confusion_semantics},
  };
  bool all = true;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i + 1);
    if (!only.empty() && !only.contains(id)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o.require(false, std::string("exception: ") + e.what());
    }
    all = all && o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << id << " (" << criteria[i].first << "): " << o.detail
              << std::endl;
  }
  return all ? 0 : 1;
}
