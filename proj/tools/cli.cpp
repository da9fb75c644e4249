#include "cli.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <functional>
#include <iostream>
#include <mutex>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "dexpr/checkpoint.hpp"
#include "dexpr/frameselect.hpp"
#include "dexpr/gradcheck.hpp"
#include "dexpr/layers.hpp"
#include "dexpr/random.hpp"
#include "dexpr/synthetic.hpp"
#include "dexpr/training.hpp"
#include "json.hpp"

namespace dexpr::cli {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

class UsageError : public Error {
 public:
  using Error::Error;
};

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buffer[32];
  std::strftime(buffer, sizeof(buffer), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buffer;
}

std::string format_number(double v) {
  char buffer[64];
  std::snprintf(buffer, sizeof(buffer), "%.9g", v);
  return buffer;
}

std::string read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::function<void(std::ostream&)>& body) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  body(out);
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

void ensure_directory(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (!fs::is_directory(dir)) throw IoError("cannot create output directory '" + dir.string() + "'");
}

json read_json_file(const fs::path& path) {
  try {
    return json::parse(read_bytes(path));
  } catch (const json::parse_error& e) {
    throw ConfigError("config file '" + path.string() + "' is not valid JSON: " + e.what());
  }
}

std::string slug(const std::string& name) {
  std::string s;
  for (char c : name) s += std::isalnum(static_cast<unsigned char>(c)) ? static_cast<char>(std::tolower(c)) : '_';
  return s;
}

// --- run manifest ------------------------------------------------------------------

class RunManifest {
 public:
  RunManifest(std::string command, const std::vector<std::string>& args) {
    doc_["command"] = std::move(command);
    doc_["arguments"] = args;
    doc_["started"] = utc_now();
    doc_["inputs"] = json::object();
    doc_["outputs"] = json::array();
  }

  json& operator[](const std::string& key) { return doc_[key]; }
  void input(const std::string& key, const std::string& value) { doc_["inputs"][key] = value; }
  void output(const fs::path& path) { doc_["outputs"].push_back(path.string()); }

  void write(const fs::path& dir) {
    doc_["finished"] = utc_now();
    write_text(dir / "manifest.json", [&](std::ostream& out) { out << doc_.dump(2) << '\n'; });
  }

 private:
  json doc_;
};

// --- shared option groups ----------------------------------------------------------

struct TrainFlags {
  std::string config_file;
  std::optional<double> learning_rate, momentum, weight_decay, lr_step_factor;
  std::optional<std::size_t> epochs, batch_size, lr_step_interval, threads;
  std::optional<std::uint64_t> seed;
};

void add_train_flags(CLI::App* cmd, TrainFlags& f) {
  cmd->add_option("--config", f.config_file, "JSON training config, or a manifest.json from an earlier run")
      ->check(CLI::ExistingFile);
  cmd->add_option("--lr", f.learning_rate, "Initial learning rate");
  cmd->add_option("--momentum", f.momentum, "SGD momentum");
  cmd->add_option("--weight-decay", f.weight_decay, "L2 weight decay on weights");
  cmd->add_option("--epochs", f.epochs, "Training epochs");
  cmd->add_option("--batch-size", f.batch_size, "Mini-batch size");
  cmd->add_option("--lr-step-factor", f.lr_step_factor, "Learning-rate multiplier per step");
  cmd->add_option("--lr-step-interval", f.lr_step_interval, "Epochs between learning-rate steps (0: constant)");
  cmd->add_option("--seed", f.seed, "Seed for initialization, shuffling and folds");
  cmd->add_option("--threads", f.threads, "Worker threads (results do not depend on it)");
}

struct NetFlags {
  std::optional<std::size_t> input_size, channel_divisor, classes;
};

void add_net_flags(CLI::App* cmd, NetFlags& f) {
  cmd->add_option("--classes", f.classes, "Expected number of classes (checked against the dataset)");
  cmd->add_option("--input-size", f.input_size, "Square input side (224 reproduces the published network)");
  cmd->add_option("--channel-divisor", f.channel_divisor, "Divide every filter count by this (1 = published widths)");
}

struct Resolved {
  TrainConfig config;
  std::size_t input_size = kInputSize;
  std::size_t channel_divisor = 1;
};

// Precedence: flags, then the config file, then defaults.
Resolved resolve(const TrainFlags& tf, const NetFlags& nf, std::ostream& err) {
  Resolved r;
  if (!tf.config_file.empty()) {
    json j = read_json_file(tf.config_file);
    if (j.is_object() && j.contains("command") && j.contains("config")) {
      if (j.contains("network")) {
        r.input_size = j["network"].value("input_size", r.input_size);
        r.channel_divisor = j["network"].value("channel_divisor", r.channel_divisor);
      }
      j = j["config"];
    }
    r.config = train_config_from_json(j, r.config);
  }
  TrainConfig& c = r.config;
  if (tf.learning_rate) c.learning_rate = *tf.learning_rate;
  if (tf.momentum) c.momentum = *tf.momentum;
  if (tf.weight_decay) c.weight_decay = *tf.weight_decay;
  if (tf.lr_step_factor) c.lr_step_factor = *tf.lr_step_factor;
  if (tf.epochs) c.epochs = *tf.epochs;
  if (tf.batch_size) c.batch_size = *tf.batch_size;
  if (tf.lr_step_interval) c.lr_step_interval = *tf.lr_step_interval;
  if (tf.threads) c.threads = *tf.threads;
  if (tf.seed) c.seed = *tf.seed;
  if (nf.input_size) r.input_size = *nf.input_size;
  if (nf.channel_divisor) r.channel_divisor = *nf.channel_divisor;
  c.validate();
  if (c.threads == 0) throw ConfigError("--threads must be >= 1");
  if (c.learning_rate == 0.0) err << "warning: learning rate is 0; parameters will stay at their initial values\n";
  return r;
}

json network_json(const Resolved& r) {
  return {{"input_size", r.input_size}, {"channel_divisor", r.channel_divisor}};
}

LabeledDataset load_dataset(const std::string& dir, const Resolved& r, const NetFlags& nf) {
  LabeledDataset d = load_class_directory_dataset(dir, r.input_size);
  if (nf.classes && *nf.classes != d.num_classes()) {
    throw DatasetError("--classes " + std::to_string(*nf.classes) + " but '" + dir + "' has " +
                       std::to_string(d.num_classes()) + " class directories");
  }
  if (d.num_classes() < 2) throw DatasetError("dataset '" + dir + "' needs at least 2 class directories");
  return d;
}

NetworkGraph make_graph(const Resolved& r, std::size_t classes) {
  DexpressionOptions o;
  o.num_classes = classes;
  o.input_size = r.input_size;
  o.channel_divisor = r.channel_divisor;
  return build_dexpression(o);
}

void print_confusion(std::ostream& out, const ConfusionMatrix& m) {
  out << "confusion matrix (% of true class):\n";
  write_confusion_csv(out, m, true);
}

void write_confusion_files(const fs::path& dir, const ConfusionMatrix& m, RunManifest& manifest) {
  write_text(dir / "confusion_matrix.csv", [&](std::ostream& o) { write_confusion_csv(o, m, true); });
  write_text(dir / "confusion_counts.csv", [&](std::ostream& o) { write_confusion_csv(o, m, false); });
  manifest.output(dir / "confusion_matrix.csv");
  manifest.output(dir / "confusion_counts.csv");
}

Tensor image_for(const fs::path& path, const NetworkGraph& graph) {
  return resize_to_input(load_image(path), graph.input_shape()[1]);
}

// --- commands ----------------------------------------------------------------------

struct TrainArgs {
  std::string data, out = "run";
  TrainFlags train;
  NetFlags net;
};

int cmd_train(const TrainArgs& a, const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  const Resolved r = resolve(a.train, a.net, err);
  const LabeledDataset dataset = load_dataset(a.data, r, a.net);
  const NetworkGraph graph = make_graph(r, dataset.num_classes());
  const fs::path dir(a.out);
  ensure_directory(dir);
  RunManifest manifest("train", args);
  manifest["config"] = to_json(r.config);
  manifest["network"] = network_json(r);
  manifest["seed"] = r.config.seed;
  manifest.input("data", a.data);

  out << "training on " << dataset.size() << " images, " << dataset.num_classes() << " classes\n";
  const TrainResult result = train(graph, dataset, r.config, {}, [&](const EpochRecord& e) {
    out << "epoch " << e.epoch << "/" << r.config.epochs << "  loss " << format_number(e.loss) << "  accuracy "
        << format_number(e.accuracy) << '\n';
  });

  CheckpointMeta meta{r.config.epochs, r.config.seed, dataset.class_names, to_json(r.config)};
  const fs::path model = dir / "model.dxpr";
  save_checkpoint(model, graph, result.params, meta);
  std::vector<MetricRow> rows;
  for (const EpochRecord& e : result.curve) rows.push_back({0, e});
  write_text(dir / "metrics.csv", [&](std::ostream& o) { write_metrics_csv(o, rows); });
  write_text(dir / "loss_curve.txt", [&](std::ostream& o) { write_loss_table(o, result.curve); });
  manifest.output(model);
  manifest.output(dir / "metrics.csv");
  manifest.output(dir / "loss_curve.txt");
  manifest["checkpoint_sha1"] = git_blob_sha1(read_bytes(model));
  manifest.write(dir);
  out << "checkpoint written to " << model.string() << '\n';
  return kExitOk;
}

struct CrossvalArgs {
  TrainArgs base;
  std::size_t k = 10;
  bool group_by_subject = false;
  std::size_t parallel_folds = 1;
};

int cmd_crossval(const CrossvalArgs& a, const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  const Resolved r = resolve(a.base.train, a.base.net, err);
  if (a.k < 2) throw ConfigError("--k must be >= 2");
  if (a.parallel_folds == 0) throw ConfigError("--parallel-folds must be >= 1");
  const LabeledDataset dataset = load_dataset(a.base.data, r, a.base.net);
  const NetworkGraph graph = make_graph(r, dataset.num_classes());
  const fs::path dir(a.base.out);
  ensure_directory(dir);
  RunManifest manifest("crossval", args);
  manifest["config"] = to_json(r.config);
  manifest["network"] = network_json(r);
  manifest["seed"] = r.config.seed;
  manifest["k"] = a.k;
  manifest["group_by_subject"] = a.group_by_subject;
  manifest.input("data", a.base.data);

  std::mutex lock;
  std::vector<MetricRow> rows;
  CrossValidationOptions o;
  o.k = a.k;
  o.group_by_subject = a.group_by_subject;
  o.parallel_folds = a.parallel_folds;
  o.on_epoch = [&](std::size_t fold, const EpochRecord& e) {
    std::lock_guard guard(lock);
    rows.push_back({fold, e});
    out << "fold " << fold << " epoch " << e.epoch << "/" << r.config.epochs << "  loss " << format_number(e.loss)
        << "  accuracy " << format_number(e.accuracy) << '\n';
  };
  out << a.k << "-fold cross-validation on " << dataset.size() << " images, " << dataset.num_classes()
      << " classes\n";
  const CrossValidationResult result = cross_validate(graph, dataset, r.config, o);
  std::sort(rows.begin(), rows.end(), [](const MetricRow& x, const MetricRow& y) {
    return std::tie(x.fold, x.record.epoch) < std::tie(y.fold, y.record.epoch);
  });

  write_text(dir / "metrics.csv", [&](std::ostream& s) { write_metrics_csv(s, rows); });
  write_text(dir / "crossval.csv", [&](std::ostream& s) { write_fold_csv(s, result); });
  write_text(dir / "loss_curve.txt", [&](std::ostream& s) {
    for (const FoldReport& f : result.folds) {
      s << "# fold " << f.fold << '\n';
      write_loss_table(s, f.curve);
    }
  });
  manifest.output(dir / "metrics.csv");
  manifest.output(dir / "crossval.csv");
  manifest.output(dir / "loss_curve.txt");
  write_confusion_files(dir, result.confusion, manifest);
  manifest["mean_accuracy"] = result.mean_accuracy;
  manifest.write(dir);

  for (const FoldReport& f : result.folds) {
    out << "fold " << f.fold << ": accuracy " << format_number(f.accuracy) << " (" << f.test_size << " test images)\n";
  }
  out << "mean accuracy " << format_number(result.mean_accuracy) << '\n';
  print_confusion(out, result.confusion);
  return kExitOk;
}

struct EvaluateArgs {
  std::string checkpoint, data, out;
  std::optional<std::size_t> threads;
};

int cmd_evaluate(const EvaluateArgs& a, const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  const Checkpoint c = load_checkpoint(a.checkpoint);
  const LabeledDataset dataset = load_class_directory_dataset(a.data, c.graph.input_shape()[1]);
  require_class_count(c, dataset.num_classes());
  if (!c.meta.class_names.empty() && c.meta.class_names != dataset.class_names) {
    err << "warning: dataset class names differ from those stored in the checkpoint\n";
  }
  const Evaluation e = evaluate(c.graph, c.params, dataset, {}, a.threads.value_or(1));
  out << "accuracy " << format_number(e.accuracy) << " (" << e.confusion.trace() << "/" << e.confusion.total()
      << ")\n";
  print_confusion(out, e.confusion);
  if (!a.out.empty()) {
    const fs::path dir(a.out);
    ensure_directory(dir);
    RunManifest manifest("evaluate", args);
    manifest["seed"] = c.meta.seed;
    manifest.input("checkpoint", a.checkpoint);
    manifest.input("data", a.data);
    manifest["accuracy"] = e.accuracy;
    write_confusion_files(dir, e.confusion, manifest);
    write_text(dir / "predictions.csv", [&](std::ostream& s) {
      s << "index,source,truth,predicted";
      for (const auto& name : dataset.class_names) s << ",p_" << name;
      s << '\n';
      for (const Prediction& p : e.predictions) {
        s << p.index << ',' << p.source_id << ',' << dataset.class_names[p.truth] << ','
          << dataset.class_names[p.predicted];
        for (double v : p.probabilities) s << ',' << format_number(v);
        s << '\n';
      }
    });
    manifest.output(dir / "predictions.csv");
    manifest.write(dir);
  }
  return kExitOk;
}

struct ExtractArgs {
  std::string frames, out;
  double sigma = 1.0;
  std::size_t count = 20, discard = 2, size = kInputSize;
  std::string metric = "mean-absolute";
};

std::string join(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? " " : "") + std::to_string(v[i]);
  return s;
}

int cmd_extract(const ExtractArgs& a, const std::vector<std::string>& args, std::ostream& out, std::ostream&) {
  const fs::path root(a.frames);
  std::error_code ec;
  if (!fs::is_directory(root, ec)) throw IoError("frames directory '" + root.string() + "' not found");
  std::vector<fs::path> sessions;
  bool loose_images = false;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (entry.is_directory()) sessions.push_back(entry.path());
    if (entry.is_regular_file() && is_supported_image(entry.path())) loose_images = true;
  }
  std::sort(sessions.begin(), sessions.end());
  if (sessions.empty() && loose_images) sessions.push_back(root);
  if (sessions.empty()) throw DatasetError("no frame sessions under '" + root.string() + "'");

  ExtractionOptions options;
  options.sigma = a.sigma;
  options.count = a.count;
  options.discard = a.discard;
  options.output_size = a.size;
  options.metric = a.metric == "mean-squared" ? DifferenceMetric::mean_squared : DifferenceMetric::mean_absolute;

  const fs::path dir(a.out);
  ensure_directory(dir);
  RunManifest manifest("extract", args);
  manifest["config"] = {{"sigma", a.sigma}, {"count", a.count}, {"discard", a.discard},
                        {"metric", a.metric}, {"size", a.size}};
  manifest.input("frames", a.frames);

  std::ostringstream csv;
  csv << "session,sigma,frames,selected,discarded,kept_files\n";
  std::size_t written = 0;
  for (const fs::path& session_dir : sessions) {
    const FrameSequence seq = load_frame_sequence(session_dir);
    Extraction e;
    try {
      e = extract_representative_frames(seq.frames, options);
    } catch (const DatasetError& ex) {
      throw DatasetError("session '" + seq.session + "': " + ex.what());
    }
    const fs::path target = dir / seq.session;
    ensure_directory(target);
    std::vector<std::string> files;
    for (std::size_t i = 0; i < e.kept.size(); ++i) {
      const std::string name = fs::path(seq.frame_ids[e.kept[i]]).stem().string() + ".png";
      save_png(target / name, e.images[i]);
      files.push_back(name);
      ++written;
    }
    std::string file_list;
    for (std::size_t i = 0; i < files.size(); ++i) file_list += (i ? " " : "") + files[i];
    csv << seq.session << ',' << format_number(a.sigma) << ',' << seq.frames.size() << ',' << join(e.selected) << ','
        << join(e.discarded) << ',' << file_list << '\n';
    out << seq.session << ": " << e.kept.size() << " images (selected frames " << join(e.selected) << ")\n";
  }
  write_text(dir / "extraction.csv", [&](std::ostream& s) { s << csv.str(); });
  manifest.output(dir / "extraction.csv");
  manifest["images_written"] = written;
  manifest.write(dir);
  return kExitOk;
}

struct GradcheckArgs {
  std::string layer;
  bool full_small = false;
  bool inject_sign_bug = false;
  std::uint64_t seed = 1;
  std::string out;
};

int cmd_gradcheck(const GradcheckArgs& a, const std::vector<std::string>& args, std::ostream& out, std::ostream&) {
  std::vector<GradCheckReport> reports;
  std::vector<std::string> layers;
  if (a.layer == "all" || (a.layer.empty() && !a.full_small)) {
    layers = checkable_layers();
  } else if (!a.layer.empty()) {
    layers = {a.layer};
  }
  for (const std::string& layer : layers) reports.push_back(check_layer(layer, a.seed, {}, a.inject_sign_bug));
  if (a.full_small) {
    GradCheckOptions o;
    o.tolerance = 1e-3;
    reports.push_back(check_network(build_dexpression(small_dexpression_options(2)), a.seed, o));
  }
  bool ok = true;
  for (const GradCheckReport& r : reports) {
    out << r.summary() << '\n';
    ok = ok && r.passed;
  }
  if (!a.out.empty()) {
    const fs::path dir(a.out);
    ensure_directory(dir);
    RunManifest manifest("gradcheck", args);
    manifest["seed"] = a.seed;
    json results = json::array();
    for (const GradCheckReport& r : reports) {
      results.push_back({{"subject", r.subject}, {"passed", r.passed}, {"max_relative_error", r.max_relative_error},
                         {"worst_coordinate", r.worst_coordinate}, {"tolerance", r.tolerance}});
    }
    manifest["results"] = results;
    manifest.write(dir);
  }
  return ok ? kExitOk : kExitFailure;
}

struct PredictArgs {
  std::string checkpoint, format = "text", out;
  std::vector<std::string> images;
};

int cmd_predict(const PredictArgs& a, const std::vector<std::string>& args, std::ostream& out, std::ostream&) {
  const Checkpoint c = load_checkpoint(a.checkpoint);
  std::vector<std::string> names = c.meta.class_names;
  if (names.size() != c.graph.num_classes()) {
    names.clear();
    for (std::size_t i = 0; i < c.graph.num_classes(); ++i) names.push_back("class_" + std::to_string(i));
  }
  std::ostringstream lines;
  for (const std::string& path : a.images) {
    const auto result = forward(c.graph, c.params, image_for(path, c.graph));
    std::vector<double> p(result.probabilities.data().begin(), result.probabilities.data().end());
    const std::size_t k = argmax_class<double>(p);
    if (a.format == "jsonl") {
      json j = {{"image", path}, {"class", names[k]}, {"index", k}, {"probabilities", p}};
      lines << j.dump() << '\n';
    } else {
      lines << path << '\t' << names[k];
      for (std::size_t i = 0; i < p.size(); ++i) lines << (i ? ' ' : '\t') << names[i] << '=' << format_number(p[i]);
      lines << '\n';
    }
  }
  out << lines.str();
  if (!a.out.empty()) {
    const fs::path dir(a.out);
    ensure_directory(dir);
    RunManifest manifest("predict", args);
    manifest["seed"] = c.meta.seed;
    manifest.input("checkpoint", a.checkpoint);
    const fs::path file = dir / (a.format == "jsonl" ? "predictions.jsonl" : "predictions.txt");
    write_text(file, [&](std::ostream& s) { s << lines.str(); });
    manifest.output(file);
    manifest.write(dir);
  }
  return kExitOk;
}

struct VisualizeArgs {
  std::string checkpoint, image, out = "activations";
  std::vector<std::string> layers;
};

int cmd_visualize(const VisualizeArgs& a, const std::vector<std::string>& args, std::ostream& out, std::ostream&) {
  const Checkpoint c = load_checkpoint(a.checkpoint);
  for (const std::string& layer : a.layers) {
    if (!c.graph.index_of(layer)) {
      std::string valid;
      for (const std::string& n : c.graph.layer_names()) valid += (valid.empty() ? "" : ", ") + n;
      throw UsageError("unknown layer '" + layer + "'; valid layers: " + valid);
    }
  }
  ForwardOptions fo;
  fo.capture_activations = true;
  const auto result = forward(c.graph, c.params, image_for(a.image, c.graph), fo);

  const fs::path dir(a.out);
  ensure_directory(dir);
  RunManifest manifest("visualize", args);
  manifest["seed"] = c.meta.seed;
  manifest.input("checkpoint", a.checkpoint);
  manifest.input("image", a.image);
  for (const std::string& layer : a.layers) {
    const Tensor& act = result.activations.at(layer);
    const Tensor maps = act.shape().rank() == 3 ? act : act.reshaped(Shape{1, 1, act.size()});
    const auto [lo_it, hi_it] = std::minmax_element(maps.data().begin(), maps.data().end());
    const float lo = *lo_it, hi = *hi_it;
    const fs::path target = dir / slug(layer);
    ensure_directory(target);
    const std::size_t channels = maps.shape()[0];
    for (std::size_t ch = 0; ch < channels; ++ch) {
      Tensor img = maps.channel_slice(ch, ch + 1);
      for (float& v : img.data()) v = hi > lo ? (v - lo) / (hi - lo) : 0.5f;
      char name[32];
      std::snprintf(name, sizeof(name), "channel_%03zu.png", ch);
      save_png(target / name, img);
    }
    manifest.output(target);
    out << layer << ": " << channels << " channel images " << maps.shape().to_string() << " range [" << format_number(lo)
        << ", " << format_number(hi) << "] -> " << target.string() << '\n';
  }
  manifest.write(dir);
  return kExitOk;
}

struct SynthArgs {
  std::string out, kind = "dataset";
  std::size_t per_class = 10, size = kInputSize, sessions = 2, frames = 30;
  double noise = 0.08;
  std::uint64_t seed = 1;
};

int cmd_synth(const SynthArgs& a, const std::vector<std::string>& args, std::ostream& out, std::ostream&) {
  const fs::path dir(a.out);
  ensure_directory(dir);
  RunManifest manifest("synth", args);
  manifest["seed"] = a.seed;
  std::size_t written = 0;
  if (a.kind == "dataset") {
    SyntheticOptions o;
    o.per_class = a.per_class;
    o.image_size = a.size;
    o.noise = a.noise;
    o.seed = a.seed;
    const LabeledDataset d = make_synthetic_dataset(o);
    for (const Sample& s : d.samples) {
      const fs::path file = dir / s.source_id;
      ensure_directory(file.parent_path());
      save_png(file, s.image);
      ++written;
    }
  } else {
    for (std::size_t s = 0; s < a.sessions; ++s) {
      char name[32];
      std::snprintf(name, sizeof(name), "session_%03zu", s);
      const fs::path target = dir / name;
      ensure_directory(target);
      const auto frames = make_synthetic_sequence(a.frames, a.size, derive_seed(a.seed, s));
      for (std::size_t t = 0; t < frames.size(); ++t) {
        char file[32];
        std::snprintf(file, sizeof(file), "frame_%04zu.png", t);
        save_png(target / file, frames[t]);
        ++written;
      }
    }
  }
  manifest["images_written"] = written;
  manifest.write(dir);
  out << written << " images written to " << dir.string() << '\n';
  return kExitOk;
}

}  // namespace

std::string git_blob_sha1(const std::string& bytes) {
  const std::string header = "blob " + std::to_string(bytes.size()) + '\0';
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int length = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (!ctx || EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr) != 1 ||
      EVP_DigestUpdate(ctx, header.data(), header.size()) != 1 ||
      EVP_DigestUpdate(ctx, bytes.data(), bytes.size()) != 1 || EVP_DigestFinal_ex(ctx, digest, &length) != 1) {
    EVP_MD_CTX_free(ctx);
    throw Error("SHA-1 computation failed");
  }
  EVP_MD_CTX_free(ctx);
  std::string hex;
  char buffer[3];
  for (unsigned int i = 0; i < length; ++i) {
    std::snprintf(buffer, sizeof(buffer), "%02x", digest[i]);
    hex += buffer;
  }
  return hex;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"DeXpression facial expression network: training, evaluation and frame extraction"};
  app.name("dexpression");
  app.require_subcommand(1);

  TrainArgs train_args;
  auto* train_cmd = app.add_subcommand("train", "Train a network on a class-per-directory image tree");
  train_cmd->add_option("--data", train_args.data, "Dataset root (one subdirectory per class)")->required();
  train_cmd->add_option("--out", train_args.out, "Output directory")->capture_default_str();
  add_train_flags(train_cmd, train_args.train);
  add_net_flags(train_cmd, train_args.net);

  CrossvalArgs cv_args;
  auto* cv_cmd = app.add_subcommand("crossval", "k-fold cross-validation with an averaged confusion matrix");
  cv_cmd->add_option("--data", cv_args.base.data, "Dataset root (one subdirectory per class)")->required();
  cv_cmd->add_option("--out", cv_args.base.out, "Output directory")->capture_default_str();
  cv_cmd->add_option("--k", cv_args.k, "Number of folds")->capture_default_str();
  cv_cmd->add_flag("--group-by-subject", cv_args.group_by_subject,
                   "Keep all images of a subject (file-name prefix before '_') in one fold");
  cv_cmd->add_option("--parallel-folds", cv_args.parallel_folds, "Folds trained concurrently")->capture_default_str();
  add_train_flags(cv_cmd, cv_args.base.train);
  add_net_flags(cv_cmd, cv_args.base.net);

  EvaluateArgs eval_args;
  auto* eval_cmd = app.add_subcommand("evaluate", "Accuracy and confusion matrix of a checkpoint on a dataset");
  eval_cmd->add_option("--checkpoint", eval_args.checkpoint, "Checkpoint file")->required();
  eval_cmd->add_option("--data", eval_args.data, "Dataset root")->required();
  eval_cmd->add_option("--out", eval_args.out, "Directory for predictions and confusion CSVs");
  eval_cmd->add_option("--threads", eval_args.threads, "Worker threads");
  eval_cmd->add_option("--seed", "Accepted for uniformity; evaluation is not random");

  ExtractArgs ex_args;
  auto* ex_cmd = app.add_subcommand("extract", "Pick representative frames from each session directory");
  ex_cmd->add_option("--frames", ex_args.frames, "Root with one directory of numbered frame images per session")
      ->required();
  ex_cmd->add_option("--out", ex_args.out, "Output directory")->required();
  ex_cmd->add_option("--sigma", ex_args.sigma, "Gaussian smoothing sigma")->capture_default_str();
  ex_cmd->add_option("--count", ex_args.count, "Frames selected per session")->capture_default_str();
  ex_cmd->add_option("--discard", ex_args.discard, "Earliest selected frames dropped as neutral")->capture_default_str();
  ex_cmd->add_option("--size", ex_args.size, "Output image side")->capture_default_str();
  ex_cmd->add_option("--metric", ex_args.metric, "Frame difference metric")
      ->check(CLI::IsMember({"mean-absolute", "mean-squared"}))
      ->capture_default_str();
  ex_cmd->add_option("--seed", "Accepted for uniformity; extraction is not random");

  GradcheckArgs gc_args;
  auto* gc_cmd = app.add_subcommand("gradcheck", "Compare analytic gradients with central finite differences");
  gc_cmd->add_option("--layer", gc_args.layer, "conv, fc, lrn, maxpool, relu or all")
      ->check(CLI::IsMember({"conv", "fc", "lrn", "maxpool", "relu", "all"}));
  gc_cmd->add_flag("--full-small", gc_args.full_small, "End-to-end check on the 16x16 shrunken network");
  gc_cmd->add_flag("--inject-sign-bug", gc_args.inject_sign_bug)->group("");
  gc_cmd->add_option("--seed", gc_args.seed, "Seed for the random probes")->capture_default_str();
  gc_cmd->add_option("--out", gc_args.out, "Directory for the run manifest");

  PredictArgs pr_args;
  auto* pr_cmd = app.add_subcommand("predict", "Classify images with a checkpoint");
  pr_cmd->add_option("--checkpoint", pr_args.checkpoint, "Checkpoint file")->required();
  pr_cmd->add_option("--image", pr_args.images, "Image file(s)")->required();
  pr_cmd->add_option("--format", pr_args.format, "Output format")
      ->check(CLI::IsMember({"text", "jsonl"}))
      ->capture_default_str();
  pr_cmd->add_option("--out", pr_args.out, "Directory for the predictions file and manifest");
  pr_cmd->add_option("--seed", "Accepted for uniformity; prediction is not random");

  VisualizeArgs vis_args;
  auto* vis_cmd = app.add_subcommand("visualize", "Write per-channel activation images of chosen layers");
  vis_cmd->add_option("--checkpoint", vis_args.checkpoint, "Checkpoint file")->required();
  vis_cmd->add_option("--image", vis_args.image, "Input image")->required();
  vis_cmd->add_option("--layer", vis_args.layers, "Layer name(s), e.g. \"Convolution 1\"")->required();
  vis_cmd->add_option("--out", vis_args.out, "Output directory")->capture_default_str();
  vis_cmd->add_option("--seed", "Accepted for uniformity; visualization is not random");

  SynthArgs syn_args;
  auto* syn_cmd = app.add_subcommand("synth", "Generate a synthetic expression dataset or frame sessions");
  syn_cmd->add_option("--out", syn_args.out, "Output directory")->required();
  syn_cmd->add_option("--kind", syn_args.kind, "What to generate")
      ->check(CLI::IsMember({"dataset", "frames"}))
      ->capture_default_str();
  syn_cmd->add_option("--per-class", syn_args.per_class, "Images per class")->capture_default_str();
  syn_cmd->add_option("--size", syn_args.size, "Image side")->capture_default_str();
  syn_cmd->add_option("--noise", syn_args.noise, "Pixel noise standard deviation")->capture_default_str();
  syn_cmd->add_option("--sessions", syn_args.sessions, "Frame sessions")->capture_default_str();
  syn_cmd->add_option("--frames", syn_args.frames, "Frames per session")->capture_default_str();
  syn_cmd->add_option("--seed", syn_args.seed, "Generator seed")->capture_default_str();

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      app.exit(e, out, err);
      return kExitOk;
    }
    app.exit(e, err, err);
    return kExitUsage;
  }

  try {
    if (*train_cmd) return cmd_train(train_args, args, out, err);
    if (*cv_cmd) return cmd_crossval(cv_args, args, out, err);
    if (*eval_cmd) return cmd_evaluate(eval_args, args, out, err);
    if (*ex_cmd) return cmd_extract(ex_args, args, out, err);
    if (*gc_cmd) return cmd_gradcheck(gc_args, args, out, err);
    if (*pr_cmd) return cmd_predict(pr_args, args, out, err);
    if (*vis_cmd) return cmd_visualize(vis_args, args, out, err);
    if (*syn_cmd) return cmd_synth(syn_args, args, out, err);
  } catch (const DivergenceError& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const DatasetError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const IoError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const FormatError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ShapeError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitUsage;
}

}  // namespace dexpr::cli
