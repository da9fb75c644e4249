#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "cli.hpp"
#include "dexpr/checkpoint.hpp"
#include "dexpr/frameselect.hpp"
#include "dexpr/gradcheck.hpp"
#include "dexpr/layers.hpp"
#include "dexpr/training.hpp"

namespace py = pybind11;
using namespace dexpr;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

// [H, W] or [1, H, W] array -> [1, H, W] tensor.
Tensor image_from_array(const FloatArray& a) {
  if (a.ndim() == 2) {
    return Tensor(Shape{1, static_cast<std::size_t>(a.shape(0)), static_cast<std::size_t>(a.shape(1))},
                  std::vector<float>(a.data(), a.data() + a.size()));
  }
  if (a.ndim() == 3 && a.shape(0) == 1) {
    return Tensor(Shape{1, static_cast<std::size_t>(a.shape(1)), static_cast<std::size_t>(a.shape(2))},
                  std::vector<float>(a.data(), a.data() + a.size()));
  }
  throw ShapeError("expected a grayscale image of shape (H, W) or (1, H, W)");
}

std::vector<Tensor> frames_from_array(const FloatArray& a) {
  if (a.ndim() != 3) throw ShapeError("expected frames of shape (T, H, W)");
  const auto h = static_cast<std::size_t>(a.shape(1)), w = static_cast<std::size_t>(a.shape(2));
  std::vector<Tensor> frames;
  for (py::ssize_t t = 0; t < a.shape(0); ++t) {
    const float* p = a.data() + t * h * w;
    frames.emplace_back(Shape{1, h, w}, std::vector<float>(p, p + h * w));
  }
  return frames;
}

py::array_t<float> to_array(const Tensor& t) {
  std::vector<py::ssize_t> dims(t.shape().dims().begin(), t.shape().dims().end());
  return py::array_t<float>(dims, t.data().data());
}

py::array_t<double> to_array(const std::vector<double>& v) {
  return py::array_t<double>(static_cast<py::ssize_t>(v.size()), v.data());
}

std::vector<double> probabilities_of(const ForwardResult<float>& r) {
  return {r.probabilities.data().begin(), r.probabilities.data().end()};
}

py::dict report_dict(const GradCheckReport& r) {
  py::dict d;
  d["subject"] = r.subject;
  d["passed"] = r.passed;
  d["max_relative_error"] = r.max_relative_error;
  d["worst_coordinate"] = r.worst_coordinate;
  d["checked"] = r.checked;
  d["skipped"] = r.skipped;
  d["tolerance"] = r.tolerance;
  d["summary"] = r.summary();
  return d;
}

LabeledDataset dataset_from_arrays(const FloatArray& images, const std::vector<std::size_t>& labels,
                                   const std::vector<std::string>& class_names) {
  const std::vector<Tensor> frames = frames_from_array(images);
  if (frames.size() != labels.size()) throw DatasetError("images and labels differ in length");
  LabeledDataset d;
  d.class_names = class_names;
  for (std::size_t i = 0; i < frames.size(); ++i) {
    d.samples.push_back({frames[i], labels[i], "sample_" + std::to_string(i)});
  }
  return d;
}

// Trained or loaded network together with its class names.
struct Model {
  NetworkGraph graph;
  Parameters<float> params;
  std::vector<std::string> class_names;
  CheckpointMeta meta;

  Tensor prepare(const FloatArray& image) const {
    return resize_to_input(image_from_array(image), graph.input_shape()[1]);
  }
};

DexpressionOptions net_options(std::size_t classes, std::size_t input_size, std::size_t divisor) {
  DexpressionOptions o;
  o.num_classes = classes;
  o.input_size = input_size;
  o.channel_divisor = divisor;
  return o;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "DeXpression facial expression network";

  auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ShapeError>(m, "ShapeError", base);
  py::register_exception<ConfigError>(m, "ConfigError", base);
  py::register_exception<DatasetError>(m, "DatasetError", base);
  py::register_exception<FormatError>(m, "FormatError", base);
  py::register_exception<IoError>(m, "IoError", base);
  py::register_exception<DivergenceError>(m, "DivergenceError", base);

  m.attr("INPUT_SIZE") = kInputSize;

  m.def(
      "infer_shapes",
      [](std::size_t num_classes, std::size_t input_size, std::size_t channel_divisor) {
        std::vector<std::pair<std::string, std::vector<std::size_t>>> rows;
        for (const auto& [name, shape] : infer_shapes(build_dexpression(net_options(num_classes, input_size,
                                                                                    channel_divisor)))) {
          rows.emplace_back(name, shape.dims());
        }
        return rows;
      },
      py::arg("num_classes") = 7, py::arg("input_size") = kInputSize, py::arg("channel_divisor") = 1,
      "Output shape of every layer, in graph order.");

  m.def(
      "softmax", [](std::vector<double> logits) { return to_array(softmax<double>(logits)); }, py::arg("logits"));
  m.def(
      "cross_entropy", [](std::vector<double> logits, std::size_t target) { return cross_entropy<double>(logits, target); },
      py::arg("logits"), py::arg("target"));

  m.def(
      "make_folds",
      [](std::size_t n, std::size_t k, std::uint64_t seed) { return make_folds(n, k, seed).assignments(); },
      py::arg("n"), py::arg("k") = 10, py::arg("seed") = 1, "Fold index of every sample.");

  m.def(
      "select_representative_frames",
      [](std::vector<double> scores, std::size_t count) { return select_representative_frames(scores, count); },
      py::arg("scores"), py::arg("count") = 20,
      "Frame indices (scores[j] belongs to frame j + 1) picked by shrinking maximum filters.");

  m.def(
      "frame_differences",
      [](const FloatArray& frames, double sigma, const std::string& metric) {
        const auto f = frames_from_array(frames);
        return to_array(frame_differences(f, sigma,
                                          metric == "mean-squared" ? DifferenceMetric::mean_squared
                                                                   : DifferenceMetric::mean_absolute));
      },
      py::arg("frames"), py::arg("sigma") = 1.0, py::arg("metric") = "mean-absolute");

  m.def(
      "extract_representative_frames",
      [](const FloatArray& frames, double sigma, std::size_t count, std::size_t discard, std::size_t output_size) {
        const auto f = frames_from_array(frames);
        ExtractionOptions o;
        o.sigma = sigma;
        o.count = count;
        o.discard = discard;
        o.output_size = output_size;
        const Extraction e = extract_representative_frames(f, o);
        py::list images;
        for (const Tensor& t : e.images) images.append(to_array(t.reshaped(Shape{t.shape()[1], t.shape()[2]})));
        py::dict d;
        d["selected"] = e.selected;
        d["discarded"] = e.discarded;
        d["kept"] = e.kept;
        d["images"] = images;
        return d;
      },
      py::arg("frames"), py::arg("sigma") = 1.0, py::arg("count") = 20, py::arg("discard") = 2,
      py::arg("output_size") = kInputSize);

  m.def(
      "load_image", [](const std::string& path) { return to_array(load_image(path)); }, py::arg("path"),
      "Grayscale image in [0, 1] with shape (1, H, W).");

  m.def(
      "check_layer",
      [](const std::string& layer, std::uint64_t seed) { return report_dict(check_layer(layer, seed)); },
      py::arg("layer"), py::arg("seed") = 1);
  m.def(
      "check_small_network",
      [](std::uint64_t seed) {
        GradCheckOptions o;
        o.tolerance = 1e-3;
        return report_dict(check_network(build_dexpression(small_dexpression_options(2)), seed, o));
      },
      py::arg("seed") = 1);

  py::class_<Model>(m, "Model")
      .def_static(
          "create",
          [](std::vector<std::string> class_names, std::uint64_t seed, std::size_t input_size,
             std::size_t channel_divisor) {
            Model model;
            model.graph = build_dexpression(net_options(class_names.size(), input_size, channel_divisor));
            model.params = init_parameters(model.graph, seed);
            model.class_names = std::move(class_names);
            model.meta.seed = seed;
            return model;
          },
          py::arg("class_names"), py::arg("seed") = 1, py::arg("input_size") = kInputSize,
          py::arg("channel_divisor") = 1, "Freshly initialized network.")
      .def_static(
          "load",
          [](const std::string& path) {
            Checkpoint c = load_checkpoint(path);
            return Model{std::move(c.graph), std::move(c.params), c.meta.class_names, c.meta};
          },
          py::arg("path"))
      .def(
          "save",
          [](const Model& self, const std::string& path) {
            CheckpointMeta meta = self.meta;
            meta.class_names = self.class_names;
            save_checkpoint(path, self.graph, self.params, meta);
          },
          py::arg("path"))
      .def_readonly("class_names", &Model::class_names)
      .def_property_readonly("input_size", [](const Model& self) { return self.graph.input_shape()[1]; })
      .def_property_readonly("layer_names", [](const Model& self) { return self.graph.layer_names(); })
      .def_property_readonly("parameter_count", [](const Model& self) { return self.params.parameter_count(); })
      .def(
          "predict_proba",
          [](const Model& self, const FloatArray& image) {
            return to_array(probabilities_of(forward(self.graph, self.params, self.prepare(image))));
          },
          py::arg("image"), "Class probabilities of one grayscale image (resized to the input size).")
      .def(
          "predict",
          [](const Model& self, const FloatArray& image) {
            const auto p = probabilities_of(forward(self.graph, self.params, self.prepare(image)));
            return self.class_names.at(argmax_class<double>(p));
          },
          py::arg("image"))
      .def(
          "activation",
          [](const Model& self, const FloatArray& image, const std::string& layer) {
            if (!self.graph.index_of(layer)) throw ConfigError("unknown layer '" + layer + "'");
            ForwardOptions o;
            o.capture_activations = true;
            return to_array(forward(self.graph, self.params, self.prepare(image), o).activations.at(layer));
          },
          py::arg("image"), py::arg("layer"))
      .def(
          "fit",
          [](Model& self, const FloatArray& images, const std::vector<std::size_t>& labels, py::dict config) {
            const LabeledDataset d = dataset_from_arrays(images, labels, self.class_names);
            const TrainConfig c = train_config_from_json(nlohmann::json::parse(py::str(py::module_::import("json").attr("dumps")(config)).cast<std::string>()));
            TrainResult r;
            {
              py::gil_scoped_release release;
              r = train_from(self.graph, self.params, d, c);
            }
            self.params = std::move(r.params);
            self.meta.epoch += c.epochs;
            self.meta.config = to_json(c);
            std::vector<std::tuple<std::size_t, double, double>> curve;
            for (const EpochRecord& e : r.curve) curve.emplace_back(e.epoch, e.loss, e.accuracy);
            return curve;
          },
          py::arg("images"), py::arg("labels"), py::arg("config") = py::dict(),
          "Continue SGD training on (N, H, W) images; returns (epoch, loss, accuracy) per epoch.")
      .def(
          "evaluate",
          [](const Model& self, const FloatArray& images, const std::vector<std::size_t>& labels) {
            const Evaluation e = evaluate(self.graph, self.params, dataset_from_arrays(images, labels, self.class_names));
            std::vector<std::vector<std::size_t>> counts(e.confusion.size(), std::vector<std::size_t>(e.confusion.size()));
            for (std::size_t t = 0; t < counts.size(); ++t) {
              for (std::size_t p = 0; p < counts.size(); ++p) counts[t][p] = e.confusion.count(t, p);
            }
            py::dict d;
            d["accuracy"] = e.accuracy;
            d["confusion"] = counts;
            return d;
          },
          py::arg("images"), py::arg("labels"));

  m.def(
      "run_cli",
      [](const std::vector<std::string>& args) {
        std::ostringstream out, err;
        int code;
        {
          py::gil_scoped_release release;
          code = cli::run(args, out, err);
        }
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Run a dexpression command line; returns (exit_code, stdout, stderr).");
}
