#include "dexpr/network.hpp"

#include <algorithm>
#include <cmath>

#include "dexpr/random.hpp"

namespace dexpr {

namespace {

constexpr std::pair<LayerKind, std::string_view> kKindNames[] = {
    {LayerKind::data, "data"}, {LayerKind::conv, "conv"},     {LayerKind::maxpool, "maxpool"},
    {LayerKind::lrn, "lrn"},   {LayerKind::relu, "relu"},     {LayerKind::concat, "concat"},
    {LayerKind::fc, "fc"},     {LayerKind::softmax, "softmax"},
};

std::size_t expected_arity(LayerKind kind) {
  switch (kind) {
    case LayerKind::data:
      return 0;
    case LayerKind::concat:
      return 2;
    default:
      return 1;
  }
}

bool params_match_kind(const LayerSpec& layer) {
  switch (layer.kind) {
    case LayerKind::conv:
      return std::holds_alternative<ConvSpec>(layer.params);
    case LayerKind::maxpool:
      return std::holds_alternative<PoolSpec>(layer.params);
    case LayerKind::lrn:
      return std::holds_alternative<LrnSpec>(layer.params);
    case LayerKind::fc:
      return std::holds_alternative<FcSpec>(layer.params);
    default:
      return std::holds_alternative<std::monostate>(layer.params);
  }
}

std::string quoted_inputs(const LayerSpec& layer) {
  std::string s;
  for (std::size_t i = 0; i < layer.inputs.size(); ++i) {
    if (i) s += ", ";
    s += "'" + layer.inputs[i] + "'";
  }
  return s;
}

[[noreturn]] void shape_conflict(const LayerSpec& layer, const std::string& detail) {
  std::string msg = "shape conflict at '" + layer.name + "'";
  if (!layer.inputs.empty()) msg += " (input " + quoted_inputs(layer) + ")";
  throw ShapeError(msg + ": " + detail);
}

}  // namespace

std::string_view to_string(LayerKind kind) {
  for (const auto& [k, name] : kKindNames) {
    if (k == kind) return name;
  }
  return "unknown";
}

LayerKind layer_kind_from_string(std::string_view name) {
  for (const auto& [k, n] : kKindNames) {
    if (n == name) return k;
  }
  throw FormatError("unknown layer kind '" + std::string(name) + "'");
}

NetworkGraph::NetworkGraph(Shape input_shape, std::size_t num_classes, std::vector<LayerSpec> layers)
    : input_shape_(std::move(input_shape)), num_classes_(num_classes), layers_(std::move(layers)) {
  if (num_classes_ < 2) throw ShapeError("a classifier needs at least 2 classes");
  if (layers_.empty() || layers_.front().kind != LayerKind::data) {
    throw ShapeError("the first layer must be the data layer");
  }
  std::map<std::string, std::size_t, std::less<>> seen;
  std::vector<std::size_t> consumers(layers_.size(), 0);
  input_index_.resize(layers_.size());
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const LayerSpec& layer = layers_[i];
    if (layer.kind == LayerKind::data && i != 0) throw ShapeError("only one data layer is allowed");
    if (!seen.emplace(layer.name, i).second) throw ShapeError("duplicate layer name '" + layer.name + "'");
    if (layer.inputs.size() != expected_arity(layer.kind)) {
      throw ShapeError("layer '" + layer.name + "' (" + std::string(to_string(layer.kind)) + ") needs " +
                       std::to_string(expected_arity(layer.kind)) + " input(s)");
    }
    if (!params_match_kind(layer)) throw ShapeError("layer '" + layer.name + "' has parameters of the wrong kind");
    for (const std::string& in : layer.inputs) {
      auto it = seen.find(in);
      if (it == seen.end() || it->second == i) {
        throw ShapeError("layer '" + layer.name + "' reads '" + in + "', which is not defined before it");
      }
      input_index_[i].push_back(it->second);
      ++consumers[it->second];
    }
  }
  for (std::size_t i = 0; i + 1 < layers_.size(); ++i) {
    if (consumers[i] == 0) throw ShapeError("layer '" + layers_[i].name + "' has no consumer; the graph must have one sink");
  }
  if (layers_.back().kind != LayerKind::softmax) throw ShapeError("the sink layer must be a softmax classifier");
}

std::optional<std::size_t> NetworkGraph::index_of(std::string_view name) const {
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    if (layers_[i].name == name) return i;
  }
  return std::nullopt;
}

const LayerSpec& NetworkGraph::layer(std::string_view name) const {
  auto i = index_of(name);
  if (!i) throw ShapeError("no layer named '" + std::string(name) + "'");
  return layers_[*i];
}

std::vector<std::string> NetworkGraph::layer_names() const {
  std::vector<std::string> names;
  names.reserve(layers_.size());
  for (const auto& l : layers_) names.push_back(l.name);
  return names;
}

NetworkGraph build_dexpression(const DexpressionOptions& options) {
  const std::size_t d = options.channel_divisor;
  if (d == 0) throw ConfigError("channel_divisor must be >= 1");
  auto width = [d](std::size_t n) { return std::max<std::size_t>(1, n / d); };
  const std::size_t c1 = width(64), reduce = width(96), wide = width(208), side = width(64);
  const std::size_t block_out = wide + side;
  const bool canonical = options.input_size == 224 && d == 1;

  std::vector<LayerSpec> layers;
  auto add = [&](std::string name, LayerKind kind, LayerParams params, std::vector<std::string> inputs,
                 std::optional<Shape> declared = std::nullopt) {
    layers.push_back(LayerSpec{std::move(name), kind, std::move(params), std::move(inputs),
                               canonical ? std::move(declared) : std::nullopt});
  };
  auto conv = [](std::size_t in, std::size_t out, std::size_t k, std::size_t s, std::size_t p) {
    return ConvSpec{in, out, k, k, s, p};
  };
  const PoolSpec reduce_pool{3, 2, 0};
  const PoolSpec parallel_pool{3, 1, 1};

  add("Data", LayerKind::data, {}, {}, Shape{1, 224, 224});
  add("Convolution 1", LayerKind::conv, conv(1, c1, 7, 2, 3), {"Data"}, Shape{64, 112, 112});
  add("ReLU 1", LayerKind::relu, {}, {"Convolution 1"});
  add("Pooling 1", LayerKind::maxpool, reduce_pool, {"ReLU 1"}, Shape{64, 56, 56});
  add("LRN 1", LayerKind::lrn, LrnSpec{}, {"Pooling 1"}, Shape{64, 56, 56});

  // Parallel feature extraction: 1x1 -> 3x3 next to pool -> 1x1, concatenated.
  auto featex = [&](const std::string& id, const std::string& input, std::size_t in_channels, std::size_t spatial) {
    add("Convolution " + id + "a", LayerKind::conv, conv(in_channels, reduce, 1, 1, 0), {input},
        Shape{96, spatial, spatial});
    add("ReLU " + id + "a", LayerKind::relu, {}, {"Convolution " + id + "a"});
    add("Convolution " + id + "b", LayerKind::conv, conv(reduce, wide, 3, 1, 1), {"ReLU " + id + "a"},
        Shape{208, spatial, spatial});
    add("ReLU " + id + "b", LayerKind::relu, {}, {"Convolution " + id + "b"});
    add("Pooling " + id + "a", LayerKind::maxpool, parallel_pool, {input}, Shape{in_channels, spatial, spatial});
    add("Convolution " + id + "c", LayerKind::conv, conv(in_channels, side, 1, 1, 0), {"Pooling " + id + "a"},
        Shape{64, spatial, spatial});
    add("ReLU " + id + "c", LayerKind::relu, {}, {"Convolution " + id + "c"});
    add("Concat " + id, LayerKind::concat, {}, {"ReLU " + id + "b", "ReLU " + id + "c"},
        Shape{272, spatial, spatial});
  };

  featex("2", "LRN 1", c1, 56);
  add("Pooling 2b", LayerKind::maxpool, reduce_pool, {"Concat 2"}, Shape{272, 28, 28});
  std::string block_input = "Pooling 2b";
  if (options.second_block) {
    featex("3", "Pooling 2b", block_out, 28);
    block_input = "Concat 3";
  }
  // The published table lists 282 channels here; max pooling keeps Concat 3's 272.
  add("Pooling 3b", LayerKind::maxpool, reduce_pool, {block_input}, Shape{272, 14, 14});

  // Size the classifier from the actual pooled feature map.
  Shape pooled = conv(1, c1, 7, 2, 3).output_shape(Shape{1, options.input_size, options.input_size});
  pooled = reduce_pool.output_shape(pooled);
  pooled = reduce_pool.output_shape(Shape{block_out, pooled[1], pooled[2]});
  pooled = reduce_pool.output_shape(pooled);
  const FcSpec fc{pooled.elements(), options.num_classes};
  add("FC", LayerKind::fc, fc, {"Pooling 3b"}, Shape{options.num_classes});
  add("Classifier", LayerKind::softmax, {}, {"FC"}, Shape{options.num_classes});
  return NetworkGraph(Shape{1, options.input_size, options.input_size}, options.num_classes, std::move(layers));
}

DexpressionOptions small_dexpression_options(std::size_t num_classes) {
  DexpressionOptions options;
  options.num_classes = num_classes;
  options.input_size = 16;
  options.channel_divisor = 16;
  return options;
}

ShapeTable infer_shapes(const NetworkGraph& graph) {
  ShapeTable table;
  table.reserve(graph.layers().size());
  for (std::size_t i = 0; i < graph.layers().size(); ++i) {
    const LayerSpec& layer = graph.layers()[i];
    const auto& inputs = graph.input_indices(i);
    auto in = [&](std::size_t k) -> const Shape& { return table[inputs[k]].second; };
    Shape out;
    try {
      switch (layer.kind) {
        case LayerKind::data:
          out = graph.input_shape();
          break;
        case LayerKind::conv:
          out = std::get<ConvSpec>(layer.params).output_shape(in(0));
          break;
        case LayerKind::maxpool:
          out = std::get<PoolSpec>(layer.params).output_shape(in(0));
          break;
        case LayerKind::lrn:
          std::get<LrnSpec>(layer.params).validate();
          if (in(0).rank() != 3) throw ShapeError("LRN expects a [C,H,W] input, got " + in(0).to_string());
          out = in(0);
          break;
        case LayerKind::relu:
          out = in(0);
          break;
        case LayerKind::concat: {
          const Shape& a = in(0);
          const Shape& b = in(1);
          if (a.rank() != 3 || b.rank() != 3 || a[1] != b[1] || a[2] != b[2]) {
            throw ShapeError("cannot concatenate " + a.to_string() + " and " + b.to_string());
          }
          out = Shape{a[0] + b[0], a[1], a[2]};
          break;
        }
        case LayerKind::fc: {
          const auto& fc = std::get<FcSpec>(layer.params);
          if (in(0).elements() != fc.in_dim) {
            throw ShapeError("expects " + std::to_string(fc.in_dim) + " inputs, got " + in(0).to_string());
          }
          out = Shape{fc.out_dim};
          break;
        }
        case LayerKind::softmax:
          if (in(0).rank() != 1) throw ShapeError("softmax expects a vector, got " + in(0).to_string());
          out = in(0);
          break;
      }
    } catch (const ShapeError& e) {
      shape_conflict(layer, e.what());
    } catch (const ConfigError& e) {
      shape_conflict(layer, e.what());
    }
    if (layer.declared_shape && *layer.declared_shape != out) {
      shape_conflict(layer, "declared " + layer.declared_shape->to_string() + ", inferred " + out.to_string());
    }
    table.emplace_back(layer.name, std::move(out));
  }
  const Shape& last = table.back().second;
  if (last != Shape{graph.num_classes()}) {
    shape_conflict(graph.sink(), "classifier output " + last.to_string() + " does not match " +
                                     std::to_string(graph.num_classes()) + " classes");
  }
  return table;
}

Parameters<float> init_parameters(const NetworkGraph& graph, std::uint64_t seed) {
  Parameters<float> params;
  for (std::size_t i = 0; i < graph.layers().size(); ++i) {
    const LayerSpec& layer = graph.layers()[i];
    Shape weight_shape, bias_shape;
    double fan_in = 0, fan_out = 0;
    if (const auto* c = std::get_if<ConvSpec>(&layer.params)) {
      weight_shape = c->weight_shape();
      bias_shape = c->bias_shape();
      fan_in = static_cast<double>(c->in_channels * c->kernel_h * c->kernel_w);
      fan_out = static_cast<double>(c->out_channels * c->kernel_h * c->kernel_w);
    } else if (const auto* f = std::get_if<FcSpec>(&layer.params)) {
      weight_shape = f->weight_shape();
      bias_shape = f->bias_shape();
      fan_in = static_cast<double>(f->in_dim);
      fan_out = static_cast<double>(f->out_dim);
    } else {
      continue;
    }
    const double bound = std::sqrt(6.0 / (fan_in + fan_out));
    Rng rng(derive_seed(seed, i));
    Tensor w(weight_shape);
    for (float& v : w.data()) v = static_cast<float>(rng.uniform(-bound, bound));
    params.set(Parameters<float>::weights_key(layer.name), std::move(w));
    params.set(Parameters<float>::bias_key(layer.name), Tensor(bias_shape));
  }
  return params;
}

namespace {

template <typename T>
struct Trace {
  std::vector<BasicTensor<T>> outputs;
  std::vector<PoolIndexMap> pools;
};

template <typename T>
Trace<T> run_forward(const NetworkGraph& graph, const Parameters<T>& params, const BasicTensor<T>& input) {
  if (input.shape() != graph.input_shape()) {
    throw ShapeError("network input " + input.shape().to_string() + " does not match " +
                     graph.input_shape().to_string());
  }
  const auto& layers = graph.layers();
  Trace<T> trace;
  trace.outputs.resize(layers.size());
  trace.pools.resize(layers.size());
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const LayerSpec& layer = layers[i];
    const auto& inputs = graph.input_indices(i);
    auto in = [&](std::size_t k) -> const BasicTensor<T>& { return trace.outputs[inputs[k]]; };
    switch (layer.kind) {
      case LayerKind::data:
        trace.outputs[i] = input;
        break;
      case LayerKind::conv:
        trace.outputs[i] = conv_forward(in(0), std::get<ConvSpec>(layer.params), params.weights(layer.name),
                                        params.bias(layer.name));
        break;
      case LayerKind::maxpool: {
        auto pooled = maxpool_forward(in(0), std::get<PoolSpec>(layer.params));
        trace.outputs[i] = std::move(pooled.output);
        trace.pools[i] = std::move(pooled.indices);
        break;
      }
      case LayerKind::lrn:
        trace.outputs[i] = lrn_forward(in(0), std::get<LrnSpec>(layer.params));
        break;
      case LayerKind::relu:
        trace.outputs[i] = relu_forward(in(0));
        break;
      case LayerKind::concat:
        trace.outputs[i] = concat_channels(in(0), in(1));
        break;
      case LayerKind::fc:
        trace.outputs[i] = fc_forward(in(0), std::get<FcSpec>(layer.params), params.weights(layer.name),
                                      params.bias(layer.name));
        break;
      case LayerKind::softmax: {
        auto probs = softmax<T>(in(0).data());
        trace.outputs[i] = BasicTensor<T>(in(0).shape(), std::move(probs));
        break;
      }
    }
  }
  return trace;
}

template <typename T>
std::uint64_t pattern_hash(const NetworkGraph& graph, const Trace<T>& trace) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  auto mix = [&h](std::uint64_t v) {
    h ^= v;
    h *= 0x100000001b3ull;
  };
  for (std::size_t i = 0; i < graph.layers().size(); ++i) {
    const LayerKind kind = graph.layers()[i].kind;
    if (kind == LayerKind::relu) {
      for (T v : trace.outputs[i].data()) mix(v > T(0) ? 1 : 0);
    } else if (kind == LayerKind::maxpool) {
      for (std::size_t idx : trace.pools[i].argmax) mix(idx);
    }
  }
  return h;
}

template <typename T>
void accumulate(BasicTensor<T>& slot, BasicTensor<T>&& grad) {
  if (slot.empty()) {
    slot = std::move(grad);
  } else {
    slot += grad;
  }
}

}  // namespace

template <typename T>
ForwardResult<T> forward(const NetworkGraph& graph, const Parameters<T>& params, const BasicTensor<T>& input,
                         const ForwardOptions& options) {
  Trace<T> trace = run_forward(graph, params, input);
  ForwardResult<T> result;
  const std::size_t sink = graph.layers().size() - 1;
  result.logits = trace.outputs[graph.input_indices(sink)[0]];
  result.probabilities = trace.outputs[sink];
  if (options.pattern_signature) result.pattern = pattern_hash(graph, trace);
  if (options.capture_activations) {
    for (std::size_t i = 0; i < graph.layers().size(); ++i) {
      result.activations.emplace(graph.layers()[i].name, std::move(trace.outputs[i]));
    }
  }
  return result;
}

template <typename T>
BackwardResult<T> backward(const NetworkGraph& graph, const Parameters<T>& params, const BasicTensor<T>& input,
                           std::size_t target) {
  if (target >= graph.num_classes()) {
    throw DatasetError("target class " + std::to_string(target) + " out of range for " +
                       std::to_string(graph.num_classes()) + " classes");
  }
  Trace<T> trace = run_forward(graph, params, input);
  const auto& layers = graph.layers();
  const std::size_t sink = layers.size() - 1;
  const std::size_t logits_index = graph.input_indices(sink)[0];

  BackwardResult<T> result;
  result.probabilities = trace.outputs[sink];
  result.loss = cross_entropy<T>(trace.outputs[logits_index].data(), target);
  result.logit_gradient = result.probabilities;
  result.logit_gradient[target] -= T(1);
  result.gradients = params.zeros_like();

  std::vector<BasicTensor<T>> grads(layers.size());
  grads[logits_index] = result.logit_gradient;

  for (std::size_t i = logits_index + 1; i-- > 1;) {
    if (grads[i].empty()) continue;
    const LayerSpec& layer = layers[i];
    const auto& inputs = graph.input_indices(i);
    const BasicTensor<T>& x = trace.outputs[inputs.empty() ? 0 : inputs[0]];
    BasicTensor<T> g = std::move(grads[i]);
    switch (layer.kind) {
      case LayerKind::data:
      case LayerKind::softmax:
        break;
      case LayerKind::conv: {
        const bool need_input = layers[inputs[0]].kind != LayerKind::data;
        auto cg = conv_backward(x, std::get<ConvSpec>(layer.params), params.weights(layer.name), g, need_input);
        result.gradients.get(Parameters<T>::weights_key(layer.name)) = std::move(cg.weights);
        result.gradients.get(Parameters<T>::bias_key(layer.name)) = std::move(cg.bias);
        if (need_input) accumulate(grads[inputs[0]], std::move(cg.input));
        break;
      }
      case LayerKind::maxpool:
        accumulate(grads[inputs[0]], maxpool_backward(trace.pools[i], g));
        break;
      case LayerKind::lrn:
        accumulate(grads[inputs[0]], lrn_backward(x, std::get<LrnSpec>(layer.params), g));
        break;
      case LayerKind::relu:
        accumulate(grads[inputs[0]], relu_backward(x, g));
        break;
      case LayerKind::concat: {
        const std::size_t split = trace.outputs[inputs[0]].shape()[0];
        const std::size_t total = g.shape()[0];
        accumulate(grads[inputs[0]], g.channel_slice(0, split));
        accumulate(grads[inputs[1]], g.channel_slice(split, total));
        break;
      }
      case LayerKind::fc: {
        auto fg = fc_backward(x, std::get<FcSpec>(layer.params), params.weights(layer.name), g);
        result.gradients.get(Parameters<T>::weights_key(layer.name)) = std::move(fg.weights);
        result.gradients.get(Parameters<T>::bias_key(layer.name)) = std::move(fg.bias);
        if (layers[inputs[0]].kind != LayerKind::data) accumulate(grads[inputs[0]], std::move(fg.input));
        break;
      }
    }
  }
  return result;
}

template ForwardResult<float> forward(const NetworkGraph&, const Parameters<float>&, const Tensor&,
                                      const ForwardOptions&);
template ForwardResult<double> forward(const NetworkGraph&, const Parameters<double>&, const Tensor64&,
                                       const ForwardOptions&);
template BackwardResult<float> backward(const NetworkGraph&, const Parameters<float>&, const Tensor&, std::size_t);
template BackwardResult<double> backward(const NetworkGraph&, const Parameters<double>&, const Tensor64&,
                                         std::size_t);

}  // namespace dexpr
