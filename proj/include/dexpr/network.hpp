#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

#include "dexpr/layers.hpp"
#include "dexpr/tensor.hpp"

namespace dexpr {

enum class LayerKind { data, conv, maxpool, lrn, relu, concat, fc, softmax };

std::string_view to_string(LayerKind kind);
LayerKind layer_kind_from_string(std::string_view name);

using LayerParams = std::variant<std::monostate, ConvSpec, PoolSpec, LrnSpec, FcSpec>;

struct LayerSpec {
  std::string name;
  LayerKind kind = LayerKind::relu;
  LayerParams params;
  std::vector<std::string> inputs;
  /// Expected output shape; checked by infer_shapes when present.
  std::optional<Shape> declared_shape;

  bool operator==(const LayerSpec&) const = default;
};

/// Layer DAG in topological order. Construction validates structure: unique
/// names, inputs that refer to earlier layers, per-kind arity, a single
/// `data` source first, and a single sink that is the softmax classifier.
class NetworkGraph {
 public:
  NetworkGraph() = default;
  NetworkGraph(Shape input_shape, std::size_t num_classes, std::vector<LayerSpec> layers);

  const std::vector<LayerSpec>& layers() const { return layers_; }
  const Shape& input_shape() const { return input_shape_; }
  std::size_t num_classes() const { return num_classes_; }

  std::optional<std::size_t> index_of(std::string_view name) const;
  const LayerSpec& layer(std::string_view name) const;
  const LayerSpec& sink() const { return layers_.back(); }
  /// Indices of the layers feeding layer `i`.
  const std::vector<std::size_t>& input_indices(std::size_t i) const { return input_index_[i]; }
  std::vector<std::string> layer_names() const;

  bool operator==(const NetworkGraph& other) const {
    return input_shape_ == other.input_shape_ && num_classes_ == other.num_classes_ && layers_ == other.layers_;
  }

 private:
  Shape input_shape_;
  std::size_t num_classes_ = 0;
  std::vector<LayerSpec> layers_;
  std::vector<std::vector<std::size_t>> input_index_;
};

struct DexpressionOptions {
  std::size_t num_classes = 7;
  /// Side length of the square single-channel input.
  std::size_t input_size = 224;
  /// Divides every convolution's filter count; 1 gives the published widths.
  std::size_t channel_divisor = 1;
  /// Omit the second feature-extraction block (Convolution 3a .. Concat 3).
  bool second_block = true;
};

/// Data -> Conv1 -> Pool1 -> LRN1 -> FeatEx(2) -> Pool2b -> FeatEx(3) -> Pool3b -> FC -> Classifier.
/// Layer names follow the output-size table ("Convolution 2a", "Pooling 2b", "Concat 2", ...). With
/// the default options every tabulated layer carries its declared shape.
NetworkGraph build_dexpression(const DexpressionOptions& options);
inline NetworkGraph build_dexpression(std::size_t num_classes) {
  DexpressionOptions options;
  options.num_classes = num_classes;
  return build_dexpression(options);
}

/// Shrunken variant used for gradient checks and fast tests: 16x16 input, widths / 16.
DexpressionOptions small_dexpression_options(std::size_t num_classes = 2);

using ShapeTable = std::vector<std::pair<std::string, Shape>>;

/// Output shape of every layer, in graph order. Throws ShapeError naming the
/// offending layer and its producer(s) on any inconsistency.
ShapeTable infer_shapes(const NetworkGraph& graph);

/// Named parameter tensors, keyed "<layer>.weights" and "<layer>.bias".
template <typename T>
class Parameters {
 public:
  static std::string weights_key(std::string_view layer) { return std::string(layer) + ".weights"; }
  static std::string bias_key(std::string_view layer) { return std::string(layer) + ".bias"; }

  const BasicTensor<T>& weights(std::string_view layer) const { return get(weights_key(layer)); }
  const BasicTensor<T>& bias(std::string_view layer) const { return get(bias_key(layer)); }

  const BasicTensor<T>& get(const std::string& key) const {
    auto it = tensors_.find(key);
    if (it == tensors_.end()) throw ShapeError("missing parameter tensor '" + key + "'");
    return it->second;
  }
  BasicTensor<T>& get(const std::string& key) {
    auto it = tensors_.find(key);
    if (it == tensors_.end()) throw ShapeError("missing parameter tensor '" + key + "'");
    return it->second;
  }
  bool contains(const std::string& key) const { return tensors_.contains(key); }
  void set(const std::string& key, BasicTensor<T> value) { tensors_[key] = std::move(value); }

  std::map<std::string, BasicTensor<T>>& tensors() { return tensors_; }
  const std::map<std::string, BasicTensor<T>>& tensors() const { return tensors_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [key, t] : tensors_) n += t.size();
    return n;
  }

  /// Zero tensors with the same keys and shapes.
  Parameters zeros_like() const {
    Parameters out;
    for (const auto& [key, t] : tensors_) out.tensors_.emplace(key, BasicTensor<T>(t.shape()));
    return out;
  }

  Parameters& operator+=(const Parameters& other) {
    for (auto& [key, t] : tensors_) t += other.get(key);
    return *this;
  }

  template <typename U>
  Parameters<U> cast() const {
    Parameters<U> out;
    for (const auto& [key, t] : tensors_) out.set(key, t.template cast<U>());
    return out;
  }

  bool bitwise_equal(const Parameters& other) const {
    if (tensors_.size() != other.tensors_.size()) return false;
    for (const auto& [key, t] : tensors_) {
      auto it = other.tensors_.find(key);
      if (it == other.tensors_.end() || !t.bitwise_equal(it->second)) return false;
    }
    return true;
  }

 private:
  std::map<std::string, BasicTensor<T>> tensors_;
};

/// Uniform Glorot initialization, a = sqrt(6 / (fan_in + fan_out)); zero biases.
Parameters<float> init_parameters(const NetworkGraph& graph, std::uint64_t seed);

struct ForwardOptions {
  bool capture_activations = false;
  /// Hash of every ReLU sign pattern and pooling argmax; two inputs with equal
  /// signatures lie in the same piecewise-smooth region of the network.
  bool pattern_signature = false;
};

template <typename T>
struct ForwardResult {
  BasicTensor<T> logits;
  BasicTensor<T> probabilities;
  std::map<std::string, BasicTensor<T>> activations;
  std::uint64_t pattern = 0;
};

template <typename T>
ForwardResult<T> forward(const NetworkGraph& graph, const Parameters<T>& params, const BasicTensor<T>& input,
                         const ForwardOptions& options = {});

template <typename T>
struct BackwardResult {
  T loss = 0;
  BasicTensor<T> probabilities;
  /// d loss / d logits, i.e. probabilities - one_hot(target).
  BasicTensor<T> logit_gradient;
  Parameters<T> gradients;
};

/// Cross-entropy gradients for one sample, with softmax and loss fused.
template <typename T>
BackwardResult<T> backward(const NetworkGraph& graph, const Parameters<T>& params, const BasicTensor<T>& input,
                           std::size_t target);

}  // namespace dexpr
