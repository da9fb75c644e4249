#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "dexpr/tensor.hpp"

namespace dexpr {

// Layer primitives. Every function is pure: caches needed by a backward pass
// (such as pooling argmax maps) are returned to the caller, never stored.
// Implemented for float (training) and double (gradient checking).

/// 2-D convolution geometry. Weights are [out, in, kernel_h, kernel_w], bias is [out].
struct ConvSpec {
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  std::size_t kernel_h = 1;
  std::size_t kernel_w = 1;
  std::size_t stride = 1;
  std::size_t padding = 0;

  Shape weight_shape() const { return Shape{out_channels, in_channels, kernel_h, kernel_w}; }
  Shape bias_shape() const { return Shape{out_channels}; }
  /// floor((H + 2p - k) / s) + 1; throws ShapeError on a channel mismatch or empty output.
  Shape output_shape(const Shape& input) const;

  bool operator==(const ConvSpec&) const = default;
};

/// Square max-pooling window with ceiling-rounded output extents.
struct PoolSpec {
  std::size_t window = 2;
  std::size_t stride = 2;
  std::size_t padding = 0;

  Shape output_shape(const Shape& input) const;

  bool operator==(const PoolSpec&) const = default;
};

/// Across-channel local response normalization:
///   y[c] = x[c] / (k + alpha/n * sum_{c' in window(c)} x[c']^2)^beta
struct LrnSpec {
  std::size_t local_size = 5;
  double alpha = 1e-4;
  double beta = 0.75;
  double k = 1.0;

  void validate() const;

  bool operator==(const LrnSpec&) const = default;
};

/// Fully connected layer with identity activation. Weights are [out_dim, in_dim].
struct FcSpec {
  std::size_t in_dim = 1;
  std::size_t out_dim = 1;

  Shape weight_shape() const { return Shape{out_dim, in_dim}; }
  Shape bias_shape() const { return Shape{out_dim}; }

  bool operator==(const FcSpec&) const = default;
};

template <typename T>
struct ConvGradients {
  BasicTensor<T> input;  // empty when not requested
  BasicTensor<T> weights;
  BasicTensor<T> bias;
};

template <typename T>
struct FcGradients {
  BasicTensor<T> input;
  BasicTensor<T> weights;
  BasicTensor<T> bias;
};

/// Flat source index (into the pooled input) of every output cell.
struct PoolIndexMap {
  Shape input_shape;
  Shape output_shape;
  std::vector<std::size_t> argmax;
};

template <typename T>
struct PoolResult {
  BasicTensor<T> output;
  PoolIndexMap indices;
};

/// Cross-correlation with zero padding:
///   out[o,u,v] = bias[o] + sum_{c,i,j} w[o,c,i,j] * x_pad[c, u*s+i, v*s+j]
template <typename T>
BasicTensor<T> conv_forward(const BasicTensor<T>& x, const ConvSpec& spec, const BasicTensor<T>& weights,
                            const BasicTensor<T>& bias);

template <typename T>
ConvGradients<T> conv_backward(const BasicTensor<T>& x, const ConvSpec& spec, const BasicTensor<T>& weights,
                               const BasicTensor<T>& grad_out, bool need_input_grad = true);

/// Padding cells never win; ties keep the first maximum in row-major scan order.
template <typename T>
PoolResult<T> maxpool_forward(const BasicTensor<T>& x, const PoolSpec& spec);

template <typename T>
BasicTensor<T> maxpool_backward(const PoolIndexMap& indices, const BasicTensor<T>& grad_out);

template <typename T>
BasicTensor<T> relu_forward(const BasicTensor<T>& x);

template <typename T>
BasicTensor<T> relu_backward(const BasicTensor<T>& x, const BasicTensor<T>& grad_out);

template <typename T>
BasicTensor<T> lrn_forward(const BasicTensor<T>& x, const LrnSpec& spec);

template <typename T>
BasicTensor<T> lrn_backward(const BasicTensor<T>& x, const LrnSpec& spec, const BasicTensor<T>& grad_out);

/// out = W * flatten(x) + bias, returned as a rank-1 tensor of length out_dim.
template <typename T>
BasicTensor<T> fc_forward(const BasicTensor<T>& x, const FcSpec& spec, const BasicTensor<T>& weights,
                          const BasicTensor<T>& bias);

/// The input gradient has the shape of `x`.
template <typename T>
FcGradients<T> fc_backward(const BasicTensor<T>& x, const FcSpec& spec, const BasicTensor<T>& weights,
                           const BasicTensor<T>& grad_out);

/// exp(x - max x) / sum exp(x - max x)
template <typename T>
std::vector<T> softmax(std::span<const T> logits);

/// Lowest index attaining the maximum.
template <typename T>
std::size_t argmax_class(std::span<const T> values);

/// -log softmax(logits)[target], evaluated as logsumexp(logits) - logits[target].
template <typename T>
T cross_entropy(std::span<const T> logits, std::size_t target);

}  // namespace dexpr
