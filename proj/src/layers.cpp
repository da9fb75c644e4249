#include "dexpr/layers.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace dexpr {

namespace {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;

std::size_t conv_extent(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t pad) {
  const std::size_t padded = in + 2 * pad;
  if (padded < kernel) return 0;
  return (padded - kernel) / stride + 1;
}

void require_rank3(const Shape& s, const char* what) {
  if (s.rank() != 3) throw ShapeError(std::string(what) + " expects a [C,H,W] input, got " + s.to_string());
}

bool is_pointwise(const ConvSpec& spec) {
  return spec.kernel_h == 1 && spec.kernel_w == 1 && spec.stride == 1 && spec.padding == 0;
}

// Unfolds x into a [C*kh*kw, Ho*Wo] matrix; row (c*kh + i)*kw + j holds the
// padded input samples that meet kernel tap (i, j) of channel c.
template <typename T>
std::vector<T> im2col(const BasicTensor<T>& x, const ConvSpec& spec, std::size_t out_h, std::size_t out_w) {
  const std::size_t channels = x.shape()[0], height = x.shape()[1], width = x.shape()[2];
  const std::size_t cols = out_h * out_w;
  std::vector<T> buffer(channels * spec.kernel_h * spec.kernel_w * cols, T(0));
  const auto pad = static_cast<std::ptrdiff_t>(spec.padding);
  const auto stride = static_cast<std::ptrdiff_t>(spec.stride);
  T* row = buffer.data();
  for (std::size_t c = 0; c < channels; ++c) {
    const T* plane = x.data().data() + c * height * width;
    for (std::size_t i = 0; i < spec.kernel_h; ++i) {
      for (std::size_t j = 0; j < spec.kernel_w; ++j, row += cols) {
        for (std::size_t u = 0; u < out_h; ++u) {
          const std::ptrdiff_t y = static_cast<std::ptrdiff_t>(u) * stride + static_cast<std::ptrdiff_t>(i) - pad;
          if (y < 0 || y >= static_cast<std::ptrdiff_t>(height)) continue;
          const T* src = plane + static_cast<std::size_t>(y) * width;
          T* dst = row + u * out_w;
          for (std::size_t v = 0; v < out_w; ++v) {
            const std::ptrdiff_t xx =
                static_cast<std::ptrdiff_t>(v) * stride + static_cast<std::ptrdiff_t>(j) - pad;
            if (xx >= 0 && xx < static_cast<std::ptrdiff_t>(width)) dst[v] = src[xx];
          }
        }
      }
    }
  }
  return buffer;
}

template <typename T>
void col2im(const std::vector<T>& buffer, const ConvSpec& spec, std::size_t out_h, std::size_t out_w,
            BasicTensor<T>& grad_x) {
  const std::size_t channels = grad_x.shape()[0], height = grad_x.shape()[1], width = grad_x.shape()[2];
  const std::size_t cols = out_h * out_w;
  const auto pad = static_cast<std::ptrdiff_t>(spec.padding);
  const auto stride = static_cast<std::ptrdiff_t>(spec.stride);
  const T* row = buffer.data();
  for (std::size_t c = 0; c < channels; ++c) {
    T* plane = grad_x.data().data() + c * height * width;
    for (std::size_t i = 0; i < spec.kernel_h; ++i) {
      for (std::size_t j = 0; j < spec.kernel_w; ++j, row += cols) {
        for (std::size_t u = 0; u < out_h; ++u) {
          const std::ptrdiff_t y = static_cast<std::ptrdiff_t>(u) * stride + static_cast<std::ptrdiff_t>(i) - pad;
          if (y < 0 || y >= static_cast<std::ptrdiff_t>(height)) continue;
          T* dst = plane + static_cast<std::size_t>(y) * width;
          const T* src = row + u * out_w;
          for (std::size_t v = 0; v < out_w; ++v) {
            const std::ptrdiff_t xx =
                static_cast<std::ptrdiff_t>(v) * stride + static_cast<std::ptrdiff_t>(j) - pad;
            if (xx >= 0 && xx < static_cast<std::ptrdiff_t>(width)) dst[xx] += src[v];
          }
        }
      }
    }
  }
}

template <typename T>
void check_conv_params(const ConvSpec& spec, const BasicTensor<T>& weights) {
  if (weights.shape() != spec.weight_shape()) {
    throw ShapeError("conv weights " + weights.shape().to_string() + " do not match " +
                     spec.weight_shape().to_string());
  }
}

}  // namespace

Shape ConvSpec::output_shape(const Shape& input) const {
  require_rank3(input, "convolution");
  if (input[0] != in_channels) {
    throw ShapeError("convolution expects " + std::to_string(in_channels) + " input channels, got " +
                     input.to_string());
  }
  if (stride == 0) throw ShapeError("convolution stride must be >= 1");
  const std::size_t h = conv_extent(input[1], kernel_h, stride, padding);
  const std::size_t w = conv_extent(input[2], kernel_w, stride, padding);
  if (h == 0 || w == 0) {
    throw ShapeError("degenerate convolution output: kernel " + std::to_string(kernel_h) + "x" +
                     std::to_string(kernel_w) + " exceeds padded input " + input.to_string());
  }
  return Shape{out_channels, h, w};
}

Shape PoolSpec::output_shape(const Shape& input) const {
  require_rank3(input, "max pooling");
  if (window == 0 || stride == 0) throw ShapeError("pooling window and stride must be >= 1");
  if (padding >= window) throw ShapeError("pooling padding must be smaller than the window");
  auto extent = [&](std::size_t in) -> std::size_t {
    // ceil((in + 2p - window) / stride) + 1 over signed values: a window wider
    // than the padded input still yields one (clipped) cell.
    const auto span = static_cast<std::ptrdiff_t>(in + 2 * padding) - static_cast<std::ptrdiff_t>(window);
    const auto s = static_cast<std::ptrdiff_t>(stride);
    const std::ptrdiff_t steps = span >= 0 ? (span + s - 1) / s : -((-span) / s);
    std::ptrdiff_t out = steps + 1;
    // The last window must start inside the input or its left padding.
    if (padding > 0 && out > 0 && (out - 1) * s >= static_cast<std::ptrdiff_t>(in + padding)) --out;
    return out > 0 ? static_cast<std::size_t>(out) : 0;
  };
  const std::size_t h = extent(input[1]);
  const std::size_t w = extent(input[2]);
  if (h == 0 || w == 0) {
    throw ShapeError("degenerate pooling output: window " + std::to_string(window) + " exceeds input " +
                     input.to_string());
  }
  return Shape{input[0], h, w};
}

void LrnSpec::validate() const {
  if (local_size == 0 || local_size % 2 == 0) throw ConfigError("LRN local_size must be odd and >= 1");
  if (!(beta > 0.0)) throw ConfigError("LRN beta must be > 0");
  if (!(k > 0.0)) throw ConfigError("LRN k must be > 0");
}

template <typename T>
BasicTensor<T> conv_forward(const BasicTensor<T>& x, const ConvSpec& spec, const BasicTensor<T>& weights,
                            const BasicTensor<T>& bias) {
  const Shape out_shape = spec.output_shape(x.shape());
  check_conv_params(spec, weights);
  if (bias.size() != spec.out_channels) throw ShapeError("conv bias length does not match out_channels");
  const std::size_t out_h = out_shape[1], out_w = out_shape[2];
  const auto rows = static_cast<Eigen::Index>(spec.out_channels);
  const auto inner = static_cast<Eigen::Index>(spec.in_channels * spec.kernel_h * spec.kernel_w);
  const auto cols = static_cast<Eigen::Index>(out_h * out_w);

  BasicTensor<T> out(out_shape);
  MatrixMap<T> result(out.data().data(), rows, cols);
  ConstMatrixMap<T> w(weights.data().data(), rows, inner);
  if (is_pointwise(spec)) {
    result.noalias() = w * ConstMatrixMap<T>(x.data().data(), inner, cols);
  } else {
    const std::vector<T> unfolded = im2col(x, spec, out_h, out_w);
    result.noalias() = w * ConstMatrixMap<T>(unfolded.data(), inner, cols);
  }
  for (Eigen::Index o = 0; o < rows; ++o) result.row(o).array() += bias[static_cast<std::size_t>(o)];
  return out;
}

template <typename T>
ConvGradients<T> conv_backward(const BasicTensor<T>& x, const ConvSpec& spec, const BasicTensor<T>& weights,
                               const BasicTensor<T>& grad_out, bool need_input_grad) {
  const Shape out_shape = spec.output_shape(x.shape());
  check_conv_params(spec, weights);
  if (grad_out.shape() != out_shape) {
    throw ShapeError("conv grad_out " + grad_out.shape().to_string() + " does not match output " +
                     out_shape.to_string());
  }
  const std::size_t out_h = out_shape[1], out_w = out_shape[2];
  const auto rows = static_cast<Eigen::Index>(spec.out_channels);
  const auto inner = static_cast<Eigen::Index>(spec.in_channels * spec.kernel_h * spec.kernel_w);
  const auto cols = static_cast<Eigen::Index>(out_h * out_w);

  ConvGradients<T> grads;
  grads.weights = BasicTensor<T>(spec.weight_shape());
  grads.bias = BasicTensor<T>(spec.bias_shape());

  ConstMatrixMap<T> g(grad_out.data().data(), rows, cols);
  ConstMatrixMap<T> w(weights.data().data(), rows, inner);
  MatrixMap<T> gw(grads.weights.data().data(), rows, inner);
  for (std::size_t o = 0; o < spec.out_channels; ++o) {
    const T* row = grad_out.data().data() + o * out_h * out_w;
    T sum = 0;
    for (std::size_t i = 0; i < out_h * out_w; ++i) sum += row[i];
    grads.bias[o] = sum;
  }

  if (is_pointwise(spec)) {
    gw.noalias() = g * ConstMatrixMap<T>(x.data().data(), inner, cols).transpose();
    if (need_input_grad) {
      grads.input = BasicTensor<T>(x.shape());
      MatrixMap<T>(grads.input.data().data(), inner, cols).noalias() = w.transpose() * g;
    }
    return grads;
  }

  std::vector<T> unfolded = im2col(x, spec, out_h, out_w);
  gw.noalias() = g * ConstMatrixMap<T>(unfolded.data(), inner, cols).transpose();
  if (need_input_grad) {
    MatrixMap<T>(unfolded.data(), inner, cols).noalias() = w.transpose() * g;
    grads.input = BasicTensor<T>(x.shape());
    col2im(unfolded, spec, out_h, out_w, grads.input);
  }
  return grads;
}

template <typename T>
PoolResult<T> maxpool_forward(const BasicTensor<T>& x, const PoolSpec& spec) {
  const Shape out_shape = spec.output_shape(x.shape());
  const std::size_t channels = x.shape()[0], height = x.shape()[1], width = x.shape()[2];
  const std::size_t out_h = out_shape[1], out_w = out_shape[2];
  PoolResult<T> result{BasicTensor<T>(out_shape), PoolIndexMap{x.shape(), out_shape, {}}};
  result.indices.argmax.resize(out_shape.elements());
  const auto in = x.data();
  auto out = result.output.data();
  std::size_t o = 0;
  for (std::size_t c = 0; c < channels; ++c) {
    const std::size_t plane = c * height * width;
    for (std::size_t u = 0; u < out_h; ++u) {
      const std::ptrdiff_t y0 = static_cast<std::ptrdiff_t>(u * spec.stride) - static_cast<std::ptrdiff_t>(spec.padding);
      const std::size_t ys = static_cast<std::size_t>(std::max<std::ptrdiff_t>(y0, 0));
      const std::size_t ye = std::min(static_cast<std::size_t>(y0 + static_cast<std::ptrdiff_t>(spec.window)), height);
      for (std::size_t v = 0; v < out_w; ++v, ++o) {
        const std::ptrdiff_t x0 =
            static_cast<std::ptrdiff_t>(v * spec.stride) - static_cast<std::ptrdiff_t>(spec.padding);
        const std::size_t xs = static_cast<std::size_t>(std::max<std::ptrdiff_t>(x0, 0));
        const std::size_t xe =
            std::min(static_cast<std::size_t>(x0 + static_cast<std::ptrdiff_t>(spec.window)), width);
        std::size_t best = plane + ys * width + xs;
        T best_value = in[best];
        for (std::size_t yy = ys; yy < ye; ++yy) {
          for (std::size_t xx = xs; xx < xe; ++xx) {
            const std::size_t idx = plane + yy * width + xx;
            if (in[idx] > best_value) {
              best_value = in[idx];
              best = idx;
            }
          }
        }
        out[o] = best_value;
        result.indices.argmax[o] = best;
      }
    }
  }
  return result;
}

template <typename T>
BasicTensor<T> maxpool_backward(const PoolIndexMap& indices, const BasicTensor<T>& grad_out) {
  if (grad_out.shape() != indices.output_shape) {
    throw ShapeError("maxpool grad_out " + grad_out.shape().to_string() + " does not match output " +
                     indices.output_shape.to_string());
  }
  BasicTensor<T> grad_x(indices.input_shape);
  auto g = grad_out.data();
  for (std::size_t o = 0; o < indices.argmax.size(); ++o) grad_x[indices.argmax[o]] += g[o];
  return grad_x;
}

template <typename T>
BasicTensor<T> relu_forward(const BasicTensor<T>& x) {
  return elementwise_map(x, [](T v) { return std::max(v, T(0)); });
}

template <typename T>
BasicTensor<T> relu_backward(const BasicTensor<T>& x, const BasicTensor<T>& grad_out) {
  if (x.shape() != grad_out.shape()) throw ShapeError("relu_backward shape mismatch");
  BasicTensor<T> grad_x(x.shape());
  auto in = x.data();
  auto g = grad_out.data();
  for (std::size_t i = 0; i < in.size(); ++i) grad_x[i] = in[i] > T(0) ? g[i] : T(0);
  return grad_x;
}

namespace {

// scale[c,u,v] = k + alpha/n * sum over the clipped channel window of x^2
template <typename T>
std::vector<T> lrn_scale(const BasicTensor<T>& x, const LrnSpec& spec) {
  const std::size_t channels = x.shape()[0];
  const std::size_t plane = x.shape()[1] * x.shape()[2];
  const std::size_t half = spec.local_size / 2;
  const T coeff = static_cast<T>(spec.alpha / static_cast<double>(spec.local_size));
  std::vector<T> squares(x.size());
  auto in = x.data();
  for (std::size_t i = 0; i < in.size(); ++i) squares[i] = in[i] * in[i];
  std::vector<T> scale(x.size(), static_cast<T>(spec.k));
  for (std::size_t c = 0; c < channels; ++c) {
    const std::size_t lo = c >= half ? c - half : 0;
    const std::size_t hi = std::min(channels - 1, c + half);
    T* dst = scale.data() + c * plane;
    for (std::size_t cc = lo; cc <= hi; ++cc) {
      const T* src = squares.data() + cc * plane;
      for (std::size_t p = 0; p < plane; ++p) dst[p] += coeff * src[p];
    }
  }
  return scale;
}

}  // namespace

template <typename T>
BasicTensor<T> lrn_forward(const BasicTensor<T>& x, const LrnSpec& spec) {
  require_rank3(x.shape(), "LRN");
  spec.validate();
  const std::vector<T> scale = lrn_scale(x, spec);
  const T beta = static_cast<T>(spec.beta);
  BasicTensor<T> out(x.shape());
  auto in = x.data();
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] * std::pow(scale[i], -beta);
  return out;
}

template <typename T>
BasicTensor<T> lrn_backward(const BasicTensor<T>& x, const LrnSpec& spec, const BasicTensor<T>& grad_out) {
  require_rank3(x.shape(), "LRN");
  spec.validate();
  if (grad_out.shape() != x.shape()) throw ShapeError("lrn_backward shape mismatch");
  const std::size_t channels = x.shape()[0];
  const std::size_t plane = x.shape()[1] * x.shape()[2];
  const std::size_t half = spec.local_size / 2;
  const T beta = static_cast<T>(spec.beta);
  const std::vector<T> scale = lrn_scale(x, spec);
  auto in = x.data();
  auto g = grad_out.data();

  // dy[c']/dx[c] = delta * scale^-beta - 2*alpha*beta/n * x[c] * x[c'] * scale[c']^(-beta-1)
  // ratio[c'] = g[c'] * x[c'] * scale[c']^(-beta-1); the window is symmetric in c and c'.
  std::vector<T> ratio(x.size());
  BasicTensor<T> grad_x(x.shape());
  for (std::size_t i = 0; i < in.size(); ++i) {
    const T s = std::pow(scale[i], -beta);
    grad_x[i] = g[i] * s;
    ratio[i] = g[i] * in[i] * s / scale[i];
  }
  const T coeff = static_cast<T>(2.0 * spec.alpha * spec.beta / static_cast<double>(spec.local_size));
  for (std::size_t c = 0; c < channels; ++c) {
    const std::size_t lo = c >= half ? c - half : 0;
    const std::size_t hi = std::min(channels - 1, c + half);
    for (std::size_t p = 0; p < plane; ++p) {
      T acc = 0;
      for (std::size_t cc = lo; cc <= hi; ++cc) acc += ratio[cc * plane + p];
      grad_x[c * plane + p] -= coeff * in[c * plane + p] * acc;
    }
  }
  return grad_x;
}

template <typename T>
BasicTensor<T> fc_forward(const BasicTensor<T>& x, const FcSpec& spec, const BasicTensor<T>& weights,
                          const BasicTensor<T>& bias) {
  if (x.size() != spec.in_dim) {
    throw ShapeError("fully connected layer expects " + std::to_string(spec.in_dim) + " inputs, got " +
                     std::to_string(x.size()));
  }
  if (weights.shape() != spec.weight_shape() || bias.size() != spec.out_dim) {
    throw ShapeError("fully connected parameters do not match " + spec.weight_shape().to_string());
  }
  BasicTensor<T> out(Shape{spec.out_dim});
  Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> y(out.data().data(), static_cast<Eigen::Index>(spec.out_dim));
  y.noalias() = ConstMatrixMap<T>(weights.data().data(), static_cast<Eigen::Index>(spec.out_dim),
                                  static_cast<Eigen::Index>(spec.in_dim)) *
                Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>(x.data().data(),
                                                                      static_cast<Eigen::Index>(spec.in_dim));
  for (std::size_t i = 0; i < spec.out_dim; ++i) out[i] += bias[i];
  return out;
}

template <typename T>
FcGradients<T> fc_backward(const BasicTensor<T>& x, const FcSpec& spec, const BasicTensor<T>& weights,
                           const BasicTensor<T>& grad_out) {
  if (x.size() != spec.in_dim || grad_out.size() != spec.out_dim || weights.shape() != spec.weight_shape()) {
    throw ShapeError("fully connected backward dimension mismatch");
  }
  const auto rows = static_cast<Eigen::Index>(spec.out_dim);
  const auto cols = static_cast<Eigen::Index>(spec.in_dim);
  using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;
  Eigen::Map<const Vec> g(grad_out.data().data(), rows);
  Eigen::Map<const Vec> in(x.data().data(), cols);

  FcGradients<T> grads{BasicTensor<T>(x.shape()), BasicTensor<T>(spec.weight_shape()),
                       BasicTensor<T>(spec.bias_shape(), std::vector<T>(grad_out.data().begin(), grad_out.data().end()))};
  Eigen::Map<Vec>(grads.input.data().data(), cols).noalias() =
      ConstMatrixMap<T>(weights.data().data(), rows, cols).transpose() * g;
  MatrixMap<T>(grads.weights.data().data(), rows, cols).noalias() = g * in.transpose();
  return grads;
}

template <typename T>
std::vector<T> softmax(std::span<const T> logits) {
  std::vector<T> out(logits.size());
  if (logits.empty()) return out;
  const T peak = *std::max_element(logits.begin(), logits.end());
  T total = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - peak);
    total += out[i];
  }
  for (T& v : out) v /= total;
  return out;
}

template <typename T>
std::size_t argmax_class(std::span<const T> values) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[best]) best = i;
  }
  return best;
}

template <typename T>
T cross_entropy(std::span<const T> logits, std::size_t target) {
  if (target >= logits.size()) throw DatasetError("target class " + std::to_string(target) + " out of range");
  const T peak = *std::max_element(logits.begin(), logits.end());
  T total = 0;
  for (T v : logits) total += std::exp(v - peak);
  return std::log(total) + peak - logits[target];
}

#define DEXPR_INSTANTIATE_LAYERS(T)                                                                              \
  template BasicTensor<T> conv_forward(const BasicTensor<T>&, const ConvSpec&, const BasicTensor<T>&,          \
                                       const BasicTensor<T>&);                                                 \
  template ConvGradients<T> conv_backward(const BasicTensor<T>&, const ConvSpec&, const BasicTensor<T>&,       \
                                          const BasicTensor<T>&, bool);                                        \
  template PoolResult<T> maxpool_forward(const BasicTensor<T>&, const PoolSpec&);                              \
  template BasicTensor<T> maxpool_backward(const PoolIndexMap&, const BasicTensor<T>&);                        \
  template BasicTensor<T> relu_forward(const BasicTensor<T>&);                                                 \
  template BasicTensor<T> relu_backward(const BasicTensor<T>&, const BasicTensor<T>&);                         \
  template BasicTensor<T> lrn_forward(const BasicTensor<T>&, const LrnSpec&);                                  \
  template BasicTensor<T> lrn_backward(const BasicTensor<T>&, const LrnSpec&, const BasicTensor<T>&);          \
  template BasicTensor<T> fc_forward(const BasicTensor<T>&, const FcSpec&, const BasicTensor<T>&,              \
                                     const BasicTensor<T>&);                                                   \
  template FcGradients<T> fc_backward(const BasicTensor<T>&, const FcSpec&, const BasicTensor<T>&,             \
                                      const BasicTensor<T>&);                                                  \
  template std::vector<T> softmax(std::span<const T>);                                                         \
  template std::size_t argmax_class(std::span<const T>);                                                       \
  template T cross_entropy(std::span<const T>, std::size_t);

DEXPR_INSTANTIATE_LAYERS(float)
DEXPR_INSTANTIATE_LAYERS(double)

#undef DEXPR_INSTANTIATE_LAYERS

}  // namespace dexpr
