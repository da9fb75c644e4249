#pragma once

#include <algorithm>
#include <cstddef>
#include <cstring>
#include <initializer_list>
#include <iosfwd>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dexpr/errors.hpp"

namespace dexpr {

/// Ordered list of positive extents, e.g. [C, H, W].
///
/// A default-constructed Shape has rank 0 and describes an empty (unset)
/// tensor; its element count is 0.
class Shape {
 public:
  Shape() = default;
  Shape(std::initializer_list<std::size_t> dims) : Shape(std::vector<std::size_t>(dims)) {}
  explicit Shape(std::vector<std::size_t> dims) : dims_(std::move(dims)) {
    for (std::size_t d : dims_) {
      if (d == 0) throw ShapeError("shape extents must be >= 1, got " + to_string());
    }
  }

  std::size_t rank() const { return dims_.size(); }
  std::size_t operator[](std::size_t axis) const { return dims_.at(axis); }
  const std::vector<std::size_t>& dims() const { return dims_; }

  std::size_t elements() const {
    if (dims_.empty()) return 0;
    std::size_t n = 1;
    for (std::size_t d : dims_) n *= d;
    return n;
  }

  bool operator==(const Shape&) const = default;

  std::string to_string() const {
    std::string s = "[";
    for (std::size_t i = 0; i < dims_.size(); ++i) {
      if (i) s += ',';
      s += std::to_string(dims_[i]);
    }
    return s + "]";
  }

 private:
  std::vector<std::size_t> dims_;
};

/// Dense row-major array. Rank-3 tensors are [channels, height, width].
template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;
  explicit BasicTensor(Shape shape) : shape_(std::move(shape)), data_(shape_.elements(), T(0)) {}
  BasicTensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_.elements()) {
      throw ShapeError("buffer of " + std::to_string(data_.size()) + " values does not match shape " +
                       shape_.to_string());
    }
  }

  static BasicTensor zeros(Shape shape) { return BasicTensor(std::move(shape)); }
  static BasicTensor filled(Shape shape, T value) {
    BasicTensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), value);
    return t;
  }

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  const std::vector<T>& values() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& at(std::size_t c, std::size_t h, std::size_t w) { return data_[(c * shape_[1] + h) * shape_[2] + w]; }
  const T& at(std::size_t c, std::size_t h, std::size_t w) const {
    return data_[(c * shape_[1] + h) * shape_[2] + w];
  }

  BasicTensor reshaped(Shape shape) const& { return BasicTensor(std::move(shape), data_); }
  BasicTensor reshaped(Shape shape) && { return BasicTensor(std::move(shape), std::move(data_)); }

  /// Channels [begin, end) of a rank-3 tensor.
  BasicTensor channel_slice(std::size_t begin, std::size_t end) const {
    if (shape_.rank() != 3 || begin >= end || end > shape_[0]) {
      throw ShapeError("invalid channel slice [" + std::to_string(begin) + "," + std::to_string(end) + ") of " +
                       shape_.to_string());
    }
    const std::size_t plane = shape_[1] * shape_[2];
    std::vector<T> out(data_.begin() + static_cast<std::ptrdiff_t>(begin * plane),
                       data_.begin() + static_cast<std::ptrdiff_t>(end * plane));
    return BasicTensor(Shape{end - begin, shape_[1], shape_[2]}, std::move(out));
  }

  template <typename U>
  BasicTensor<U> cast() const {
    std::vector<U> out(data_.size());
    std::transform(data_.begin(), data_.end(), out.begin(), [](T v) { return static_cast<U>(v); });
    return BasicTensor<U>(shape_, std::move(out));
  }

  void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

  BasicTensor& operator+=(const BasicTensor& other) {
    require_same_shape(other, "+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
    return *this;
  }

  /// this += scale * other
  void add_scaled(T scale, const BasicTensor& other) {
    require_same_shape(other, "add_scaled");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += scale * other.data_[i];
  }

  bool operator==(const BasicTensor&) const = default;

  bool bitwise_equal(const BasicTensor& other) const {
    return shape_ == other.shape_ &&
           (data_.empty() || std::memcmp(data_.data(), other.data_.data(), data_.size() * sizeof(T)) == 0);
  }

 private:
  void require_same_shape(const BasicTensor& other, const char* op) const {
    if (shape_ != other.shape_) {
      throw ShapeError(std::string(op) + ": shape " + shape_.to_string() + " vs " + other.shape_.to_string());
    }
  }

  Shape shape_;
  std::vector<T> data_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

template <typename T>
BasicTensor<T> zeros(Shape shape) {
  return BasicTensor<T>::zeros(std::move(shape));
}

template <typename T, typename F>
BasicTensor<T> elementwise_map(const BasicTensor<T>& t, F&& f) {
  std::vector<T> out(t.size());
  auto in = t.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(f(in[i]));
  return BasicTensor<T>(t.shape(), std::move(out));
}

/// Stacks the channels of `b` after those of `a`; both must be [C, H, W] with equal H and W.
template <typename T>
BasicTensor<T> concat_channels(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.rank() != 3 || sb.rank() != 3) {
    throw ShapeError("concat_channels needs rank-3 inputs, got " + sa.to_string() + " and " + sb.to_string());
  }
  if (sa[1] != sb[1] || sa[2] != sb[2]) {
    throw ShapeError("concat_channels spatial mismatch: " + sa.to_string() + " vs " + sb.to_string());
  }
  std::vector<T> out;
  out.reserve(a.size() + b.size());
  out.insert(out.end(), a.data().begin(), a.data().end());
  out.insert(out.end(), b.data().begin(), b.data().end());
  return BasicTensor<T>(Shape{sa[0] + sb[0], sa[1], sa[2]}, std::move(out));
}

/// Little-endian u32 rank, u32 dims, then f32 values in row-major order.
void write_tensor(std::ostream& out, const Tensor& t);
Tensor read_tensor(std::istream& in);

}  // namespace dexpr
