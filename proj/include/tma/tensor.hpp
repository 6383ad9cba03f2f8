#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace tma {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

/// Dense row-major tensor. Rank 0 is a scalar, rank 1 a vector, rank 2 a
/// matrix (rows x cols).
template <std::floating_point T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() : shape_{0} {}

  explicit BasicTensor(Shape shape, T fill = T(0))
      : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

  BasicTensor(Shape shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_size(shape_) != data_.size())
      throw std::invalid_argument("tensor: shape " + shape_string(shape_) +
                                  " does not match " +
                                  std::to_string(data_.size()) + " values");
  }

  static BasicTensor scalar(T v) { return BasicTensor(Shape{}, std::vector<T>{v}); }
  static BasicTensor vector(std::vector<T> v) {
    const std::size_t n = v.size();
    return BasicTensor(Shape{n}, std::move(v));
  }
  static BasicTensor matrix(std::size_t rows, std::size_t cols, std::vector<T> v) {
    return BasicTensor(Shape{rows, cols}, std::move(v));
  }
  static BasicTensor zeros(Shape shape) { return BasicTensor(std::move(shape), T(0)); }

  /// Element-wise conversion to another scalar type.
  template <std::floating_point U>
  BasicTensor<U> cast() const {
    return BasicTensor<U>(shape_, std::vector<U>(data_.begin(), data_.end()));
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::size_t rows() const { return rank() == 0 ? 1 : shape_[0]; }
  std::size_t cols() const { return rank() < 2 ? 1 : shape_[1]; }

  T& operator[](std::size_t i) { return data_[i]; }
  T operator[](std::size_t i) const { return data_[i]; }
  T& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  T at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  const std::vector<T>& values() const { return data_; }

  std::span<T> row(std::size_t r) { return std::span<T>(data_).subspan(r * cols(), cols()); }
  std::span<const T> row(std::size_t r) const {
    return std::span<const T>(data_).subspan(r * cols(), cols());
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  BasicTensor& operator+=(const BasicTensor& o) {
    check_same_shape(o);
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }
  BasicTensor& operator*=(T s) {
    for (T& v : data_) v *= s;
    return *this;
  }

  void check_same_shape(const BasicTensor& o) const {
    if (shape_ != o.shape_)
      throw std::invalid_argument("tensor: shape mismatch " + shape_string(shape_) +
                                  " vs " + shape_string(o.shape_));
  }

  friend bool operator==(const BasicTensor&, const BasicTensor&) = default;

 private:
  Shape shape_;
  std::vector<T> data_;
};

using Tensor = BasicTensor<double>;

template <class T>
bool all_finite(const BasicTensor<T>& t) {
  return std::all_of(t.data().begin(), t.data().end(),
                     [](T v) { return std::isfinite(v); });
}

template <class T>
T squared_norm(const BasicTensor<T>& t) {
  T s = 0;
  for (T v : t.data()) s += v * v;
  return s;
}

/// Numerically stable softmax (shifted by the maximum).
template <std::floating_point T>
std::vector<T> softmax(std::span<const T> v) {
  if (v.empty()) throw std::invalid_argument("softmax: empty input");
  const T m = *std::max_element(v.begin(), v.end());
  std::vector<T> out(v.size());
  T z = 0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = std::exp(v[i] - m);
    z += out[i];
  }
  for (T& p : out) p /= z;
  return out;
}

template <std::floating_point T>
std::vector<T> softmax(const std::vector<T>& v) {
  return softmax(std::span<const T>(v));
}

template <std::floating_point T>
T sigmoid(T x) {
  return T(1) / (T(1) + std::exp(-x));
}

}  // namespace tma
