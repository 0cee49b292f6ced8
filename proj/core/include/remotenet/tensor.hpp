#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "remotenet/errors.hpp"

namespace remotenet {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), int64_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape);

/// Dense row-major array of arbitrary rank with value semantics.
/// Rank-4 tensors follow the [batch, channels, height, width] convention.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0)) : shape_(std::move(shape)) {
    check_dims();
    data_.assign(static_cast<size_t>(shape_numel(shape_)), fill);
  }

  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_dims();
    if (static_cast<int64_t>(data_.size()) != shape_numel(shape_)) {
      throw ShapeError("tensor data size " + std::to_string(data_.size()) + " does not match shape " +
                       shape_str(shape_));
    }
  }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int64_t dim(int i) const { return shape_.at(static_cast<size_t>(i < 0 ? rank() + i : i)); }
  int64_t numel() const { return static_cast<int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  T& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  const T& operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

  T& at(int64_t n, int64_t c, int64_t h, int64_t w) { return data_[offset4(n, c, h, w)]; }
  const T& at(int64_t n, int64_t c, int64_t h, int64_t w) const { return data_[offset4(n, c, h, w)]; }

  Tensor reshaped(Shape shape) const {
    if (shape_numel(shape) != numel()) {
      throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    }
    return Tensor(std::move(shape), data_);
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.size());
    std::transform(data_.begin(), data_.end(), out.begin(), [](T v) { return static_cast<U>(v); });
    return Tensor<U>(shape_, std::move(out));
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void check_dims() const {
    for (auto d : shape_) {
      if (d < 1) throw ShapeError("tensor dims must be >= 1, got " + shape_str(shape_));
    }
  }

  size_t offset4(int64_t n, int64_t c, int64_t h, int64_t w) const {
    return static_cast<size_t>(((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w);
  }

  Shape shape_;
  std::vector<T> data_;
};

/// Maximum absolute elementwise difference; shapes must match.
template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("max_abs_diff shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  T m = 0;
  for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace remotenet
