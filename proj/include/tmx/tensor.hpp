#pragma once

#include <cmath>
#include <utility>
#include <vector>

#include "tmx/common.hpp"

namespace tmx {

// Dense row-major n-d array. Plain value type; gradients live on the tape.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape)
      : shape_(std::move(shape)), data_(shape_numel(shape_), T(0)) {}

  Tensor(Shape shape, T fill)
      : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

  Tensor(Shape shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (static_cast<int64_t>(data_.size()) != shape_numel(shape_))
      throw ShapeError("tensor data size " + std::to_string(data_.size()) +
                       " does not match shape " + shape_str(shape_));
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, T v) { return Tensor(std::move(shape), v); }
  static Tensor scalar(T v) { return Tensor(Shape{1}, std::vector<T>{v}); }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
  int64_t numel() const { return static_cast<int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  // Leading dim as rows, everything else flattened as the row width.
  int rows() const { return shape_.empty() ? 0 : shape_[0]; }
  int64_t row_width() const { return shape_.empty() ? 0 : numel() / shape_[0]; }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::vector<T>& vec() { return data_; }
  const std::vector<T>& vec() const { return data_; }

  T& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  const T& operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

  T& at(int i, int j) { return data_[static_cast<size_t>(i) * row_width() + j]; }
  const T& at(int i, int j) const {
    return data_[static_cast<size_t>(i) * row_width() + j];
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  Tensor reshaped(Shape s) const {
    if (shape_numel(s) != numel())
      throw ShapeError("reshape: cannot view " + shape_str(shape_) + " as " +
                       shape_str(s));
    return Tensor(std::move(s), data_);
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.size());
    for (size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
    return Tensor<U>(shape_, std::move(out));
  }

  bool all_finite() const {
    for (const T& v : data_)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

 private:
  Shape shape_;
  std::vector<T> data_;
};

}  // namespace tmx
