#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "latentflow/core/error.hpp"

namespace latentflow {

using Shape = std::vector<std::size_t>;

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

/// Dense row-major array of real values. Value semantics; the data
/// length always equals the product of the extents, and every extent is
/// positive.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0)) : shape_(std::move(shape)) {
    validate_shape();
    data_.assign(shape_size(shape_), fill);
  }

  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape();
    if (data_.size() != shape_size(shape_)) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + latentflow::to_string(shape_));
    }
  }

  static Tensor vector(std::initializer_list<T> values) {
    return Tensor({values.size()}, std::vector<T>(values));
  }
  static Tensor vector(std::vector<T> values) {
    const std::size_t n = values.size();
    return Tensor({n}, std::move(values));
  }
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<T> values) {
    return Tensor({rows, cols}, std::move(values));
  }
  static Tensor scalar(T v) { return Tensor({1}, std::vector<T>{v}); }
  static Tensor eye(std::size_t n) {
    Tensor t({n, n});
    for (std::size_t i = 0; i < n; ++i) t(i, i) = T(1);
    return t;
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }
  std::size_t dim(std::size_t axis) const {
    if (axis >= shape_.size()) throw ShapeError("axis out of range for shape " + latentflow::to_string(shape_));
    return shape_[axis];
  }
  /// Row count of a matrix; rank-1 tensors count as a single row.
  std::size_t rows() const { return rank() == 1 ? 1 : shape_.front(); }
  /// Trailing extent: columns of a matrix, length of a vector.
  std::size_t cols() const { return rank() == 1 ? shape_.front() : size() / shape_.front(); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  std::vector<T>& storage() noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }
  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  std::span<T> row(std::size_t r) { return std::span<T>(data_).subspan(r * cols(), cols()); }
  std::span<const T> row(std::size_t r) const {
    return std::span<const T>(data_).subspan(r * cols(), cols());
  }

  Tensor reshaped(Shape shape) const {
    if (shape_size(shape) != size()) {
      throw ShapeError("cannot reshape " + latentflow::to_string(shape_) + " to " +
                       latentflow::to_string(shape));
    }
    return Tensor(std::move(shape), data_);
  }

  /// Copy of rows [begin, end) of a matrix.
  Tensor slice_rows(std::size_t begin, std::size_t end) const {
    if (begin >= end || end > rows()) throw ShapeError("row slice out of range");
    Shape s = shape_;
    if (s.size() == 1) s.insert(s.begin(), 1);
    s[0] = end - begin;
    const std::size_t w = cols();
    return Tensor(s, std::vector<T>(data_.begin() + begin * w, data_.begin() + end * w));
  }

  Tensor gather_rows(std::span<const std::size_t> indices) const {
    Shape s = shape_;
    if (s.size() == 1) s.insert(s.begin(), 1);
    s[0] = indices.size();
    const std::size_t w = cols();
    std::vector<T> out;
    out.reserve(indices.size() * w);
    for (auto i : indices) {
      if (i >= rows()) throw ShapeError("gather index out of range");
      out.insert(out.end(), data_.begin() + i * w, data_.begin() + (i + 1) * w);
    }
    return Tensor(s, std::move(out));
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  template <class U>
  Tensor<U> cast() const {
    return Tensor<U>(shape_, std::vector<U>(data_.begin(), data_.end()));
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void validate_shape() const {
    if (shape_.empty()) throw ShapeError("tensor shape must have at least one extent");
    for (auto e : shape_) {
      if (e == 0) throw ShapeError("tensor extents must be positive, got " + latentflow::to_string(shape_));
    }
  }

  Shape shape_;
  std::vector<T> data_;
};

template <class T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw ShapeError("max_abs_diff: shape mismatch");
  T m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

template <class T>
T norm_l2(std::span<const T> v) {
  T s = 0;
  for (T x : v) s += x * x;
  return std::sqrt(s);
}

template <class T>
T norm_linf(std::span<const T> v) {
  T m = 0;
  for (T x : v) m = std::max(m, std::abs(x));
  return m;
}

}  // namespace latentflow
