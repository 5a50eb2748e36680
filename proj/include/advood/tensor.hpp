#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "advood/error.hpp"

namespace advood {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// Dense row-major array of doubles. A plain value type: gradient state lives
// in the Graph that produced it.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(shape_size(shape_), fill) {
    check_dims();
  }

  Tensor(Shape shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    check_dims();
    if (data_.size() != shape_size(shape_)) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_string(shape_));
    }
  }

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector{v}); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<const double> data() const { return data_; }
  std::span<double> data() { return data_; }
  const std::vector<double>& vec() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double item() const {
    if (data_.size() != 1) {
      throw ShapeError("item() on tensor of shape " + shape_string(shape_));
    }
    return data_[0];
  }

  // Contiguous slice along the leading dimension: rows [begin, end).
  Tensor rows(std::size_t begin, std::size_t end) const {
    if (rank() == 0 || begin > end || end > shape_[0]) {
      throw ShapeError("row range out of bounds for " + shape_string(shape_));
    }
    Shape s = shape_;
    s[0] = end - begin;
    const std::size_t stride = data_.size() / shape_[0];
    return Tensor(std::move(s),
                  std::vector<double>(data_.begin() + begin * stride,
                                      data_.begin() + end * stride));
  }

  Tensor row(std::size_t i) const {
    Tensor r = rows(i, i + 1);
    r.shape_.erase(r.shape_.begin());
    return r;
  }

  Tensor reshaped(Shape s) const {
    if (shape_size(s) != data_.size()) {
      throw ShapeError("cannot reshape " + shape_string(shape_) + " to " +
                       shape_string(s));
    }
    return Tensor(std::move(s), data_);
  }

  bool all_finite() const {
    for (double v : data_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  void check_dims() const {
    for (std::size_t d : shape_) {
      if (d == 0) {
        throw ShapeError("tensor dimensions must be positive, got " +
                         shape_string(shape_));
      }
    }
  }

  Shape shape_;
  std::vector<double> data_;
};

// Concatenates tensors along the leading dimension.
inline Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  Shape s = parts[0].shape();
  std::size_t n = 0;
  std::vector<double> data;
  for (const Tensor& p : parts) {
    if (p.rank() != s.size() ||
        !std::equal(p.shape().begin() + 1, p.shape().end(), s.begin() + 1)) {
      throw ShapeError("concat shape mismatch: " + shape_string(p.shape()) +
                       " vs " + shape_string(s));
    }
    n += p.dim(0);
    data.insert(data.end(), p.data().begin(), p.data().end());
  }
  s[0] = n;
  return Tensor(std::move(s), std::move(data));
}

// Gathers the given leading-dimension rows.
inline Tensor select_rows(const Tensor& t, std::span<const std::size_t> idx) {
  if (idx.empty()) throw ShapeError("select_rows with empty index set");
  const std::size_t stride = t.size() / t.dim(0);
  std::vector<double> data;
  data.reserve(idx.size() * stride);
  for (std::size_t i : idx) {
    if (i >= t.dim(0)) throw ShapeError("select_rows index out of range");
    data.insert(data.end(), t.data().begin() + i * stride,
                t.data().begin() + (i + 1) * stride);
  }
  Shape s = t.shape();
  s[0] = idx.size();
  return Tensor(std::move(s), std::move(data));
}

}  // namespace advood
