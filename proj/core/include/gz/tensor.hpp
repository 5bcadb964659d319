#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "gz/error.hpp"

namespace gz {

/// Default element type. Verification builds instantiate everything with double too.
using Real = float;

using Shape = std::vector<int>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_volume(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1},
                         [](std::size_t a, int b) { return a * static_cast<std::size_t>(b); });
}

// Dense row-major array of up to four dimensions, [n, c, h, w] by convention.
// A default-constructed tensor is empty (no shape, no data).
template <typename Dtype>
class Tensor {
 public:
  using value_type = Dtype;

  Tensor() = default;

  explicit Tensor(Shape shape, Dtype fill = Dtype{0}) : shape_(std::move(shape)) {
    check_shape(shape_);
    data_.assign(shape_volume(shape_), fill);
  }

  Tensor(Shape shape, std::vector<Dtype> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape(shape_);
    if (data_.size() != shape_volume(shape_)) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_str(shape_));
    }
  }

  bool empty() const noexcept { return shape_.empty(); }
  const Shape& shape() const noexcept { return shape_; }
  std::size_t ndim() const noexcept { return shape_.size(); }
  int dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const noexcept { return data_.size(); }

  // [n, c, h, w] accessors; valid on 4-d tensors.
  int n() const { return shape_.at(0); }
  int c() const { return shape_.at(1); }
  int h() const { return shape_.at(2); }
  int w() const { return shape_.at(3); }

  Dtype* data() noexcept { return data_.data(); }
  const Dtype* data() const noexcept { return data_.data(); }
  std::span<Dtype> values() noexcept { return data_; }
  std::span<const Dtype> values() const noexcept { return data_; }

  Dtype& operator[](std::size_t i) { return data_[i]; }
  const Dtype& operator[](std::size_t i) const { return data_[i]; }

  std::size_t offset(int n, int c, int h, int w) const {
    return ((static_cast<std::size_t>(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w;
  }
  Dtype& at(int n, int c, int h, int w) { return data_[offset(n, c, h, w)]; }
  const Dtype& at(int n, int c, int h, int w) const { return data_[offset(n, c, h, w)]; }

  // Pointer to the start of sample `n` (first extent).
  Dtype* sample(int n) { return data_.data() + static_cast<std::size_t>(n) * (data_.size() / shape_[0]); }
  const Dtype* sample(int n) const {
    return data_.data() + static_cast<std::size_t>(n) * (data_.size() / shape_[0]);
  }

  void fill(Dtype v) { std::fill(data_.begin(), data_.end(), v); }

  Tensor reshaped(Shape s) const {
    if (shape_volume(s) != data_.size()) {
      throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(s));
    }
    return Tensor(std::move(s), data_);
  }

  template <typename U>
  Tensor<U> cast() const {
    return Tensor<U>(shape_, std::vector<U>(data_.begin(), data_.end()));
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  static void check_shape(const Shape& s) {
    if (s.empty() || s.size() > 4) {
      throw ShapeError("tensor rank must be 1..4, got shape " + shape_str(s));
    }
    for (int e : s) {
      if (e < 1) throw ShapeError("tensor extents must be >= 1, got " + shape_str(s));
    }
  }

  Shape shape_;
  std::vector<Dtype> data_;
};

}  // namespace gz
