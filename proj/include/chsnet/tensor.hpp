#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "chsnet/errors.hpp"

namespace chs {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ')';
  return os.str();
}

/// Dense row-major array with an optional gradient slot.
///
/// Feature maps are rank 4 and channels-last: (batch, width, height, depth).
/// Kernels are (f, f, in_depth, filters). The gradient buffer is empty until
/// a backward pass allocates it.
template <typename T = double>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0)) : shape_(std::move(shape)) {
    check_extents();
    data_.assign(shape_size(shape_), fill);
  }

  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_extents();
    if (data_.size() != shape_size(shape_)) {
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_str(shape_));
    }
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const noexcept { return data_.size(); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  std::vector<T>& storage() noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  /// Scalar value of a single-element tensor.
  T item() const {
    if (data_.size() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape_));
    return data_[0];
  }

  bool has_grad() const noexcept { return !grad_.empty(); }
  std::span<T> grad() noexcept { return grad_; }
  std::span<const T> grad() const noexcept { return grad_; }
  void zero_grad() { grad_.assign(data_.size(), T(0)); }
  void drop_grad() noexcept { grad_.clear(); grad_.shrink_to_fit(); }

  bool requires_grad() const noexcept { return requires_grad_; }
  void set_requires_grad(bool v) noexcept { requires_grad_ = v; }

  /// Reinterpret with a new shape of identical element count.
  void reshape(Shape shape) {
    if (shape_size(shape) != data_.size()) {
      throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    }
    shape_ = std::move(shape);
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

 private:
  void check_extents() const {
    for (auto e : shape_) {
      if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape_));
    }
  }

  Shape shape_;
  std::vector<T> data_;
  std::vector<T> grad_;
  bool requires_grad_ = false;
};

template <typename T>
using TensorPtr = std::shared_ptr<Tensor<T>>;

template <typename T = double>
TensorPtr<T> make_tensor(Shape shape, T fill = T(0)) {
  return std::make_shared<Tensor<T>>(std::move(shape), fill);
}

template <typename T = double>
TensorPtr<T> make_tensor(Shape shape, std::vector<T> data) {
  return std::make_shared<Tensor<T>>(std::move(shape), std::move(data));
}

/// Leaf tensor that receives gradients.
template <typename T = double>
TensorPtr<T> make_param(Shape shape, T fill = T(0)) {
  auto t = make_tensor<T>(std::move(shape), fill);
  t->set_requires_grad(true);
  return t;
}

template <typename T, typename Rng>
TensorPtr<T> random_tensor(Shape shape, Rng& rng, T lo = T(-1), T hi = T(1)) {
  auto t = make_tensor<T>(std::move(shape));
  std::uniform_real_distribution<double> dist(static_cast<double>(lo), static_cast<double>(hi));
  for (auto& v : t->data()) v = static_cast<T>(dist(rng));
  return t;
}

/// Channels-last extents of a rank-4 feature map.
struct Dims4 {
  std::size_t n, w, h, c;

  std::size_t index(std::size_t b, std::size_t x, std::size_t y, std::size_t ch) const noexcept {
    return ((b * w + x) * h + y) * c + ch;
  }
  std::size_t pixels() const noexcept { return n * w * h; }
  Shape shape() const { return {n, w, h, c}; }
};

template <typename T>
Dims4 dims4(const Tensor<T>& t, const char* what = "feature map") {
  if (t.rank() != 4) {
    throw DimensionError(std::string(what) + " must be rank 4 (n,w,h,d), got " + shape_str(t.shape()));
  }
  return {t.dim(0), t.dim(1), t.dim(2), t.dim(3)};
}

}  // namespace chs
