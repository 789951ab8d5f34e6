#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <vector>

#include "msf/common.hpp"

namespace msf {

// Dense row-major shape, rank 1..4. Canonical axis order is N, C, H, W;
// lower-rank tensors use the trailing axes (a rank-1 tensor is a vector of
// length d[0], a rank-3 tensor is C x H x W).
struct Shape {
  int rank = 0;
  std::array<std::int64_t, 4> d{0, 0, 0, 0};

  Shape() = default;
  Shape(std::initializer_list<std::int64_t> dims) {
    if (dims.size() < 1 || dims.size() > 4) {
      throw shape_error("Shape: rank must be between 1 and 4");
    }
    rank = static_cast<int>(dims.size());
    int i = 0;
    for (std::int64_t v : dims) {
      if (v < 1) throw shape_error("Shape: extents must be >= 1");
      d[i++] = v;
    }
  }

  std::int64_t numel() const {
    std::int64_t n = 1;
    for (int i = 0; i < rank; ++i) n *= d[i];
    return n;
  }

  std::int64_t operator[](int i) const { return d[i]; }

  bool operator==(const Shape& o) const {
    if (rank != o.rank) return false;
    for (int i = 0; i < rank; ++i) {
      if (d[i] != o.d[i]) return false;
    }
    return true;
  }
  bool operator!=(const Shape& o) const { return !(*this == o); }

  std::string str() const {
    std::ostringstream os;
    os << '[';
    for (int i = 0; i < rank; ++i) os << (i ? "x" : "") << d[i];
    os << ']';
    return os.str();
  }
};

// Dense tensor with an optional gradient buffer. Copying a Tensor copies the
// handle, not the storage; operator outputs are treated as immutable once
// produced. The scalar type is float for training/benchmarks and double for
// finite-difference checks.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& shape, bool requires_grad = false) {
    Tensor t;
    t.impl_ = std::make_shared<Impl>();
    t.impl_->shape = shape;
    t.impl_->data.assign(static_cast<std::size_t>(shape.numel()), T(0));
    t.impl_->requires_grad = requires_grad;
    return t;
  }

  static Tensor full(const Shape& shape, T value, bool requires_grad = false) {
    Tensor t = zeros(shape, requires_grad);
    std::fill(t.impl_->data.begin(), t.impl_->data.end(), value);
    return t;
  }

  static Tensor from_data(const Shape& shape, std::vector<T> values, bool requires_grad = false) {
    if (static_cast<std::int64_t>(values.size()) != shape.numel()) {
      throw shape_error("Tensor: data length " + std::to_string(values.size()) +
                        " does not match shape " + shape.str());
    }
    Tensor t;
    t.impl_ = std::make_shared<Impl>();
    t.impl_->shape = shape;
    t.impl_->data = std::move(values);
    t.impl_->requires_grad = requires_grad;
    return t;
  }

  static Tensor scalar(T value, bool requires_grad = false) {
    return from_data(Shape{1}, {value}, requires_grad);
  }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::int64_t numel() const { return impl_->shape.numel(); }

  std::span<T> data() { return {impl_->data.data(), impl_->data.size()}; }
  std::span<const T> data() const { return {impl_->data.data(), impl_->data.size()}; }

  T item() const {
    if (numel() != 1) throw shape_error("Tensor::item: tensor is not a scalar");
    return impl_->data[0];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool v) { impl_->requires_grad = v; }

  bool has_grad() const { return !impl_->grad.empty(); }

  // Gradient buffer, allocated to zeros on first access.
  std::span<T> grad() {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), T(0));
    return {impl_->grad.data(), impl_->grad.size()};
  }
  std::span<const T> grad() const {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), T(0));
    return {impl_->grad.data(), impl_->grad.size()};
  }

  void zero_grad() {
    if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), T(0));
  }

  // Copy of the tensor under a different shape with the same element count.
  // Used for rank adjustments outside the autograd graph (e.g. turning a
  // C x H x W sample into a 1 x C x H x W batch).
  Tensor reshape(const Shape& shape) const {
    if (shape.numel() != numel()) {
      throw shape_error("Tensor::reshape: cannot view " + impl_->shape.str() + " as " +
                        shape.str());
    }
    Tensor t;
    t.impl_ = std::make_shared<Impl>(*impl_);
    t.impl_->shape = shape;
    return t;
  }

  Tensor clone() const {
    Tensor t;
    t.impl_ = std::make_shared<Impl>(*impl_);
    return t;
  }

  bool same_storage(const Tensor& o) const { return impl_ == o.impl_; }

  // Element accessors for the canonical rank-4 layout.
  T& at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) {
    const Shape& s = impl_->shape;
    return impl_->data[((n * s.d[1] + c) * s.d[2] + h) * s.d[3] + w];
  }
  T at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const {
    const Shape& s = impl_->shape;
    return impl_->data[((n * s.d[1] + c) * s.d[2] + h) * s.d[3] + w];
  }

 private:
  struct Impl {
    Shape shape;
    std::vector<T> data;
    mutable std::vector<T> grad;  // empty until requested, then same length as data
    bool requires_grad = false;
  };
  std::shared_ptr<Impl> impl_;
};

template <typename T>
Tensor<T> randn(const Shape& shape, Rng& rng, T stddev = T(1), T mean = T(0)) {
  Tensor<T> t = Tensor<T>::zeros(shape);
  std::normal_distribution<double> dist(0.0, 1.0);
  for (T& v : t.data()) v = mean + stddev * static_cast<T>(dist(rng));
  return t;
}

template <typename T>
Tensor<T> rand_uniform(const Shape& shape, Rng& rng, T lo, T hi) {
  Tensor<T> t = Tensor<T>::zeros(shape);
  std::uniform_real_distribution<double> dist(static_cast<double>(lo), static_cast<double>(hi));
  for (T& v : t.data()) v = static_cast<T>(dist(rng));
  return t;
}

}  // namespace msf
