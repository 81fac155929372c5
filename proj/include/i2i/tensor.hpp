#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <cstdint>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace i2i {

using Shape = std::vector<std::int64_t>;

class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

inline std::int64_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::int64_t{1},
                         std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

template <class T>
class Tape;

template <class T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  bool requires_grad = false;
  std::vector<T> grad;  // empty until a gradient is accumulated
  Tape<T>* tape = nullptr;
  std::size_t node = 0;  // index of the producing record on `tape`
};

/// Shared handle to an n-dimensional row-major array.
///
/// Copies alias the same storage; a parameter tied into two layer slots is a
/// single Tensor referenced twice. Leaves with requires_grad receive
/// gradients in their grad slot; results recorded on a Tape carry the index
/// of the producing record.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() : impl_(std::make_shared<TensorImpl<T>>()) {}

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
      : impl_(std::make_shared<TensorImpl<T>>()) {
    for (auto d : shape)
      if (d <= 0) throw ShapeError("tensor dims must be positive, got " + to_string(shape));
    if (static_cast<std::int64_t>(data.size()) != i2i::numel(shape))
      throw ShapeError("data length " + std::to_string(data.size()) +
                       " does not match shape " + to_string(shape));
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
    impl_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = static_cast<std::size_t>(i2i::numel(shape));
    return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
  }
  static Tensor full(Shape shape, T value) {
    auto n = static_cast<std::size_t>(i2i::numel(shape));
    return Tensor(std::move(shape), std::vector<T>(n, value));
  }
  static Tensor ones(Shape shape) { return full(std::move(shape), T(1)); }
  static Tensor scalar(T value) { return Tensor({1}, {value}); }

  const Shape& shape() const { return impl_->shape; }
  std::int64_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t rank() const { return impl_->shape.size(); }
  std::int64_t numel() const { return static_cast<std::int64_t>(impl_->data.size()); }

  std::span<T> data() { return impl_->data; }
  std::span<const T> data() const { return impl_->data; }
  std::vector<T>& values() { return impl_->data; }
  const std::vector<T>& values() const { return impl_->data; }
  T item() const {
    if (impl_->data.size() != 1) throw ContractError("item() on non-scalar tensor " + to_string(shape()));
    return impl_->data[0];
  }
  T operator[](std::size_t i) const { return impl_->data[i]; }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool v) { impl_->requires_grad = v; }
  bool has_grad() const { return !impl_->grad.empty(); }
  /// Gradient values; zeros when nothing has been accumulated.
  std::vector<T> grad() const {
    return has_grad() ? impl_->grad : std::vector<T>(impl_->data.size(), T(0));
  }
  std::vector<T>& grad_storage() { return impl_->grad; }
  void zero_grad() { impl_->grad.clear(); }

  bool is_leaf() const { return impl_->tape == nullptr; }
  /// True when reverse-mode flow can pass through this tensor.
  bool tracked() const { return impl_->tape != nullptr || impl_->requires_grad; }

  /// Deep copy with no graph attachment.
  Tensor clone(bool requires_grad = false) const {
    return Tensor(impl_->shape, impl_->data, requires_grad);
  }

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }
  TensorImpl<T>* impl() const { return impl_.get(); }
  const std::shared_ptr<TensorImpl<T>>& handle() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl<T>> impl_;
};

/// True when no value is NaN or infinite (exponent bits not all set).
template <class T>
bool all_finite(std::span<const T> values) {
  using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  constexpr Bits exp_mask = sizeof(T) == 4 ? Bits(0x7F800000u) : Bits(0x7FF0000000000000ull);
  Bits bad = 0;
  for (T v : values) {
    Bits b;
    std::memcpy(&b, &v, sizeof b);
    bad |= Bits((b & exp_mask) == exp_mask);
  }
  return bad == 0;
}

template <class To, class From>
Tensor<To> cast(const Tensor<From>& t) {
  std::vector<To> out(t.values().begin(), t.values().end());
  return Tensor<To>(t.shape(), std::move(out));
}

}  // namespace i2i
