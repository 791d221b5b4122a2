#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "splitlearn/error.hpp"

namespace splitlearn {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
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

/// Dense row-major array with an optional gradient buffer of the same length.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;

  explicit BasicTensor(Shape shape, T fill = T{0}) : shape_(std::move(shape)) {
    validate_shape(shape_);
    values_.assign(shape_size(shape_), fill);
  }

  BasicTensor(Shape shape, std::vector<T> values) : shape_(std::move(shape)), values_(std::move(values)) {
    validate_shape(shape_);
    if (values_.size() != shape_size(shape_)) {
      throw Error(ErrorCode::ShapeMismatch, "tensor of shape " + shape_string(shape_) + " needs " +
                                                std::to_string(shape_size(shape_)) + " values, got " +
                                                std::to_string(values_.size()));
    }
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const noexcept { return values_.size(); }
  bool empty() const noexcept { return values_.empty(); }

  std::span<T> values() noexcept { return values_; }
  std::span<const T> values() const noexcept { return values_; }
  T* data() noexcept { return values_.data(); }
  const T* data() const noexcept { return values_.data(); }
  T& operator[](std::size_t i) { return values_[i]; }
  const T& operator[](std::size_t i) const { return values_[i]; }

  bool has_grad() const noexcept { return grad_.has_value(); }

  /// Gradient buffer, allocated as zeros on first access.
  std::span<T> grad() {
    if (!grad_) grad_.emplace(values_.size(), T{0});
    return *grad_;
  }

  std::span<const T> grad() const {
    if (!grad_) throw Error(ErrorCode::MissingGradient, "tensor " + shape_string(shape_) + " has no gradient");
    return *grad_;
  }

  void clear_grad() noexcept { grad_.reset(); }

  /// Reinterprets the same values under a new shape of equal element count.
  BasicTensor reshaped(Shape shape) const {
    return BasicTensor(std::move(shape), values_);
  }

  bool all_finite() const noexcept {
    // Non-finite values have an all-ones exponent. An integer OR reduction vectorizes, unlike std::isfinite with early exit.
    using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
    constexpr Bits exponent = static_cast<Bits>(sizeof(T) == 4 ? 0x7f800000ull : 0x7ff0000000000000ull);
    Bits bad = 0;
    for (T v : values_) bad |= static_cast<Bits>((std::bit_cast<Bits>(v) & exponent) == exponent);
    return bad == 0;
  }

  template <typename U>
  BasicTensor<U> cast() const {
    std::vector<U> out(values_.begin(), values_.end());
    return BasicTensor<U>(shape_, std::move(out));
  }

  /// Bitwise equality of shape and values; gradients are ignored.
  friend bool operator==(const BasicTensor& a, const BasicTensor& b) {
    return a.shape_ == b.shape_ &&
           (a.values_.empty() || std::memcmp(a.values_.data(), b.values_.data(), a.values_.size() * sizeof(T)) == 0);
  }

 private:
  static void validate_shape(const Shape& shape) {
    for (std::size_t d : shape) {
      if (d == 0) throw Error(ErrorCode::InvalidArgument, "tensor dimensions must be positive, got " + shape_string(shape));
    }
  }

  Shape shape_;
  std::vector<T> values_;
  std::optional<std::vector<T>> grad_;
};

using Tensor = BasicTensor<float>;

template <typename T>
void require_finite(const BasicTensor<T>& t, const std::string& where) {
  if (!t.all_finite()) throw Error(ErrorCode::NonFinite, "non-finite value produced by " + where);
}

}  // namespace splitlearn
