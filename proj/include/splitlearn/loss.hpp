#pragma once

#include <algorithm>
#include <cmath>

#include "splitlearn/tensor.hpp"

namespace splitlearn {

inline constexpr double kProbabilityClamp = 1e-7;

template <typename T>
struct LossResult {
  double value = 0.0;
  BasicTensor<T> grad;  // d(loss)/d(input), same shape as the loss input
};

namespace detail {

template <typename T>
void check_loss_inputs(const BasicTensor<T>& input, const BasicTensor<T>& target, const char* name) {
  if (input.shape() != target.shape()) {
    throw Error(ErrorCode::ShapeMismatch, std::string(name) + ": input " + shape_string(input.shape()) + " vs target " +
                                              shape_string(target.shape()));
  }
  if (input.empty()) throw Error(ErrorCode::InvalidArgument, std::string(name) + ": empty input");
  for (T y : target.values()) {
    if (y != T{0} && y != T{1}) throw Error(ErrorCode::InvalidArgument, std::string(name) + ": targets must be 0 or 1");
  }
}

}  // namespace detail

/// Mean binary cross entropy over probabilities clamped to [eps, 1 - eps].
template <typename T>
LossResult<T> bce_loss(const BasicTensor<T>& prediction, const BasicTensor<T>& target) {
  detail::check_loss_inputs(prediction, target, "bce_loss");
  const T eps = static_cast<T>(kProbabilityClamp);
  const T count = static_cast<T>(prediction.size());
  LossResult<T> result{0.0, BasicTensor<T>(prediction.shape())};
  double total = 0.0;
  for (std::size_t i = 0; i < prediction.size(); ++i) {
    const T p = std::clamp(prediction[i], eps, T{1} - eps);
    const T y = target[i];
    total -= static_cast<double>(y * std::log(p) + (T{1} - y) * std::log(T{1} - p));
    result.grad[i] = (-y / p + (T{1} - y) / (T{1} - p)) / count;
  }
  result.value = total / static_cast<double>(prediction.size());
  return result;
}

/// Mean over batch and labels of BCE(sigmoid(logit), target), evaluated in the overflow-free form
/// max(z,0) - z*y + log(1 + exp(-|z|)). Gradient is (sigmoid(z) - y) / count.
template <typename T>
LossResult<T> multi_label_bce_loss(const BasicTensor<T>& logits, const BasicTensor<T>& targets) {
  detail::check_loss_inputs(logits, targets, "multi_label_bce_loss");
  if (logits.rank() != 2) {
    throw Error(ErrorCode::ShapeMismatch, "multi_label_bce_loss: expected [batch, labels], got " + shape_string(logits.shape()));
  }
  const T count = static_cast<T>(logits.size());
  LossResult<T> result{0.0, BasicTensor<T>(logits.shape())};
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const T z = logits[i];
    const T y = targets[i];
    total += static_cast<double>(std::max(z, T{0}) - z * y + std::log1p(std::exp(-std::abs(z))));
    const T sig = z >= T{0} ? T{1} / (T{1} + std::exp(-z)) : std::exp(z) / (T{1} + std::exp(z));
    result.grad[i] = (sig - y) / count;
  }
  result.value = total / static_cast<double>(logits.size());
  return result;
}

}  // namespace splitlearn
