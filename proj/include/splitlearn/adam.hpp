#pragma once

#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include "splitlearn/tensor.hpp"

namespace splitlearn {

struct AdamHyperParams {
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float learning_rate = 1e-4f;
  float epsilon = 1e-8f;

  void validate() const {
    if (!(beta1 > 0.0f && beta1 < 1.0f)) throw Error(ErrorCode::InvalidArgument, "beta1 must lie in (0,1)");
    if (!(beta2 > 0.0f && beta2 < 1.0f)) throw Error(ErrorCode::InvalidArgument, "beta2 must lie in (0,1)");
    if (!(learning_rate > 0.0f)) throw Error(ErrorCode::InvalidArgument, "learning_rate must be positive");
    if (!(epsilon > 0.0f)) throw Error(ErrorCode::InvalidArgument, "epsilon must be positive");
  }
};

/// First/second moment buffers for one parameter tensor plus its update counter.
template <typename T>
struct BasicAdamState {
  BasicTensor<T> m;
  BasicTensor<T> v;
  std::uint64_t step = 0;

  BasicAdamState() = default;
  explicit BasicAdamState(const Shape& shape) : m(shape), v(shape) {}

  friend bool operator==(const BasicAdamState&, const BasicAdamState&) = default;
};

using AdamState = BasicAdamState<float>;

/// One bias-corrected Adam update. Consumes (clears) the parameter gradient.
template <typename T>
void adam_step(BasicTensor<T>& param, BasicAdamState<T>& state, const AdamHyperParams& hyper) {
  if (!param.has_grad()) throw Error(ErrorCode::MissingGradient, "adam_step: parameter " + shape_string(param.shape()) + " has no gradient");
  if (state.m.shape() != param.shape() || state.v.shape() != param.shape()) {
    throw Error(ErrorCode::ShapeMismatch, "adam_step: state shape does not mirror parameter " + shape_string(param.shape()));
  }
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const T correction1 = static_cast<T>(1.0 - std::pow(static_cast<double>(hyper.beta1), t));
  const T correction2 = static_cast<T>(1.0 - std::pow(static_cast<double>(hyper.beta2), t));
  const T b1 = hyper.beta1, b2 = hyper.beta2, lr = hyper.learning_rate, eps = hyper.epsilon;

  auto p = param.values();
  auto g = std::as_const(param).grad();
  auto m = state.m.values();
  auto v = state.v.values();
  for (std::size_t i = 0; i < p.size(); ++i) {
    m[i] = b1 * m[i] + (T{1} - b1) * g[i];
    v[i] = b2 * v[i] + (T{1} - b2) * g[i] * g[i];
    const T m_hat = m[i] / correction1;
    const T v_hat = v[i] / correction2;
    p[i] -= lr * m_hat / (std::sqrt(v_hat) + eps);
  }
  param.clear_grad();
}

}  // namespace splitlearn
