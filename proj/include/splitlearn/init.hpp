#pragma once

#include <algorithm>
#include <cmath>
#include <random>

#include "splitlearn/random.hpp"
#include "splitlearn/tensor.hpp"

namespace splitlearn {

/// Glorot/Xavier uniform: samples from [-L, L] with L = sqrt(6 / (fan_in + fan_out)).
template <typename T = float>
BasicTensor<T> glorot_uniform_init(const Shape& shape, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  if (fan_in == 0 || fan_out == 0) {
    throw Error(ErrorCode::InvalidArgument, "glorot_uniform_init: fan_in and fan_out must be >= 1");
  }
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-limit, limit);
  BasicTensor<T> out(shape);
  for (T& v : out.values()) {
    v = static_cast<T>(std::clamp(dist(rng), -limit, limit));
  }
  return out;
}

}  // namespace splitlearn
