#pragma once

// Central finite-difference oracle for layer and loss gradients.
//
// The analytic gradient comes from the production float path. The numeric gradient is evaluated on
// a separate double-precision instantiation of the same layer holding identical parameters, so the
// oracle never reuses the code path it is checking.

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "splitlearn/layers.hpp"
#include "splitlearn/loss.hpp"

namespace splitlearn::oracle {

inline constexpr double kFiniteDifferenceStep = 1e-3;

/// |a - n| / max(|a|, |n|, floor), maximized over elements.
inline double max_relative_error(const std::vector<double>& analytic, const std::vector<double>& numeric, double floor = 1e-3) {
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric[i]), floor});
    worst = std::max(worst, std::abs(analytic[i] - numeric[i]) / denom);
  }
  return worst;
}

/// Input values that keep every finite-difference probe away from ReLU and max-pool kinks:
/// all values distinct, at least 0.01 apart, and at least 0.05 away from zero.
inline std::vector<float> kink_free_values(std::size_t n, std::mt19937_64& rng) {
  std::vector<float> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double magnitude = 0.05 + 0.01 * static_cast<double>(i);
    out[i] = static_cast<float>(i % 2 == 0 ? magnitude : -magnitude);
  }
  std::shuffle(out.begin(), out.end(), rng);
  return out;
}

struct LayerGradientReport {
  double input_error = 0.0;
  double parameter_error = 0.0;
  double worst() const { return std::max(input_error, parameter_error); }
};

/// Checks d(sum(weights * layer(x)))/dx and d/dparams for one random instance.
inline LayerGradientReport check_layer_gradient(const LayerSpec& spec, const Shape& input_shape, std::mt19937_64& rng) {
  Layer<float> layer(spec, 0);
  layer.initialize(rng);
  std::uniform_real_distribution<float> bias_dist(-0.5f, 0.5f);
  if (layer.parameters().size() > 1) {
    for (float& b : layer.parameters()[1].values()) b = bias_dist(rng);
  }
  Tensor input(input_shape, kink_free_values(shape_size(input_shape), rng));

  Tensor out = layer.forward(input);
  std::uniform_real_distribution<float> wdist(-1.0f, 1.0f);
  Tensor weights(out.shape());
  for (float& w : weights.values()) w = wdist(rng);
  Tensor grad_in = layer.backward(weights);

  // Double-precision twin with identical parameters.
  Layer<double> twin(spec, 0);
  for (std::size_t p = 0; p < twin.parameters().size(); ++p) twin.parameters()[p] = layer.parameters()[p].cast<double>();
  const BasicTensor<double> weights_d = weights.cast<double>();
  auto objective = [&](const BasicTensor<double>& x) {
    BasicTensor<double> y = twin.forward(x);
    double s = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * weights_d[i];
    return s;
  };

  const double h = kFiniteDifferenceStep;
  BasicTensor<double> x = input.cast<double>();
  std::vector<double> analytic, numeric;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + h;
    const double up = objective(x);
    x[i] = saved - h;
    const double down = objective(x);
    x[i] = saved;
    numeric.push_back((up - down) / (2 * h));
    analytic.push_back(grad_in[i]);
  }
  LayerGradientReport report;
  report.input_error = max_relative_error(analytic, numeric);

  analytic.clear();
  numeric.clear();
  for (std::size_t p = 0; p < twin.parameters().size(); ++p) {
    auto& param = twin.parameters()[p];
    for (std::size_t i = 0; i < param.size(); ++i) {
      const double saved = param[i];
      param[i] = saved + h;
      const double up = objective(x);
      param[i] = saved - h;
      const double down = objective(x);
      param[i] = saved;
      numeric.push_back((up - down) / (2 * h));
      analytic.push_back(std::as_const(layer.parameters()[p]).grad()[i]);
    }
  }
  report.parameter_error = max_relative_error(analytic, numeric);
  return report;
}

/// Checks the bce_loss gradient w.r.t. probabilities in (0.05, 0.95).
inline double check_bce_gradient(const Shape& shape, std::mt19937_64& rng) {
  std::uniform_real_distribution<float> pdist(0.05f, 0.95f);
  std::bernoulli_distribution ydist(0.5);
  Tensor p(shape), y(shape);
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i] = pdist(rng);
    y[i] = ydist(rng) ? 1.0f : 0.0f;
  }
  const auto analytic_loss = bce_loss(p, y);
  BasicTensor<double> pd = p.cast<double>();
  const BasicTensor<double> yd = y.cast<double>();
  std::vector<double> analytic, numeric;
  const double h = kFiniteDifferenceStep;
  for (std::size_t i = 0; i < pd.size(); ++i) {
    const double saved = pd[i];
    pd[i] = saved + h;
    const double up = bce_loss(pd, yd).value;
    pd[i] = saved - h;
    const double down = bce_loss(pd, yd).value;
    pd[i] = saved;
    numeric.push_back((up - down) / (2 * h));
    analytic.push_back(analytic_loss.grad[i]);
  }
  return max_relative_error(analytic, numeric);
}

/// Checks the multi-label loss gradient w.r.t. logits in (-4, 4).
inline double check_multi_label_gradient(const Shape& shape, std::mt19937_64& rng) {
  std::uniform_real_distribution<float> zdist(-4.0f, 4.0f);
  std::bernoulli_distribution ydist(0.3);
  Tensor z(shape), y(shape);
  for (std::size_t i = 0; i < z.size(); ++i) {
    z[i] = zdist(rng);
    y[i] = ydist(rng) ? 1.0f : 0.0f;
  }
  const auto analytic_loss = multi_label_bce_loss(z, y);
  BasicTensor<double> zd = z.cast<double>();
  const BasicTensor<double> yd = y.cast<double>();
  std::vector<double> analytic, numeric;
  const double h = kFiniteDifferenceStep;
  for (std::size_t i = 0; i < zd.size(); ++i) {
    const double saved = zd[i];
    zd[i] = saved + h;
    const double up = multi_label_bce_loss(zd, yd).value;
    zd[i] = saved - h;
    const double down = multi_label_bce_loss(zd, yd).value;
    zd[i] = saved;
    numeric.push_back((up - down) / (2 * h));
    analytic.push_back(analytic_loss.grad[i]);
  }
  return max_relative_error(analytic, numeric);
}

/// The layer kinds and small input shapes exercised by the gradient suite.
struct GradientCase {
  LayerSpec spec;
  Shape input;
};

inline std::vector<GradientCase> gradient_cases() {
  return {
      {Dense{5, 3}, {2, 5}},
      {Conv2d{2, 3, 3, 1, 1}, {2, 2, 5, 5}},
      {Conv2d{1, 2, 3, 2, 0}, {1, 1, 7, 7}},
      {Conv2d{1, 1, 1, 1, 0}, {1, 1, 3, 3}},
      {ReLU{}, {2, 6}},
      {Sigmoid{}, {2, 6}},
      {Flatten{}, {2, 2, 3, 3}},
      {MaxPool2d{2}, {2, 2, 4, 4}},
  };
}

}  // namespace splitlearn::oracle
