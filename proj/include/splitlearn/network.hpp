#pragma once

#include <cstddef>
#include <iterator>
#include <string>
#include <vector>

#include "splitlearn/adam.hpp"
#include "splitlearn/layers.hpp"
#include "splitlearn/loss.hpp"

namespace splitlearn {

enum class TaskKind { Binary, MultiLabel };

struct Task {
  TaskKind kind = TaskKind::Binary;
  std::size_t labels = 1;

  static Task binary() { return {TaskKind::Binary, 1}; }
  static Task multi_label(std::size_t k) { return {TaskKind::MultiLabel, k}; }

  std::size_t n_outputs() const noexcept { return labels; }
  friend bool operator==(const Task&, const Task&) = default;
};

/// The desk-scale reference classifier:
/// Conv(C,8,3,1,1) ReLU Pool(2) Conv(8,16,3,1,1) ReLU Pool(2) Flatten Dense(.,32) ReLU Dense(32,n_outputs).
inline std::vector<LayerSpec> mini_conv_net(std::size_t channels, std::size_t height, std::size_t width, std::size_t n_outputs) {
  if (height < 4 || width < 4) throw Error(ErrorCode::InvalidArgument, "mini_conv_net needs images of at least 4x4");
  return {
      Conv2d{channels, 8, 3, 1, 1}, ReLU{}, MaxPool2d{2},
      Conv2d{8, 16, 3, 1, 1},       ReLU{}, MaxPool2d{2},
      Flatten{},                    Dense{16 * (height / 4) * (width / 4), 32}, ReLU{},
      Dense{32, n_outputs},
  };
}

/// Propagates a batched input shape through an architecture, throwing on the first inconsistent layer.
inline Shape infer_output_shape(const std::vector<LayerSpec>& specs, Shape input, std::size_t first_index = 0) {
  for (std::size_t i = 0; i < specs.size(); ++i) input = output_shape(specs[i], input, first_index + i);
  return input;
}

/// An ordered run of layers with one Adam state per parameter tensor.
template <typename T>
class Sequential {
 public:
  Sequential() = default;

  Sequential(const std::vector<LayerSpec>& specs, std::size_t first_index = 0) {
    layers_.reserve(specs.size());
    for (std::size_t i = 0; i < specs.size(); ++i) layers_.emplace_back(specs[i], first_index + i);
    reset_optimizer();
  }

  explicit Sequential(std::vector<Layer<T>> layers) : layers_(std::move(layers)) { reset_optimizer(); }

  std::size_t size() const noexcept { return layers_.size(); }
  std::vector<Layer<T>>& layers() noexcept { return layers_; }
  const std::vector<Layer<T>>& layers() const noexcept { return layers_; }

  std::vector<LayerSpec> specs() const {
    std::vector<LayerSpec> out;
    for (const auto& l : layers_) out.push_back(l.spec());
    return out;
  }

  void initialize(Rng& rng) {
    for (auto& l : layers_) l.initialize(rng);
  }

  BasicTensor<T> forward(const BasicTensor<T>& input) {
    BasicTensor<T> x = input;
    for (auto& l : layers_) {
      x = l.forward(x);
      require_finite(x, "forward of layer " + std::to_string(l.index()) + " (" + layer_name(l.spec()) + ")");
    }
    return x;
  }

  /// With `input_grad` false the gradient w.r.t. the network input is skipped and an empty tensor returned.
  BasicTensor<T> backward(const BasicTensor<T>& upstream, bool input_grad = true) {
    BasicTensor<T> g = upstream;
    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) {
      const bool first = std::next(it) == layers_.rend();
      g = it->backward(g, input_grad || !first);
      if (input_grad || !first) require_finite(g, "backward of layer " + std::to_string(it->index()) + " (" + layer_name(it->spec()) + ")");
    }
    return g;
  }

  /// Adam on every parameter; refuses to touch anything if a gradient is missing.
  void step(const AdamHyperParams& hyper) {
    for (const auto& l : layers_) {
      for (const auto& p : l.parameters()) {
        if (!p.has_grad()) {
          throw Error(ErrorCode::MissingGradient, "layer " + std::to_string(l.index()) + " (" + layer_name(l.spec()) +
                                                      ") has a parameter without gradient; run backward first");
        }
      }
    }
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      auto& params = layers_[i].parameters();
      for (std::size_t j = 0; j < params.size(); ++j) adam_step(params[j], adam_[i][j], hyper);
    }
  }

  void zero_grad() {
    for (auto& l : layers_)
      for (auto& p : l.parameters()) p.clear_grad();
  }

  void reset_optimizer() {
    adam_.clear();
    for (const auto& l : layers_) {
      auto& states = adam_.emplace_back();
      for (const auto& p : l.parameters()) states.emplace_back(p.shape());
    }
  }

  /// Adam states indexed [layer][parameter].
  std::vector<std::vector<BasicAdamState<T>>>& optimizer_states() noexcept { return adam_; }
  const std::vector<std::vector<BasicAdamState<T>>>& optimizer_states() const noexcept { return adam_; }

  std::vector<BasicTensor<T>> parameter_values() const {
    std::vector<BasicTensor<T>> out;
    for (const auto& l : layers_)
      for (const auto& p : l.parameters()) out.push_back(BasicTensor<T>(p.shape(), std::vector<T>(p.values().begin(), p.values().end())));
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers_)
      for (const auto& p : l.parameters()) n += p.size();
    return n;
  }

  /// Moves layers [first, last) and their optimizer states into a new Sequential.
  Sequential take(std::size_t first, std::size_t last) {
    Sequential out;
    for (std::size_t i = first; i < last; ++i) {
      out.layers_.push_back(std::move(layers_[i]));
      out.adam_.push_back(std::move(adam_[i]));
    }
    return out;
  }

  /// Moves all layers and optimizer states of `tail` onto the end of this network.
  void append(Sequential&& tail) {
    for (std::size_t i = 0; i < tail.layers_.size(); ++i) {
      layers_.push_back(std::move(tail.layers_[i]));
      adam_.push_back(std::move(tail.adam_[i]));
    }
    tail.layers_.clear();
    tail.adam_.clear();
  }

 private:
  std::vector<Layer<T>> layers_;
  std::vector<std::vector<BasicAdamState<T>>> adam_;
};

template <typename T>
struct HeadResult {
  double loss = 0.0;
  BasicTensor<T> grad;           // gradient w.r.t. the network outputs (logits)
  BasicTensor<T> probabilities;  // sigmoid of the outputs
};

/// Task-specific output stage: sigmoid + BCE for Binary, combined sigmoid BCE on logits for MultiLabel.
template <typename T>
HeadResult<T> apply_head(const Task& task, const BasicTensor<T>& logits, const BasicTensor<T>& labels) {
  const Shape expected{logits.dim(0), task.n_outputs()};
  if (logits.shape() != expected || labels.shape() != expected) {
    throw Error(ErrorCode::ShapeMismatch, "task head expects outputs and labels of shape " + shape_string(expected) + ", got outputs " +
                                              shape_string(logits.shape()) + " and labels " + shape_string(labels.shape()));
  }
  HeadResult<T> out;
  if (task.kind == TaskKind::Binary) {
    Layer<T> sigmoid(Sigmoid{}, 0);
    out.probabilities = sigmoid.forward(logits);
    auto loss = bce_loss(out.probabilities, labels);
    out.loss = loss.value;
    out.grad = sigmoid.backward(loss.grad);
  } else {
    auto loss = multi_label_bce_loss(logits, labels);
    out.loss = loss.value;
    out.grad = std::move(loss.grad);
    Layer<T> sigmoid(Sigmoid{}, 0);
    out.probabilities = sigmoid.forward(logits);
  }
  return out;
}

}  // namespace splitlearn
