#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "splitlearn/network.hpp"
#include "splitlearn/random.hpp"

namespace splitlearn {

enum class Accessibility { Local, Central };
enum class LinkRole { Front, Center, Back };

inline std::string_view to_string(LinkRole role) {
  switch (role) {
    case LinkRole::Front: return "front";
    case LinkRole::Center: return "center";
    case LinkRole::Back: return "back";
  }
  return "?";
}

inline Accessibility accessibility_of(LinkRole role) {
  return role == LinkRole::Center ? Accessibility::Central : Accessibility::Local;
}

/// Architecture plus the two cut points of a U-shaped chain.
///
/// Layers [0, front_cut) form the front, [front_cut, back_cut) the center and
/// [back_cut, end) the back. `input_shape` is the per-sample shape, e.g. (C, H, W).
struct ChainConfig {
  std::vector<LayerSpec> architecture;
  Shape input_shape;
  std::size_t front_cut = 0;
  std::size_t back_cut = 0;
  Task task;

  /// MiniConvNet with the default cuts: front = first conv + ReLU, back = final Dense.
  static ChainConfig mini_conv(Task task, std::size_t channels, std::size_t height, std::size_t width) {
    ChainConfig cfg;
    cfg.architecture = mini_conv_net(channels, height, width, task.n_outputs());
    cfg.input_shape = {channels, height, width};
    cfg.front_cut = 2;
    cfg.back_cut = cfg.architecture.size() - 1;
    cfg.task = task;
    return cfg;
  }

  std::size_t n_outputs() const noexcept { return task.n_outputs(); }

  void validate() const {
    const std::size_t n = architecture.size();
    if (n < 3 || front_cut < 1 || front_cut >= back_cut || back_cut > n - 1) {
      throw Error(ErrorCode::InvalidChain, "cuts must satisfy 1 <= front_cut < back_cut <= " + std::to_string(n == 0 ? 0 : n - 1) +
                                               ", got front_cut=" + std::to_string(front_cut) + " back_cut=" + std::to_string(back_cut));
    }
    if (input_shape.empty()) throw Error(ErrorCode::InvalidChain, "input_shape must have rank >= 1");
    Shape batched{1};
    batched.insert(batched.end(), input_shape.begin(), input_shape.end());
    const Shape out = infer_output_shape(architecture, batched);
    if (out != Shape{1, n_outputs()}) {
      throw Error(ErrorCode::InvalidChain, "architecture produces " + shape_string(out) + ", task needs [B," + std::to_string(n_outputs()) + "]");
    }
  }

  Shape batch_shape(std::size_t batch) const {
    Shape s{batch};
    s.insert(s.end(), input_shape.begin(), input_shape.end());
    return s;
  }
};

/// A contiguous slice of the architecture together with its owner-side optimizer state.
class Link {
 public:
  Link() = default;
  Link(LinkRole role, std::size_t first_layer, Sequential<float> net, Task task)
      : role_(role), first_layer_(first_layer), net_(std::move(net)), task_(task) {}

  LinkRole role() const noexcept { return role_; }
  Accessibility accessibility() const noexcept { return accessibility_of(role_); }
  std::size_t first_layer() const noexcept { return first_layer_; }
  const Task& task() const noexcept { return task_; }
  Sequential<float>& net() noexcept { return net_; }
  const Sequential<float>& net() const noexcept { return net_; }

  void require_role(LinkRole expected, const char* op) const {
    if (role_ != expected) {
      throw Error(ErrorCode::InvalidArgument, std::string(op) + " called on the " + std::string(to_string(role_)) + " link");
    }
  }

 private:
  LinkRole role_ = LinkRole::Front;
  std::size_t first_layer_ = 0;
  Sequential<float> net_;
  Task task_;
};

struct Chain {
  Link front;
  Link center;
  Link back;
};

/// The unsplit network, initialized from `rng` exactly as build_chain would be.
inline Sequential<float> build_monolithic(const ChainConfig& config, Rng& rng) {
  config.validate();
  Sequential<float> net(config.architecture);
  net.initialize(rng);
  return net;
}

inline Chain build_chain(const ChainConfig& config, Rng& rng) {
  Sequential<float> full = build_monolithic(config, rng);
  const std::size_t n = full.size();
  Chain chain;
  chain.front = Link(LinkRole::Front, 0, full.take(0, config.front_cut), config.task);
  chain.center = Link(LinkRole::Center, config.front_cut, full.take(config.front_cut, config.back_cut), config.task);
  chain.back = Link(LinkRole::Back, config.back_cut, full.take(config.back_cut, n), config.task);
  return chain;
}

inline Tensor forward_front(Link& front, const Tensor& batch) {
  front.require_role(LinkRole::Front, "forward_front");
  return front.net().forward(batch);
}

inline Tensor forward_center(Link& center, const Tensor& cut_activation) {
  center.require_role(LinkRole::Center, "forward_center");
  return center.net().forward(cut_activation);
}

struct BackResult {
  double loss = 0.0;
  Tensor grad;           // gradient at the back link's input, to be returned to the center
  Tensor probabilities;  // per-output probabilities for evaluation
};

inline BackResult forward_back_and_loss(Link& back, const Tensor& pre_back_activation, const Tensor& labels) {
  back.require_role(LinkRole::Back, "forward_back_and_loss");
  Tensor logits = back.net().forward(pre_back_activation);
  HeadResult<float> head = apply_head(back.task(), logits, labels);
  BackResult out;
  out.loss = head.loss;
  out.probabilities = std::move(head.probabilities);
  out.grad = back.net().backward(head.grad);
  return out;
}

/// Loss and probabilities without a backward pass; parameter gradients are left untouched.
inline BackResult forward_back_eval(Link& back, const Tensor& pre_back_activation, const Tensor& labels) {
  back.require_role(LinkRole::Back, "forward_back_eval");
  HeadResult<float> head = apply_head(back.task(), back.net().forward(pre_back_activation), labels);
  BackResult out;
  out.loss = head.loss;
  out.probabilities = std::move(head.probabilities);
  return out;
}

inline Tensor backward_center(Link& center, const Tensor& grad_from_back) {
  center.require_role(LinkRole::Center, "backward_center");
  return center.net().backward(grad_from_back);
}

inline void backward_front(Link& front, const Tensor& grad_from_center) {
  front.require_role(LinkRole::Front, "backward_front");
  front.net().backward(grad_from_center, false);
}

inline void step_all(Link& front, Link& center, Link& back, const AdamHyperParams& hyper) {
  front.net().step(hyper);
  center.net().step(hyper);
  back.net().step(hyper);
}

/// One full split training step over an in-process chain; returns the batch loss.
inline double split_train_step(Chain& chain, const Tensor& batch, const Tensor& labels, const AdamHyperParams& hyper) {
  Tensor cut = forward_front(chain.front, batch);
  Tensor pre_back = forward_center(chain.center, cut);
  BackResult back = forward_back_and_loss(chain.back, pre_back, labels);
  Tensor to_front = backward_center(chain.center, back.grad);
  backward_front(chain.front, to_front);
  step_all(chain.front, chain.center, chain.back, hyper);
  return back.loss;
}

/// One monolithic training step with the same op order as split_train_step; returns the batch loss.
inline double monolithic_train_step(Sequential<float>& net, const Task& task, const Tensor& batch, const Tensor& labels,
                                    const AdamHyperParams& hyper) {
  Tensor logits = net.forward(batch);
  HeadResult<float> head = apply_head(task, logits, labels);
  net.backward(head.grad, false);
  net.step(hyper);
  return head.loss;
}

/// All parameter values of a chain in architecture order.
inline std::vector<Tensor> chain_parameters(const Chain& chain) {
  std::vector<Tensor> out = chain.front.net().parameter_values();
  for (const Link* link : {&chain.center, &chain.back}) {
    auto p = link->net().parameter_values();
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

}  // namespace splitlearn
