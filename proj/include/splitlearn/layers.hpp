#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <type_traits>
#include <utility>
#include <variant>
#include <vector>

#include "splitlearn/init.hpp"
#include "splitlearn/kernels.hpp"
#include "splitlearn/tensor.hpp"

namespace splitlearn {

struct Dense {
  std::size_t in = 0;
  std::size_t out = 0;
  friend bool operator==(const Dense&, const Dense&) = default;
};

struct Conv2d {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel = 1;
  std::size_t stride = 1;
  std::size_t padding = 0;
  friend bool operator==(const Conv2d&, const Conv2d&) = default;
};

struct ReLU {
  friend bool operator==(const ReLU&, const ReLU&) = default;
};

struct Sigmoid {
  friend bool operator==(const Sigmoid&, const Sigmoid&) = default;
};

struct Flatten {
  friend bool operator==(const Flatten&, const Flatten&) = default;
};

/// Non-overlapping max pooling: window and stride both equal `kernel`.
struct MaxPool2d {
  std::size_t kernel = 2;
  friend bool operator==(const MaxPool2d&, const MaxPool2d&) = default;
};

using LayerSpec = std::variant<Dense, Conv2d, ReLU, Sigmoid, Flatten, MaxPool2d>;

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

inline std::string layer_name(const LayerSpec& spec) {
  return std::visit(
      overloaded{
          [](const Dense& d) { return "Dense(" + std::to_string(d.in) + "," + std::to_string(d.out) + ")"; },
          [](const Conv2d& c) {
            return "Conv2d(" + std::to_string(c.in_channels) + "," + std::to_string(c.out_channels) + "," +
                   std::to_string(c.kernel) + "," + std::to_string(c.stride) + "," + std::to_string(c.padding) + ")";
          },
          [](const ReLU&) { return std::string("ReLU"); },
          [](const Sigmoid&) { return std::string("Sigmoid"); },
          [](const Flatten&) { return std::string("Flatten"); },
          [](const MaxPool2d& p) { return "MaxPool2d(" + std::to_string(p.kernel) + ")"; },
      },
      spec);
}

/// Parameter shapes in storage order (weight first, then bias).
inline std::vector<Shape> parameter_shapes(const LayerSpec& spec) {
  return std::visit(overloaded{
                        [](const Dense& d) { return std::vector<Shape>{{d.in, d.out}, {d.out}}; },
                        [](const Conv2d& c) {
                          return std::vector<Shape>{{c.out_channels, c.in_channels, c.kernel, c.kernel}, {c.out_channels}};
                        },
                        [](const auto&) { return std::vector<Shape>{}; },
                    },
                    spec);
}

namespace detail {

inline std::size_t conv_extent(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t pad) {
  return (in + 2 * pad - kernel) / stride + 1;
}

[[noreturn]] inline void shape_error(std::size_t index, const LayerSpec& spec, const std::string& expected, const Shape& actual) {
  throw Error(ErrorCode::ShapeMismatch, "layer " + std::to_string(index) + " (" + layer_name(spec) + "): expected input " +
                                            expected + ", got " + shape_string(actual));
}

}  // namespace detail

/// Output shape for a batched input, or a ShapeMismatch error naming the layer.
inline Shape output_shape(const LayerSpec& spec, const Shape& in, std::size_t index = 0) {
  return std::visit(
      overloaded{
          [&](const Dense& d) -> Shape {
            if (in.size() != 2 || in[1] != d.in) detail::shape_error(index, spec, "[B," + std::to_string(d.in) + "]", in);
            return {in[0], d.out};
          },
          [&](const Conv2d& c) -> Shape {
            if (c.stride == 0 || c.kernel == 0) detail::shape_error(index, spec, "positive kernel and stride", in);
            if (in.size() != 4 || in[1] != c.in_channels || in[2] + 2 * c.padding < c.kernel || in[3] + 2 * c.padding < c.kernel) {
              detail::shape_error(index, spec, "[B," + std::to_string(c.in_channels) + ",H,W] with H,W+2*pad >= kernel", in);
            }
            return {in[0], c.out_channels, detail::conv_extent(in[2], c.kernel, c.stride, c.padding),
                    detail::conv_extent(in[3], c.kernel, c.stride, c.padding)};
          },
          [&](const MaxPool2d& p) -> Shape {
            if (p.kernel == 0 || in.size() != 4 || in[2] < p.kernel || in[3] < p.kernel) {
              detail::shape_error(index, spec, "[B,C,H,W] with H,W >= " + std::to_string(p.kernel), in);
            }
            return {in[0], in[1], in[2] / p.kernel, in[3] / p.kernel};
          },
          [&](const Flatten&) -> Shape {
            if (in.size() < 2) detail::shape_error(index, spec, "rank >= 2", in);
            return {in[0], shape_size(in) / in[0]};
          },
          [&](const auto&) -> Shape {
            if (in.empty()) detail::shape_error(index, spec, "rank >= 1", in);
            return in;
          },
      },
      spec);
}

namespace detail {

/// Output columns ox whose input column ox*stride + k - padding lies inside [0, width).
inline std::pair<std::size_t, std::size_t> valid_range(std::size_t k, std::size_t stride, std::size_t padding, std::size_t width,
                                                       std::size_t out_w) {
  std::size_t lo = 0;
  while (lo < out_w && lo * stride + k < padding) ++lo;
  std::size_t hi = lo;
  while (hi < out_w && hi * stride + k < padding + width) ++hi;
  return {lo, hi};
}

}  // namespace detail

/// A layer instance: spec, parameters (with gradients) and the forward cache needed by backward.
///
/// `index` is the layer's position in the full architecture and only appears in error messages.
/// Backward consumes the cache, so every backward must be preceded by its own forward.
template <typename T>
class Layer {
 public:
  Layer(LayerSpec spec, std::size_t index) : spec_(std::move(spec)), index_(index) {
    for (const Shape& s : parameter_shapes(spec_)) params_.emplace_back(s);
  }

  const LayerSpec& spec() const noexcept { return spec_; }
  std::size_t index() const noexcept { return index_; }
  std::vector<BasicTensor<T>>& parameters() noexcept { return params_; }
  const std::vector<BasicTensor<T>>& parameters() const noexcept { return params_; }

  /// Glorot-uniform weights, zero biases.
  void initialize(Rng& rng) {
    std::visit(overloaded{
                   [&](const Dense& d) { params_[0] = glorot_uniform_init<T>(params_[0].shape(), d.in, d.out, rng); },
                   [&](const Conv2d& c) {
                     const std::size_t area = c.kernel * c.kernel;
                     params_[0] = glorot_uniform_init<T>(params_[0].shape(), c.in_channels * area, c.out_channels * area, rng);
                   },
                   [](const auto&) {},
               },
               spec_);
    if (params_.size() > 1) params_[1] = BasicTensor<T>(params_[1].shape());
  }

  BasicTensor<T> forward(const BasicTensor<T>& input) {
    const Shape out_shape = output_shape(spec_, input.shape(), index_);
    BasicTensor<T> out(out_shape);
    std::visit([&](const auto& s) { forward_impl(s, input, out); }, spec_);
    input_shape_ = input.shape();
    has_cache_ = true;
    return out;
  }

  BasicTensor<T> backward(const BasicTensor<T>& upstream, bool input_grad = true) {
    if (!has_cache_) {
      throw Error(ErrorCode::OutOfOrder, "layer " + std::to_string(index_) + " (" + layer_name(spec_) + "): backward before forward");
    }
    const Shape expected = output_shape(spec_, input_shape_, index_);
    if (upstream.shape() != expected) {
      throw Error(ErrorCode::ShapeMismatch, "layer " + std::to_string(index_) + " (" + layer_name(spec_) + "): upstream gradient " +
                                                shape_string(upstream.shape()) + " does not match output " + shape_string(expected));
    }
    BasicTensor<T> grad_in = input_grad ? BasicTensor<T>(input_shape_) : BasicTensor<T>();
    std::visit([&](const auto& s) {
      if constexpr (std::is_same_v<std::decay_t<decltype(s)>, Conv2d> || std::is_same_v<std::decay_t<decltype(s)>, Dense>) {
        backward_impl(s, upstream, grad_in, input_grad);
      } else if (input_grad) {
        backward_impl(s, upstream, grad_in);
      }
    }, spec_);
    has_cache_ = false;
    cache_.clear();
    mask_.clear();
    return grad_in;
  }

 private:
  void forward_impl(const Dense& d, const BasicTensor<T>& in, BasicTensor<T>& out) {
    const std::size_t batch = in.dim(0);
    const T* bias = params_[1].data();
    for (std::size_t b = 0; b < batch; ++b) std::copy(bias, bias + d.out, out.data() + b * d.out);
    kernels::gemm_nn(batch, d.in, d.out, in.data(), params_[0].data(), out.data());
    cache_.assign(in.values().begin(), in.values().end());
  }

  void backward_impl(const Dense& d, const BasicTensor<T>& up, BasicTensor<T>& grad_in, bool input_grad) {
    const std::size_t batch = up.dim(0);
    kernels::gemm_tn(d.in, batch, d.out, cache_.data(), up.data(), params_[0].grad().data());
    T* db = params_[1].grad().data();
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t j = 0; j < d.out; ++j) db[j] += up[b * d.out + j];
    if (!input_grad) return;
    std::vector<T> w_t(d.in * d.out);
    kernels::transpose(d.in, d.out, params_[0].data(), w_t.data());
    kernels::gemm_nn(batch, d.out, d.in, up.data(), w_t.data(), grad_in.data());
  }

  // Per-sample im2col: rows index (channel, ky, kx), columns index output pixels.
  void forward_impl(const Conv2d& c, const BasicTensor<T>& in, BasicTensor<T>& out) {
    const std::size_t batch = in.dim(0), height = in.dim(2), width = in.dim(3);
    const std::size_t out_h = out.dim(2), out_w = out.dim(3);
    const std::size_t rows = c.in_channels * c.kernel * c.kernel, cols = out_h * out_w;
    cache_.assign(batch * rows * cols, T{0});
    const T* bias = params_[1].data();
    for (std::size_t b = 0; b < batch; ++b) {
      T* col = cache_.data() + b * rows * cols;
      const T* image = in.data() + b * c.in_channels * height * width;
      for (std::size_t ch = 0; ch < c.in_channels; ++ch) {
        for (std::size_t ky = 0; ky < c.kernel; ++ky) {
          for (std::size_t kx = 0; kx < c.kernel; ++kx) {
            T* row = col + ((ch * c.kernel + ky) * c.kernel + kx) * cols;
            const auto [ox_lo, ox_hi] = detail::valid_range(kx, c.stride, c.padding, width, out_w);
            for (std::size_t oy = 0; oy < out_h; ++oy) {
              const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * c.stride + ky) - static_cast<std::ptrdiff_t>(c.padding);
              if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(height)) continue;
              const std::size_t base = (ch * height + static_cast<std::size_t>(iy)) * width + kx;
              T* dst = row + oy * out_w;
              for (std::size_t ox = ox_lo; ox < ox_hi; ++ox) dst[ox] = image[base + ox * c.stride - c.padding];
            }
          }
        }
      }
      T* y = out.data() + b * c.out_channels * cols;
      for (std::size_t o = 0; o < c.out_channels; ++o) std::fill(y + o * cols, y + (o + 1) * cols, bias[o]);
      kernels::gemm_nn(c.out_channels, rows, cols, params_[0].data(), col, y);
    }
  }

  void backward_impl(const Conv2d& c, const BasicTensor<T>& up, BasicTensor<T>& grad_in, bool input_grad) {
    const std::size_t batch = up.dim(0), height = input_shape_[2], width = input_shape_[3];
    const std::size_t out_h = up.dim(2), out_w = up.dim(3);
    const std::size_t rows = c.in_channels * c.kernel * c.kernel, cols = out_h * out_w;
    T* dw = params_[0].grad().data();
    T* db = params_[1].grad().data();
    // Wide filters vectorize better as a product with the transposed columns; the choice depends
    // only on the layer shape, so the operation order is still fixed per layer.
    const bool transpose_cols = rows >= 16;
    std::vector<T> dcol(input_grad ? rows * cols : 0), col_t(transpose_cols ? rows * cols : 0);
    for (std::size_t b = 0; b < batch; ++b) {
      const T* dy = up.data() + b * c.out_channels * cols;
      const T* col = cache_.data() + b * rows * cols;
      if (transpose_cols) {
        kernels::transpose(rows, cols, col, col_t.data());
        kernels::gemm_nn(c.out_channels, cols, rows, dy, col_t.data(), dw);
      } else {
        kernels::gemm_nt(c.out_channels, cols, rows, dy, col, dw);
      }
      for (std::size_t o = 0; o < c.out_channels; ++o)
        for (std::size_t p = 0; p < cols; ++p) db[o] += dy[o * cols + p];
      if (!input_grad) continue;
      std::fill(dcol.begin(), dcol.end(), T{0});
      kernels::gemm_tn(rows, c.out_channels, cols, params_[0].data(), dy, dcol.data());
      T* image = grad_in.data() + b * c.in_channels * height * width;
      for (std::size_t ch = 0; ch < c.in_channels; ++ch) {
        for (std::size_t ky = 0; ky < c.kernel; ++ky) {
          for (std::size_t kx = 0; kx < c.kernel; ++kx) {
            const T* row = dcol.data() + ((ch * c.kernel + ky) * c.kernel + kx) * cols;
            const auto [ox_lo, ox_hi] = detail::valid_range(kx, c.stride, c.padding, width, out_w);
            for (std::size_t oy = 0; oy < out_h; ++oy) {
              const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * c.stride + ky) - static_cast<std::ptrdiff_t>(c.padding);
              if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(height)) continue;
              const std::size_t base = (ch * height + static_cast<std::size_t>(iy)) * width + kx;
              const T* src = row + oy * out_w;
              for (std::size_t ox = ox_lo; ox < ox_hi; ++ox) image[base + ox * c.stride - c.padding] += src[ox];
            }
          }
        }
      }
    }
  }

  void forward_impl(const ReLU&, const BasicTensor<T>& in, BasicTensor<T>& out) {
    mask_.resize(in.size());
    const T* __restrict x = in.data();
    T* __restrict y = out.data();
    std::uint8_t* __restrict m = mask_.data();
    const std::size_t n = in.size();
    for (std::size_t i = 0; i < n; ++i) y[i] = x[i] > T{0} ? x[i] : T{0};
    for (std::size_t i = 0; i < n; ++i) m[i] = x[i] > T{0};
  }

  void backward_impl(const ReLU&, const BasicTensor<T>& up, BasicTensor<T>& grad_in) {
    const T* __restrict g = up.data();
    const std::uint8_t* __restrict m = mask_.data();
    T* __restrict out = grad_in.data();
    const std::size_t n = up.size();
    for (std::size_t i = 0; i < n; ++i) out[i] = m[i] ? g[i] : T{0};
  }

  void forward_impl(const Sigmoid&, const BasicTensor<T>& in, BasicTensor<T>& out) {
    for (std::size_t i = 0; i < in.size(); ++i) out[i] = T{1} / (T{1} + std::exp(-in[i]));
    cache_.assign(out.values().begin(), out.values().end());
  }

  void backward_impl(const Sigmoid&, const BasicTensor<T>& up, BasicTensor<T>& grad_in) {
    for (std::size_t i = 0; i < up.size(); ++i) grad_in[i] = up[i] * cache_[i] * (T{1} - cache_[i]);
  }

  void forward_impl(const Flatten&, const BasicTensor<T>& in, BasicTensor<T>& out) {
    std::copy(in.values().begin(), in.values().end(), out.values().begin());
  }

  void backward_impl(const Flatten&, const BasicTensor<T>& up, BasicTensor<T>& grad_in) {
    std::copy(up.values().begin(), up.values().end(), grad_in.values().begin());
  }

  // argmax_ stores the flat input index feeding each output; ties resolve to the first window element.
  void forward_impl(const MaxPool2d& p, const BasicTensor<T>& in, BasicTensor<T>& out) {
    const std::size_t planes = in.dim(0) * in.dim(1), height = in.dim(2), width = in.dim(3);
    const std::size_t out_h = out.dim(2), out_w = out.dim(3);
    argmax_.resize(out.size());
    for (std::size_t plane = 0; plane < planes; ++plane) {
      const std::size_t in_base = plane * height * width;
      for (std::size_t oy = 0; oy < out_h; ++oy) {
        for (std::size_t ox = 0; ox < out_w; ++ox) {
          std::size_t best = in_base + (oy * p.kernel) * width + ox * p.kernel;
          T best_value = in[best];
          for (std::size_t ky = 0; ky < p.kernel; ++ky) {
            for (std::size_t kx = 0; kx < p.kernel; ++kx) {
              const std::size_t idx = in_base + (oy * p.kernel + ky) * width + ox * p.kernel + kx;
              const T v = in[idx];
              const bool greater = v > best_value;
              best = greater ? idx : best;
              best_value = greater ? v : best_value;
            }
          }
          const std::size_t o = (plane * out_h + oy) * out_w + ox;
          out[o] = best_value;
          argmax_[o] = best;
        }
      }
    }
  }

  void backward_impl(const MaxPool2d&, const BasicTensor<T>& up, BasicTensor<T>& grad_in) {
    for (std::size_t o = 0; o < up.size(); ++o) grad_in[argmax_[o]] += up[o];
  }

  LayerSpec spec_;
  std::size_t index_;
  std::vector<BasicTensor<T>> params_;
  Shape input_shape_;
  bool has_cache_ = false;
  std::vector<T> cache_;
  std::vector<std::uint8_t> mask_;
  std::vector<std::size_t> argmax_;
};

}  // namespace splitlearn
