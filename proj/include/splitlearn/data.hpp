#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "splitlearn/network.hpp"
#include "splitlearn/protocol.hpp"
#include "splitlearn/random.hpp"

namespace splitlearn {

struct Sample {
  Tensor image;   // [C,H,W], values in [0,1]
  Tensor labels;  // [n_outputs], values in {0,1}
  std::uint32_t subject_id = 0;
};

/// N images and labels in two dense tensors; immutable after creation.
class Dataset {
 public:
  Dataset() = default;
  Dataset(Task task, Tensor images, Tensor labels) : task_(task), images_(std::move(images)), labels_(std::move(labels)) {
    if (images_.rank() != 4 || labels_.rank() != 2 || images_.dim(0) != labels_.dim(0) || labels_.dim(1) != task_.n_outputs()) {
      throw Error(ErrorCode::ShapeMismatch, "dataset needs images [N,C,H,W] and labels [N," + std::to_string(task_.n_outputs()) +
                                                "], got " + shape_string(images_.shape()) + " and " + shape_string(labels_.shape()));
    }
  }

  const Task& task() const noexcept { return task_; }
  std::size_t size() const noexcept { return images_.empty() ? 0 : images_.dim(0); }
  Shape image_shape() const { return {images_.dim(1), images_.dim(2), images_.dim(3)}; }
  std::size_t image_size() const noexcept { return images_.size() / std::max<std::size_t>(size(), 1); }
  const Tensor& images() const noexcept { return images_; }
  const Tensor& labels() const noexcept { return labels_; }

  std::span<const float> image(std::size_t i) const { return images_.values().subspan(i * image_size(), image_size()); }
  std::span<const float> label(std::size_t i) const { return labels_.values().subspan(i * task_.n_outputs(), task_.n_outputs()); }

  Sample sample(std::size_t i) const {
    if (i >= size()) throw Error(ErrorCode::InvalidArgument, "sample index " + std::to_string(i) + " out of range");
    return {Tensor(image_shape(), {image(i).begin(), image(i).end()}), Tensor({task_.n_outputs()}, {label(i).begin(), label(i).end()}),
            static_cast<std::uint32_t>(i)};
  }

  /// subject_id is the sample index: one image per synthetic patient.
  std::uint32_t subject_id(std::size_t i) const { return static_cast<std::uint32_t>(i); }

  friend bool operator==(const Dataset& a, const Dataset& b) {
    return a.task_ == b.task_ && a.images_ == b.images_ && a.labels_ == b.labels_;
  }

 private:
  Task task_;
  Tensor images_;
  Tensor labels_;
};

struct SynthSpec {
  Task task = Task::binary();
  std::size_t n = 2000;
  std::size_t channels = 1;
  std::size_t height = 32;
  std::size_t width = 32;
  double noise_sigma = 0.2;
  double background = 0.3;
  double amplitude = 0.35;  // peak brightness added by a blob or motif
  std::uint64_t seed = 1;
};

inline constexpr std::size_t kMultiLabelMotifs = 5;
inline constexpr double kMotifProbability = 0.3;

namespace detail {

inline double gaussian_bump(double y, double x, double cy, double cx, double s) {
  const double d2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
  return std::exp(-d2 / (2.0 * s * s));
}

/// Binary task: a Gaussian blob at a random position in the central half of the image.
inline void draw_blob(std::vector<double>& canvas, std::size_t h, std::size_t w, double amplitude, Rng& rng) {
  std::uniform_real_distribution<double> cy(0.3125 * static_cast<double>(h), 0.6875 * static_cast<double>(h));
  std::uniform_real_distribution<double> cx(0.3125 * static_cast<double>(w), 0.6875 * static_cast<double>(w));
  const double y0 = cy(rng), x0 = cx(rng), s = 0.09375 * static_cast<double>(std::min(h, w));
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) canvas[y * w + x] += amplitude * gaussian_bump(double(y), double(x), y0, x0, s);
}

/// Multi-label motifs: 0 corner blob, 1 horizontal bar, 2 vertical bar, 3 ring, 4 gradient.
inline void draw_motif(std::size_t motif, std::vector<double>& canvas, std::size_t h, std::size_t w, double amplitude, Rng& rng) {
  const double H = static_cast<double>(h), W = static_cast<double>(w);
  std::uniform_real_distribution<double> jitter(-0.0625, 0.0625);
  const double jy = jitter(rng) * H, jx = jitter(rng) * W;
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const double fy = static_cast<double>(y), fx = static_cast<double>(x);
      double v = 0.0;
      switch (motif) {
        case 0: v = gaussian_bump(fy, fx, 0.2 * H + jy, 0.2 * W + jx, 0.09 * std::min(H, W)); break;
        case 1:
          if (fx >= 0.2 * W && fx < 0.8 * W) v = gaussian_bump(fy, 0, 0.7 * H + jy, 0, 0.04 * H);
          break;
        case 2:
          if (fy >= 0.2 * H && fy < 0.8 * H) v = gaussian_bump(0, fx, 0, 0.7 * W + jx, 0.04 * W);
          break;
        case 3: {
          const double r = std::hypot(fy - (0.5 * H + jy), fx - (0.5 * W + jx));
          const double d = (r - 0.25 * std::min(H, W)) / (0.04 * std::min(H, W));
          v = std::exp(-0.5 * d * d);
          break;
        }
        case 4: v = fx / std::max(W - 1.0, 1.0); break;
        default: throw Error(ErrorCode::InvalidArgument, "no motif " + std::to_string(motif));
      }
      canvas[y * w + x] += amplitude * v;
    }
  }
}

}  // namespace detail

/// Deterministic synthetic dataset. Each sample draws from its own derived stream.
inline Dataset synthesize(const SynthSpec& spec) {
  if (spec.n < 8) throw Error(ErrorCode::InvalidArgument, "synthesize needs n >= 8, got " + std::to_string(spec.n));
  if (spec.channels == 0 || spec.height < 4 || spec.width < 4) {
    throw Error(ErrorCode::InvalidArgument, "image must be at least 1x4x4");
  }
  if (!(spec.noise_sigma >= 0.0)) throw Error(ErrorCode::InvalidArgument, "noise sigma must be >= 0");
  if (spec.task.kind == TaskKind::MultiLabel && spec.task.labels != kMultiLabelMotifs) {
    throw Error(ErrorCode::InvalidArgument, "the synthetic multi-label task has exactly 5 labels");
  }
  const std::size_t k = spec.task.n_outputs();
  const std::size_t hw = spec.height * spec.width;
  Tensor images({spec.n, spec.channels, spec.height, spec.width});
  Tensor labels({spec.n, k});

  std::vector<float> binary_classes;
  if (spec.task.kind == TaskKind::Binary) {
    binary_classes.assign(spec.n, 0.0f);
    std::fill(binary_classes.begin() + static_cast<std::ptrdiff_t>(spec.n / 2), binary_classes.end(), 1.0f);
    Rng order(derive_seed(spec.seed, {0xC1A55}));
    std::shuffle(binary_classes.begin(), binary_classes.end(), order);
  }

  std::vector<double> canvas(hw);
  for (std::size_t i = 0; i < spec.n; ++i) {
    Rng rng(derive_seed(spec.seed, {0x5A3B1E, i}));
    std::fill(canvas.begin(), canvas.end(), 0.0);
    if (spec.task.kind == TaskKind::Binary) {
      labels[i] = binary_classes[i];
      if (labels[i] == 1.0f) detail::draw_blob(canvas, spec.height, spec.width, spec.amplitude, rng);
    } else {
      std::bernoulli_distribution present(kMotifProbability);
      for (std::size_t m = 0; m < k; ++m) {
        const bool on = present(rng);
        labels[i * k + m] = on ? 1.0f : 0.0f;
        if (on) detail::draw_motif(m, canvas, spec.height, spec.width, spec.amplitude, rng);
      }
    }
    std::normal_distribution<double> noise(0.0, spec.noise_sigma);
    float* out = images.data() + i * spec.channels * hw;
    for (std::size_t c = 0; c < spec.channels; ++c)
      for (std::size_t p = 0; p < hw; ++p) {
        const double v = spec.background + canvas[p] + (spec.noise_sigma > 0 ? noise(rng) : 0.0);
        out[c * hw + p] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
  }
  return Dataset(spec.task, std::move(images), std::move(labels));
}

// ---------------------------------------------------------------------------
// Partitioning

struct PartitionPlan {
  std::vector<std::vector<std::size_t>> train;  // one shard per client
  std::vector<std::size_t> validation;
  std::uint64_t seed = 0;

  std::size_t n_clients() const noexcept { return train.size(); }
  std::size_t train_size() const {
    std::size_t n = 0;
    for (const auto& s : train) n += s.size();
    return n;
  }
  /// All training indices, client shards concatenated in client order.
  std::vector<std::size_t> all_train() const {
    std::vector<std::size_t> out;
    for (const auto& s : train) out.insert(out.end(), s.begin(), s.end());
    return out;
  }
  friend bool operator==(const PartitionPlan&, const PartitionPlan&) = default;
};

inline std::size_t validation_count(std::size_t n) { return static_cast<std::size_t>(std::llround(0.25 * static_cast<double>(n))); }

/// Random permutation by seed; the first round(N/4) indices validate, the rest are dealt round-robin.
inline PartitionPlan partition(std::size_t n_samples, std::size_t n_clients, std::uint64_t seed) {
  if (n_clients == 0) throw Error(ErrorCode::InvalidArgument, "partition needs at least one client");
  const std::size_t n_val = validation_count(n_samples);
  const std::size_t n_train = n_samples - n_val;
  if (n_clients > n_train) {
    throw Error(ErrorCode::InvalidArgument,
                std::to_string(n_clients) + " clients but only " + std::to_string(n_train) + " training samples");
  }
  std::vector<std::size_t> perm(n_samples);
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(derive_seed(seed, {0x9A27}));
  std::shuffle(perm.begin(), perm.end(), rng);

  PartitionPlan plan;
  plan.seed = seed;
  plan.validation.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_val));
  plan.train.resize(n_clients);
  for (std::size_t j = n_val; j < n_samples; ++j) plan.train[(j - n_val) % n_clients].push_back(perm[j]);
  return plan;
}

inline PartitionPlan partition(const Dataset& data, std::size_t n_clients, std::uint64_t seed) {
  return partition(data.size(), n_clients, seed);
}

/// Shuffles a shard with the given seed and cuts it into batches; the last batch may be short.
inline std::vector<std::vector<std::size_t>> make_batches(std::span<const std::size_t> shard, std::size_t batch_size, std::uint64_t seed) {
  if (batch_size == 0) throw Error(ErrorCode::InvalidArgument, "batch size must be >= 1");
  std::vector<std::size_t> order(shard.begin(), shard.end());
  Rng rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < order.size(); i += batch_size) {
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), i + batch_size)));
  }
  return out;
}

/// Consecutive, unshuffled batches (evaluation order).
inline std::vector<std::vector<std::size_t>> chunk(std::span<const std::size_t> indices, std::size_t batch_size) {
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < indices.size(); i += batch_size) {
    out.emplace_back(indices.begin() + static_cast<std::ptrdiff_t>(i),
                     indices.begin() + static_cast<std::ptrdiff_t>(std::min(indices.size(), i + batch_size)));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Augmentation

struct AugmentSpec {
  bool rotation = false;  // uniform angle in [0, 360)
  double lateral_flip_prob = 0.0;
  double axial_flip_prob = 0.0;

  bool enabled() const noexcept { return rotation || lateral_flip_prob > 0 || axial_flip_prob > 0; }
  void validate() const {
    if (!(lateral_flip_prob >= 0 && lateral_flip_prob <= 1) || !(axial_flip_prob >= 0 && axial_flip_prob <= 1)) {
      throw Error(ErrorCode::InvalidArgument, "flip probabilities must lie in [0,1]");
    }
  }
};

/// Mirror left-right (x -> W-1-x) on every channel.
inline Tensor flip_lateral(const Tensor& image) {
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  Tensor out(image.shape());
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) out[(k * h + y) * w + x] = image[(k * h + y) * w + (w - 1 - x)];
  return out;
}

/// Mirror top-bottom (y -> H-1-y) on every channel.
inline Tensor flip_axial(const Tensor& image) {
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  Tensor out(image.shape());
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) out[(k * h + y) * w + x] = image[(k * h + (h - 1 - y)) * w + x];
  return out;
}

/// Rotation about the image center with bilinear sampling; pixels sampled from outside are zero.
/// Output (x, y) reads source (cx + cos*dx + sin*dy, cy - sin*dx + cos*dy), so +90 degrees turns
/// the image counter-clockwise on screen.
inline Tensor rotate(const Tensor& image, double degrees) {
  if (image.rank() != 3) throw Error(ErrorCode::ShapeMismatch, "rotate expects [C,H,W], got " + shape_string(image.shape()));
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  const double rad = degrees * std::numbers::pi / 180.0;
  const double cs = std::cos(rad), sn = std::sin(rad);
  const double cx = 0.5 * static_cast<double>(w - 1), cy = 0.5 * static_cast<double>(h - 1);
  Tensor out(image.shape());
  auto at = [&](std::size_t k, long y, long x) -> double {
    if (y < 0 || x < 0 || y >= static_cast<long>(h) || x >= static_cast<long>(w)) return 0.0;
    return image[(k * h + static_cast<std::size_t>(y)) * w + static_cast<std::size_t>(x)];
  };
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
      const double sx = cx + cs * dx + sn * dy;
      const double sy = cy - sn * dx + cs * dy;
      const double fx0 = std::floor(sx), fy0 = std::floor(sy);
      const double ax = sx - fx0, ay = sy - fy0;
      const long x0 = static_cast<long>(fx0), y0 = static_cast<long>(fy0);
      for (std::size_t k = 0; k < c; ++k) {
        const double v = (1 - ay) * ((1 - ax) * at(k, y0, x0) + ax * at(k, y0, x0 + 1)) +
                         ay * ((1 - ax) * at(k, y0 + 1, x0) + ax * at(k, y0 + 1, x0 + 1));
        out[(k * h + y) * w + x] = static_cast<float>(v);
      }
    }
  }
  return out;
}

inline Sample augment(Sample sample, const AugmentSpec& spec, Rng& rng) {
  if (sample.image.rank() != 3) throw Error(ErrorCode::ShapeMismatch, "augment expects [C,H,W], got " + shape_string(sample.image.shape()));
  spec.validate();
  std::uniform_real_distribution<double> u(0.0, 1.0);
  // Draw every variate up front so the stream does not depend on which transforms fire.
  const double lateral = u(rng), axial = u(rng), angle = 360.0 * u(rng);
  if (lateral < spec.lateral_flip_prob) sample.image = flip_lateral(sample.image);
  if (axial < spec.axial_flip_prob) sample.image = flip_axial(sample.image);
  if (spec.rotation) sample.image = rotate(sample.image, angle);
  return sample;
}

/// Stacks the listed samples into a batch [B,C,H,W] and labels [B,K], optionally augmented.
inline std::pair<Tensor, Tensor> gather(const Dataset& data, std::span<const std::size_t> indices, const AugmentSpec* aug = nullptr,
                                        Rng* rng = nullptr) {
  if (indices.empty()) throw Error(ErrorCode::InvalidArgument, "empty batch");
  const std::size_t isz = data.image_size(), k = data.task().n_outputs();
  Shape shape{indices.size()};
  const Shape img = data.image_shape();
  shape.insert(shape.end(), img.begin(), img.end());
  Tensor x(shape);
  Tensor y({indices.size(), k});
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const std::size_t i = indices[b];
    if (i >= data.size()) throw Error(ErrorCode::InvalidArgument, "sample index " + std::to_string(i) + " out of range");
    if (aug != nullptr && aug->enabled()) {
      const Sample s = augment(data.sample(i), *aug, *rng);
      std::copy(s.image.values().begin(), s.image.values().end(), x.data() + b * isz);
    } else {
      std::copy(data.image(i).begin(), data.image(i).end(), x.data() + b * isz);
    }
    std::copy(data.label(i).begin(), data.label(i).end(), y.data() + b * k);
  }
  return {std::move(x), std::move(y)};
}

// ---------------------------------------------------------------------------
// Flat file: "SPLD" version:u8 kind:u8 labels:u32 images-tensor labels-tensor (protocol tensor layout)

inline void save_dataset(const Dataset& data, const std::string& path) {
  std::vector<std::uint8_t> bytes{'S', 'P', 'L', 'D', 1, static_cast<std::uint8_t>(data.task().kind)};
  wire::Writer w(bytes);
  w.u32(static_cast<std::uint32_t>(data.task().labels));
  w.tensor(data.images());
  w.tensor(data.labels());
  std::ofstream out(path, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path);
}

inline Dataset load_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::Io, "cannot read " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < 10 || !std::equal(bytes.begin(), bytes.begin() + 4, "SPLD")) throw Error(ErrorCode::BadMagic, path + " is not a dataset file");
  if (bytes[4] != 1) throw Error(ErrorCode::UnsupportedVersion, path + ": dataset version " + std::to_string(bytes[4]));
  wire::Reader r(std::span<const std::uint8_t>(bytes).subspan(6));
  const std::uint32_t labels = r.u32();
  const Task task = bytes[5] == static_cast<std::uint8_t>(TaskKind::Binary) ? Task::binary() : Task::multi_label(labels);
  Tensor images = r.tensor();
  Tensor y = r.tensor();
  if (r.remaining() != 0) throw Error(ErrorCode::MalformedPayload, path + ": trailing bytes");
  return Dataset(task, std::move(images), std::move(y));
}

}  // namespace splitlearn
