#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "splitlearn/error.hpp"
#include "splitlearn/random.hpp"

namespace splitlearn {

namespace detail {

inline void require_binary_labels(std::span<const float> labels, const char* where) {
  for (float y : labels)
    if (y != 0.0f && y != 1.0f) throw Error(ErrorCode::InvalidArgument, std::string(where) + ": labels must be 0 or 1");
}

inline void require_same_length(std::size_t a, std::size_t b, const char* where) {
  if (a != b) throw Error(ErrorCode::InvalidArgument, std::string(where) + ": " + std::to_string(a) + " scores vs " + std::to_string(b) + " labels");
  if (a == 0) throw Error(ErrorCode::InvalidArgument, std::string(where) + ": empty input");
}

}  // namespace detail

/// Fraction of samples where (p >= 0.5) matches the label.
inline double accuracy(std::span<const float> probabilities, std::span<const float> labels) {
  detail::require_same_length(probabilities.size(), labels.size(), "accuracy");
  detail::require_binary_labels(labels, "accuracy");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) correct += (probabilities[i] >= 0.5f) == (labels[i] == 1.0f);
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

/// Area under the ROC curve via the Mann-Whitney identity with mid-ranks (ties count one half).
inline double auroc(std::span<const float> scores, std::span<const float> labels) {
  detail::require_same_length(scores.size(), labels.size(), "auroc");
  detail::require_binary_labels(labels, "auroc");
  const std::size_t n = scores.size();
  std::size_t positives = 0;
  for (float y : labels) positives += y == 1.0f;
  const std::size_t negatives = n - positives;
  if (positives == 0 || negatives == 0) {
    throw Error(ErrorCode::NoDiscriminationPossible, "auroc needs both classes, got " + std::to_string(positives) + " positives of " + std::to_string(n));
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Twice the rank sum keeps every mid-rank integral, so the statistic is exact.
  std::uint64_t twice_rank_sum = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    std::size_t tied_pos = 0;
    while (j < n && scores[order[j]] == scores[order[i]]) tied_pos += labels[order[j++]] == 1.0f;
    twice_rank_sum += tied_pos * (i + 1 + j);  // mid-rank of ranks i+1..j is (i+1+j)/2
    i = j;
  }
  const std::uint64_t twice_u = twice_rank_sum - static_cast<std::uint64_t>(positives) * (positives + 1);
  return static_cast<double>(twice_u) / (2.0 * static_cast<double>(positives) * static_cast<double>(negatives));
}

struct RocCurve {
  std::vector<double> fpr;
  std::vector<double> tpr;
  std::vector<float> thresholds;  // point k counts scores >= thresholds[k] as positive; point 0 is +inf
};

/// ROC points from (0,0) to (1,1), one per distinct score.
inline RocCurve roc_curve(std::span<const float> scores, std::span<const float> labels) {
  detail::require_same_length(scores.size(), labels.size(), "roc_curve");
  detail::require_binary_labels(labels, "roc_curve");
  const std::size_t n = scores.size();
  std::size_t positives = 0;
  for (float y : labels) positives += y == 1.0f;
  const std::size_t negatives = n - positives;
  if (positives == 0 || negatives == 0) throw Error(ErrorCode::NoDiscriminationPossible, "roc_curve needs both classes");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  RocCurve roc;
  roc.fpr.push_back(0.0);
  roc.tpr.push_back(0.0);
  roc.thresholds.push_back(std::numeric_limits<float>::infinity());
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < n;) {
    const float s = scores[order[i]];
    while (i < n && scores[order[i]] == s) (labels[order[i++]] == 1.0f ? tp : fp) += 1;
    roc.fpr.push_back(static_cast<double>(fp) / static_cast<double>(negatives));
    roc.tpr.push_back(static_cast<double>(tp) / static_cast<double>(positives));
    roc.thresholds.push_back(s);
  }
  return roc;
}

inline double trapezoid_area(const RocCurve& roc) {
  double area = 0.0;
  for (std::size_t k = 1; k < roc.fpr.size(); ++k) area += (roc.fpr[k] - roc.fpr[k - 1]) * (roc.tpr[k] + roc.tpr[k - 1]) / 2.0;
  return area;
}

/// Unweighted mean of per-task AUROCs. `scores` and `labels` are row-major [N, tasks].
inline double mean_auroc(std::span<const float> scores, std::span<const float> labels, std::size_t tasks) {
  detail::require_same_length(scores.size(), labels.size(), "mean_auroc");
  if (tasks == 0 || scores.size() % tasks != 0) throw Error(ErrorCode::InvalidArgument, "mean_auroc: size is not a multiple of the task count");
  const std::size_t n = scores.size() / tasks;
  std::vector<float> s(n), y(n);
  double sum = 0.0;
  for (std::size_t t = 0; t < tasks; ++t) {
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = scores[i * tasks + t];
      y[i] = labels[i * tasks + t];
    }
    try {
      sum += auroc(s, y);
    } catch (const Error& e) {
      throw Error(e.code(), "task " + std::to_string(t) + ": " + e.what());
    }
  }
  return sum / static_cast<double>(tasks);
}

inline double client_average(std::span<const double> per_client) {
  if (per_client.empty()) throw Error(ErrorCode::InvalidArgument, "client_average of no clients");
  double sum = 0.0;
  for (double v : per_client) sum += v;
  return sum / static_cast<double>(per_client.size());
}

// ---------------------------------------------------------------------------
// Bootstrap

struct ConfidenceInterval {
  double point = 0.0;
  double low = 0.0;
  double high = 0.0;
  double level = 0.95;
};

inline constexpr std::size_t kDefaultResamples = 1000;

/// Linear-interpolated quantile of sorted data (the usual "type 7" definition).
inline double quantile_sorted(std::span<const double> sorted, double q) {
  if (sorted.empty()) throw Error(ErrorCode::InvalidArgument, "quantile of empty data");
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

/// Statistic over the sample indices of one resample. Returning NaN marks the resample unusable
/// (e.g. an AUROC resample that lost a class); such resamples are skipped.
using ResampleStatistic = std::function<double(std::span<const std::size_t>)>;

/// Percentile bootstrap over n samples drawn with replacement; deterministic per seed.
/// The interval is widened to contain the point estimate if resampling skews it off to one side.
inline ConfidenceInterval bootstrap_ci(std::size_t n, const ResampleStatistic& statistic, std::size_t n_resamples = kDefaultResamples,
                                       double level = 0.95, std::uint64_t seed = 0) {
  if (n < 2) throw Error(ErrorCode::InvalidArgument, "bootstrap needs at least 2 samples");
  if (n_resamples < 100) throw Error(ErrorCode::InvalidArgument, "bootstrap needs at least 100 resamples");
  if (!(level > 0.0 && level < 1.0)) throw Error(ErrorCode::InvalidArgument, "confidence level must lie in (0,1)");
  std::vector<std::size_t> all(n);
  std::iota(all.begin(), all.end(), 0);
  ConfidenceInterval ci;
  ci.level = level;
  ci.point = statistic(all);
  if (!std::isfinite(ci.point)) throw Error(ErrorCode::InvalidArgument, "bootstrap statistic undefined on the full sample");

  Rng rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  std::vector<std::size_t> idx(n);
  std::vector<double> stats;
  stats.reserve(n_resamples);
  for (std::size_t r = 0; r < n_resamples; ++r) {
    for (auto& i : idx) i = pick(rng);
    const double s = statistic(idx);
    if (std::isfinite(s)) stats.push_back(s);
  }
  if (stats.size() < n_resamples / 2) throw Error(ErrorCode::InvalidArgument, "bootstrap statistic undefined on most resamples");
  std::sort(stats.begin(), stats.end());
  const double alpha = 1.0 - level;
  ci.low = std::min(quantile_sorted(stats, alpha / 2), ci.point);
  ci.high = std::max(quantile_sorted(stats, 1 - alpha / 2), ci.point);
  return ci;
}

/// Bootstrap of a mean over per-sample values (e.g. 0/1 correctness).
inline ConfidenceInterval bootstrap_mean_ci(std::span<const double> values, std::size_t n_resamples = kDefaultResamples, double level = 0.95,
                                            std::uint64_t seed = 0) {
  return bootstrap_ci(
      values.size(),
      [&](std::span<const std::size_t> idx) {
        double s = 0.0;
        for (auto i : idx) s += values[i];
        return s / static_cast<double>(idx.size());
      },
      n_resamples, level, seed);
}

// ---------------------------------------------------------------------------
// Welch t-test

namespace detail {

/// Continued fraction for the regularized incomplete beta (modified Lentz).
inline double beta_continued_fraction(double a, double b, double x) {
  constexpr double tiny = 1e-300;
  constexpr double eps = 1e-16;
  double c = 1.0;
  double d = 1.0 - (a + b) * x / (a + 1.0);
  if (std::abs(d) < tiny) d = tiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= 10000; ++m) {
    const double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((a + m2 - 1.0) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < tiny) d = tiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (a + b + m) * x / ((a + m2) * (a + m2 + 1.0));
    d = 1.0 + aa * d;
    if (std::abs(d) < tiny) d = tiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double delta = d * c;
    h *= delta;
    if (std::abs(delta - 1.0) < eps) return h;
  }
  throw Error(ErrorCode::InvalidArgument, "incomplete beta did not converge");
}

}  // namespace detail

/// Regularized incomplete beta I_x(a, b).
inline double incomplete_beta(double a, double b, double x) {
  if (!(a > 0 && b > 0)) throw Error(ErrorCode::InvalidArgument, "incomplete beta needs a, b > 0");
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  const double log_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
  const double front = std::exp(log_front);
  if (x < (a + 1.0) / (a + b + 2.0)) return front * detail::beta_continued_fraction(a, b, x) / a;
  return 1.0 - front * detail::beta_continued_fraction(b, a, 1.0 - x) / b;
}

/// Two-tailed p-value of a t statistic with df degrees of freedom.
inline double student_t_two_tailed_p(double t, double df) {
  if (std::isnan(t)) return std::numeric_limits<double>::quiet_NaN();
  if (std::isinf(t)) return 0.0;
  return incomplete_beta(df / 2.0, 0.5, df / (df + t * t));
}

struct TTestResult {
  double t = 0.0;
  double p = 1.0;
  double df = 0.0;
};

/// Welch's unequal-variance t-test with Welch-Satterthwaite degrees of freedom.
inline TTestResult t_test_two_sample(std::span<const double> a, std::span<const double> b) {
  if (a.size() < 2 || b.size() < 2) throw Error(ErrorCode::InvalidArgument, "t-test needs at least 2 values per sample");
  auto moments = [](std::span<const double> x) {
    double mean = 0.0;
    for (double v : x) mean += v;
    mean /= static_cast<double>(x.size());
    double ss = 0.0;
    for (double v : x) ss += (v - mean) * (v - mean);
    return std::pair{mean, ss / static_cast<double>(x.size() - 1)};
  };
  const auto [ma, va] = moments(a);
  const auto [mb, vb] = moments(b);
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  const double qa = va / na, qb = vb / nb;
  TTestResult r;
  if (qa + qb == 0.0) {
    // Both samples constant: identical means are indistinguishable, different ones infinitely separated.
    r.t = ma == mb ? 0.0 : std::copysign(std::numeric_limits<double>::infinity(), ma - mb);
    r.p = ma == mb ? 1.0 : 0.0;
    r.df = na + nb - 2.0;
    return r;
  }
  r.t = (ma - mb) / std::sqrt(qa + qb);
  r.df = (qa + qb) * (qa + qb) / (qa * qa / (na - 1.0) + qb * qb / (nb - 1.0));
  r.p = student_t_two_tailed_p(r.t, r.df);
  return r;
}

}  // namespace splitlearn
