#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "splitlearn/metrics.hpp"
#include "splitlearn/orchestrator.hpp"

namespace splitlearn {

inline constexpr const char* kOutputRootEnv = "SPLITLEARN_OUTPUT_ROOT";
inline constexpr const char* kResultsHeader = "mode,n_clients,seed,metric,ci_low,ci_high,rounds,bytes_total";

// ---------------------------------------------------------------------------
// Configuration

/// One sweep: modes x client_counts x seeds, everything else shared by all cells.
struct ExperimentConfig {
  Task task = Task::binary();
  std::size_t dataset_size = 2000;
  std::size_t channels = 1;
  std::size_t height = 32;
  std::size_t width = 32;
  double noise_sigma = 0.2;
  double amplitude = 0.35;
  double background = 0.3;
  std::vector<std::size_t> client_counts{1, 2, 3, 5, 10, 20, 50};
  std::vector<Mode> modes{Mode::SplitCollaborative, Mode::NonCollaborative};
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  TrainControl control;
  std::optional<std::size_t> front_cut;
  std::optional<std::size_t> back_cut;
  TransportKind transport = TransportKind::Loopback;
  std::string host = "127.0.0.1";
  std::filesystem::path output_dir = "results";
  std::size_t max_clients = 50;
  std::size_t bootstrap_resamples = kDefaultResamples;
  double confidence_level = 0.95;

  /// Defaults for a task; the multi-label motifs are larger than the blob, so they get a weaker, noisier signal.
  static ExperimentConfig for_task(Task task) {
    ExperimentConfig cfg;
    cfg.task = task;
    cfg.control = TrainControl::defaults_for(task);
    if (task.kind == TaskKind::MultiLabel) {
      cfg.dataset_size = 4000;
      cfg.amplitude = 0.25;
      cfg.noise_sigma = 0.3;
    }
    return cfg;
  }

  ChainConfig chain() const {
    ChainConfig cfg = ChainConfig::mini_conv(task, channels, height, width);
    if (front_cut) cfg.front_cut = *front_cut;
    if (back_cut) cfg.back_cut = *back_cut;
    return cfg;
  }

  SynthSpec synth(std::uint64_t seed) const {
    SynthSpec s;
    s.task = task;
    s.n = dataset_size;
    s.channels = channels;
    s.height = height;
    s.width = width;
    s.noise_sigma = noise_sigma;
    s.amplitude = amplitude;
    s.background = background;
    s.seed = seed;
    return s;
  }

  TrainControl control_for(std::uint64_t seed) const {
    TrainControl ctl = control;
    ctl.seed = seed;
    return ctl;
  }

  void validate() const {
    auto fail = [](const std::string& what) { throw Error(ErrorCode::Config, what); };
    if (dataset_size < 8) fail("dataset_size must be >= 8");
    if (channels < 1) fail("channels must be >= 1");
    if (!(noise_sigma >= 0.0)) fail("noise_sigma must be >= 0");
    if (client_counts.empty()) fail("client_counts must not be empty");
    if (modes.empty()) fail("modes must not be empty");
    if (seeds.empty()) fail("seeds must not be empty");
    for (std::size_t c : client_counts)
      if (c < 1 || c > max_clients) fail("client count " + std::to_string(c) + " outside [1, " + std::to_string(max_clients) + "]");
    auto unique = [](auto v) {
      std::sort(v.begin(), v.end());
      return std::adjacent_find(v.begin(), v.end()) == v.end();
    };
    if (!unique(client_counts)) fail("client_counts has duplicates");
    if (!unique(seeds)) fail("seeds has duplicates");
    if (!unique(modes)) fail("modes has duplicates");
    if (bootstrap_resamples < 100) fail("bootstrap_resamples must be >= 100");
    if (!(confidence_level > 0.0 && confidence_level < 1.0)) fail("confidence_level must lie in (0,1)");
    try {
      control.validate();
      chain().validate();
    } catch (const Error& e) {
      if (e.code() == ErrorCode::Config) throw;
      fail(e.what());
    }
  }
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

inline std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  unsigned long long out = 0;
  try {
    out = std::stoull(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != v.size() || v.empty() || v[0] == '-') throw Error(ErrorCode::Config, key + ": expected a non-negative integer, got '" + v + "'");
  return out;
}

inline double parse_double(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double out = 0;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != v.size() || v.empty()) throw Error(ErrorCode::Config, key + ": expected a number, got '" + v + "'");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw Error(ErrorCode::Config, key + ": expected true or false, got '" + v + "'");
}

/// "1,2,5" or ranges such as "1-5".
inline std::vector<std::uint64_t> parse_uint_list(const std::string& key, const std::string& v) {
  std::vector<std::uint64_t> out;
  for (const std::string& item : split_list(v)) {
    const auto dash = item.find('-', 1);
    if (dash == std::string::npos) {
      out.push_back(parse_uint(key, item));
      continue;
    }
    const std::uint64_t lo = parse_uint(key, trim(item.substr(0, dash))), hi = parse_uint(key, trim(item.substr(dash + 1)));
    if (lo > hi || hi - lo > 100000) throw Error(ErrorCode::Config, key + ": bad range '" + item + "'");
    for (std::uint64_t x = lo; x <= hi; ++x) out.push_back(x);
  }
  return out;
}

}  // namespace detail

/// Parses the flat key=value format. '#' starts a comment; unknown keys are errors.
inline ExperimentConfig parse_config(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw Error(ErrorCode::Config, "line " + std::to_string(line_no) + ": expected key = value");
    const std::string key = detail::trim(line.substr(0, eq)), value = detail::trim(line.substr(eq + 1));
    if (key.empty()) throw Error(ErrorCode::Config, "line " + std::to_string(line_no) + ": empty key");
    if (!kv.emplace(key, value).second) throw Error(ErrorCode::Config, "line " + std::to_string(line_no) + ": duplicate key '" + key + "'");
  }

  ExperimentConfig cfg;
  auto take = [&](const std::string& key) -> std::optional<std::string> {
    auto it = kv.find(key);
    if (it == kv.end()) return std::nullopt;
    std::string v = it->second;
    kv.erase(it);
    return v;
  };

  // The task decides several defaults, so it is read first.
  if (auto v = take("task")) {
    if (*v == "binary") cfg = ExperimentConfig::for_task(Task::binary());
    else if (*v == "multilabel") cfg = ExperimentConfig::for_task(Task::multi_label(kMultiLabelMotifs));
    else throw Error(ErrorCode::Config, "task: expected binary or multilabel, got '" + *v + "'");
  } else {
    cfg = ExperimentConfig::for_task(Task::binary());
  }

  using detail::parse_bool, detail::parse_double, detail::parse_uint;
  if (auto v = take("dataset_size")) cfg.dataset_size = parse_uint("dataset_size", *v);
  if (auto v = take("channels")) cfg.channels = parse_uint("channels", *v);
  if (auto v = take("image_size")) {
    const auto x = v->find('x');
    cfg.height = parse_uint("image_size", detail::trim(v->substr(0, x)));
    cfg.width = x == std::string::npos ? cfg.height : parse_uint("image_size", detail::trim(v->substr(x + 1)));
  }
  if (auto v = take("noise_sigma")) cfg.noise_sigma = parse_double("noise_sigma", *v);
  if (auto v = take("amplitude")) cfg.amplitude = parse_double("amplitude", *v);
  if (auto v = take("background")) cfg.background = parse_double("background", *v);
  if (auto v = take("client_counts")) {
    cfg.client_counts.clear();
    for (auto c : detail::parse_uint_list("client_counts", *v)) cfg.client_counts.push_back(c);
  }
  if (auto v = take("seeds")) cfg.seeds = detail::parse_uint_list("seeds", *v);
  if (auto v = take("modes")) {
    cfg.modes.clear();
    for (const auto& m : detail::split_list(*v)) {
      auto mode = parse_mode(m);
      if (!mode) throw Error(ErrorCode::Config, "modes: unknown mode '" + m + "' (split, noncollab, centralized)");
      cfg.modes.push_back(*mode);
    }
  }
  TrainControl& ctl = cfg.control;
  if (auto v = take("patience")) ctl.patience = parse_uint("patience", *v);
  if (auto v = take("max_rounds")) ctl.max_rounds = parse_uint("max_rounds", *v);
  if (auto v = take("batch_size")) ctl.batch_size = parse_uint("batch_size", *v);
  if (auto v = take("eval_batch_size")) ctl.eval_batch_size = parse_uint("eval_batch_size", *v);
  if (auto v = take("max_retries")) ctl.max_retries = parse_uint("max_retries", *v);
  if (auto v = take("shuffle_clients")) ctl.shuffle_clients = parse_bool("shuffle_clients", *v);
  if (auto v = take("plateau_metric")) {
    if (*v == "accuracy") ctl.metric_for_plateau = PlateauMetric::ValidationAccuracy;
    else if (*v == "loss") ctl.metric_for_plateau = PlateauMetric::ValidationLoss;
    else throw Error(ErrorCode::Config, "plateau_metric: expected accuracy or loss, got '" + *v + "'");
  }
  if (auto v = take("learning_rate")) ctl.hyper.learning_rate = static_cast<float>(parse_double("learning_rate", *v));
  if (auto v = take("beta1")) ctl.hyper.beta1 = static_cast<float>(parse_double("beta1", *v));
  if (auto v = take("beta2")) ctl.hyper.beta2 = static_cast<float>(parse_double("beta2", *v));
  if (auto v = take("epsilon")) ctl.hyper.epsilon = static_cast<float>(parse_double("epsilon", *v));
  if (auto v = take("rotation")) ctl.augment.rotation = parse_bool("rotation", *v);
  if (auto v = take("lateral_flip_prob")) ctl.augment.lateral_flip_prob = parse_double("lateral_flip_prob", *v);
  if (auto v = take("axial_flip_prob")) ctl.augment.axial_flip_prob = parse_double("axial_flip_prob", *v);
  if (auto v = take("front_cut")) cfg.front_cut = parse_uint("front_cut", *v);
  if (auto v = take("back_cut")) cfg.back_cut = parse_uint("back_cut", *v);
  if (auto v = take("transport")) {
    if (*v == "loopback") cfg.transport = TransportKind::Loopback;
    else if (*v == "tcp") cfg.transport = TransportKind::Tcp;
    else throw Error(ErrorCode::Config, "transport: expected loopback or tcp, got '" + *v + "'");
  }
  if (auto v = take("host")) cfg.host = *v;
  if (auto v = take("output_dir")) cfg.output_dir = *v;
  if (auto v = take("max_clients")) cfg.max_clients = parse_uint("max_clients", *v);
  if (auto v = take("bootstrap_resamples")) cfg.bootstrap_resamples = parse_uint("bootstrap_resamples", *v);
  if (auto v = take("confidence_level")) cfg.confidence_level = parse_double("confidence_level", *v);
  if (!kv.empty()) throw Error(ErrorCode::Config, "unknown key '" + kv.begin()->first + "'");
  cfg.validate();
  return cfg;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::Config, "cannot read config " + path.string());
  std::stringstream text;
  text << in.rdbuf();
  return parse_config(text.str());
}

/// Relative output directories are placed under $SPLITLEARN_OUTPUT_ROOT when it is set.
inline std::filesystem::path resolve_output_dir(const ExperimentConfig& cfg) {
  if (cfg.output_dir.is_absolute()) return cfg.output_dir;
  if (const char* root = std::getenv(kOutputRootEnv); root != nullptr && *root != '\0') return std::filesystem::path(root) / cfg.output_dir;
  return cfg.output_dir;
}

// ---------------------------------------------------------------------------
// Cells and records

struct CellKey {
  Mode mode = Mode::SplitCollaborative;
  std::size_t n_clients = 1;
  std::uint64_t seed = 1;
};

/// Every setting that influences a cell's numbers, one per line in a fixed order.
inline std::string canonical_cell_string(const ExperimentConfig& cfg, const CellKey& cell) {
  const ChainConfig chain = cfg.chain();
  const TrainControl& c = cfg.control;
  char buf[64];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  std::ostringstream s;
  s << "task=" << (cfg.task.kind == TaskKind::Binary ? "binary" : "multilabel") << "\nlabels=" << cfg.task.labels
    << "\ndataset_size=" << cfg.dataset_size << "\nimage=" << cfg.channels << "x" << cfg.height << "x" << cfg.width
    << "\nnoise_sigma=" << num(cfg.noise_sigma) << "\namplitude=" << num(cfg.amplitude) << "\nbackground=" << num(cfg.background)
    << "\ncuts=" << chain.front_cut << "," << chain.back_cut << "\npatience=" << c.patience << "\nmax_rounds=" << c.max_rounds
    << "\nbatch_size=" << c.batch_size << "\neval_batch_size=" << c.eval_batch_size
    << "\nplateau=" << (c.metric_for_plateau == PlateauMetric::ValidationAccuracy ? "accuracy" : "loss")
    << "\nlr=" << num(c.hyper.learning_rate) << "\nbeta1=" << num(c.hyper.beta1) << "\nbeta2=" << num(c.hyper.beta2)
    << "\nepsilon=" << num(c.hyper.epsilon) << "\nshuffle_clients=" << c.shuffle_clients << "\nrotation=" << c.augment.rotation
    << "\nlateral_flip_prob=" << num(c.augment.lateral_flip_prob) << "\naxial_flip_prob=" << num(c.augment.axial_flip_prob)
    << "\nbootstrap_resamples=" << cfg.bootstrap_resamples << "\nconfidence_level=" << num(cfg.confidence_level)
    << "\nmode=" << to_string(cell.mode) << "\nn_clients=" << cell.n_clients << "\nseed=" << cell.seed << "\n";
  return s.str();
}

inline std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::string cell_hash(const ExperimentConfig& cfg, const CellKey& cell) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(canonical_cell_string(cfg, cell))));
  return buf;
}

struct RunRecord {
  Mode mode = Mode::SplitCollaborative;
  std::size_t n_clients = 1;
  std::uint64_t seed = 1;
  double metric = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
  std::size_t rounds = 0;
  std::size_t best_round = 0;
  double wall_seconds = 0.0;
  std::uint64_t activation_bytes = 0;
  std::uint64_t gradient_bytes = 0;
  std::uint64_t snapshot_bytes = 0;
  std::uint64_t control_bytes = 0;
  std::uint64_t bytes_total = 0;
  std::string hash;
  bool ok = true;
  std::string error;
};

/// Percentile bootstrap of the validation metric over validation samples.
inline ConfidenceInterval validation_ci(const Task& task, const EvalResult& eval, std::size_t resamples, double level, std::uint64_t seed) {
  const std::size_t k = task.n_outputs(), n = eval.labels.size() / k;
  if (task.kind == TaskKind::Binary) {
    std::vector<double> correct(n);
    for (std::size_t i = 0; i < n; ++i) correct[i] = (eval.probabilities[i] >= 0.5f) == (eval.labels[i] >= 0.5f) ? 1.0 : 0.0;
    return bootstrap_mean_ci(correct, resamples, level, seed);
  }
  std::vector<float> s, y;
  return bootstrap_ci(
      n,
      [&](std::span<const std::size_t> idx) {
        s.clear();
        y.clear();
        for (auto i : idx) {
          s.insert(s.end(), eval.probabilities.begin() + static_cast<std::ptrdiff_t>(i * k), eval.probabilities.begin() + static_cast<std::ptrdiff_t>((i + 1) * k));
          y.insert(y.end(), eval.labels.begin() + static_cast<std::ptrdiff_t>(i * k), eval.labels.begin() + static_cast<std::ptrdiff_t>((i + 1) * k));
        }
        try {
          return mean_auroc(s, y, k);
        } catch (const Error&) {
          return std::numeric_limits<double>::quiet_NaN();
        }
      },
      resamples, level, seed);
}

struct CellOutput {
  RunRecord record;
  std::vector<std::string> log_lines;
};

/// Trains one cell on an already synthesized dataset.
inline CellOutput run_cell(const ExperimentConfig& cfg, const CellKey& cell, const Dataset& data) {
  CellOutput out;
  RunRecord& r = out.record;
  r.mode = cell.mode;
  r.n_clients = cell.n_clients;
  r.seed = cell.seed;
  r.hash = cell_hash(cfg, cell);
  const auto t0 = std::chrono::steady_clock::now();
  SplitOptions options;
  options.transport = cfg.transport;
  options.host = cfg.host;
  options.observer = [&](const EpochLog& log) { out.log_lines.push_back(format_epoch_log(log)); };
  const RunResult result = run_mode(cell.mode, data, cell.n_clients, cfg.chain(), cfg.control_for(cell.seed), options);
  r.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  r.metric = result.best_eval.metric;
  const auto ci = validation_ci(cfg.task, result.best_eval, cfg.bootstrap_resamples, cfg.confidence_level,
                                derive_seed(cell.seed, {0xB007, cell.n_clients, static_cast<std::uint64_t>(cell.mode)}));
  r.ci_low = ci.low;
  r.ci_high = ci.high;
  r.rounds = result.rounds();
  r.best_round = result.best_round;
  r.activation_bytes = result.bytes.bytes(MessageKind::ActivationFwd);
  r.gradient_bytes = result.bytes.bytes(MessageKind::GradientBwd);
  r.snapshot_bytes = result.bytes.bytes(MessageKind::SnapshotUpload) + result.bytes.bytes(MessageKind::SnapshotDownload);
  r.bytes_total = result.bytes.total();
  r.control_bytes = r.bytes_total - r.activation_bytes - r.gradient_bytes - r.snapshot_bytes;
  return out;
}

namespace detail {

inline std::string full(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string fixed6(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

inline std::string record_text(const RunRecord& r) {
  std::ostringstream s;
  s << "hash=" << r.hash << "\nmode=" << to_string(r.mode) << "\nn_clients=" << r.n_clients << "\nseed=" << r.seed << "\nstatus=" << (r.ok ? "ok" : "failed")
    << "\nmetric=" << full(r.metric) << "\nci_low=" << full(r.ci_low) << "\nci_high=" << full(r.ci_high) << "\nrounds=" << r.rounds
    << "\nbest_round=" << r.best_round << "\nwall_seconds=" << full(r.wall_seconds) << "\nactivation_bytes=" << r.activation_bytes
    << "\ngradient_bytes=" << r.gradient_bytes << "\nsnapshot_bytes=" << r.snapshot_bytes << "\ncontrol_bytes=" << r.control_bytes
    << "\nbytes_total=" << r.bytes_total << "\n";
  return s.str();
}

inline std::optional<RunRecord> read_record(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) return std::nullopt;
  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq != std::string::npos) kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  try {
    RunRecord r;
    r.hash = kv.at("hash");
    r.mode = parse_mode(kv.at("mode")).value();
    r.n_clients = std::stoull(kv.at("n_clients"));
    r.seed = std::stoull(kv.at("seed"));
    r.ok = kv.at("status") == "ok";
    r.metric = std::stod(kv.at("metric"));
    r.ci_low = std::stod(kv.at("ci_low"));
    r.ci_high = std::stod(kv.at("ci_high"));
    r.rounds = std::stoull(kv.at("rounds"));
    r.best_round = std::stoull(kv.at("best_round"));
    r.wall_seconds = std::stod(kv.at("wall_seconds"));
    r.activation_bytes = std::stoull(kv.at("activation_bytes"));
    r.gradient_bytes = std::stoull(kv.at("gradient_bytes"));
    r.snapshot_bytes = std::stoull(kv.at("snapshot_bytes"));
    r.control_bytes = std::stoull(kv.at("control_bytes"));
    r.bytes_total = std::stoull(kv.at("bytes_total"));
    return r;
  } catch (const std::exception&) {
    return std::nullopt;  // unreadable records are recomputed
  }
}

inline void write_file(const std::filesystem::path& path, const std::string& text) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::Io, "cannot write " + tmp);
    out << text;
    if (!out) throw Error(ErrorCode::Io, "write failed for " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw Error(ErrorCode::Io, "cannot rename " + tmp + ": " + ec.message());
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Aggregation and reporting

/// Rounds to three decimals; printf rounds the exact binary value, with exact ties going to even.
inline std::string format_fixed3(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.3f", v);
  return buf;
}

struct SummaryRow {
  Mode mode = Mode::SplitCollaborative;
  std::size_t n_clients = 1;
  std::size_t seeds = 0;
  double mean = 0.0;
  double ci_low = 0.0;   // mean of per-seed lower bounds
  double ci_high = 0.0;  // mean of per-seed upper bounds
};

/// Groups successful records by (mode, n_clients) in first-appearance order.
inline std::vector<SummaryRow> summarize(const std::vector<RunRecord>& records) {
  std::vector<SummaryRow> rows;
  for (const RunRecord& r : records) {
    if (!r.ok) continue;
    auto it = std::find_if(rows.begin(), rows.end(), [&](const SummaryRow& s) { return s.mode == r.mode && s.n_clients == r.n_clients; });
    if (it == rows.end()) {
      rows.push_back({r.mode, r.n_clients});
      it = rows.end() - 1;
    }
    it->seeds += 1;
    it->mean += r.metric;
    it->ci_low += r.ci_low;
    it->ci_high += r.ci_high;
  }
  for (auto& s : rows) {
    s.mean /= static_cast<double>(s.seeds);
    s.ci_low /= static_cast<double>(s.seeds);
    s.ci_high /= static_cast<double>(s.seeds);
  }
  return rows;
}

inline std::vector<double> metrics_of(const std::vector<RunRecord>& records, Mode mode, std::size_t n_clients) {
  std::vector<double> out;
  for (const RunRecord& r : records)
    if (r.ok && r.mode == mode && r.n_clients == n_clients) out.push_back(r.metric);
  return out;
}

struct ModeComparison {
  std::size_t n_clients = 0;
  double mean_split = 0.0;
  double mean_noncollab = 0.0;
  std::size_t n_split = 0;
  std::size_t n_noncollab = 0;
  TTestResult test;
  bool significant_005 = false;  // p < 0.005
  bool significant_001 = false;  // p < 0.001
};

inline ModeComparison compare_modes(const std::vector<RunRecord>& records, std::size_t n_clients) {
  const auto a = metrics_of(records, Mode::SplitCollaborative, n_clients);
  const auto b = metrics_of(records, Mode::NonCollaborative, n_clients);
  if (a.size() < 2 || b.size() < 2) {
    throw Error(ErrorCode::InvalidArgument, "comparison at " + std::to_string(n_clients) + " clients needs >= 2 seeds per mode, have split=" +
                                                std::to_string(a.size()) + " noncollab=" + std::to_string(b.size()));
  }
  ModeComparison c;
  c.n_clients = n_clients;
  c.n_split = a.size();
  c.n_noncollab = b.size();
  c.mean_split = client_average(a);
  c.mean_noncollab = client_average(b);
  c.test = t_test_two_sample(a, b);
  c.significant_005 = c.test.p < 0.005;
  c.significant_001 = c.test.p < 0.001;
  return c;
}

inline std::string format_comparison(const ModeComparison& c) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "clients=%zu split_mean=%.6f (n=%zu) noncollab_mean=%.6f (n=%zu) t=%.6g df=%.6g p=%.6g p<0.005=%s p<0.001=%s",
                c.n_clients, c.mean_split, c.n_split, c.mean_noncollab, c.n_noncollab, c.test.t, c.test.df, c.test.p,
                c.significant_005 ? "yes" : "no", c.significant_001 ? "yes" : "no");
  return buf;
}

/// Text table with one row per client count: mean (low, high) for each of the two collaborative settings.
inline std::string emit_report(const std::vector<RunRecord>& records) {
  const auto rows = summarize(records);
  std::vector<std::size_t> counts;
  for (const auto& r : rows)
    if (std::find(counts.begin(), counts.end(), r.n_clients) == counts.end()) counts.push_back(r.n_clients);
  std::sort(counts.begin(), counts.end());
  auto cell = [&](Mode mode, std::size_t n) -> std::string {
    for (const auto& r : rows)
      if (r.mode == mode && r.n_clients == n) return format_fixed3(r.mean) + " (" + format_fixed3(r.ci_low) + ", " + format_fixed3(r.ci_high) + ")";
    return "-";
  };
  const std::string h0 = "number of clients", h1 = "Split learning mean (C.I.)", h2 = "Non collaborative mean (C.I.)";
  std::vector<std::array<std::string, 3>> table{{h0, h1, h2}};
  for (std::size_t n : counts) table.push_back({std::to_string(n), cell(Mode::SplitCollaborative, n), cell(Mode::NonCollaborative, n)});
  std::array<std::size_t, 3> w{};
  for (const auto& row : table)
    for (std::size_t c = 0; c < 3; ++c) w[c] = std::max(w[c], row[c].size());
  std::ostringstream out;
  for (std::size_t i = 0; i < table.size(); ++i) {
    for (std::size_t c = 0; c < 3; ++c) {
      out << table[i][c];
      out << (c < 2 ? std::string(w[c] - table[i][c].size(), ' ') + " | " : "\n");
    }
    if (i == 0) out << std::string(w[0], '-') << "-+-" << std::string(w[1], '-') << "-+-" << std::string(w[2], '-') << "\n";
  }
  return out.str();
}

inline std::string results_csv(const std::vector<RunRecord>& records) {
  std::string out = std::string(kResultsHeader) + "\n";
  for (const RunRecord& r : records) {
    if (!r.ok) continue;
    out += std::string(to_string(r.mode)) + "," + std::to_string(r.n_clients) + "," + std::to_string(r.seed) + "," + detail::fixed6(r.metric) + "," +
           detail::fixed6(r.ci_low) + "," + detail::fixed6(r.ci_high) + "," + std::to_string(r.rounds) + "," + std::to_string(r.bytes_total) + "\n";
  }
  return out;
}

/// Reads a results.csv back into records (only the columns it carries).
inline std::vector<RunRecord> load_results_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::Io, "cannot read " + path.string());
  std::string line;
  if (!std::getline(in, line) || detail::trim(line) != kResultsHeader) throw Error(ErrorCode::Config, path.string() + ": unexpected header");
  std::vector<RunRecord> out;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    std::vector<std::string> f;
    std::stringstream s(line);
    std::string item;
    while (std::getline(s, item, ',')) f.push_back(detail::trim(item));
    auto bad = [&] { return Error(ErrorCode::Config, path.string() + ":" + std::to_string(line_no) + ": malformed row"); };
    if (f.size() != 8) throw bad();
    RunRecord r;
    auto mode = parse_mode(f[0]);
    if (!mode) throw bad();
    r.mode = *mode;
    try {
      r.n_clients = std::stoull(f[1]);
      r.seed = std::stoull(f[2]);
      r.metric = std::stod(f[3]);
      r.ci_low = std::stod(f[4]);
      r.ci_high = std::stod(f[5]);
      r.rounds = std::stoull(f[6]);
      r.bytes_total = std::stoull(f[7]);
    } catch (const std::exception&) {
      throw bad();
    }
    out.push_back(r);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Sweep

struct SweepOptions {
  std::size_t parallel = 1;
  bool resume = false;
  std::function<void(const std::string&)> progress;
};

struct SweepResult {
  std::filesystem::path dir;
  std::vector<RunRecord> records;  // config order: modes, then client counts, then seeds
  std::size_t executed = 0;
  std::size_t reused = 0;
  std::size_t failed = 0;
};

inline std::vector<CellKey> sweep_cells(const ExperimentConfig& cfg) {
  std::vector<CellKey> cells;
  for (Mode m : cfg.modes)
    for (std::size_t n : cfg.client_counts)
      for (std::uint64_t s : cfg.seeds) cells.push_back({m, n, s});
  return cells;
}

/// Runs every cell (reusing finished ones with --resume) and writes the CSV outputs.
///
/// Output files: results.csv, summary.csv, plot_data.csv, bytes.csv, timing.csv, failures.csv,
/// report.txt, cells/<hash>.txt and logs/<mode>-<clients>-<seed>.log.
inline SweepResult run_sweep(const ExperimentConfig& cfg, const SweepOptions& options = {}) {
  cfg.validate();
  SweepResult result;
  result.dir = resolve_output_dir(cfg);
  std::error_code ec;
  std::filesystem::create_directories(result.dir / "cells", ec);
  if (!ec) std::filesystem::create_directories(result.dir / "logs", ec);
  if (ec) throw Error(ErrorCode::Io, "cannot create output directory " + result.dir.string() + ": " + ec.message());

  const auto cells = sweep_cells(cfg);
  result.records.resize(cells.size());
  std::vector<std::size_t> pending;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const std::string hash = cell_hash(cfg, cells[i]);
    if (options.resume) {
      auto r = detail::read_record(result.dir / "cells" / (hash + ".txt"));
      if (r && r->ok && r->hash == hash) {
        result.records[i] = *r;
        ++result.reused;
        continue;
      }
    }
    pending.push_back(i);
  }

  // Datasets depend only on the seed; build each once and share it read-only.
  std::map<std::uint64_t, Dataset> datasets;
  for (std::size_t i : pending)
    if (!datasets.count(cells[i].seed)) datasets.emplace(cells[i].seed, synthesize(cfg.synth(cells[i].seed)));

  std::mutex mu;
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t j = next++; j < pending.size(); j = next++) {
      const std::size_t i = pending[j];
      const CellKey& cell = cells[i];
      RunRecord rec;
      std::vector<std::string> lines;
      try {
        CellOutput out = run_cell(cfg, cell, datasets.at(cell.seed));
        rec = std::move(out.record);
        lines = std::move(out.log_lines);
      } catch (const std::exception& e) {
        rec = RunRecord{cell.mode, cell.n_clients, cell.seed};
        rec.hash = cell_hash(cfg, cell);
        rec.ok = false;
        rec.error = e.what();
      }
      std::string log_text;
      for (const auto& l : lines) log_text += l + "\n";
      const std::string stem = std::string(to_string(cell.mode)) + "-" + std::to_string(cell.n_clients) + "-" + std::to_string(cell.seed);
      try {
        detail::write_file(result.dir / "logs" / (stem + ".log"), log_text);
        if (rec.ok) detail::write_file(result.dir / "cells" / (rec.hash + ".txt"), detail::record_text(rec));
      } catch (const Error& e) {
        rec.ok = false;
        rec.error = e.what();
      }
      std::lock_guard lock(mu);
      result.records[i] = rec;
      ++result.executed;
      if (!rec.ok) ++result.failed;
      if (options.progress) {
        char buf[160];
        if (rec.ok) {
          std::snprintf(buf, sizeof buf, "%s metric=%.4f rounds=%zu %.1fs", stem.c_str(), rec.metric, rec.rounds, rec.wall_seconds);
        } else {
          std::snprintf(buf, sizeof buf, "%s FAILED", stem.c_str());
        }
        options.progress(std::string(buf) + (rec.ok ? "" : ": " + rec.error));
      }
    }
  };
  const std::size_t n_threads = std::max<std::size_t>(1, std::min(options.parallel, pending.size()));
  std::vector<std::thread> threads;
  for (std::size_t t = 1; t < n_threads; ++t) threads.emplace_back(worker);
  worker();
  for (auto& t : threads) t.join();

  // Aggregation is single-threaded and in config order, so the files do not depend on scheduling.
  std::string timing = "mode,n_clients,seed,wall_seconds\n", bytes = "mode,n_clients,seed,activation,gradient,snapshot,control,total\n",
              failures = "mode,n_clients,seed,error\n";
  for (const RunRecord& r : result.records) {
    const std::string key = std::string(to_string(r.mode)) + "," + std::to_string(r.n_clients) + "," + std::to_string(r.seed);
    if (!r.ok) {
      std::string msg = r.error;
      std::replace(msg.begin(), msg.end(), ',', ';');
      std::replace(msg.begin(), msg.end(), '\n', ' ');
      failures += key + "," + msg + "\n";
      continue;
    }
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3f", r.wall_seconds);
    timing += key + "," + buf + "\n";
    bytes += key + "," + std::to_string(r.activation_bytes) + "," + std::to_string(r.gradient_bytes) + "," + std::to_string(r.snapshot_bytes) + "," +
             std::to_string(r.control_bytes) + "," + std::to_string(r.bytes_total) + "\n";
  }
  std::string summary = "mode,n_clients,seeds,mean,ci_low,ci_high\n";
  const auto rows = summarize(result.records);
  for (const auto& s : rows)
    summary += std::string(to_string(s.mode)) + "," + std::to_string(s.n_clients) + "," + std::to_string(s.seeds) + "," + format_fixed3(s.mean) + "," +
               format_fixed3(s.ci_low) + "," + format_fixed3(s.ci_high) + "\n";
  std::string plot = "n_clients";
  for (Mode m : cfg.modes) plot += "," + std::string(to_string(m));
  plot += "\n";
  for (std::size_t n : cfg.client_counts) {
    plot += std::to_string(n);
    for (Mode m : cfg.modes) {
      auto it = std::find_if(rows.begin(), rows.end(), [&](const SummaryRow& s) { return s.mode == m && s.n_clients == n; });
      plot += "," + (it == rows.end() ? std::string() : detail::fixed6(it->mean));
    }
    plot += "\n";
  }
  detail::write_file(result.dir / "results.csv", results_csv(result.records));
  detail::write_file(result.dir / "summary.csv", summary);
  detail::write_file(result.dir / "plot_data.csv", plot);
  detail::write_file(result.dir / "bytes.csv", bytes);
  detail::write_file(result.dir / "timing.csv", timing);
  detail::write_file(result.dir / "failures.csv", failures);
  detail::write_file(result.dir / "report.txt", rows.empty() ? std::string() : emit_report(result.records));
  return result;
}

}  // namespace splitlearn
