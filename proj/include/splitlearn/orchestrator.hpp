#pragma once

#include <cmath>
#include <cstdio>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "splitlearn/chain.hpp"
#include "splitlearn/data.hpp"
#include "splitlearn/metrics.hpp"
#include "splitlearn/protocol.hpp"
#include "splitlearn/transport.hpp"

namespace splitlearn {

enum class Mode { SplitCollaborative, NonCollaborative, Centralized };

inline std::string_view to_string(Mode mode) {
  switch (mode) {
    case Mode::SplitCollaborative: return "split";
    case Mode::NonCollaborative: return "noncollab";
    case Mode::Centralized: return "centralized";
  }
  return "?";
}

inline std::optional<Mode> parse_mode(std::string_view s) {
  for (Mode m : {Mode::SplitCollaborative, Mode::NonCollaborative, Mode::Centralized})
    if (s == to_string(m)) return m;
  return std::nullopt;
}

enum class PlateauMetric { ValidationAccuracy, ValidationLoss };
enum class TransportKind { Loopback, Tcp };

struct TrainControl {
  std::size_t patience = 10;
  std::size_t max_rounds = 40;
  std::size_t batch_size = 24;
  PlateauMetric metric_for_plateau = PlateauMetric::ValidationAccuracy;
  AdamHyperParams hyper;
  std::uint64_t seed = 1;
  AugmentSpec augment;
  std::size_t eval_batch_size = 100;
  std::size_t max_retries = 2;  // restarts of a client epoch after a lost connection
  bool shuffle_clients = false;

  /// Plateau on accuracy with patience 10 for Binary, on loss with patience 5 for MultiLabel.
  static TrainControl defaults_for(const Task& task) {
    TrainControl ctl;
    if (task.kind == TaskKind::MultiLabel) {
      ctl.patience = 5;
      ctl.metric_for_plateau = PlateauMetric::ValidationLoss;
    }
    return ctl;
  }

  void validate() const {
    if (patience < 1) throw Error(ErrorCode::Config, "patience must be >= 1");
    if (batch_size < 1 || eval_batch_size < 1) throw Error(ErrorCode::Config, "batch sizes must be >= 1");
    if (max_rounds < 1) throw Error(ErrorCode::Config, "max_rounds must be >= 1");
    hyper.validate();
    augment.validate();
  }
};

// ---------------------------------------------------------------------------
// Stopping and selection

enum class Verdict { Continue, Stop };

/// Stop iff the best value is more than `patience` entries old; ties resolve to the earliest best.
inline Verdict plateau_check(std::span<const double> history, std::size_t patience, bool higher_is_better) {
  if (history.empty()) throw Error(ErrorCode::InvalidArgument, "plateau_check on an empty history");
  std::size_t best = 0;
  for (std::size_t i = 1; i < history.size(); ++i) {
    if (higher_is_better ? history[i] > history[best] : history[i] < history[best]) best = i;
  }
  return history.size() - 1 - best > patience ? Verdict::Stop : Verdict::Continue;
}

struct EpochLog {
  std::size_t round = 0;
  std::uint32_t client_id = 0;  // the client holding the local links at evaluation time
  double train_loss = 0.0;
  double validation_loss = 0.0;
  double validation_metric = 0.0;
  ByteCounter bytes;  // traffic during this round
};

/// Index of the minimal validation loss; ties resolve to the earliest.
inline std::size_t select_best(std::span<const EpochLog> logs) {
  if (logs.empty()) throw Error(ErrorCode::InvalidArgument, "select_best on no logs");
  std::size_t best = 0;
  for (std::size_t i = 1; i < logs.size(); ++i)
    if (logs[i].validation_loss < logs[best].validation_loss) best = i;
  return best;
}

/// One line, fixed field order.
inline std::string format_epoch_log(const EpochLog& log) {
  auto kind_bytes = [&](MessageKind k) { return static_cast<unsigned long long>(log.bytes.bytes(k)); };
  char buf[512];
  std::snprintf(buf, sizeof buf,
                "round=%zu client=%u train_loss=%.9g validation_loss=%.9g validation_metric=%.9g bytes_sent=%llu bytes_received=%llu "
                "activation_bytes=%llu gradient_bytes=%llu snapshot_bytes=%llu",
                log.round, log.client_id, log.train_loss, log.validation_loss, log.validation_metric,
                static_cast<unsigned long long>(log.bytes.total(Direction::Sent)),
                static_cast<unsigned long long>(log.bytes.total(Direction::Received)), kind_bytes(MessageKind::ActivationFwd),
                kind_bytes(MessageKind::GradientBwd), kind_bytes(MessageKind::SnapshotUpload));
  return buf;
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalResult {
  double loss = 0.0;
  double metric = 0.0;               // accuracy (Binary) or mean AUROC over labels (MultiLabel)
  std::vector<float> probabilities;  // row-major [N, outputs]
  std::vector<float> labels;
};

namespace detail {

/// Accumulates batch results in validation order.
class EvalAccumulator {
 public:
  explicit EvalAccumulator(Task task) : task_(task) {}

  void add(double batch_loss, const Tensor& probabilities, const Tensor& labels) {
    const std::size_t b = labels.dim(0);
    weighted_loss_ += batch_loss * static_cast<double>(b);
    samples_ += b;
    out_.probabilities.insert(out_.probabilities.end(), probabilities.values().begin(), probabilities.values().end());
    out_.labels.insert(out_.labels.end(), labels.values().begin(), labels.values().end());
  }

  EvalResult finish() {
    out_.loss = weighted_loss_ / static_cast<double>(samples_);
    out_.metric = task_.kind == TaskKind::Binary ? accuracy(out_.probabilities, out_.labels)
                                                 : mean_auroc(out_.probabilities, out_.labels, task_.n_outputs());
    return std::move(out_);
  }

 private:
  Task task_;
  double weighted_loss_ = 0.0;
  std::size_t samples_ = 0;
  EvalResult out_;
};

inline std::uint64_t batch_seed(const TrainControl& ctl, std::size_t round, std::uint32_t client) {
  return derive_seed(ctl.seed, {0xBA7C4, round, client});
}

inline std::uint64_t augment_seed(const TrainControl& ctl, std::size_t round, std::uint32_t client) {
  return derive_seed(ctl.seed, {0xA06, round, client});
}

}  // namespace detail

inline std::uint64_t init_seed(const TrainControl& ctl) { return derive_seed(ctl.seed, {0x1417}); }

/// The batches a client trains on in a given round.
inline std::vector<std::vector<std::size_t>> epoch_batches(std::span<const std::size_t> shard, const TrainControl& ctl, std::size_t round,
                                                           std::uint32_t client) {
  return make_batches(shard, ctl.batch_size, detail::batch_seed(ctl, round, client));
}

inline EvalResult evaluate_monolithic(Sequential<float>& net, const Task& task, const Dataset& data, std::span<const std::size_t> validation,
                                      std::size_t batch_size) {
  detail::EvalAccumulator acc(task);
  for (const auto& batch : chunk(validation, batch_size)) {
    auto [x, y] = gather(data, batch);
    HeadResult<float> head = apply_head(task, net.forward(x), y);
    acc.add(head.loss, head.probabilities, y);
  }
  return acc.finish();
}

/// One pass over `batches` with a monolithic network; returns the sample-weighted mean training loss.
inline double train_epoch_monolithic(Sequential<float>& net, const Task& task, const Dataset& data,
                                     const std::vector<std::vector<std::size_t>>& batches, const TrainControl& ctl, Rng& augment_rng) {
  double loss = 0.0;
  std::size_t samples = 0;
  for (const auto& batch : batches) {
    auto [x, y] = gather(data, batch, &ctl.augment, &augment_rng);
    loss += monolithic_train_step(net, task, x, y, ctl.hyper) * static_cast<double>(batch.size());
    samples += batch.size();
  }
  return samples == 0 ? 0.0 : loss / static_cast<double>(samples);
}

// ---------------------------------------------------------------------------
// Results

/// Full model parameters and optimizer state, as three link states in chain order.
struct ModelState {
  LinkState front;
  LinkState center;
  LinkState back;

  std::vector<Tensor> parameters() const {
    std::vector<Tensor> out;
    for (const LinkState* l : {&front, &center, &back})
      for (const auto& p : l->params) out.push_back(p.value);
    return out;
  }
  friend bool operator==(const ModelState&, const ModelState&) = default;
};

/// Slices a monolithic network's state at the chain cuts.
inline ModelState model_state_of(const Sequential<float>& net, const ChainConfig& cfg) {
  Sequential<float> copy = net;
  Link front(LinkRole::Front, 0, copy.take(0, cfg.front_cut), cfg.task);
  Link center(LinkRole::Center, cfg.front_cut, copy.take(cfg.front_cut, cfg.back_cut), cfg.task);
  Link back(LinkRole::Back, cfg.back_cut, copy.take(cfg.back_cut, copy.size()), cfg.task);
  return {capture_link(front), capture_link(center), capture_link(back)};
}

/// Rebuilds a monolithic network holding the given state.
inline Sequential<float> restore_monolithic(const ModelState& state, const ChainConfig& cfg) {
  Rng rng(0);
  Chain chain = build_chain(cfg, rng);
  check_link_shapes(state.front, chain.front);
  check_link_shapes(state.center, chain.center);
  check_link_shapes(state.back, chain.back);
  restore_link(state.front, chain.front);
  restore_link(state.center, chain.center);
  restore_link(state.back, chain.back);
  Sequential<float> net = std::move(chain.front.net());
  net.append(std::move(chain.center.net()));
  net.append(std::move(chain.back.net()));
  return net;
}

struct RunResult {
  Mode mode = Mode::SplitCollaborative;
  std::size_t n_clients = 1;
  std::vector<EpochLog> logs;
  std::size_t best_round = 0;
  ModelState best;        // state at best_round
  EvalResult best_eval;   // validation outputs at best_round
  ModelState final;       // state after the last round
  ByteCounter bytes;      // all traffic of the run
  std::size_t rounds() const noexcept { return logs.size(); }
};

/// Per-round plateau tracking and best-state bookkeeping shared by all modes.
class RoundTracker {
 public:
  RoundTracker(const TrainControl& ctl, RunResult& result) : ctl_(ctl), result_(result) {}

  /// Records a round; `capture` is called only when this round becomes the best. Returns true to stop.
  bool record(EpochLog log, EvalResult eval, const std::function<ModelState()>& capture) {
    history_.push_back(ctl_.metric_for_plateau == PlateauMetric::ValidationAccuracy ? log.validation_metric : log.validation_loss);
    result_.logs.push_back(std::move(log));
    if (select_best(result_.logs) == result_.logs.size() - 1) {
      result_.best_round = result_.logs.size() - 1;
      result_.best = capture();
      result_.best_eval = std::move(eval);
    }
    const bool higher_is_better = ctl_.metric_for_plateau == PlateauMetric::ValidationAccuracy;
    return plateau_check(history_, ctl_.patience, higher_is_better) == Verdict::Stop;
  }

 private:
  const TrainControl& ctl_;
  RunResult& result_;
  std::vector<double> history_;
};

using RoundObserver = std::function<void(const EpochLog&)>;

/// Trains one monolithic model on `shard` and validates on the full validation set each round.
/// Batch streams use `stream_client` so a shard trained here matches that client's split schedule.
inline RunResult train_monolithic(const Dataset& data, std::span<const std::size_t> shard, std::span<const std::size_t> validation,
                                  const ChainConfig& cfg, const TrainControl& ctl, std::uint32_t stream_client = 0,
                                  const RoundObserver& observer = {}) {
  ctl.validate();
  if (shard.empty()) throw Error(ErrorCode::InvalidArgument, "cannot train on an empty shard");
  Rng init(init_seed(ctl));
  Sequential<float> net = build_monolithic(cfg, init);
  RunResult result;
  RoundTracker tracker(ctl, result);
  for (std::size_t round = 0; round < ctl.max_rounds; ++round) {
    Rng aug(detail::augment_seed(ctl, round, stream_client));
    EpochLog log;
    log.round = round;
    log.client_id = stream_client;
    log.train_loss = train_epoch_monolithic(net, cfg.task, data, epoch_batches(shard, ctl, round, stream_client), ctl, aug);
    EvalResult eval = evaluate_monolithic(net, cfg.task, data, validation, ctl.eval_batch_size);
    log.validation_loss = eval.loss;
    log.validation_metric = eval.metric;
    if (observer) observer(log);
    if (tracker.record(log, std::move(eval), [&] { return model_state_of(net, cfg); })) break;
  }
  result.final = model_state_of(net, cfg);
  return result;
}

inline RunResult run_centralized(const Dataset& data, const PartitionPlan& plan, const ChainConfig& cfg, const TrainControl& ctl,
                                 const RoundObserver& observer = {}) {
  const auto all = plan.all_train();
  RunResult r = train_monolithic(data, all, plan.validation, cfg, ctl, 0, observer);
  r.mode = Mode::Centralized;
  r.n_clients = plan.n_clients();
  return r;
}

/// A single client trained alone on the sample size it would hold in the collaborative setting.
inline RunResult run_non_collaborative(const Dataset& data, const PartitionPlan& plan, const ChainConfig& cfg, const TrainControl& ctl,
                                       std::uint32_t client = 0, const RoundObserver& observer = {}) {
  if (client >= plan.n_clients()) throw Error(ErrorCode::InvalidArgument, "no shard for client " + std::to_string(client));
  RunResult r = train_monolithic(data, plan.train[client], plan.validation, cfg, ctl, client, observer);
  r.mode = Mode::NonCollaborative;
  r.n_clients = plan.n_clients();
  return r;
}

// ---------------------------------------------------------------------------
// Split learning: server side

/// Holds the center link and relays local-state snapshots between consecutive clients.
/// Serves one connection at a time. A training session that ends without EndEpoch is rolled back.
class CenterServer {
 public:
  CenterServer(Link center, AdamHyperParams hyper) : center_(std::move(center)), hyper_(hyper) {
    center_.require_role(LinkRole::Center, "CenterServer");
  }

  /// Accepts and serves connections until the listener is closed.
  void serve(Listener& listener) {
    while (auto conn = listener.accept()) handle(*conn);
  }

  void handle(Connection& conn) {
    Session s;
    while (true) {
      WireMessage msg;
      try {
        msg = conn.recv();
      } catch (const Error& e) {
        if (e.code() != ErrorCode::ConnectionLost) try_send(conn, make_protocol_error(e.code(), e.what()));
        break;
      }
      try {
        if (!dispatch(conn, s, msg)) break;
      } catch (const Error& e) {
        try_send(conn, make_protocol_error(e.code(), e.what()));
        break;
      }
    }
    std::lock_guard lock(mu_);
    if (s.active != 0) {
      restore_link(*s.epoch_start, center_);
      center_.net().zero_grad();
      ++aborted_sessions_;
    }
    conn.close();
  }

  LinkState center_state() const {
    std::lock_guard lock(mu_);
    return capture_link(center_);
  }

  std::optional<ClientStateSnapshot> stored_snapshot() const {
    std::lock_guard lock(mu_);
    return snapshot_;
  }

  std::size_t aborted_sessions() const {
    std::lock_guard lock(mu_);
    return aborted_sessions_;
  }

 private:
  struct Session {
    std::uint32_t active = 0;
    std::optional<LinkState> epoch_start;
    std::optional<std::uint32_t> pending_batch;
    std::optional<ClientStateSnapshot> upload;
  };

  static void try_send(Connection& conn, const WireMessage& msg) {
    try {
      conn.send(msg);
    } catch (const Error&) {
    }
  }

  static Error unexpected(const std::string& what) { return Error(ErrorCode::UnexpectedMessage, what); }

  /// Returns false when the session should end.
  bool dispatch(Connection& conn, Session& s, const WireMessage& msg) {
    std::unique_lock lock(mu_);
    return std::visit(
        overloaded{
            [&](const SnapshotDownload&) {
              if (snapshot_) {
                const ClientStateSnapshot copy = *snapshot_;
                lock.unlock();
                conn.send(SnapshotUpload{copy.client_id, copy});
              } else {
                lock.unlock();
                conn.send(make_protocol_error(ErrorCode::NoSnapshot, "no client has uploaded local state yet"));
              }
              return true;
            },
            [&](const BeginEpoch&) {
              if (s.active != 0) throw unexpected("BeginEpoch inside an open epoch");
              s.active = next_session_++;
              if (next_session_ == kEvaluationSession) next_session_ = 1;
              s.epoch_start = capture_link(center_);
              lock.unlock();
              conn.send(Ack{s.active});
              return true;
            },
            [&](const ActivationFwd& m) {
              if (m.session_id != kEvaluationSession) {
                if (m.session_id != s.active || s.active == 0) throw unexpected("activation for unknown session " + std::to_string(m.session_id));
                if (s.pending_batch) throw unexpected("activation before the gradient of batch " + std::to_string(*s.pending_batch));
                s.pending_batch = m.batch_id;
              }
              Tensor out = forward_center(center_, m.tensor);
              lock.unlock();
              conn.send(ActivationFwd{m.session_id, m.batch_id, std::move(out)});
              return true;
            },
            [&](const GradientBwd& m) {
              if (m.session_id == kEvaluationSession || m.session_id != s.active) throw unexpected("gradient outside a training session");
              if (!s.pending_batch || *s.pending_batch != m.batch_id) throw unexpected("gradient for batch " + std::to_string(m.batch_id) + " without its activation");
              Tensor g = backward_center(center_, m.tensor);
              center_.net().step(hyper_);
              s.pending_batch.reset();
              lock.unlock();
              conn.send(GradientBwd{m.session_id, m.batch_id, std::move(g)});
              return true;
            },
            [&](const SnapshotUpload& m) {
              if (s.active == 0) throw unexpected("snapshot upload outside an epoch");
              s.upload = m.snapshot;
              lock.unlock();
              conn.send(Ack{m.client_id});
              return true;
            },
            [&](const EndEpoch& m) {
              if (s.active == 0 || s.pending_batch || !s.upload) throw unexpected("EndEpoch before the epoch completed");
              snapshot_ = std::move(s.upload);
              s = Session{};
              lock.unlock();
              conn.send(Ack{m.epoch});
              return true;
            },
            [&](const Ack&) -> bool { throw unexpected("server received Ack"); },
            [&](const ProtocolErrorMsg&) { return false; },
        },
        msg);
  }

  mutable std::mutex mu_;
  Link center_;
  AdamHyperParams hyper_;
  std::optional<ClientStateSnapshot> snapshot_;
  std::uint32_t next_session_ = 1;
  std::size_t aborted_sessions_ = 0;
};

// ---------------------------------------------------------------------------
// Split learning: client side

struct ClientNode {
  std::uint32_t id = 0;
  Link front;
  Link back;
};

namespace detail {

template <typename T>
T expect(Connection& conn, const char* what) {
  WireMessage m = conn.recv();
  if (auto* err = std::get_if<ProtocolErrorMsg>(&m)) {
    throw Error(error_code_from_wire(err->code).value_or(ErrorCode::UnexpectedMessage), err->message);
  }
  if (auto* t = std::get_if<T>(&m)) return std::move(*t);
  throw Error(ErrorCode::UnexpectedMessage, std::string("expected ") + what + ", got " + std::string(to_string(kind_of(m))));
}

}  // namespace detail

struct ClientEpochResult {
  double train_loss = 0.0;
  bool already_committed = false;  // an earlier attempt of this epoch reached the server
};

/// Downloads the previous local state (if any), trains one epoch through the server, uploads the new state.
/// `epoch` is the global hand-off sequence number and identifies the snapshot this epoch produces.
inline ClientEpochResult run_client_epoch(Connection& conn, ClientNode& client, const Dataset& data,
                                          const std::vector<std::vector<std::size_t>>& batches, std::uint32_t epoch, const TrainControl& ctl,
                                          Rng& augment_rng, double* loss_out = nullptr) {
  ClientEpochResult result;
  conn.send(SnapshotDownload{client.id});
  WireMessage reply = conn.recv();
  if (auto* up = std::get_if<SnapshotUpload>(&reply)) {
    apply_snapshot(up->snapshot, client.front, client.back);
    if (up->snapshot.client_id == client.id && up->snapshot.epoch == epoch) {
      result.already_committed = true;
      return result;
    }
  } else if (auto* err = std::get_if<ProtocolErrorMsg>(&reply); !err || error_code_from_wire(err->code) != ErrorCode::NoSnapshot) {
    throw Error(ErrorCode::UnexpectedMessage, "bad reply to SnapshotDownload");
  }

  conn.send(BeginEpoch{client.id, epoch});
  const std::uint32_t session = detail::expect<Ack>(conn, "Ack").ref;
  double loss = 0.0;
  std::size_t samples = 0;
  std::uint32_t batch_id = 0;
  for (const auto& batch : batches) {
    auto [x, y] = gather(data, batch, &ctl.augment, &augment_rng);
    conn.send(ActivationFwd{session, batch_id, forward_front(client.front, x)});
    const ActivationFwd pre_back = detail::expect<ActivationFwd>(conn, "ActivationFwd");
    BackResult back = forward_back_and_loss(client.back, pre_back.tensor, y);
    conn.send(GradientBwd{session, batch_id, std::move(back.grad)});
    const GradientBwd to_front = detail::expect<GradientBwd>(conn, "GradientBwd");
    backward_front(client.front, to_front.tensor);
    client.front.net().step(ctl.hyper);
    client.back.net().step(ctl.hyper);
    loss += back.loss * static_cast<double>(batch.size());
    samples += batch.size();
    ++batch_id;
  }
  result.train_loss = samples == 0 ? 0.0 : loss / static_cast<double>(samples);
  if (loss_out) *loss_out = result.train_loss;
  conn.send(SnapshotUpload{client.id, take_snapshot(client.front, client.back, client.id, epoch)});
  detail::expect<Ack>(conn, "Ack");
  conn.send(EndEpoch{client.id, epoch});
  detail::expect<Ack>(conn, "Ack");
  return result;
}

/// Forward-only pass over the validation set through the server (session 0).
inline EvalResult evaluate_split(Connection& conn, ClientNode& client, const Dataset& data, std::span<const std::size_t> validation,
                                 std::size_t batch_size) {
  detail::EvalAccumulator acc(data.task());
  std::uint32_t batch_id = 0;
  for (const auto& batch : chunk(validation, batch_size)) {
    auto [x, y] = gather(data, batch);
    conn.send(ActivationFwd{kEvaluationSession, batch_id++, forward_front(client.front, x)});
    const ActivationFwd pre_back = detail::expect<ActivationFwd>(conn, "ActivationFwd");
    BackResult r = forward_back_eval(client.back, pre_back.tensor, y);
    acc.add(r.loss, r.probabilities, y);
  }
  return acc.finish();
}

struct SplitOptions {
  TransportKind transport = TransportKind::Loopback;
  std::string host = "127.0.0.1";
  std::uint16_t port = 0;
  /// Wraps every client connection, e.g. to record traces or inject faults.
  std::function<std::unique_ptr<Connection>(std::unique_ptr<Connection>, std::uint32_t client)> wrap;
  RoundObserver observer;
  /// Called after each client epoch with the server, e.g. to watch center state.
  std::function<void(std::uint32_t client, const CenterServer&)> after_client_epoch;
};

/// Split-collaborative training: clients take turns, one epoch each per round, handing local state on.
inline RunResult run_split(const Dataset& data, const PartitionPlan& plan, const ChainConfig& cfg, const TrainControl& ctl,
                           const SplitOptions& options = {}) {
  ctl.validate();
  const std::size_t n = plan.n_clients();
  if (n == 0) throw Error(ErrorCode::InvalidArgument, "split learning needs at least one client");
  for (std::size_t i = 0; i < n; ++i)
    if (plan.train[i].empty()) throw Error(ErrorCode::InvalidArgument, "client " + std::to_string(i) + " has an empty shard");

  Rng init(init_seed(ctl));
  Chain chain = build_chain(cfg, init);
  std::vector<ClientNode> clients;
  for (std::uint32_t i = 0; i < n; ++i) clients.push_back({i, chain.front, chain.back});
  CenterServer server(std::move(chain.center), ctl.hyper);

  std::unique_ptr<Listener> listener;
  Connector connect;
  if (options.transport == TransportKind::Loopback) {
    auto loop = std::make_unique<LoopbackListener>();
    connect = loop->connector();
    listener = std::move(loop);
  } else {
    auto tcp = std::make_unique<TcpListener>(options.host, options.port);
    connect = tcp->connector();
    listener = std::move(tcp);
  }
  std::thread server_thread([&] { server.serve(*listener); });
  struct Joiner {
    Listener& l;
    std::thread& t;
    ~Joiner() {
      l.close();
      if (t.joinable()) t.join();
    }
  } joiner{*listener, server_thread};

  RunResult result;
  result.mode = Mode::SplitCollaborative;
  result.n_clients = n;
  RoundTracker tracker(ctl, result);
  std::vector<std::uint32_t> order(n);
  std::iota(order.begin(), order.end(), 0u);
  std::uint32_t last = 0;

  auto open = [&](std::uint32_t client) {
    auto conn = connect();
    if (options.wrap) conn = options.wrap(std::move(conn), client);
    return conn;
  };

  for (std::size_t round = 0; round < ctl.max_rounds; ++round) {
    if (ctl.shuffle_clients) {
      Rng shuffle(derive_seed(ctl.seed, {0x5F1, round}));
      std::shuffle(order.begin(), order.end(), shuffle);
    }
    ByteCounter round_bytes;
    double round_loss = 0.0;
    std::size_t round_samples = 0;
    for (std::size_t pos = 0; pos < n; ++pos) {
      const std::uint32_t id = order[pos];
      ClientNode& client = clients[id];
      const auto epoch = static_cast<std::uint32_t>(round * n + pos + 1);
      const auto batches = epoch_batches(plan.train[id], ctl, round, id);
      const ClientStateSnapshot local_start = take_snapshot(client.front, client.back, id, epoch - 1);
      double loss = std::numeric_limits<double>::quiet_NaN();
      for (std::size_t attempt = 0;; ++attempt) {
        std::unique_ptr<Connection> conn;
        try {
          conn = open(id);
          Rng aug(detail::augment_seed(ctl, round, id));
          const ClientEpochResult r = run_client_epoch(*conn, client, data, batches, epoch, ctl, aug, &loss);
          round_bytes += conn->counter();
          conn->close();
          (void)r;
          break;
        } catch (const Error& e) {
          if (conn) {
            round_bytes += conn->counter();
            conn->close();
          }
          if (e.code() != ErrorCode::ConnectionLost || attempt >= ctl.max_retries) {
            throw Error(e.code(), "client " + std::to_string(id) + " (round " + std::to_string(round) + "): " + e.what());
          }
          apply_snapshot(local_start, client.front, client.back);
          client.front.net().zero_grad();
          client.back.net().zero_grad();
        }
      }
      round_loss += loss * static_cast<double>(plan.train[id].size());
      round_samples += plan.train[id].size();
      last = id;
      if (options.after_client_epoch) options.after_client_epoch(id, server);
    }

    // The client holding the newest local state evaluates on the full validation set.
    auto conn = open(last);
    EvalResult eval;
    try {
      eval = evaluate_split(*conn, clients[last], data, plan.validation, ctl.eval_batch_size);
    } catch (const Error& e) {
      throw Error(e.code(), "client " + std::to_string(last) + " (evaluation, round " + std::to_string(round) + "): " + e.what());
    }
    round_bytes += conn->counter();
    conn->close();

    EpochLog log;
    log.round = round;
    log.client_id = last;
    log.train_loss = round_loss / static_cast<double>(round_samples);
    log.validation_loss = eval.loss;
    log.validation_metric = eval.metric;
    log.bytes = round_bytes;
    result.bytes += round_bytes;
    if (options.observer) options.observer(log);
    const auto capture = [&] { return ModelState{capture_link(clients[last].front), server.center_state(), capture_link(clients[last].back)}; };
    if (tracker.record(log, std::move(eval), capture)) break;
  }
  result.final = ModelState{capture_link(clients[last].front), server.center_state(), capture_link(clients[last].back)};
  return result;
}

/// Partitions the data for `n_clients` and runs the requested mode.
inline RunResult run_mode(Mode mode, const Dataset& data, std::size_t n_clients, const ChainConfig& cfg, const TrainControl& ctl,
                          const SplitOptions& options = {}) {
  const PartitionPlan plan = partition(data, n_clients, ctl.seed);
  switch (mode) {
    case Mode::SplitCollaborative: return run_split(data, plan, cfg, ctl, options);
    case Mode::NonCollaborative: return run_non_collaborative(data, plan, cfg, ctl, 0, options.observer);
    case Mode::Centralized: return run_centralized(data, plan, cfg, ctl, options.observer);
  }
  throw Error(ErrorCode::InvalidArgument, "unknown mode");
}

}  // namespace splitlearn
