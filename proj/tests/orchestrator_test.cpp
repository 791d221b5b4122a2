#include <gtest/gtest.h>

#include <random>

#include "splitlearn/orchestrator.hpp"

using namespace splitlearn;

namespace {

Dataset small_data(Task task = Task::binary(), std::size_t n = 80, std::uint64_t seed = 1) {
  SynthSpec s;
  s.task = task;
  s.n = n;
  s.height = 8;
  s.width = 8;
  s.amplitude = 0.6;
  s.seed = seed;
  return synthesize(s);
}

ChainConfig small_config(Task task = Task::binary()) { return ChainConfig::mini_conv(task, 1, 8, 8); }

TrainControl small_control(std::size_t rounds = 3) {
  TrainControl ctl;
  ctl.max_rounds = rounds;
  ctl.patience = 100;
  ctl.batch_size = 8;
  ctl.eval_batch_size = 7;
  ctl.hyper.learning_rate = 1e-3f;
  ctl.seed = 5;
  return ctl;
}

void expect_same_logs(const RunResult& a, const RunResult& b) {
  ASSERT_EQ(a.logs.size(), b.logs.size());
  for (std::size_t i = 0; i < a.logs.size(); ++i) {
    EXPECT_EQ(a.logs[i].train_loss, b.logs[i].train_loss) << "round " << i;
    EXPECT_EQ(a.logs[i].validation_loss, b.logs[i].validation_loss) << "round " << i;
    EXPECT_EQ(a.logs[i].validation_metric, b.logs[i].validation_metric) << "round " << i;
  }
}

/// Fails with ConnectionLost on the `fail_at`-th send (1-based), or on the receive after that send when `on_recv`.
class FaultyConnection final : public Connection {
 public:
  FaultyConnection(std::unique_ptr<Connection> inner, std::size_t fail_at, bool on_recv)
      : inner_(std::move(inner)), fail_at_(fail_at), on_recv_(on_recv) {}

  void send(const WireMessage& msg) override {
    if (++sends_ == fail_at_ && !on_recv_) fail();
    inner_->send(msg);
  }
  WireMessage recv() override {
    if (sends_ == fail_at_ && on_recv_) fail();
    return inner_->recv();
  }
  const ByteCounter& counter() const noexcept override { return inner_->counter(); }
  void close() override { inner_->close(); }

 protected:
  void write_frame(std::span<const std::uint8_t>) override {}
  std::vector<std::uint8_t> read_frame() override { return {}; }

 private:
  [[noreturn]] void fail() {
    inner_->close();
    throw Error(ErrorCode::ConnectionLost, "injected fault");
  }
  std::unique_ptr<Connection> inner_;
  std::size_t fail_at_;
  bool on_recv_;
  std::size_t sends_ = 0;
};

}  // namespace

TEST(PlateauCheck, ImprovingHistoryContinues) {
  const std::vector<double> h{0.5, 0.6, 0.7};
  EXPECT_EQ(plateau_check(h, 30, true), Verdict::Continue);
}

TEST(PlateauCheck, StaleBestStops) {
  const std::vector<double> h{0.9, 0.8, 0.7, 0.8, 0.85, 0.6, 0.7};
  EXPECT_EQ(plateau_check(h, 5, true), Verdict::Stop);
  EXPECT_EQ(plateau_check(std::span(h).first(6), 5, true), Verdict::Continue);
  const std::vector<double> loss{0.1, 0.3, 0.2, 0.2, 0.4, 0.5, 0.3};
  EXPECT_EQ(plateau_check(loss, 5, false), Verdict::Stop);
}

TEST(PlateauCheck, ConstantHistoryStopsOnEarliestTie) {
  for (std::size_t patience : {1u, 5u, 10u}) {
    const std::vector<double> h(patience + 2, 0.5);
    EXPECT_EQ(plateau_check(h, patience, true), Verdict::Stop);
    EXPECT_EQ(plateau_check(std::span(h).first(patience + 1), patience, true), Verdict::Continue);
  }
  EXPECT_THROW(plateau_check(std::vector<double>{}, 1, true), Error);
}

TEST(SelectBest, Examples) {
  auto logs = [](std::vector<double> losses) {
    std::vector<EpochLog> out;
    for (double l : losses) out.push_back(EpochLog{.validation_loss = l});
    return out;
  };
  EXPECT_EQ(select_best(logs({0.9, 0.4, 0.5})), 1u);
  EXPECT_EQ(select_best(logs({0.4, 0.4})), 0u);
  EXPECT_THROW(select_best(logs({})), Error);
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<int> v(0, 5);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> losses(1 + trial % 12);
    for (auto& l : losses) l = v(rng) / 5.0;
    std::size_t scan = 0;
    for (std::size_t i = 0; i < losses.size(); ++i)
      if (losses[i] < losses[scan]) scan = i;
    EXPECT_EQ(select_best(logs(losses)), scan);
  }
}

TEST(EpochLogFormat, FixedFieldOrder) {
  EpochLog log{.round = 2, .client_id = 1, .train_loss = 0.5, .validation_loss = 0.25, .validation_metric = 0.75};
  log.bytes.add(MessageKind::ActivationFwd, Direction::Sent, 100);
  log.bytes.add(MessageKind::GradientBwd, Direction::Received, 40);
  EXPECT_EQ(format_epoch_log(log),
            "round=2 client=1 train_loss=0.5 validation_loss=0.25 validation_metric=0.75 bytes_sent=100 bytes_received=40 "
            "activation_bytes=100 gradient_bytes=40 snapshot_bytes=0");
}

TEST(RunSplit, OneClientEqualsCentralizedBitwise) {
  for (Task task : {Task::binary(), Task::multi_label(5)}) {
    const Dataset data = small_data(task, task.kind == TaskKind::Binary ? 80 : 120);
    const ChainConfig cfg = small_config(task);
    const TrainControl ctl = small_control(3);
    const PartitionPlan plan = partition(data, 1, ctl.seed);
    const RunResult split = run_split(data, plan, cfg, ctl);
    const RunResult central = run_centralized(data, plan, cfg, ctl);
    expect_same_logs(split, central);
    EXPECT_EQ(split.final, central.final);
    EXPECT_EQ(split.best, central.best);
    EXPECT_EQ(split.best_round, central.best_round);
    EXPECT_EQ(split.best_eval.probabilities, central.best_eval.probabilities);
  }
}

TEST(RunSplit, StepCountersContinueAcrossHandOff) {
  const Dataset data = small_data(Task::binary(), 90);
  const TrainControl ctl = small_control(1);
  const PartitionPlan plan = partition(data, 2, ctl.seed);
  const RunResult r = run_split(data, plan, small_config(), ctl);
  const std::size_t batches = epoch_batches(plan.train[0], ctl, 0, 0).size() + epoch_batches(plan.train[1], ctl, 0, 1).size();
  for (const LinkState* link : {&r.final.front, &r.final.center, &r.final.back})
    for (const auto& p : link->params) EXPECT_EQ(p.step, batches);
}

TEST(RunSplit, HandOffEqualsTrainingOnConcatenatedStream) {
  const Dataset data = small_data(Task::binary(), 90);
  const ChainConfig cfg = small_config();
  const TrainControl ctl = small_control(2);
  const PartitionPlan plan = partition(data, 2, ctl.seed);
  const RunResult split = run_split(data, plan, cfg, ctl);

  Rng init(init_seed(ctl));
  Sequential<float> net = build_monolithic(cfg, init);
  for (std::size_t round = 0; round < 2; ++round) {
    for (std::uint32_t c = 0; c < 2; ++c) {
      Rng aug(0);
      train_epoch_monolithic(net, cfg.task, data, epoch_batches(plan.train[c], ctl, round, c), ctl, aug);
    }
  }
  EXPECT_EQ(split.final, model_state_of(net, cfg));
}

TEST(RunSplit, LoopbackAndSocketGiveIdenticalResults) {
  const Dataset data = small_data(Task::binary(), 90);
  const TrainControl ctl = small_control(2);
  const PartitionPlan plan = partition(data, 3, ctl.seed);
  SplitOptions tcp;
  tcp.transport = TransportKind::Tcp;
  const RunResult a = run_split(data, plan, small_config(), ctl);
  const RunResult b = run_split(data, plan, small_config(), ctl, tcp);
  EXPECT_EQ(a.final, b.final);
  expect_same_logs(a, b);
  EXPECT_EQ(a.bytes, b.bytes);
}

TEST(RunSplit, CenterChangesDuringEveryClientEpoch) {
  const Dataset data = small_data(Task::binary(), 90);
  const TrainControl ctl = small_control(2);
  const PartitionPlan plan = partition(data, 3, ctl.seed);
  std::vector<LinkState> centers;
  SplitOptions opts;
  opts.after_client_epoch = [&](std::uint32_t, const CenterServer& s) { centers.push_back(s.center_state()); };
  run_split(data, plan, small_config(), ctl, opts);
  ASSERT_EQ(centers.size(), 6u);
  for (std::size_t i = 1; i < centers.size(); ++i) EXPECT_NE(centers[i].params[0].value, centers[i - 1].params[0].value);
}

TEST(RunSplit, TrafficCountsMatchBatchCrossings) {
  const Dataset data = small_data(Task::binary(), 80);
  const TrainControl ctl = small_control(1);
  const PartitionPlan plan = partition(data, 1, ctl.seed);
  const RunResult r = run_split(data, plan, small_config(), ctl);
  const std::size_t train_batches = epoch_batches(plan.train[0], ctl, 0, 0).size();
  const std::size_t eval_batches = chunk(plan.validation, ctl.eval_batch_size).size();
  const ByteCounter& b = r.logs[0].bytes;
  EXPECT_EQ(b.frames(MessageKind::GradientBwd), 2 * train_batches);
  EXPECT_EQ(b.frames(MessageKind::ActivationFwd), 2 * train_batches + 2 * eval_batches);
  EXPECT_EQ(b.frames(MessageKind::SnapshotUpload), 1u);  // the first client finds no snapshot to download
  EXPECT_EQ(b.frames(MessageKind::ProtocolError), 1u);
  EXPECT_EQ(b.total(), r.bytes.total());
  EXPECT_GT(r.bytes.total(), 0u);
}

TEST(RunSplit, SnapshotBytesConstantAcrossSwitches) {
  const Dataset data = small_data(Task::binary(), 90);
  const TrainControl ctl = small_control(2);
  const PartitionPlan plan = partition(data, 3, ctl.seed);
  std::vector<std::uint64_t> uploads;
  SplitOptions opts;
  opts.observer = [&](const EpochLog& log) { uploads.push_back(log.bytes.bytes(MessageKind::SnapshotUpload, Direction::Sent)); };
  run_split(data, plan, small_config(), ctl, opts);
  ASSERT_EQ(uploads.size(), 2u);
  EXPECT_EQ(uploads[0], uploads[1]);
}

TEST(RunSplit, RecoversFromLostConnectionBitwise) {
  const Dataset data = small_data(Task::binary(), 90);
  const TrainControl ctl = small_control(2);
  const PartitionPlan plan = partition(data, 3, ctl.seed);
  const RunResult clean = run_split(data, plan, small_config(), ctl);
  // Mid-epoch loss on client 1, a lost final Ack on client 2, and a loss during client 0's first epoch.
  for (auto [victim, fail_at, on_recv] : std::vector<std::tuple<std::uint32_t, std::size_t, bool>>{{1, 5, false}, {2, 0, true}, {0, 3, false}}) {
    std::size_t attempts = 0;
    SplitOptions opts;
    opts.wrap = [&, victim = victim, fail_at = fail_at, on_recv = on_recv](std::unique_ptr<Connection> c, std::uint32_t client) -> std::unique_ptr<Connection> {
      if (client != victim || attempts++ != 0) return c;
      // fail_at 0 with on_recv: fail when waiting for the Ack of EndEpoch, after the server committed.
      const std::size_t at = fail_at == 0 ? 4 + 2 * epoch_batches(plan.train[victim], ctl, 0, victim).size() : fail_at;
      return std::make_unique<FaultyConnection>(std::move(c), at, on_recv);
    };
    const RunResult r = run_split(data, plan, small_config(), ctl, opts);
    EXPECT_EQ(attempts, victim == 2 ? 5u : 3u) << "victim " << victim;
    EXPECT_EQ(r.final, clean.final) << "victim " << victim;
    expect_same_logs(r, clean);
  }
}

TEST(RunSplit, PersistentFailureNamesClient) {
  const Dataset data = small_data(Task::binary(), 90);
  const TrainControl ctl = small_control(1);
  const PartitionPlan plan = partition(data, 3, ctl.seed);
  SplitOptions opts;
  opts.wrap = [](std::unique_ptr<Connection> c, std::uint32_t client) -> std::unique_ptr<Connection> {
    if (client != 1) return c;
    return std::make_unique<FaultyConnection>(std::move(c), 2, false);
  };
  try {
    run_split(data, plan, small_config(), ctl, opts);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::ConnectionLost);
    EXPECT_NE(std::string(e.what()).find("client 1"), std::string::npos) << e.what();
  }
}

TEST(RunSplit, RejectsEmptyShard) {
  const Dataset data = small_data();
  PartitionPlan plan = partition(data, 2, 1);
  plan.train[1].clear();
  EXPECT_THROW(run_split(data, plan, small_config(), small_control()), Error);
}

TEST(CenterServer, RejectsOutOfOrderTraffic) {
  Rng rng(1);
  Chain chain = build_chain(small_config(), rng);
  CenterServer server(chain.center, AdamHyperParams{});
  auto check = [&](std::vector<WireMessage> script, ErrorCode expected) {
    auto [client, srv] = LoopbackConnection::pair();
    std::thread t([&, s = srv.get()] { server.handle(*s); });
    WireMessage last;
    std::uint32_t session = 0;
    for (auto m : script) {
      // Session id 99 stands for the id the server just acknowledged.
      std::visit([&](auto& msg) {
        if constexpr (requires { msg.session_id; })
          if (msg.session_id == 99) msg.session_id = session;
      }, m);
      client->send(m);
      last = client->recv();
      if (auto* ack = std::get_if<Ack>(&last)) session = ack->ref;
    }
    client->close();
    t.join();
    ASSERT_TRUE(std::holds_alternative<ProtocolErrorMsg>(last));
    EXPECT_EQ(error_code_from_wire(std::get<ProtocolErrorMsg>(last).code), expected);
  };
  const Tensor cut({2, 8, 8, 8});
  check({GradientBwd{1, 0, Tensor({2, 32})}}, ErrorCode::UnexpectedMessage);
  check({ActivationFwd{7, 0, cut}}, ErrorCode::UnexpectedMessage);
  check({BeginEpoch{0, 1}, GradientBwd{99, 0, Tensor({2, 32})}}, ErrorCode::UnexpectedMessage);
  check({BeginEpoch{0, 1}, ActivationFwd{99, 0, Tensor({2, 3, 8, 8})}}, ErrorCode::ShapeMismatch);
  check({SnapshotDownload{0}}, ErrorCode::NoSnapshot);
  EXPECT_EQ(server.aborted_sessions(), 2u);
}

TEST(CenterServer, AbortedSessionRollsBackCenter) {
  Rng rng(1);
  Chain chain = build_chain(small_config(), rng);
  CenterServer server(chain.center, AdamHyperParams{});
  const LinkState before = server.center_state();
  auto [client, srv] = LoopbackConnection::pair();
  std::thread t([&, s = srv.get()] { server.handle(*s); });
  client->send(BeginEpoch{0, 1});
  const auto session = std::get<Ack>(client->recv()).ref;
  std::mt19937_64 data(2);
  Tensor cut({2, 8, 8, 8});
  for (float& v : cut.values()) v = std::uniform_real_distribution<float>(0, 1)(data);
  client->send(ActivationFwd{session, 0, cut});
  client->recv();
  client->send(GradientBwd{session, 0, Tensor({2, 32}, 0.1f)});
  client->recv();
  EXPECT_NE(server.center_state(), before);
  client->close();
  t.join();
  EXPECT_EQ(server.center_state(), before);
  EXPECT_EQ(server.aborted_sessions(), 1u);
}

TEST(NonCollaborative, OneClientEqualsCentralized) {
  const Dataset data = small_data();
  const TrainControl ctl = small_control(3);
  const PartitionPlan plan = partition(data, 1, ctl.seed);
  const RunResult nc = run_non_collaborative(data, plan, small_config(), ctl);
  const RunResult central = run_centralized(data, plan, small_config(), ctl);
  expect_same_logs(nc, central);
  EXPECT_EQ(nc.final, central.final);
}

TEST(NonCollaborative, StopsPatiencePlusOneRoundsAfterBest) {
  const Dataset data = small_data(Task::binary(), 40);
  TrainControl ctl = small_control(200);
  ctl.patience = 5;
  const PartitionPlan plan = partition(data, 1, ctl.seed);
  ASSERT_EQ(plan.train[0].size(), 30u);
  const RunResult r = run_non_collaborative(data, plan, small_config(), ctl);
  ASSERT_LT(r.rounds(), 200u);
  std::size_t best = 0;
  for (std::size_t i = 1; i < r.logs.size(); ++i)
    if (r.logs[i].validation_metric > r.logs[best].validation_metric) best = i;
  EXPECT_EQ(r.rounds(), best + ctl.patience + 2);
}

TEST(NonCollaborative, NeverOpensTransport) {
  const Dataset data = small_data();
  const TrainControl ctl = small_control(2);
  for (Mode m : {Mode::NonCollaborative, Mode::Centralized}) {
    const RunResult r = run_mode(m, data, 3, small_config(), ctl);
    EXPECT_EQ(r.bytes.total(), 0u);
    for (const auto& log : r.logs) EXPECT_EQ(log.bytes.total(), 0u);
  }
  EXPECT_GT(run_mode(Mode::SplitCollaborative, data, 3, small_config(), ctl).bytes.total(), 0u);
}

TEST(NonCollaborative, EmptyShardFails) {
  const Dataset data = small_data();
  PartitionPlan plan = partition(data, 2, 1);
  plan.train[0].clear();
  EXPECT_THROW(run_non_collaborative(data, plan, small_config(), small_control()), Error);
  EXPECT_THROW(run_non_collaborative(data, plan, small_config(), small_control(), 5), Error);
}

TEST(BestState, ReproducesBestValidationOutputs) {
  const Dataset data = small_data();
  const TrainControl ctl = small_control(4);
  const PartitionPlan plan = partition(data, 2, ctl.seed);
  const RunResult r = run_split(data, plan, small_config(), ctl);
  Sequential<float> net = restore_monolithic(r.best, small_config());
  const EvalResult again = evaluate_monolithic(net, Task::binary(), data, plan.validation, ctl.eval_batch_size);
  EXPECT_EQ(again.probabilities, r.best_eval.probabilities);
  EXPECT_EQ(again.loss, r.logs[r.best_round].validation_loss);
}
