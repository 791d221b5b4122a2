#include <gtest/gtest.h>

#include <random>
#include <thread>

#include "splitlearn/transport.hpp"

using namespace splitlearn;

namespace {

std::vector<WireMessage> session_script(std::uint64_t seed, int n) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> v(-1.0f, 1.0f);
  std::vector<WireMessage> out;
  out.push_back(SnapshotDownload{3});
  out.push_back(BeginEpoch{3, 1});
  for (int i = 0; i < n; ++i) {
    Tensor t({2, 3});
    for (float& x : t.values()) x = v(rng);
    if (i % 2 == 0)
      out.push_back(ActivationFwd{1, static_cast<std::uint32_t>(i), t});
    else
      out.push_back(GradientBwd{1, static_cast<std::uint32_t>(i), t});
  }
  out.push_back(EndEpoch{3, 1});
  out.push_back(ProtocolErrorMsg{6, "done"});
  return out;
}

/// Plays the script from a client; the server echoes each message back.
struct ScriptResult {
  std::vector<std::uint8_t> client_sent;
  std::vector<std::uint8_t> server_sent;
  std::vector<WireMessage> received;
  ByteCounter client_counter;
};

ScriptResult play(Listener& listener, const Connector& connect, const std::vector<WireMessage>& script) {
  auto server_trace = std::make_shared<FrameTrace>();
  std::thread server([&] {
    auto conn = listener.accept();
    conn->set_trace(server_trace);
    for (std::size_t i = 0; i < script.size(); ++i) conn->send(conn->recv());
  });
  auto client_trace = std::make_shared<FrameTrace>();
  auto conn = connect();
  conn->set_trace(client_trace);
  ScriptResult r;
  for (const auto& m : script) {
    conn->send(m);
    r.received.push_back(conn->recv());
  }
  server.join();
  r.client_sent = client_trace->bytes();
  r.server_sent = server_trace->bytes();
  r.client_counter = conn->counter();
  return r;
}

void write_raw(std::uint16_t port, const std::vector<std::uint8_t>& bytes) {
  const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(port);
  ::inet_pton(AF_INET, "127.0.0.1", &addr.sin_addr);
  ASSERT_EQ(::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr), 0);
  ASSERT_EQ(::send(fd, bytes.data(), bytes.size(), MSG_NOSIGNAL), static_cast<ssize_t>(bytes.size()));
  ::close(fd);
}

}  // namespace

TEST(Loopback, SendThenRecvReturnsEqualMessage) {
  auto [a, b] = LoopbackConnection::pair();
  const WireMessage m = ActivationFwd{4, 5, Tensor({1, 2}, std::vector<float>{1.5f, -2.0f})};
  a->send(m);
  EXPECT_EQ(b->recv(), m);
  b->send(Ack{9});
  EXPECT_EQ(a->recv(), WireMessage(Ack{9}));
}

TEST(Loopback, ThousandMessagesArriveInOrder) {
  auto [a, b] = LoopbackConnection::pair();
  std::thread producer([&a = a] {
    for (std::uint32_t i = 0; i < 1000; ++i) {
      if (i % 3 == 0)
        a->send(Ack{i});
      else
        a->send(BeginEpoch{i, i + 1});
    }
  });
  for (std::uint32_t i = 0; i < 1000; ++i) {
    const WireMessage m = b->recv();
    if (i % 3 == 0)
      EXPECT_EQ(m, WireMessage(Ack{i}));
    else
      EXPECT_EQ(m, WireMessage((BeginEpoch{i, i + 1})));
  }
  producer.join();
}

TEST(Loopback, ClosedPeerIsConnectionLost) {
  auto [a, b] = LoopbackConnection::pair();
  a->send(Ack{1});
  a->close();
  EXPECT_EQ(b->recv(), WireMessage(Ack{1}));  // frames already in flight are still delivered
  try {
    b->recv();
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::ConnectionLost);
  }
  EXPECT_THROW(b->send(Ack{2}), Error);
}

TEST(Loopback, ListenerCloseUnblocksAccept) {
  LoopbackListener listener;
  std::thread t([&] { EXPECT_EQ(listener.accept(), nullptr); });
  std::this_thread::sleep_for(std::chrono::milliseconds(20));
  listener.close();
  t.join();
  EXPECT_THROW(listener.connect(), Error);
}

TEST(Loopback, CountersTrackFrames) {
  auto [a, b] = LoopbackConnection::pair();
  a->send(Ack{1});
  a->send(BeginEpoch{1, 1});
  b->recv();
  b->recv();
  EXPECT_EQ(a->counter().total(Direction::Sent), 14u + 18u);
  EXPECT_EQ(b->counter().total(Direction::Received), 14u + 18u);
  EXPECT_EQ(a->counter().frames(MessageKind::Ack, Direction::Sent), 1u);
  EXPECT_EQ(a->counter().total(Direction::Received), 0u);
}

TEST(Tcp, SendThenRecvReturnsEqualMessage) {
  TcpListener listener;
  const auto script = session_script(1, 10);
  const auto r = play(listener, listener.connector(), script);
  ASSERT_EQ(r.received.size(), script.size());
  for (std::size_t i = 0; i < script.size(); ++i) EXPECT_EQ(r.received[i], script[i]);
}

TEST(Tcp, ThousandMessagesArriveInOrder) {
  TcpListener listener;
  std::thread producer([&] {
    auto conn = listener.accept();
    for (std::uint32_t i = 0; i < 1000; ++i) conn->send(ActivationFwd{i, i, Tensor({1}, static_cast<float>(i))});
  });
  auto conn = listener.connector()();
  for (std::uint32_t i = 0; i < 1000; ++i) EXPECT_EQ(conn->recv(), WireMessage(ActivationFwd{i, i, Tensor({1}, static_cast<float>(i))}));
  producer.join();
}

TEST(Tcp, PeerCloseIsConnectionLost) {
  TcpListener listener;
  std::thread server([&] { listener.accept()->close(); });
  auto conn = listener.connector()();
  server.join();
  try {
    conn->recv();
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::ConnectionLost);
  }
}

TEST(Tcp, BadHeaderSurfacesDecodeError) {
  TcpListener listener;
  ErrorCode seen = ErrorCode::Io;
  std::thread server([&] {
    auto conn = listener.accept();
    try {
      conn->recv();
    } catch (const Error& e) {
      seen = e.code();
    }
  });
  write_raw(listener.port(), {'X', 'X', 'X', 'X', 1, 7, 4, 0, 0, 0, 0, 0, 0, 0});
  server.join();
  EXPECT_EQ(seen, ErrorCode::BadMagic);
}

TEST(Tcp, ListenerCloseUnblocksAccept) {
  TcpListener listener;
  std::thread t([&] { EXPECT_EQ(listener.accept(), nullptr); });
  std::this_thread::sleep_for(std::chrono::milliseconds(20));
  listener.close();
  t.join();
}

TEST(Tcp, ConnectToClosedPortFails) {
  std::uint16_t port;
  {
    TcpListener l;
    port = l.port();
  }
  EXPECT_THROW(TcpListener::connect_tcp("127.0.0.1", port), Error);
  EXPECT_THROW(TcpListener("not-an-ip"), Error);
}

TEST(TransportProperties, SocketAndLoopbackProduceIdenticalFrameStreams) {
  const auto script = session_script(7, 40);
  LoopbackListener loop;
  const auto a = play(loop, loop.connector(), script);
  TcpListener tcp;
  const auto b = play(tcp, tcp.connector(), script);
  EXPECT_FALSE(a.client_sent.empty());
  EXPECT_EQ(a.client_sent, b.client_sent);
  EXPECT_EQ(a.server_sent, b.server_sent);
  EXPECT_EQ(a.client_sent, a.server_sent);  // the server echoes
  EXPECT_EQ(a.client_counter, b.client_counter);
  std::vector<std::uint8_t> expected;
  for (const auto& m : script) {
    const auto f = encode(m);
    expected.insert(expected.end(), f.begin(), f.end());
  }
  EXPECT_EQ(a.client_sent, expected);
}
