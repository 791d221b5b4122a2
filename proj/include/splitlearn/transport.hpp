#pragma once

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <cerrno>
#include <condition_variable>
#include <cstring>
#include <deque>
#include <functional>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include "splitlearn/protocol.hpp"

namespace splitlearn {

/// Append-only copy of the frames one side has sent, for byte-level trace comparison.
class FrameTrace {
 public:
  void append(std::span<const std::uint8_t> frame) {
    std::lock_guard lock(mu_);
    bytes_.insert(bytes_.end(), frame.begin(), frame.end());
  }
  std::vector<std::uint8_t> bytes() const {
    std::lock_guard lock(mu_);
    return bytes_;
  }

 private:
  mutable std::mutex mu_;
  std::vector<std::uint8_t> bytes_;
};

/// One end of a bidirectional, FIFO, lossless frame stream.
class Connection {
 public:
  virtual ~Connection() = default;

  virtual void send(const WireMessage& msg) {
    const auto frame = encode(msg);
    write_frame(frame);
    counter_.add(kind_of(msg), Direction::Sent, frame.size());
    if (trace_) trace_->append(frame);
  }

  virtual WireMessage recv() {
    const auto frame = read_frame();
    WireMessage msg = decode_or_throw(frame);
    counter_.add(kind_of(msg), Direction::Received, frame.size());
    return msg;
  }

  virtual void close() = 0;

  virtual const ByteCounter& counter() const noexcept { return counter_; }
  void set_trace(std::shared_ptr<FrameTrace> trace) { trace_ = std::move(trace); }

 protected:
  virtual void write_frame(std::span<const std::uint8_t> frame) = 0;
  /// Returns one complete frame (header included); header errors are thrown.
  virtual std::vector<std::uint8_t> read_frame() = 0;

 private:
  ByteCounter counter_;
  std::shared_ptr<FrameTrace> trace_;
};

class Listener {
 public:
  virtual ~Listener() = default;
  /// Blocks for the next connection; returns null once the listener is closed.
  virtual std::unique_ptr<Connection> accept() = 0;
  virtual void close() = 0;
};

using Connector = std::function<std::unique_ptr<Connection>()>;

// ---------------------------------------------------------------------------
// Loopback

namespace detail {

struct FramePipe {
  std::mutex mu;
  std::condition_variable cv;
  std::deque<std::vector<std::uint8_t>> frames;
  bool closed = false;

  void push(std::vector<std::uint8_t> frame) {
    {
      std::lock_guard lock(mu);
      if (closed) throw Error(ErrorCode::ConnectionLost, "loopback peer closed");
      frames.push_back(std::move(frame));
    }
    cv.notify_one();
  }

  std::vector<std::uint8_t> pop() {
    std::unique_lock lock(mu);
    cv.wait(lock, [&] { return !frames.empty() || closed; });
    if (frames.empty()) throw Error(ErrorCode::ConnectionLost, "loopback peer closed");
    auto f = std::move(frames.front());
    frames.pop_front();
    return f;
  }

  void shut() {
    {
      std::lock_guard lock(mu);
      closed = true;
    }
    cv.notify_all();
  }
};

}  // namespace detail

class LoopbackConnection final : public Connection {
 public:
  LoopbackConnection(std::shared_ptr<detail::FramePipe> in, std::shared_ptr<detail::FramePipe> out)
      : in_(std::move(in)), out_(std::move(out)) {}
  ~LoopbackConnection() override { close(); }

  /// Two connected ends.
  static std::pair<std::unique_ptr<Connection>, std::unique_ptr<Connection>> pair() {
    auto a = std::make_shared<detail::FramePipe>();
    auto b = std::make_shared<detail::FramePipe>();
    return {std::make_unique<LoopbackConnection>(a, b), std::make_unique<LoopbackConnection>(b, a)};
  }

  void close() override {
    in_->shut();
    out_->shut();
  }

 protected:
  void write_frame(std::span<const std::uint8_t> frame) override { out_->push({frame.begin(), frame.end()}); }

  std::vector<std::uint8_t> read_frame() override {
    auto frame = in_->pop();
    // Loopback frames arrive whole, but run them through the same header validation as sockets.
    const auto header = check_header(frame);
    if (const auto* err = std::get_if<ErrorCode>(&header)) throw Error(*err, "loopback frame header");
    return frame;
  }

 private:
  std::shared_ptr<detail::FramePipe> in_;
  std::shared_ptr<detail::FramePipe> out_;
};

/// In-process listener; connect() hands the peer end to the next accept().
class LoopbackListener final : public Listener {
 public:
  std::unique_ptr<Connection> accept() override {
    std::unique_lock lock(mu_);
    cv_.wait(lock, [&] { return !pending_.empty() || closed_; });
    if (pending_.empty()) return nullptr;
    auto c = std::move(pending_.front());
    pending_.pop_front();
    return c;
  }

  std::unique_ptr<Connection> connect() {
    auto [client, server] = LoopbackConnection::pair();
    {
      std::lock_guard lock(mu_);
      if (closed_) throw Error(ErrorCode::ConnectionLost, "loopback listener closed");
      pending_.push_back(std::move(server));
    }
    cv_.notify_one();
    return std::move(client);
  }

  Connector connector() {
    return [this] { return connect(); };
  }

  void close() override {
    {
      std::lock_guard lock(mu_);
      closed_ = true;
      pending_.clear();
    }
    cv_.notify_all();
  }

 private:
  std::mutex mu_;
  std::condition_variable cv_;
  std::deque<std::unique_ptr<Connection>> pending_;
  bool closed_ = false;
};

// ---------------------------------------------------------------------------
// TCP

class TcpConnection final : public Connection {
 public:
  explicit TcpConnection(int fd) : fd_(fd) {
    const int one = 1;
    ::setsockopt(fd_, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
  }
  ~TcpConnection() override { close(); }

  void close() override {
    std::lock_guard lock(close_mu_);
    if (fd_ >= 0) {
      ::shutdown(fd_, SHUT_RDWR);
      ::close(fd_);
      fd_ = -1;
    }
  }

 protected:
  void write_frame(std::span<const std::uint8_t> frame) override {
    std::size_t sent = 0;
    while (sent < frame.size()) {
      const ssize_t n = ::send(fd_, frame.data() + sent, frame.size() - sent, MSG_NOSIGNAL);
      if (n < 0 && errno == EINTR) continue;
      if (n <= 0) throw Error(ErrorCode::ConnectionLost, std::string("send: ") + std::strerror(errno));
      sent += static_cast<std::size_t>(n);
    }
  }

  std::vector<std::uint8_t> read_frame() override {
    std::vector<std::uint8_t> frame(kFrameHeaderSize);
    read_exact(frame.data(), kFrameHeaderSize);
    const auto header = check_header(frame);
    if (const auto* err = std::get_if<ErrorCode>(&header)) throw Error(*err, "socket frame header");
    const std::uint32_t length = std::get<std::uint32_t>(header);
    frame.resize(kFrameHeaderSize + length);
    read_exact(frame.data() + kFrameHeaderSize, length);
    return frame;
  }

 private:
  void read_exact(std::uint8_t* dst, std::size_t n) {
    std::size_t got = 0;
    while (got < n) {
      const ssize_t r = ::recv(fd_, dst + got, n - got, 0);
      if (r < 0 && errno == EINTR) continue;
      if (r == 0) throw Error(ErrorCode::ConnectionLost, "peer closed the socket");
      if (r < 0) throw Error(ErrorCode::ConnectionLost, std::string("recv: ") + std::strerror(errno));
      got += static_cast<std::size_t>(r);
    }
  }

  int fd_;
  std::mutex close_mu_;
};

class TcpListener final : public Listener {
 public:
  /// Binds host:port; port 0 picks an ephemeral port (see port()).
  explicit TcpListener(const std::string& host = "127.0.0.1", std::uint16_t port = 0) {
    fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd_ < 0) throw Error(ErrorCode::Io, std::string("socket: ") + std::strerror(errno));
    const int one = 1;
    ::setsockopt(fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(port);
    if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1) {
      ::close(fd_);
      throw Error(ErrorCode::Config, "not an IPv4 address: " + host);
    }
    if (::bind(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0 || ::listen(fd_, 16) != 0) {
      const std::string why = std::strerror(errno);
      ::close(fd_);
      throw Error(ErrorCode::Io, "cannot listen on " + host + ":" + std::to_string(port) + ": " + why);
    }
    socklen_t len = sizeof addr;
    ::getsockname(fd_, reinterpret_cast<sockaddr*>(&addr), &len);
    host_ = host;
    port_ = ntohs(addr.sin_port);
  }
  ~TcpListener() override {
    close();
    if (fd_ >= 0) ::close(fd_);
  }

  std::uint16_t port() const noexcept { return port_; }
  const std::string& host() const noexcept { return host_; }

  std::unique_ptr<Connection> accept() override {
    while (true) {
      const int c = ::accept(fd_, nullptr, nullptr);
      if (c >= 0) {
        if (closed_) {
          ::close(c);
          return nullptr;
        }
        return std::make_unique<TcpConnection>(c);
      }
      if (errno == EINTR || errno == ECONNABORTED) continue;
      return nullptr;
    }
  }

  void close() override {
    if (!closed_.exchange(true)) ::shutdown(fd_, SHUT_RDWR);
  }

  Connector connector() const {
    return [host = host_, port = port_] { return connect_tcp(host, port); };
  }

  static std::unique_ptr<Connection> connect_tcp(const std::string& host, std::uint16_t port) {
    const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd < 0) throw Error(ErrorCode::ConnectionLost, std::string("socket: ") + std::strerror(errno));
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(port);
    if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1) {
      ::close(fd);
      throw Error(ErrorCode::Config, "not an IPv4 address: " + host);
    }
    if (::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0) {
      const std::string why = std::strerror(errno);
      ::close(fd);
      throw Error(ErrorCode::ConnectionLost, "connect " + host + ":" + std::to_string(port) + ": " + why);
    }
    return std::make_unique<TcpConnection>(fd);
  }

 private:
  int fd_ = -1;
  std::atomic<bool> closed_{false};
  std::string host_;
  std::uint16_t port_ = 0;
};

}  // namespace splitlearn
