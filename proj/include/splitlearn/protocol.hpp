#pragma once

#include <zlib.h>

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "splitlearn/chain.hpp"

// Frame layout (all integers little-endian):
//
//   "SPLT" | version:u8 (=1) | tag:u8 | payload_length:u32 | payload
//
// Tensor: rank:u8 | dims:u32 x rank | values:f32 x prod(dims)
//
// Payloads by tag:
//   0x01 ActivationFwd     session:u32 batch:u32 tensor
//   0x02 GradientBwd       session:u32 batch:u32 tensor
//   0x03 SnapshotUpload    client:u32 snapshot
//   0x04 SnapshotDownload  client:u32
//   0x05 BeginEpoch        client:u32 epoch:u32
//   0x06 EndEpoch          client:u32 epoch:u32
//   0x07 Ack               ref:u32
//   0x08 ProtocolError     code:u16 length:u32 utf8 bytes
//
// Snapshot: client:u32 epoch:u32 front_link back_link crc32:u32, where the CRC-32 covers every
// snapshot byte before it and a link is count:u32 followed by count x (value m v step:u64).

namespace splitlearn {

inline constexpr std::array<std::uint8_t, 4> kMagic{'S', 'P', 'L', 'T'};
inline constexpr std::uint8_t kProtocolVersion = 1;
inline constexpr std::size_t kFrameHeaderSize = 10;
inline constexpr std::uint64_t kMaxPayloadBytes = 0x7fffffffu;

/// Session id reserved for inference-only traffic: the server runs forward passes but expects no gradient.
inline constexpr std::uint32_t kEvaluationSession = 0;

enum class MessageKind : std::uint8_t {
  ActivationFwd = 0x01,
  GradientBwd = 0x02,
  SnapshotUpload = 0x03,
  SnapshotDownload = 0x04,
  BeginEpoch = 0x05,
  EndEpoch = 0x06,
  Ack = 0x07,
  ProtocolError = 0x08,
};

inline constexpr std::size_t kMessageKindCount = 8;

inline std::string_view to_string(MessageKind kind) {
  switch (kind) {
    case MessageKind::ActivationFwd: return "ActivationFwd";
    case MessageKind::GradientBwd: return "GradientBwd";
    case MessageKind::SnapshotUpload: return "SnapshotUpload";
    case MessageKind::SnapshotDownload: return "SnapshotDownload";
    case MessageKind::BeginEpoch: return "BeginEpoch";
    case MessageKind::EndEpoch: return "EndEpoch";
    case MessageKind::Ack: return "Ack";
    case MessageKind::ProtocolError: return "ProtocolError";
  }
  return "?";
}

struct ParameterState {
  Tensor value;
  Tensor m;
  Tensor v;
  std::uint64_t step = 0;
  friend bool operator==(const ParameterState&, const ParameterState&) = default;
};

struct LinkState {
  std::vector<ParameterState> params;
  friend bool operator==(const LinkState&, const LinkState&) = default;
};

/// Local-link state handed from one client to the next on rotation.
struct ClientStateSnapshot {
  std::uint32_t client_id = 0;
  std::uint32_t epoch = 0;
  LinkState front;
  LinkState back;
  std::uint32_t checksum = 0;
  friend bool operator==(const ClientStateSnapshot&, const ClientStateSnapshot&) = default;
};

struct ActivationFwd {
  std::uint32_t session_id = 0;
  std::uint32_t batch_id = 0;
  Tensor tensor;
  friend bool operator==(const ActivationFwd&, const ActivationFwd&) = default;
};

struct GradientBwd {
  std::uint32_t session_id = 0;
  std::uint32_t batch_id = 0;
  Tensor tensor;
  friend bool operator==(const GradientBwd&, const GradientBwd&) = default;
};

struct SnapshotUpload {
  std::uint32_t client_id = 0;
  ClientStateSnapshot snapshot;
  friend bool operator==(const SnapshotUpload&, const SnapshotUpload&) = default;
};

struct SnapshotDownload {
  std::uint32_t client_id = 0;
  friend bool operator==(const SnapshotDownload&, const SnapshotDownload&) = default;
};

struct BeginEpoch {
  std::uint32_t client_id = 0;
  std::uint32_t epoch = 0;
  friend bool operator==(const BeginEpoch&, const BeginEpoch&) = default;
};

struct EndEpoch {
  std::uint32_t client_id = 0;
  std::uint32_t epoch = 0;
  friend bool operator==(const EndEpoch&, const EndEpoch&) = default;
};

struct Ack {
  std::uint32_t ref = 0;
  friend bool operator==(const Ack&, const Ack&) = default;
};

struct ProtocolErrorMsg {
  std::uint16_t code = 0;
  std::string message;
  friend bool operator==(const ProtocolErrorMsg&, const ProtocolErrorMsg&) = default;
};

using WireMessage = std::variant<ActivationFwd, GradientBwd, SnapshotUpload, SnapshotDownload, BeginEpoch, EndEpoch, Ack, ProtocolErrorMsg>;

inline MessageKind kind_of(const WireMessage& msg) {
  return static_cast<MessageKind>(msg.index() + 1);
}

/// Stable wire numbering for error codes carried in ProtocolError frames.
inline std::uint16_t wire_error_code(ErrorCode code) {
  switch (code) {
    case ErrorCode::BadMagic: return 1;
    case ErrorCode::NeedMore: return 2;
    case ErrorCode::UnsupportedVersion: return 3;
    case ErrorCode::CorruptSnapshot: return 4;
    case ErrorCode::SnapshotShapeMismatch: return 5;
    case ErrorCode::NoSnapshot: return 6;
    case ErrorCode::UnknownTag: return 7;
    case ErrorCode::MalformedPayload: return 8;
    case ErrorCode::UnexpectedMessage: return 9;
    case ErrorCode::ConnectionLost: return 10;
    case ErrorCode::TensorTooLarge: return 11;
    case ErrorCode::ShapeMismatch: return 12;
    case ErrorCode::NonFinite: return 13;
    case ErrorCode::OutOfOrder: return 14;
    case ErrorCode::MissingGradient: return 15;
    case ErrorCode::InvalidArgument: return 16;
    case ErrorCode::InvalidChain: return 17;
    case ErrorCode::NoDiscriminationPossible: return 18;
    case ErrorCode::Io: return 19;
    case ErrorCode::Config: return 20;
  }
  return 0xffff;
}

inline std::optional<ErrorCode> error_code_from_wire(std::uint16_t code) {
  for (ErrorCode c : {ErrorCode::BadMagic, ErrorCode::NeedMore, ErrorCode::UnsupportedVersion, ErrorCode::CorruptSnapshot,
                      ErrorCode::SnapshotShapeMismatch, ErrorCode::NoSnapshot, ErrorCode::UnknownTag, ErrorCode::MalformedPayload,
                      ErrorCode::UnexpectedMessage, ErrorCode::ConnectionLost, ErrorCode::TensorTooLarge, ErrorCode::ShapeMismatch,
                      ErrorCode::NonFinite, ErrorCode::OutOfOrder, ErrorCode::MissingGradient, ErrorCode::InvalidArgument,
                      ErrorCode::InvalidChain, ErrorCode::NoDiscriminationPossible, ErrorCode::Io, ErrorCode::Config}) {
    if (wire_error_code(c) == code) return c;
  }
  return std::nullopt;
}

inline ProtocolErrorMsg make_protocol_error(ErrorCode code, std::string message) {
  return ProtocolErrorMsg{wire_error_code(code), std::move(message)};
}

namespace wire {

class Writer {
 public:
  explicit Writer(std::vector<std::uint8_t>& out) : out_(out) {}

  void u8(std::uint8_t v) { out_.push_back(v); }
  void u16(std::uint16_t v) { put(v, 2); }
  void u32(std::uint32_t v) { put(v, 4); }
  void u64(std::uint64_t v) { put(v, 8); }
  void bytes(std::span<const std::uint8_t> b) { out_.insert(out_.end(), b.begin(), b.end()); }

  void tensor(const Tensor& t) {
    if (t.rank() > 255) throw Error(ErrorCode::TensorTooLarge, "tensor rank above 255");
    if (static_cast<std::uint64_t>(t.size()) * 4 > kMaxPayloadBytes) {
      throw Error(ErrorCode::TensorTooLarge, "tensor of " + std::to_string(t.size()) + " floats exceeds 2^31-1 bytes");
    }
    u8(static_cast<std::uint8_t>(t.rank()));
    for (std::size_t d : t.shape()) {
      if (d > std::numeric_limits<std::uint32_t>::max()) throw Error(ErrorCode::TensorTooLarge, "dimension exceeds u32");
      u32(static_cast<std::uint32_t>(d));
    }
    const std::size_t start = out_.size();
    out_.resize(start + t.size() * 4);
    std::uint8_t* dst = out_.data() + start;
    for (float f : t.values()) {
      const auto bits = std::bit_cast<std::uint32_t>(f);
      dst[0] = static_cast<std::uint8_t>(bits);
      dst[1] = static_cast<std::uint8_t>(bits >> 8);
      dst[2] = static_cast<std::uint8_t>(bits >> 16);
      dst[3] = static_cast<std::uint8_t>(bits >> 24);
      dst += 4;
    }
  }

  std::size_t size() const noexcept { return out_.size(); }

 private:
  void put(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t>& out_;
};

/// Bounds-checked little-endian reader; overruns throw MalformedPayload.
class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}

  std::uint8_t u8() { return static_cast<std::uint8_t>(get(1)); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(get(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
  std::uint64_t u64() { return get(8); }

  std::span<const std::uint8_t> bytes(std::size_t n) {
    need(n);
    auto out = in_.subspan(pos_, n);
    pos_ += n;
    return out;
  }

  Tensor tensor() {
    const std::size_t rank = u8();
    if (rank == 0) throw Error(ErrorCode::MalformedPayload, "tensor rank 0");
    Shape shape(rank);
    std::uint64_t count = 1;
    for (auto& d : shape) {
      d = u32();
      if (d == 0) throw Error(ErrorCode::MalformedPayload, "zero tensor dimension");
      count *= d;
      if (count * 4 > kMaxPayloadBytes) throw Error(ErrorCode::TensorTooLarge, "tensor exceeds 2^31-1 bytes");
    }
    auto raw = bytes(static_cast<std::size_t>(count) * 4);
    std::vector<float> values(static_cast<std::size_t>(count));
    for (std::size_t i = 0; i < values.size(); ++i) {
      const std::uint8_t* p = raw.data() + 4 * i;
      const std::uint32_t bits = static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
                                 (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
      values[i] = std::bit_cast<float>(bits);
    }
    return Tensor(std::move(shape), std::move(values));
  }

  std::size_t position() const noexcept { return pos_; }
  std::size_t remaining() const noexcept { return in_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (in_.size() - pos_ < n) throw Error(ErrorCode::MalformedPayload, "payload ends early");
  }
  std::uint64_t get(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(in_[pos_ + i]) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

inline void write_link_state(Writer& w, const LinkState& link) {
  w.u32(static_cast<std::uint32_t>(link.params.size()));
  for (const auto& p : link.params) {
    w.tensor(p.value);
    w.tensor(p.m);
    w.tensor(p.v);
    w.u64(p.step);
  }
}

inline LinkState read_link_state(Reader& r) {
  LinkState link;
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    ParameterState p;
    p.value = r.tensor();
    p.m = r.tensor();
    p.v = r.tensor();
    p.step = r.u64();
    link.params.push_back(std::move(p));
  }
  return link;
}

inline std::vector<std::uint8_t> snapshot_body(const ClientStateSnapshot& s) {
  std::vector<std::uint8_t> out;
  Writer w(out);
  w.u32(s.client_id);
  w.u32(s.epoch);
  write_link_state(w, s.front);
  write_link_state(w, s.back);
  return out;
}

inline std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks.
  while (!bytes.empty()) {
    const std::size_t n = std::min<std::size_t>(bytes.size(), 1u << 30);
    crc = ::crc32(crc, bytes.data(), static_cast<uInt>(n));
    bytes = bytes.subspan(n);
  }
  return static_cast<std::uint32_t>(crc);
}

}  // namespace wire

/// Recomputes the snapshot checksum over its current contents.
inline void seal(ClientStateSnapshot& snapshot) {
  snapshot.checksum = wire::crc32_of(wire::snapshot_body(snapshot));
}

inline std::vector<std::uint8_t> encode(const WireMessage& msg) {
  std::vector<std::uint8_t> out(kMagic.begin(), kMagic.end());
  out.push_back(kProtocolVersion);
  out.push_back(static_cast<std::uint8_t>(kind_of(msg)));
  out.resize(kFrameHeaderSize);
  wire::Writer w(out);
  std::visit(overloaded{
                 [&](const ActivationFwd& m) { w.u32(m.session_id); w.u32(m.batch_id); w.tensor(m.tensor); },
                 [&](const GradientBwd& m) { w.u32(m.session_id); w.u32(m.batch_id); w.tensor(m.tensor); },
                 [&](const SnapshotUpload& m) {
                   w.u32(m.client_id);
                   w.bytes(wire::snapshot_body(m.snapshot));
                   w.u32(m.snapshot.checksum);
                 },
                 [&](const SnapshotDownload& m) { w.u32(m.client_id); },
                 [&](const BeginEpoch& m) { w.u32(m.client_id); w.u32(m.epoch); },
                 [&](const EndEpoch& m) { w.u32(m.client_id); w.u32(m.epoch); },
                 [&](const Ack& m) { w.u32(m.ref); },
                 [&](const ProtocolErrorMsg& m) {
                   w.u16(m.code);
                   w.u32(static_cast<std::uint32_t>(m.message.size()));
                   w.bytes(std::span(reinterpret_cast<const std::uint8_t*>(m.message.data()), m.message.size()));
                 },
             },
             msg);
  const std::uint64_t payload = out.size() - kFrameHeaderSize;
  if (payload > kMaxPayloadBytes) throw Error(ErrorCode::TensorTooLarge, "frame payload exceeds 2^31-1 bytes");
  for (int i = 0; i < 4; ++i) out[6 + i] = static_cast<std::uint8_t>(payload >> (8 * i));
  return out;
}

inline std::size_t tensor_wire_size(const Tensor& t) { return 1 + 4 * t.rank() + 4 * t.size(); }

/// Exact encoded frame size, computed without encoding.
inline std::size_t encoded_size(const WireMessage& msg) {
  auto link_size = [](const LinkState& l) {
    std::size_t n = 4;
    for (const auto& p : l.params) n += tensor_wire_size(p.value) + tensor_wire_size(p.m) + tensor_wire_size(p.v) + 8;
    return n;
  };
  const std::size_t payload = std::visit(
      overloaded{
          [](const ActivationFwd& m) { return 8 + tensor_wire_size(m.tensor); },
          [](const GradientBwd& m) { return 8 + tensor_wire_size(m.tensor); },
          [&](const SnapshotUpload& m) { return 4 + 8 + link_size(m.snapshot.front) + link_size(m.snapshot.back) + 4; },
          [](const SnapshotDownload&) { return std::size_t{4}; },
          [](const BeginEpoch&) { return std::size_t{8}; },
          [](const EndEpoch&) { return std::size_t{8}; },
          [](const Ack&) { return std::size_t{4}; },
          [](const ProtocolErrorMsg& m) { return 6 + m.message.size(); },
      },
      msg);
  return kFrameHeaderSize + payload;
}

struct DecodeResult {
  std::optional<WireMessage> message;
  std::optional<ErrorCode> error;  // NeedMore means "wait for more bytes", nothing consumed
  std::size_t consumed = 0;
  std::string detail;

  bool ok() const noexcept { return message.has_value(); }
};

/// Validates the fixed 10-byte header. Returns the payload length or an error code.
inline std::variant<std::uint32_t, ErrorCode> check_header(std::span<const std::uint8_t> bytes) {
  const std::size_t magic_avail = std::min<std::size_t>(bytes.size(), 4);
  if (!std::equal(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(magic_avail), kMagic.begin())) return ErrorCode::BadMagic;
  if (bytes.size() < 5) return ErrorCode::NeedMore;
  if (bytes[4] != kProtocolVersion) return ErrorCode::UnsupportedVersion;
  if (bytes.size() < 6) return ErrorCode::NeedMore;
  if (bytes[5] < 1 || bytes[5] > kMessageKindCount) return ErrorCode::UnknownTag;
  if (bytes.size() < kFrameHeaderSize) return ErrorCode::NeedMore;
  const std::uint32_t length = static_cast<std::uint32_t>(bytes[6]) | (static_cast<std::uint32_t>(bytes[7]) << 8) |
                               (static_cast<std::uint32_t>(bytes[8]) << 16) | (static_cast<std::uint32_t>(bytes[9]) << 24);
  if (length > kMaxPayloadBytes) return ErrorCode::MalformedPayload;
  return length;
}

/// Decodes the first frame in `bytes`. Never consumes anything unless a full, valid frame is present.
inline DecodeResult decode(std::span<const std::uint8_t> bytes) {
  DecodeResult result;
  const auto header = check_header(bytes);
  if (const auto* err = std::get_if<ErrorCode>(&header)) {
    result.error = *err;
    result.detail = std::string(to_string(*err));
    return result;
  }
  const std::uint32_t length = std::get<std::uint32_t>(header);
  if (bytes.size() < kFrameHeaderSize + length) {
    result.error = ErrorCode::NeedMore;
    result.detail = "frame needs " + std::to_string(kFrameHeaderSize + length) + " bytes, have " + std::to_string(bytes.size());
    return result;
  }
  const auto kind = static_cast<MessageKind>(bytes[5]);
  wire::Reader r(bytes.subspan(kFrameHeaderSize, length));
  try {
    WireMessage msg;
    switch (kind) {
      case MessageKind::ActivationFwd: {
        ActivationFwd m;
        m.session_id = r.u32();
        m.batch_id = r.u32();
        m.tensor = r.tensor();
        msg = std::move(m);
        break;
      }
      case MessageKind::GradientBwd: {
        GradientBwd m;
        m.session_id = r.u32();
        m.batch_id = r.u32();
        m.tensor = r.tensor();
        msg = std::move(m);
        break;
      }
      case MessageKind::SnapshotUpload: {
        // The checksum is verified before the body is parsed, so a damaged length or dim field is
        // reported as corruption rather than as a malformed payload.
        if (length < 4 + 8 + 4) throw Error(ErrorCode::MalformedPayload, "snapshot payload too short");
        const auto body = bytes.subspan(kFrameHeaderSize + 4, length - 8);
        std::uint32_t stored = 0;
        for (int i = 0; i < 4; ++i) stored |= static_cast<std::uint32_t>(bytes[kFrameHeaderSize + length - 4 + i]) << (8 * i);
        if (wire::crc32_of(body) != stored) throw Error(ErrorCode::CorruptSnapshot, "snapshot checksum mismatch");
        SnapshotUpload m;
        m.client_id = r.u32();
        m.snapshot.client_id = r.u32();
        m.snapshot.epoch = r.u32();
        m.snapshot.front = wire::read_link_state(r);
        m.snapshot.back = wire::read_link_state(r);
        m.snapshot.checksum = r.u32();
        msg = std::move(m);
        break;
      }
      case MessageKind::SnapshotDownload: msg = SnapshotDownload{r.u32()}; break;
      case MessageKind::BeginEpoch: {
        BeginEpoch m;
        m.client_id = r.u32();
        m.epoch = r.u32();
        msg = m;
        break;
      }
      case MessageKind::EndEpoch: {
        EndEpoch m;
        m.client_id = r.u32();
        m.epoch = r.u32();
        msg = m;
        break;
      }
      case MessageKind::Ack: msg = Ack{r.u32()}; break;
      case MessageKind::ProtocolError: {
        ProtocolErrorMsg m;
        m.code = r.u16();
        const std::uint32_t n = r.u32();
        auto text = r.bytes(n);
        m.message.assign(text.begin(), text.end());
        msg = std::move(m);
        break;
      }
    }
    if (r.remaining() != 0) throw Error(ErrorCode::MalformedPayload, std::to_string(r.remaining()) + " trailing payload bytes");
    result.message = std::move(msg);
    result.consumed = kFrameHeaderSize + length;
  } catch (const Error& e) {
    result.error = e.code();
    result.detail = e.what();
  }
  return result;
}

/// Decodes a frame that must be complete and valid; any failure is thrown.
inline WireMessage decode_or_throw(std::span<const std::uint8_t> bytes) {
  DecodeResult r = decode(bytes);
  if (!r.ok()) throw Error(*r.error, r.detail);
  if (r.consumed != bytes.size()) throw Error(ErrorCode::MalformedPayload, "bytes after frame end");
  return std::move(*r.message);
}

// ---------------------------------------------------------------------------
// Snapshots

inline LinkState capture_link(const Link& link) {
  LinkState state;
  const auto& layers = link.net().layers();
  const auto& adam = link.net().optimizer_states();
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& params = layers[i].parameters();
    for (std::size_t j = 0; j < params.size(); ++j) {
      ParameterState p;
      p.value = Tensor(params[j].shape(), std::vector<float>(params[j].values().begin(), params[j].values().end()));
      p.m = adam[i][j].m;
      p.v = adam[i][j].v;
      p.step = adam[i][j].step;
      state.params.push_back(std::move(p));
    }
  }
  return state;
}

inline void check_link_shapes(const LinkState& state, const Link& link) {
  std::size_t k = 0;
  for (const auto& layer : link.net().layers()) {
    for (const auto& param : layer.parameters()) {
      if (k >= state.params.size()) {
        throw Error(ErrorCode::SnapshotShapeMismatch, std::string(to_string(link.role())) + " link has more parameters than the snapshot");
      }
      const auto& p = state.params[k++];
      if (p.value.shape() != param.shape() || p.m.shape() != param.shape() || p.v.shape() != param.shape()) {
        throw Error(ErrorCode::SnapshotShapeMismatch, std::string(to_string(link.role())) + " parameter " + std::to_string(k - 1) +
                                                          ": snapshot " + shape_string(p.value.shape()) + " vs link " +
                                                          shape_string(param.shape()));
      }
    }
  }
  if (k != state.params.size()) {
    throw Error(ErrorCode::SnapshotShapeMismatch, std::string(to_string(link.role())) + " link has fewer parameters than the snapshot");
  }
}

inline void restore_link(const LinkState& state, Link& link) {
  auto& layers = link.net().layers();
  auto& adam = link.net().optimizer_states();
  std::size_t k = 0;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    auto& params = layers[i].parameters();
    for (std::size_t j = 0; j < params.size(); ++j) {
      const auto& p = state.params[k++];
      params[j] = p.value;
      adam[i][j].m = p.m;
      adam[i][j].v = p.v;
      adam[i][j].step = p.step;
    }
  }
}

/// Deep copy of the local links (parameters, Adam moments, step counters), sealed with its CRC.
inline ClientStateSnapshot take_snapshot(const Link& front, const Link& back, std::uint32_t client_id, std::uint32_t epoch) {
  front.require_role(LinkRole::Front, "take_snapshot");
  back.require_role(LinkRole::Back, "take_snapshot");
  ClientStateSnapshot s;
  s.client_id = client_id;
  s.epoch = epoch;
  s.front = capture_link(front);
  s.back = capture_link(back);
  seal(s);
  return s;
}

/// Replaces front/back parameters and optimizer state. Shapes are checked before anything is modified.
inline void apply_snapshot(const ClientStateSnapshot& snapshot, Link& front, Link& back) {
  front.require_role(LinkRole::Front, "apply_snapshot");
  back.require_role(LinkRole::Back, "apply_snapshot");
  check_link_shapes(snapshot.front, front);
  check_link_shapes(snapshot.back, back);
  restore_link(snapshot.front, front);
  restore_link(snapshot.back, back);
}

// ---------------------------------------------------------------------------
// Byte accounting

enum class Direction : std::uint8_t { Sent = 0, Received = 1 };

/// Cumulative bytes and frame counts, per direction and message kind.
class ByteCounter {
 public:
  void add(MessageKind kind, Direction dir, std::size_t bytes) {
    auto& c = cells_[index(dir)][static_cast<std::size_t>(kind) - 1];
    c.bytes += bytes;
    c.frames += 1;
  }

  std::uint64_t bytes(MessageKind kind, Direction dir) const { return cells_[index(dir)][static_cast<std::size_t>(kind) - 1].bytes; }
  std::uint64_t frames(MessageKind kind, Direction dir) const { return cells_[index(dir)][static_cast<std::size_t>(kind) - 1].frames; }

  std::uint64_t bytes(MessageKind kind) const { return bytes(kind, Direction::Sent) + bytes(kind, Direction::Received); }
  std::uint64_t frames(MessageKind kind) const { return frames(kind, Direction::Sent) + frames(kind, Direction::Received); }

  std::uint64_t total(Direction dir) const {
    std::uint64_t n = 0;
    for (const auto& c : cells_[index(dir)]) n += c.bytes;
    return n;
  }
  std::uint64_t total() const { return total(Direction::Sent) + total(Direction::Received); }

  ByteCounter& operator+=(const ByteCounter& other) {
    for (std::size_t d = 0; d < 2; ++d)
      for (std::size_t k = 0; k < kMessageKindCount; ++k) {
        cells_[d][k].bytes += other.cells_[d][k].bytes;
        cells_[d][k].frames += other.cells_[d][k].frames;
      }
    return *this;
  }

  /// Element-wise difference; `earlier` must be a previous reading of this counter.
  ByteCounter since(const ByteCounter& earlier) const {
    ByteCounter out = *this;
    for (std::size_t d = 0; d < 2; ++d)
      for (std::size_t k = 0; k < kMessageKindCount; ++k) {
        out.cells_[d][k].bytes -= earlier.cells_[d][k].bytes;
        out.cells_[d][k].frames -= earlier.cells_[d][k].frames;
      }
    return out;
  }

  friend bool operator==(const ByteCounter&, const ByteCounter&) = default;

 private:
  struct Cell {
    std::uint64_t bytes = 0;
    std::uint64_t frames = 0;
    friend bool operator==(const Cell&, const Cell&) = default;
  };
  static std::size_t index(Direction d) { return static_cast<std::size_t>(d); }
  std::array<std::array<Cell, kMessageKindCount>, 2> cells_{};
};

inline void account(ByteCounter& counter, const WireMessage& msg, Direction direction) {
  counter.add(kind_of(msg), direction, encoded_size(msg));
}

}  // namespace splitlearn
