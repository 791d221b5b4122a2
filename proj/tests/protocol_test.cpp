#include <gtest/gtest.h>

#include <random>

#include "splitlearn/protocol.hpp"
#include "protocol_oracle.hpp"
#include "test_support.hpp"

using namespace splitlearn;
using Bytes = std::vector<std::uint8_t>;
using oracle::random_message, oracle::snapshot_frame_oracle, oracle::specs_of;

namespace {

// Bitwise comparison, so NaN payloads compare equal to themselves.
bool same_message(const WireMessage& a, const WireMessage& b) { return encode(a) == encode(b) && a.index() == b.index(); }

std::uint32_t le32(const Bytes& b, std::size_t at) {
  return b[at] | (b[at + 1] << 8) | (b[at + 2] << 16) | (static_cast<std::uint32_t>(b[at + 3]) << 24);
}

Chain small_chain(std::uint64_t seed, Task task = Task::binary()) {
  Rng rng(seed);
  return build_chain(oracle::small_mini_conv(task, 2, 9), rng);
}

}  // namespace

TEST(Encode, AckFrameLayout) {
  const Bytes frame = encode(Ack{7});
  ASSERT_EQ(frame.size(), 4u + 1 + 1 + 4 + 4);
  EXPECT_EQ(Bytes(frame.begin(), frame.begin() + 4), (Bytes{'S', 'P', 'L', 'T'}));
  EXPECT_EQ(frame[4], 1);
  EXPECT_EQ(frame[5], 0x07);
  EXPECT_EQ(le32(frame, 6), 4u);
  EXPECT_EQ(le32(frame, 10), 7u);
}

TEST(Encode, ZeroTensorPayload) {
  const Tensor zeros({2, 2});
  EXPECT_EQ(tensor_wire_size(zeros), 25u);
  const Bytes frame = encode(ActivationFwd{1, 2, zeros});
  EXPECT_EQ(le32(frame, 6), 8u + 25u);
  EXPECT_EQ(frame[18], 2);
  EXPECT_EQ(le32(frame, 19), 2u);
  EXPECT_EQ(le32(frame, 23), 2u);
  for (std::size_t i = 27; i < frame.size(); ++i) EXPECT_EQ(frame[i], 0);
}

TEST(Encode, GoldenBytes) {
  EXPECT_EQ(encode(BeginEpoch{3, 2}), (Bytes{'S', 'P', 'L', 'T', 1, 5, 8, 0, 0, 0, 3, 0, 0, 0, 2, 0, 0, 0}));
  EXPECT_EQ(encode(GradientBwd{1, 258, Tensor({1}, std::vector<float>{1.0f})}),
            (Bytes{'S', 'P', 'L', 'T', 1, 2, 17, 0, 0, 0, 1, 0, 0, 0, 2, 1, 0, 0, 1, 1, 0, 0, 0, 0x00, 0x00, 0x80, 0x3f}));
  EXPECT_EQ(encode(ProtocolErrorMsg{6, "no"}), (Bytes{'S', 'P', 'L', 'T', 1, 8, 8, 0, 0, 0, 6, 0, 2, 0, 0, 0, 'n', 'o'}));
}

TEST(Encode, EncodedSizeMatchesEncoding) {
  std::mt19937_64 rng(1);
  for (int i = 0; i < 500; ++i) {
    const WireMessage m = random_message(rng);
    EXPECT_EQ(encoded_size(m), encode(m).size());
  }
}

TEST(Encode, RoundTripFuzz) {
  std::mt19937_64 rng(2);
  for (int i = 0; i < 2000; ++i) {
    const WireMessage m = random_message(rng);
    const Bytes frame = encode(m);
    const DecodeResult r = decode(frame);
    ASSERT_TRUE(r.ok()) << r.detail;
    EXPECT_EQ(r.consumed, frame.size());
    EXPECT_TRUE(same_message(*r.message, m));
  }
}

TEST(Encode, RoundTripPreservesStructuredEquality) {
  Chain chain = small_chain(3);
  const auto snap = take_snapshot(chain.front, chain.back, 4, 9);
  const WireMessage m = SnapshotUpload{4, snap};
  EXPECT_EQ(decode_or_throw(encode(m)), m);
}

TEST(Decode, BadMagic) {
  const Bytes bytes{'X', 'X', 'X', 'X', 1, 7, 4, 0, 0, 0, 0, 0, 0, 0};
  const DecodeResult r = decode(bytes);
  EXPECT_FALSE(r.ok());
  EXPECT_EQ(r.error, ErrorCode::BadMagic);
  EXPECT_EQ(r.consumed, 0u);
  EXPECT_EQ(decode(Bytes{'S', 'P', 'X'}).error, ErrorCode::BadMagic);
}

TEST(Decode, TruncatedFrameNeedsMoreAndConsumesNothing) {
  std::mt19937_64 rng(4);
  for (int i = 0; i < 50; ++i) {
    const Bytes frame = encode(random_message(rng));
    for (std::size_t cut = 0; cut < frame.size(); ++cut) {
      const DecodeResult r = decode(std::span(frame.data(), cut));
      ASSERT_EQ(r.error, ErrorCode::NeedMore) << "cut " << cut;
      EXPECT_EQ(r.consumed, 0u);
      EXPECT_FALSE(r.message.has_value());
    }
  }
}

TEST(Decode, UnsupportedVersion) {
  Bytes frame = encode(Ack{1});
  frame[4] = 2;
  EXPECT_EQ(decode(frame).error, ErrorCode::UnsupportedVersion);
  frame[4] = 0;
  EXPECT_EQ(decode(frame).error, ErrorCode::UnsupportedVersion);
}

TEST(Decode, UnknownTag) {
  Bytes frame = encode(Ack{1});
  for (std::uint8_t tag : {0, 9, 255}) {
    frame[5] = tag;
    EXPECT_EQ(decode(frame).error, ErrorCode::UnknownTag);
  }
}

TEST(Decode, MalformedPayloads) {
  Bytes frame = encode(Ack{1});
  frame.push_back(0);
  frame[6] = 5;  // length covers a trailing byte
  EXPECT_EQ(decode(frame).error, ErrorCode::MalformedPayload);

  Bytes short_frame = encode(Ack{1});
  short_frame.pop_back();
  short_frame[6] = 3;
  EXPECT_EQ(decode(short_frame).error, ErrorCode::MalformedPayload);

  Bytes rank0 = encode(ActivationFwd{1, 1, Tensor({1})});
  rank0[18] = 0;
  EXPECT_EQ(decode(rank0).error, ErrorCode::MalformedPayload);

  Bytes huge_length = encode(Ack{1});
  huge_length[9] = 0x80;
  EXPECT_EQ(decode(huge_length).error, ErrorCode::MalformedPayload);

  EXPECT_THROW(decode_or_throw(frame), Error);
}

TEST(Decode, OversizedTensorDimsRejected) {
  Bytes frame = encode(ActivationFwd{1, 1, Tensor({1, 1})});
  for (std::size_t at : {19u, 23u}) {
    frame[at] = 0xff;
    frame[at + 1] = 0xff;
    frame[at + 2] = 0xff;
  }
  EXPECT_EQ(decode(frame).error, ErrorCode::TensorTooLarge);
}

TEST(Decode, FlippedSnapshotBitIsCorrupt) {
  Chain chain = small_chain(5);
  const Bytes frame = encode(SnapshotUpload{1, take_snapshot(chain.front, chain.back, 1, 0)});
  std::mt19937_64 rng(6);
  // Every byte of the snapshot region (after the upload's own client id), one random bit each.
  for (std::size_t at = 14; at < frame.size(); ++at) {
    Bytes damaged = frame;
    damaged[at] ^= static_cast<std::uint8_t>(1u << (rng() % 8));
    const DecodeResult r = decode(damaged);
    ASSERT_EQ(r.error, ErrorCode::CorruptSnapshot) << "byte " << at;
    EXPECT_EQ(r.consumed, 0u);
  }
}

TEST(Decode, CrcMatchesZlibReference) {
  const std::string text = "123456789";
  EXPECT_EQ(wire::crc32_of(std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size())), 0xCBF43926u);
}

TEST(Decode, ErrorCodesRoundTripThroughWire) {
  for (ErrorCode c : {ErrorCode::BadMagic, ErrorCode::NeedMore, ErrorCode::UnsupportedVersion, ErrorCode::CorruptSnapshot,
                      ErrorCode::SnapshotShapeMismatch, ErrorCode::NoSnapshot, ErrorCode::UnknownTag, ErrorCode::MalformedPayload,
                      ErrorCode::UnexpectedMessage, ErrorCode::ConnectionLost, ErrorCode::TensorTooLarge}) {
    const auto msg = make_protocol_error(c, "x");
    EXPECT_EQ(error_code_from_wire(msg.code), c);
  }
}

TEST(ProtocolProperties, AnyStreamPrefixYieldsCompleteMessagesThenNeedMore) {
  std::mt19937_64 rng(7);
  std::vector<WireMessage> messages;
  Bytes stream;
  for (int i = 0; i < 30; ++i) {
    messages.push_back(random_message(rng));
    const Bytes f = encode(messages.back());
    stream.insert(stream.end(), f.begin(), f.end());
  }
  std::uniform_int_distribution<std::size_t> cut_dist(0, stream.size());
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t cut = trial == 0 ? stream.size() : cut_dist(rng);
    std::span<const std::uint8_t> rest(stream.data(), cut);
    std::size_t decoded = 0;
    while (true) {
      const DecodeResult r = decode(rest);
      if (!r.ok()) {
        ASSERT_EQ(r.error, ErrorCode::NeedMore);
        break;
      }
      ASSERT_LT(decoded, messages.size());
      EXPECT_TRUE(same_message(*r.message, messages[decoded]));
      ++decoded;
      rest = rest.subspan(r.consumed);
      if (rest.empty()) break;
    }
    if (cut == stream.size()) EXPECT_EQ(decoded, messages.size());
  }
}

TEST(TakeSnapshot, IsDeepCopy) {
  Chain chain = small_chain(8);
  const auto snap = take_snapshot(chain.front, chain.back, 2, 3);
  const auto copy = snap;
  chain.front.net().layers()[0].parameters()[0][0] += 1.0f;
  chain.back.net().optimizer_states()[0][0].step = 99;
  EXPECT_EQ(snap, copy);
  EXPECT_EQ(snap.client_id, 2u);
  EXPECT_EQ(snap.epoch, 3u);
}

TEST(TakeSnapshot, ApplyOnFreshChainRestoresFrontAndBack) {
  Chain trained = small_chain(9);
  std::mt19937_64 data(10);
  for (int i = 0; i < 3; ++i) {
    split_train_step(trained, oracle::random_tensor({4, 1, 8, 8}, data), oracle::random_labels(4, Task::binary(), data), AdamHyperParams{});
  }
  const auto snap = take_snapshot(trained.front, trained.back, 0, 1);
  Chain fresh = small_chain(11);
  apply_snapshot(snap, fresh.front, fresh.back);
  EXPECT_EQ(fresh.front.net().parameter_values(), trained.front.net().parameter_values());
  EXPECT_EQ(fresh.back.net().parameter_values(), trained.back.net().parameter_values());
  EXPECT_EQ(take_snapshot(fresh.front, fresh.back, 0, 1), snap);
  for (const Link* link : {&fresh.front, &fresh.back})
    for (const auto& states : link->net().optimizer_states())
      for (const auto& s : states) EXPECT_EQ(s.step, 3u);
}

TEST(TakeSnapshot, RotationMatchesUninterruptedTraining) {
  // Two "clients" sharing a center: handing the local state over is invisible to the numerics.
  Chain a = small_chain(12), b = small_chain(12), c = small_chain(13);
  std::mt19937_64 data(14);
  std::vector<std::pair<Tensor, Tensor>> batches;
  for (int i = 0; i < 4; ++i) batches.emplace_back(oracle::random_tensor({3, 1, 8, 8}, data), oracle::random_labels(3, Task::binary(), data));
  for (const auto& [x, y] : batches) split_train_step(a, x, y, AdamHyperParams{});

  split_train_step(b, batches[0].first, batches[0].second, AdamHyperParams{});
  split_train_step(b, batches[1].first, batches[1].second, AdamHyperParams{});
  apply_snapshot(take_snapshot(b.front, b.back, 0, 0), c.front, c.back);
  c.center = std::move(b.center);
  split_train_step(c, batches[2].first, batches[2].second, AdamHyperParams{});
  split_train_step(c, batches[3].first, batches[3].second, AdamHyperParams{});
  EXPECT_EQ(chain_parameters(c), chain_parameters(a));
}

TEST(TakeSnapshot, FrameSizeMatchesParameterCountOracle) {
  for (Task task : {Task::binary(), Task::multi_label(5)}) {
    Rng rng(15);
    Chain chain = build_chain(ChainConfig::mini_conv(task, 1, 32, 32), rng);
    const WireMessage m = SnapshotUpload{0, take_snapshot(chain.front, chain.back, 0, 0)};
    EXPECT_EQ(encode(m).size(), snapshot_frame_oracle(specs_of(chain.front), specs_of(chain.back)));
  }
  // Hand count for the binary default cuts: conv 8x1x3x3 + bias 8, dense 32x1 + bias 1.
  const std::size_t front = 4 + 3 * (1 + 16 + 4 * 72) + 8 + 3 * (1 + 4 + 4 * 8) + 8;
  const std::size_t back = 4 + 3 * (1 + 8 + 4 * 32) + 8 + 3 * (1 + 4 + 4) + 8;
  EXPECT_EQ(snapshot_frame_oracle({Conv2d{1, 8, 3, 1, 1}, ReLU{}}, {Dense{32, 1}}), 10 + 12 + front + back + 4);
}

TEST(ApplySnapshot, ShapeMismatchLeavesLinksUntouched) {
  Chain binary = small_chain(16, Task::binary());
  Chain multi = small_chain(17, Task::multi_label(5));
  const auto snap = take_snapshot(multi.front, multi.back, 0, 0);
  const auto before = take_snapshot(binary.front, binary.back, 0, 0);
  try {
    apply_snapshot(snap, binary.front, binary.back);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::SnapshotShapeMismatch);
  }
  EXPECT_EQ(take_snapshot(binary.front, binary.back, 0, 0), before);
}

TEST(ApplySnapshot, ParameterCountMismatch) {
  Chain chain = small_chain(18);
  auto snap = take_snapshot(chain.front, chain.back, 0, 0);
  snap.front.params.pop_back();
  EXPECT_THROW(apply_snapshot(snap, chain.front, chain.back), Error);
  snap = take_snapshot(chain.front, chain.back, 0, 0);
  snap.back.params.push_back(snap.back.params.back());
  EXPECT_THROW(apply_snapshot(snap, chain.front, chain.back), Error);
}

TEST(ApplySnapshot, WrongRolesRejected) {
  Chain chain = small_chain(19);
  const auto snap = take_snapshot(chain.front, chain.back, 0, 0);
  EXPECT_THROW(apply_snapshot(snap, chain.back, chain.front), Error);
  EXPECT_THROW(take_snapshot(chain.center, chain.back, 0, 0), Error);
}

TEST(Account, EmptyCounterIsZero) {
  ByteCounter c;
  EXPECT_EQ(c.total(), 0u);
  for (std::uint8_t k = 1; k <= 8; ++k) EXPECT_EQ(c.frames(static_cast<MessageKind>(k)), 0u);
}

TEST(Account, AddsExactFrameSizeAndIsMonotone) {
  std::mt19937_64 rng(20);
  ByteCounter c;
  std::uint64_t expected = 0;
  for (int i = 0; i < 200; ++i) {
    const WireMessage m = random_message(rng);
    const auto before = c;
    account(c, m, i % 2 ? Direction::Sent : Direction::Received);
    expected += encode(m).size();
    EXPECT_EQ(c.total(), expected);
    EXPECT_GE(c.total(), before.total());
    EXPECT_EQ(c.since(before).total(), encode(m).size());
    EXPECT_EQ(c.since(before).frames(kind_of(m)), 1u);
  }
}

TEST(Account, SnapshotBytesConstantAcrossSwitches) {
  Chain chain = small_chain(21);
  std::mt19937_64 data(22);
  std::vector<std::uint64_t> sizes;
  for (int sw = 0; sw < 4; ++sw) {
    split_train_step(chain, oracle::random_tensor({2, 1, 8, 8}, data), oracle::random_labels(2, Task::binary(), data), AdamHyperParams{});
    ByteCounter c;
    account(c, SnapshotUpload{static_cast<std::uint32_t>(sw), take_snapshot(chain.front, chain.back, sw, sw)}, Direction::Sent);
    sizes.push_back(c.bytes(MessageKind::SnapshotUpload));
  }
  for (auto s : sizes) EXPECT_EQ(s, sizes.front());
}

TEST(Account, PerBatchCutTrafficVersusModelSize) {
  // MiniConvNet, 1x32x32 input, batch 24, default cuts.
  const std::size_t batch = 24;
  const std::size_t cut1 = batch * 8 * 32 * 32;  // after conv1+ReLU
  const std::size_t cut2 = batch * 32;            // before the final Dense
  const std::size_t fwd1 = 10 + 8 + 1 + 4 * 4 + 4 * cut1;
  const std::size_t fwd2 = 10 + 8 + 1 + 4 * 2 + 4 * cut2;
  const std::size_t per_batch = 2 * (fwd1 + fwd2);
  EXPECT_EQ(per_batch, 1579132u);

  Rng rng(23);
  Chain chain = build_chain(ChainConfig::mini_conv(Task::binary(), 1, 32, 32), rng);
  std::mt19937_64 data(24);
  const Tensor x = oracle::random_tensor({batch, 1, 32, 32}, data);
  const Tensor cut = forward_front(chain.front, x);
  const Tensor pre_back = forward_center(chain.center, cut);
  ByteCounter c;
  account(c, ActivationFwd{1, 0, cut}, Direction::Sent);
  account(c, ActivationFwd{1, 0, pre_back}, Direction::Received);
  account(c, GradientBwd{1, 0, Tensor(pre_back.shape())}, Direction::Sent);
  account(c, GradientBwd{1, 0, Tensor(cut.shape())}, Direction::Received);
  EXPECT_EQ(c.total(), per_batch);

  const std::size_t params = (8 * 9 + 8) + (16 * 8 * 9 + 16) + (16 * 8 * 8 * 32 + 32) + (32 + 1);
  EXPECT_EQ(params, 34081u);
  const std::size_t model_bytes = 4 * params;
  // With a 32x32 input and an 8-channel first cut, one batch moves about 11.6x the model size.
  EXPECT_GT(per_batch, model_bytes);
  // The snapshot handed over at rotation is smaller than the full model state it stands in for.
  const std::size_t snapshot = encode(SnapshotUpload{0, take_snapshot(chain.front, chain.back, 0, 0)}).size();
  EXPECT_LT(snapshot, 3 * model_bytes);
  EXPECT_LT(4 * (80 + 33), model_bytes);
}
