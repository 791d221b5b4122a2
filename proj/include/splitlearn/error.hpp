#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace splitlearn {

/// Machine-readable failure category carried by every splitlearn exception.
enum class ErrorCode {
  InvalidArgument,
  ShapeMismatch,
  NonFinite,
  OutOfOrder,
  MissingGradient,
  InvalidChain,
  BadMagic,
  NeedMore,
  UnsupportedVersion,
  UnknownTag,
  MalformedPayload,
  TensorTooLarge,
  CorruptSnapshot,
  SnapshotShapeMismatch,
  NoSnapshot,
  ConnectionLost,
  UnexpectedMessage,
  NoDiscriminationPossible,
  Io,
  Config,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidArgument: return "INVALID_ARGUMENT";
    case ErrorCode::ShapeMismatch: return "SHAPE_MISMATCH";
    case ErrorCode::NonFinite: return "NON_FINITE";
    case ErrorCode::OutOfOrder: return "OUT_OF_ORDER";
    case ErrorCode::MissingGradient: return "MISSING_GRADIENT";
    case ErrorCode::InvalidChain: return "INVALID_CHAIN";
    case ErrorCode::BadMagic: return "BAD_MAGIC";
    case ErrorCode::NeedMore: return "NEED_MORE";
    case ErrorCode::UnsupportedVersion: return "UNSUPPORTED_VERSION";
    case ErrorCode::UnknownTag: return "UNKNOWN_TAG";
    case ErrorCode::MalformedPayload: return "MALFORMED_PAYLOAD";
    case ErrorCode::TensorTooLarge: return "TENSOR_TOO_LARGE";
    case ErrorCode::CorruptSnapshot: return "CORRUPT_SNAPSHOT";
    case ErrorCode::SnapshotShapeMismatch: return "SNAPSHOT_SHAPE_MISMATCH";
    case ErrorCode::NoSnapshot: return "NO_SNAPSHOT";
    case ErrorCode::ConnectionLost: return "CONNECTION_LOST";
    case ErrorCode::UnexpectedMessage: return "UNEXPECTED_MESSAGE";
    case ErrorCode::NoDiscriminationPossible: return "NO_DISCRIMINATION_POSSIBLE";
    case ErrorCode::Io: return "IO";
    case ErrorCode::Config: return "CONFIG";
  }
  return "UNKNOWN";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace splitlearn
