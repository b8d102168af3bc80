#pragma once

#include <stdexcept>
#include <string>
#include <string_view>
#include <type_traits>

namespace etap {

/// Failure categories surfaced by the library. The CLI maps these onto exit codes.
enum class ErrorCode {
  InsufficientEvents,
  EmptyWindow,
  InvalidArgument,
  InvalidRange,
  NotUpsampled,
  ShapeMismatch,
  QueryOutOfSchedule,
  NonFiniteUpdate,
  EmptyMask,
  ZeroNormDescriptor,
  NonFinitePart,
  ConfigInvalid,
  InsufficientForeground,
  NoMinimaFound,
  NoVisiblePoints,
  EmptySet,
  AlignmentError,
  NonFiniteLoss,
  ChecksumMismatch,
  Io,
  Format,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::InsufficientEvents: return "InsufficientEvents";
    case ErrorCode::EmptyWindow: return "EmptyWindow";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::InvalidRange: return "InvalidRange";
    case ErrorCode::NotUpsampled: return "NotUpsampled";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::QueryOutOfSchedule: return "QueryOutOfSchedule";
    case ErrorCode::NonFiniteUpdate: return "NonFiniteUpdate";
    case ErrorCode::EmptyMask: return "EmptyMask";
    case ErrorCode::ZeroNormDescriptor: return "ZeroNormDescriptor";
    case ErrorCode::NonFinitePart: return "NonFinitePart";
    case ErrorCode::ConfigInvalid: return "ConfigInvalid";
    case ErrorCode::InsufficientForeground: return "InsufficientForeground";
    case ErrorCode::NoMinimaFound: return "NoMinimaFound";
    case ErrorCode::NoVisiblePoints: return "NoVisiblePoints";
    case ErrorCode::EmptySet: return "EmptySet";
    case ErrorCode::AlignmentError: return "AlignmentError";
    case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::ChecksumMismatch: return "ChecksumMismatch";
    case ErrorCode::Io: return "Io";
    case ErrorCode::Format: return "Format";
  }
  return "Unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) { throw Error(code, what); }

inline void require(bool cond, ErrorCode code, const std::string& what) {
  if (!cond) fail(code, what);
}

inline void require(bool cond, ErrorCode code, const char* what) {
  if (!cond) fail(code, what);
}

/// Builds the message only on failure; for checks on hot paths.
template <class F>
  requires std::is_invocable_r_v<std::string, F>
inline void require(bool cond, ErrorCode code, F&& what) {
  if (!cond) fail(code, what());
}

}  // namespace etap
