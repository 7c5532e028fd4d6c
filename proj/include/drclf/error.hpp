// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace drclf {

enum class ErrorKind {
  InvalidArgument,
  Io,
  BadMagic,
  UnsupportedVersion,
  Truncated,
  NonFiniteFeature,
  MixedLabels,
  DimensionMismatch,
  UnlabeledInput,
  EmptySplit,
  TrainBatchTooSmall,
  StaleCache,
  NonFiniteLoss,
  LabeledInputRejected,
  MissingManifestEntry,
  DegenerateDirection,
};

inline std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::InvalidArgument: return "InvalidArgument";
    case ErrorKind::Io: return "Io";
    case ErrorKind::BadMagic: return "BadMagic";
    case ErrorKind::UnsupportedVersion: return "UnsupportedVersion";
    case ErrorKind::Truncated: return "Truncated";
    case ErrorKind::NonFiniteFeature: return "NonFiniteFeature";
    case ErrorKind::MixedLabels: return "MixedLabels";
    case ErrorKind::DimensionMismatch: return "DimensionMismatch";
    case ErrorKind::UnlabeledInput: return "UnlabeledInput";
    case ErrorKind::EmptySplit: return "EmptySplit";
    case ErrorKind::TrainBatchTooSmall: return "TrainBatchTooSmall";
    case ErrorKind::StaleCache: return "StaleCache";
    case ErrorKind::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorKind::LabeledInputRejected: return "LabeledInputRejected";
    case ErrorKind::MissingManifestEntry: return "MissingManifestEntry";
    case ErrorKind::DegenerateDirection: return "DegenerateDirection";
  }
  return "Unknown";
}

/// Every failure raised by the library. The message is prefixed with the kind
/// name so command-line users see e.g. "Truncated: ..." verbatim.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

inline void require(bool cond, ErrorKind kind, const std::string& what) {
  if (!cond) fail(kind, what);
}

}  // namespace drclf
