#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace bsc {

enum class ErrorCode {
  DuplicateCoordinate,
  ShapeMismatch,
  StrideViolation,
  EmptyInput,
  ParseError,
  IoError,
  NonFiniteWeight,
  NonFiniteActivation,
  DegenerateScale,
  LengthMismatch,
  GroupDivisibility,
  MissingTargetCoords,
  UnrecordedNode,
  AllIgnored,
  EpochOutOfRange,
  SpaceTooLarge,
  IndivisibleGroups,
  InvalidSpec,
  InvalidConfig,
  LayerNotFound,
  ConfigError,
  ChecksumMismatch,
  UnknownVersion,
  MissingTensor,
  IncompatibleSpec,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::DuplicateCoordinate: return "DuplicateCoordinate";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::StrideViolation: return "StrideViolation";
    case ErrorCode::EmptyInput: return "EmptyInput";
    case ErrorCode::ParseError: return "ParseError";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::NonFiniteWeight: return "NonFiniteWeight";
    case ErrorCode::NonFiniteActivation: return "NonFiniteActivation";
    case ErrorCode::DegenerateScale: return "DegenerateScale";
    case ErrorCode::LengthMismatch: return "LengthMismatch";
    case ErrorCode::GroupDivisibility: return "GroupDivisibility";
    case ErrorCode::MissingTargetCoords: return "MissingTargetCoords";
    case ErrorCode::UnrecordedNode: return "UnrecordedNode";
    case ErrorCode::AllIgnored: return "AllIgnored";
    case ErrorCode::EpochOutOfRange: return "EpochOutOfRange";
    case ErrorCode::SpaceTooLarge: return "SpaceTooLarge";
    case ErrorCode::IndivisibleGroups: return "IndivisibleGroups";
    case ErrorCode::InvalidSpec: return "InvalidSpec";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
    case ErrorCode::LayerNotFound: return "LayerNotFound";
    case ErrorCode::ConfigError: return "ConfigError";
    case ErrorCode::ChecksumMismatch: return "ChecksumMismatch";
    case ErrorCode::UnknownVersion: return "UnknownVersion";
    case ErrorCode::MissingTensor: return "MissingTensor";
    case ErrorCode::IncompatibleSpec: return "IncompatibleSpec";
  }
  return "Unknown";
}

// All library failures are reported through this type; code() identifies the
// failure class, what() carries the detail.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& detail)
      : std::runtime_error(std::string(to_string(code)) + ": " + detail), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace bsc
