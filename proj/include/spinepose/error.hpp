#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace spinepose {

enum class ErrorCode {
  kInvalidArgument,
  kDegenerateBone,
  kOutOfRange,
  kNonFiniteResult,
  kShapeMismatch,
  kEmptyBoneSet,
  kDidNotConverge,
  kNonFiniteLoss,
  kMissingDrivers,
  kDegenerateTorso,
  kNoLabeledKeypoints,
  kDuplicatePredictionId,
  kUnknownImageId,
  kInsufficientViews,
  kDegenerateGeometry,
  kVersionConflict,
  kLeaseExpired,
  kLeaseConflict,
  kUnknownRecord,
  kUnknownBatch,
  kBatchNotCompleted,
  kBatchImmutable,
  kNoPendingBatch,
  kIoError,
  kParseError,
};

/// Stable, CamelCase name used in structured error output ({code, message}).
std::string_view error_code_name(ErrorCode code);

/// Domain error. Every failure the library reports carries one of the codes
/// above so callers (CLI, HTTP layer) can map it without string matching.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace spinepose
