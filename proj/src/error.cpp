#include "spinepose/error.hpp"

namespace spinepose {

std::string_view error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidArgument: return "InvalidArgument";
    case ErrorCode::kDegenerateBone: return "DegenerateBone";
    case ErrorCode::kOutOfRange: return "OutOfRange";
    case ErrorCode::kNonFiniteResult: return "NonFiniteResult";
    case ErrorCode::kShapeMismatch: return "ShapeMismatch";
    case ErrorCode::kEmptyBoneSet: return "EmptyBoneSet";
    case ErrorCode::kDidNotConverge: return "DidNotConverge";
    case ErrorCode::kNonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::kMissingDrivers: return "MissingDrivers";
    case ErrorCode::kDegenerateTorso: return "DegenerateTorso";
    case ErrorCode::kNoLabeledKeypoints: return "NoLabeledKeypoints";
    case ErrorCode::kDuplicatePredictionId: return "DuplicatePredictionId";
    case ErrorCode::kUnknownImageId: return "UnknownImageId";
    case ErrorCode::kInsufficientViews: return "InsufficientViews";
    case ErrorCode::kDegenerateGeometry: return "DegenerateGeometry";
    case ErrorCode::kVersionConflict: return "VersionConflict";
    case ErrorCode::kLeaseExpired: return "LeaseExpired";
    case ErrorCode::kLeaseConflict: return "LeaseConflict";
    case ErrorCode::kUnknownRecord: return "UnknownRecord";
    case ErrorCode::kUnknownBatch: return "UnknownBatch";
    case ErrorCode::kBatchNotCompleted: return "BatchNotCompleted";
    case ErrorCode::kBatchImmutable: return "BatchImmutable";
    case ErrorCode::kNoPendingBatch: return "NoPendingBatch";
    case ErrorCode::kIoError: return "IoError";
    case ErrorCode::kParseError: return "ParseError";
  }
  return "Unknown";
}

}  // namespace spinepose
