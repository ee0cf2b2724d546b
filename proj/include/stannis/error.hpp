#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace stannis {

enum class ErrorCode {
  kParse,
  kDuplicateKey,
  kNonPositive,
  kInvalidArgument,
  kModelDoesNotFit,
  kNoSampleFits,
  kNoCandidate,
  kMissingCurve,
  kInsufficientData,
  kUnknownNode,
  kInconsistent,
  kUnderdetermined,
  kDimensionMismatch,
  kNonFinite,
  kLengthMismatch,
  kZeroThroughput,
  kUnknownKey,
  kIo,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kParse: return "parse_error";
    case ErrorCode::kDuplicateKey: return "duplicate_key";
    case ErrorCode::kNonPositive: return "non_positive_value";
    case ErrorCode::kInvalidArgument: return "invalid_argument";
    case ErrorCode::kModelDoesNotFit: return "model_does_not_fit";
    case ErrorCode::kNoSampleFits: return "no_sample_fits";
    case ErrorCode::kNoCandidate: return "no_candidate";
    case ErrorCode::kMissingCurve: return "missing_curve";
    case ErrorCode::kInsufficientData: return "insufficient_data";
    case ErrorCode::kUnknownNode: return "unknown_node";
    case ErrorCode::kInconsistent: return "inconsistent_input";
    case ErrorCode::kUnderdetermined: return "underdetermined";
    case ErrorCode::kDimensionMismatch: return "dimension_mismatch";
    case ErrorCode::kNonFinite: return "non_finite";
    case ErrorCode::kLengthMismatch: return "length_mismatch";
    case ErrorCode::kZeroThroughput: return "zero_throughput";
    case ErrorCode::kUnknownKey: return "unknown_key";
    case ErrorCode::kIo: return "io_error";
  }
  return "unknown";
}

// All library failures surface as this type. `location` is a file:line,
// node id, or layer index when one applies.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message, std::string location = {})
      : std::runtime_error(message), code_(code), location_(std::move(location)) {}

  ErrorCode code() const noexcept { return code_; }
  const std::string& location() const noexcept { return location_; }

 private:
  ErrorCode code_;
  std::string location_;
};

}  // namespace stannis
