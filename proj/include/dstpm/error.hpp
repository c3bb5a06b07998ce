#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace dstpm {

enum class ErrorKind {
  kLayout,
  kMaskMissing,
  kDecode,
  kWeights,
  kShape,
  kArity,
  kPairing,
  kRange,
  kParameter,
  kDimension,
  kDegenerateMask,
  kDegenerateLabels,
  kDegenerateGroundTruth,
  kConfig,
  kStage,
  kDevice,
  kIo,
};

inline std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kLayout: return "layout error";
    case ErrorKind::kMaskMissing: return "mask missing";
    case ErrorKind::kDecode: return "decode error";
    case ErrorKind::kWeights: return "weights error";
    case ErrorKind::kShape: return "shape error";
    case ErrorKind::kArity: return "arity error";
    case ErrorKind::kPairing: return "pairing error";
    case ErrorKind::kRange: return "range error";
    case ErrorKind::kParameter: return "parameter error";
    case ErrorKind::kDimension: return "dimension error";
    case ErrorKind::kDegenerateMask: return "degenerate mask error";
    case ErrorKind::kDegenerateLabels: return "degenerate labels error";
    case ErrorKind::kDegenerateGroundTruth: return "degenerate ground truth error";
    case ErrorKind::kConfig: return "config error";
    case ErrorKind::kStage: return "stage error";
    case ErrorKind::kDevice: return "device error";
    case ErrorKind::kIo: return "io error";
  }
  return "error";
}

/// Every failure raised by the library carries a kind so callers (the CLI in
/// particular) can branch on it without parsing messages.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& detail)
      : std::runtime_error(std::string(to_string(kind)) + ": " + detail), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

/// Process exit code for an error kind: 2 config, 3 data, 4 device, 1 otherwise.
inline int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kConfig:
    case ErrorKind::kStage:
      return 2;
    case ErrorKind::kLayout:
    case ErrorKind::kMaskMissing:
    case ErrorKind::kDecode:
    case ErrorKind::kWeights:
    case ErrorKind::kIo:
    case ErrorKind::kDegenerateLabels:
    case ErrorKind::kDegenerateGroundTruth:
      return 3;
    case ErrorKind::kDevice:
      return 4;
    default:
      return 1;
  }
}

}  // namespace dstpm
