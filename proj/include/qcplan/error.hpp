#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace qcplan {

enum class ErrorCode {
  ZeroVector,
  CollinearProxies,
  InvalidTheta,
  InvalidBounds,
  InvalidGuidance,
  NonPositiveMagnitude,
  NonFiniteLoss,
  NonFiniteGradient,
  PrototypeSeparationFailure,
  BadEdges,
  DegenerateVariance,
  EmptyScores,
  EmptyGallery,
  PoleInDerivative,
  InvalidArgument,
  ConfigError,
  MissingArtifact,
};

constexpr std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::ZeroVector: return "ZeroVector";
    case ErrorCode::CollinearProxies: return "CollinearProxies";
    case ErrorCode::InvalidTheta: return "InvalidTheta";
    case ErrorCode::InvalidBounds: return "InvalidBounds";
    case ErrorCode::InvalidGuidance: return "InvalidGuidance";
    case ErrorCode::NonPositiveMagnitude: return "NonPositiveMagnitude";
    case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::NonFiniteGradient: return "NonFiniteGradient";
    case ErrorCode::PrototypeSeparationFailure: return "PrototypeSeparationFailure";
    case ErrorCode::BadEdges: return "BadEdges";
    case ErrorCode::DegenerateVariance: return "DegenerateVariance";
    case ErrorCode::EmptyScores: return "EmptyScores";
    case ErrorCode::EmptyGallery: return "EmptyGallery";
    case ErrorCode::PoleInDerivative: return "PoleInDerivative";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::ConfigError: return "ConfigError";
    case ErrorCode::MissingArtifact: return "MissingArtifact";
  }
  return "Unknown";
}

/// Every failure raised by the library carries one of the codes above so
/// callers (the CLI in particular) can map it to an exit status.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

inline void require(bool condition, ErrorCode code, const std::string& what) {
  if (!condition) throw Error(code, what);
}

}  // namespace qcplan
