#pragma once

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace crgkd {

enum class ErrorCode {
  MalformedHeader,
  UnsupportedDtype,
  NonFiniteData,
  RankError,
  IoError,
  ShapeMismatch,
  DimensionMismatch,
  NonPositiveDegree,
  ConvergenceFailure,
  BadN,
  DegenerateChannel,
  DegenerateSpectrum,
  InvalidArgument,
};

inline std::string_view to_string(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::MalformedHeader: return "MalformedHeader";
    case ErrorCode::UnsupportedDtype: return "UnsupportedDtype";
    case ErrorCode::NonFiniteData: return "NonFiniteData";
    case ErrorCode::RankError: return "RankError";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::NonPositiveDegree: return "NonPositiveDegree";
    case ErrorCode::ConvergenceFailure: return "ConvergenceFailure";
    case ErrorCode::BadN: return "BadN";
    case ErrorCode::DegenerateChannel: return "DegenerateChannel";
    case ErrorCode::DegenerateSpectrum: return "DegenerateSpectrum";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
  }
  return "Unknown";
}

// Every failure raised by the library. `index()` carries the offending flat
// index (NonFiniteData) or iteration budget (ConvergenceFailure) when known.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message,
        std::optional<std::size_t> index = std::nullopt)
      : std::runtime_error(std::string(to_string(code)) + ": " + message),
        code_(code),
        index_(index) {}

  ErrorCode code() const noexcept { return code_; }
  std::optional<std::size_t> index() const noexcept { return index_; }

 private:
  ErrorCode code_;
  std::optional<std::size_t> index_;
};

}  // namespace crgkd
