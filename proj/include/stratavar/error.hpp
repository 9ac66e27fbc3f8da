#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace stratavar {

enum class ErrorKind {
  // design-core
  DimensionMismatch,
  InfeasibleBlock,
  TooFewBlocks,
  SpaceTooLarge,
  // linalg-projection
  InsufficientBlocks,
  TooManyColumns,
  DegenerateCovariate,
  RankDeficient,
  LeverageOne,
  // variance-estimators
  UnequalBlocks,
  NotCoarse,
  InvalidAlpha,
  // oracle
  PreconditionViolated,
  // het-test
  ZeroDenominator,
  BadQPair,
  // io / cli
  ParseError,
  SchemaError,
  InvalidDesign,
  IncompatibleEstimator,
};

inline std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::DimensionMismatch: return "DimensionMismatch";
    case ErrorKind::InfeasibleBlock: return "InfeasibleBlock";
    case ErrorKind::TooFewBlocks: return "TooFewBlocks";
    case ErrorKind::SpaceTooLarge: return "SpaceTooLarge";
    case ErrorKind::InsufficientBlocks: return "InsufficientBlocks";
    case ErrorKind::TooManyColumns: return "TooManyColumns";
    case ErrorKind::DegenerateCovariate: return "DegenerateCovariate";
    case ErrorKind::RankDeficient: return "RankDeficient";
    case ErrorKind::LeverageOne: return "LeverageOne";
    case ErrorKind::UnequalBlocks: return "UnequalBlocks";
    case ErrorKind::NotCoarse: return "NotCoarse";
    case ErrorKind::InvalidAlpha: return "InvalidAlpha";
    case ErrorKind::PreconditionViolated: return "PreconditionViolated";
    case ErrorKind::ZeroDenominator: return "ZeroDenominator";
    case ErrorKind::BadQPair: return "BadQPair";
    case ErrorKind::ParseError: return "ParseError";
    case ErrorKind::SchemaError: return "SchemaError";
    case ErrorKind::InvalidDesign: return "InvalidDesign";
    case ErrorKind::IncompatibleEstimator: return "IncompatibleEstimator";
  }
  return "Unknown";
}

/// Process exit status for the command-line tool: 2 parse/schema,
/// 3 invalid design, 4 incompatible estimator, 5 numerical failure.
inline int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::ParseError:
    case ErrorKind::SchemaError:
    case ErrorKind::InvalidAlpha:
      return 2;
    case ErrorKind::InvalidDesign:
    case ErrorKind::InfeasibleBlock:
    case ErrorKind::TooFewBlocks:
    case ErrorKind::DimensionMismatch:
      return 3;
    case ErrorKind::IncompatibleEstimator:
    case ErrorKind::UnequalBlocks:
    case ErrorKind::NotCoarse:
      return 4;
    default:
      return 5;
  }
}

/// Exception carrying a machine-readable kind alongside the message.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace stratavar
