#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace weightvol {

enum class ErrorKind {
  InvalidArgument,
  ShapeMismatch,
  NotSymmetric,
  NotPositiveDefinite,
  NoConvergence,
  ZeroVariance,
  StaleTrace,
  DivergenceDetected,
  BadMagic,
  TruncatedFile,
  CountMismatch,
  DatasetNotFound,
  TooFewSamples,
  OutOfRange,
  MissingVolume,
  LayerMismatch,
  DegenerateTarget,
  EmptySubspace,
  TooFewBatches,
  ConfigError,
  ParseError,
  IoError,
};

std::string_view error_kind_name(ErrorKind kind);

// Every module reports failures through this type; `kind()` is the
// machine-readable tag surfaced by the CLI.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace weightvol
