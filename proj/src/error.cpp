#include "weightvol/error.hpp"

namespace weightvol {

std::string_view error_kind_name(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::InvalidArgument: return "InvalidArgument";
    case ErrorKind::ShapeMismatch: return "ShapeMismatch";
    case ErrorKind::NotSymmetric: return "NotSymmetric";
    case ErrorKind::NotPositiveDefinite: return "NotPositiveDefinite";
    case ErrorKind::NoConvergence: return "NoConvergence";
    case ErrorKind::ZeroVariance: return "ZeroVariance";
    case ErrorKind::StaleTrace: return "StaleTrace";
    case ErrorKind::DivergenceDetected: return "DivergenceDetected";
    case ErrorKind::BadMagic: return "BadMagic";
    case ErrorKind::TruncatedFile: return "TruncatedFile";
    case ErrorKind::CountMismatch: return "CountMismatch";
    case ErrorKind::DatasetNotFound: return "DatasetNotFound";
    case ErrorKind::TooFewSamples: return "TooFewSamples";
    case ErrorKind::OutOfRange: return "OutOfRange";
    case ErrorKind::MissingVolume: return "MissingVolume";
    case ErrorKind::LayerMismatch: return "LayerMismatch";
    case ErrorKind::DegenerateTarget: return "DegenerateTarget";
    case ErrorKind::EmptySubspace: return "EmptySubspace";
    case ErrorKind::TooFewBatches: return "TooFewBatches";
    case ErrorKind::ConfigError: return "ConfigError";
    case ErrorKind::ParseError: return "ParseError";
    case ErrorKind::IoError: return "IoError";
  }
  return "Unknown";
}

}  // namespace weightvol
