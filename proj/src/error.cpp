#include "cbpsdid/error.hpp"

namespace cbpsdid {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::InvalidArgument: return "InvalidArgument";
    case ErrorKind::MissingColumn: return "MissingColumn";
    case ErrorKind::NonBinaryTreatment: return "NonBinaryTreatment";
    case ErrorKind::NonFiniteValue: return "NonFiniteValue";
    case ErrorKind::UnknownTerm: return "UnknownTerm";
    case ErrorKind::InvalidSpec: return "InvalidSpec";
    case ErrorKind::ParseError: return "ParseError";
    case ErrorKind::RankDeficient: return "RankDeficient";
    case ErrorKind::TooFewControls: return "TooFewControls";
    case ErrorKind::Separation: return "Separation";
    case ErrorKind::NoConvergence: return "NoConvergence";
    case ErrorKind::SingularJacobian: return "SingularJacobian";
    case ErrorKind::IoError: return "IoError";
  }
  return "Unknown";
}

bool is_numerical(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::RankDeficient:
    case ErrorKind::TooFewControls:
    case ErrorKind::Separation:
    case ErrorKind::NoConvergence:
    case ErrorKind::SingularJacobian:
      return true;
    default:
      return false;
  }
}

}  // namespace cbpsdid
