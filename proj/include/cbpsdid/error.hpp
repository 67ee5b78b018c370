#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace cbpsdid {

enum class ErrorKind {
  // input validation
  InvalidArgument,
  MissingColumn,
  NonBinaryTreatment,
  NonFiniteValue,
  UnknownTerm,
  InvalidSpec,
  ParseError,
  // numerical failures
  RankDeficient,
  TooFewControls,
  Separation,
  NoConvergence,
  SingularJacobian,
  // file system
  IoError,
};

std::string_view to_string(ErrorKind kind);

/// Exception carrying a machine-readable kind. The CLI maps kinds onto exit
/// codes; library callers can switch on kind() instead of parsing messages.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

/// True for the kinds produced by solvers and rank checks.
bool is_numerical(ErrorKind kind);

}  // namespace cbpsdid
