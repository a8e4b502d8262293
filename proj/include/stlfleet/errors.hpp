#pragma once

#include <stdexcept>
#include <string>

namespace stlfleet {

// Canonical error kinds across all modules. Kept in one enum so callers can
// switch on the kind without string matching.
enum class Errc {
  // formulas / parsing
  SyntaxError,
  IntervalOrder,
  UnknownPredicate,
  DimensionMismatch,
  NotInNnf,
  SignalTooShort,
  UnsupportedStructure,
  // geometry
  NotBounded,
  EmptyPolytope,
  DegeneratePolytope,
  EmptyCoordSet,
  IndexOutOfRange,
  InvalidRisk,
  // dynamics
  Unstable,
  SingularCovariance,
  NonpositiveRadius,
  // solver
  InvalidRange,
  NumericalFailure,
  NodeLimitExceeded,
  HorizonOverflow,
  // scenario ingestion
  ScenarioInvalid,
};

const char* errc_name(Errc c);

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(errc_name(code)) + ": " + what),
        code_(code) {}
  Errc code() const { return code_; }

 private:
  Errc code_;
};

[[noreturn]] inline void fail(Errc code, const std::string& what) {
  throw Error(code, what);
}

}  // namespace stlfleet
