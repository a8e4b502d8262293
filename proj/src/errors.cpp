#include "stlfleet/errors.hpp"

namespace stlfleet {

const char* errc_name(Errc c) {
  switch (c) {
    case Errc::SyntaxError: return "SyntaxError";
    case Errc::IntervalOrder: return "IntervalOrder";
    case Errc::UnknownPredicate: return "UnknownPredicate";
    case Errc::DimensionMismatch: return "DimensionMismatch";
    case Errc::NotInNnf: return "NotInNnf";
    case Errc::SignalTooShort: return "SignalTooShort";
    case Errc::UnsupportedStructure: return "UnsupportedStructure";
    case Errc::NotBounded: return "NotBounded";
    case Errc::EmptyPolytope: return "EmptyPolytope";
    case Errc::DegeneratePolytope: return "DegeneratePolytope";
    case Errc::EmptyCoordSet: return "EmptyCoordSet";
    case Errc::IndexOutOfRange: return "IndexOutOfRange";
    case Errc::InvalidRisk: return "InvalidRisk";
    case Errc::Unstable: return "Unstable";
    case Errc::SingularCovariance: return "SingularCovariance";
    case Errc::NonpositiveRadius: return "NonpositiveRadius";
    case Errc::InvalidRange: return "InvalidRange";
    case Errc::NumericalFailure: return "NumericalFailure";
    case Errc::NodeLimitExceeded: return "NodeLimitExceeded";
    case Errc::HorizonOverflow: return "HorizonOverflow";
    case Errc::ScenarioInvalid: return "ScenarioInvalid";
  }
  return "Error";
}

}  // namespace stlfleet
