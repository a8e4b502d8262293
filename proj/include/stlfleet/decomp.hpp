#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "stlfleet/stl.hpp"

namespace stlfleet::decomp {

/// Halfspace set { x | G x >= b }. Boundedness and non-emptiness are verified
/// by LP where an operation needs them, not at construction.
struct Polytope {
  Eigen::MatrixXd G;
  Eigen::VectorXd b;

  int dim() const { return static_cast<int>(G.cols()); }
  static Polytope from_predicate(const stl::Predicate& p) { return {p.G(), p.b()}; }
  bool contains(const Eigen::VectorXd& x, double tol = 1e-9) const;
};

/// Axis-aligned box, lower <= x <= upper componentwise.
struct Orthotope {
  Eigen::VectorXd lower;
  Eigen::VectorXd upper;

  int dim() const { return static_cast<int>(lower.size()); }
  bool contains(const Eigen::VectorXd& x, double tol = 1e-9) const;
  double min_side() const { return (upper - lower).minCoeff(); }
  double volume() const;
  Eigen::VectorXd center() const { return 0.5 * (lower + upper); }
  stl::Predicate as_predicate(std::string label = "") const;
};

/// Tightest axis-aligned box containing P, via 2n support LPs.
Orthotope bounding_orthotope(const Polytope& P);

/// An orthotope contained in P. Chooses the box maximizing the minimum side
/// length (LP), tie-broken by maximizing the sum of side lengths on the
/// optimal face; reproduces the symmetric textbook cases exactly.
Orthotope inscribed_orthotope(const Polytope& P);

/// Coordinate slice; exact because boxes are axis-aligned products.
Orthotope project_orthotope(const Orthotope& B, const std::vector<int>& coords);

struct DecomposeOptions {
  /// pin the shared witness of a multi-agent eventually/until to the earliest
  /// window instant; when false such structure raises UnsupportedStructure
  bool pin_witness = true;
  /// resolve a multi-agent disjunction by keeping one disjunct (largest
  /// inscribed-box minimum side); when false it raises UnsupportedStructure
  bool select_disjunct = true;
};

/// Agent-level subformulas of a joint task. Joint satisfaction of all
/// subformulas implies satisfaction of the parent (soundness only; the
/// converse does not hold).
struct DecomposedTask {
  std::vector<stl::Formula> subformulas;  // nu entries, agent-local dimension
  std::vector<double> sub_risks;          // empty until split_risk fills it
  std::string parent_id;
  int nu = 1;
};

/// Decompose an NNF formula over nu*agent_dim concatenated dimensions into nu
/// agent-level formulas. Positive predicates go through inscribed boxes,
/// negated ones through bounding boxes (Lemma-1 style); conjunction and
/// always distribute exactly.
DecomposedTask decompose(const stl::Formula& f, int nu, int agent_dim,
                         const DecomposeOptions& opts = {});

/// Uniform risk split r_max/nu with the last element absorbing rounding so the
/// sum is exact.
std::vector<double> split_risk(double r_max, int nu);

}  // namespace stlfleet::decomp
