#pragma once

#include <Eigen/Dense>
#include <functional>
#include <limits>
#include <string>
#include <vector>

namespace stlfleet::optimizer {

constexpr double kInf = std::numeric_limits<double>::infinity();

/// Convex quadratic program with optional binary variables:
///
///   min  0.5 x'Qx + c'x
///   s.t. Aeq x  = beq
///        Ain x >= bin
///        lb <= x <= ub
///        x_i in {0,1} for i in `binaries`
///
/// Q empty means a pure LP. All storage is dense; instances are desk-scale
/// (a few hundred variables).
struct ConvexProgram {
  int n = 0;
  Eigen::MatrixXd Q;  // n x n PSD, or 0 x 0
  Eigen::VectorXd c;  // n
  Eigen::MatrixXd Aeq;
  Eigen::VectorXd beq;
  Eigen::MatrixXd Ain;  // Ain x >= bin
  Eigen::VectorXd bin;
  Eigen::VectorXd lb, ub;
  std::vector<int> binaries;

  static ConvexProgram make(int nvars);
  bool has_quadratic_cost() const { return Q.size() > 0; }
  double objective(const Eigen::VectorXd& x) const;
  /// Dimension and PSD sanity; throws InvalidRange on malformed input.
  void validate() const;
  /// Plain-text dump (LP-ish) for external cross-checking.
  std::string dump(const std::vector<std::string>* names = nullptr) const;
};

enum class SolveStatus {
  Optimal,
  Infeasible,
  Unbounded,
  NumericalFailure,  // iteration cap; callers treat as infeasible, logged apart
  NodeLimit,         // branch-and-bound node cap; reported as infeasible-with-reason
};

const char* status_name(SolveStatus s);

struct Solution {
  SolveStatus status = SolveStatus::NumericalFailure;
  Eigen::VectorXd x;
  double value = 0.0;
  double kkt_residual = 0.0;
  int iterations = 0;
  long nodes = 0;
  std::string reason;

  bool optimal() const { return status == SolveStatus::Optimal; }
};

struct SolveOptions {
  double tol_feas = 1e-9;
  double tol_opt = 1e-10;  // complementarity target
  int max_iterations = 100;
  long node_limit = 100000;
  double integrality_tol = 1e-6;
  double gap_abs = 1e-9;
  double gap_rel = 0.0;
  /// max relaxation solves spent on the dive-and-fix heuristic (0 disables)
  int dive_limit = 0;
  /// hitting the node limit with an incumbent in hand returns that incumbent
  /// as Optimal instead of reporting NodeLimit
  bool return_incumbent_on_node_limit = false;
  /// domain-specific rounding for branch and bound: given the fractional root
  /// relaxation, propose binary fixings to probe for an early incumbent
  std::function<std::vector<std::pair<int, double>>(const Eigen::VectorXd&)>
      incumbent_hint;
  /// called each dive round with the current relaxation point; a non-empty
  /// result fixes those binaries outright (used once the caller considers the
  /// remaining decisions forced), empty means keep branching
  std::function<std::vector<std::pair<int, double>>(const Eigen::VectorXd&)>
      dive_finisher;
  /// branching priority class per binary (lower branches first); defaults to
  /// a single class
  std::function<int(int var)> branch_class;
};

/// Interior-point solve of the continuous relaxation (binaries ignored).
/// Optimal solutions satisfy the KKT conditions to ~1e-7; infeasibility is
/// certified by a phase-1 margin LP.
Solution solve_convex(const ConvexProgram& p, const SolveOptions& opts = {});

/// Best-first branch and bound over the binary variables. Deterministic:
/// branching picks the lowest-index fractional binary and explores the
/// 0-branch first; ties in the node queue break by insertion order.
Solution solve_micqp(const ConvexProgram& p, const SolveOptions& opts = {});

/// Piecewise-linear overapproximation of a decreasing convex risk curve,
/// stored as `max_s (slope_s * rho + intercept_s)`. Every segment value
/// dominates n / rho^2 on [breakpoints.front(), breakpoints.back()], which is
/// what makes the tube risk accounting sound.
struct PwlOverapprox {
  Eigen::VectorXd breakpoints;  // S+1, strictly increasing
  Eigen::VectorXd slopes;       // S
  Eigen::VectorXd intercepts;   // S
  double dim_n = 0.0;
  double max_gap = 0.0;  // max over segments of (segment - n/rho^2)

  int segments() const { return static_cast<int>(slopes.size()); }
  double eval(double rho) const;
  double lower() const { return breakpoints(0); }
  double upper() const { return breakpoints(breakpoints.size() - 1); }
  /// value at the right end: the smallest admissible risk on the range
  double floor_risk() const { return eval(upper()); }
};

/// Secant construction on geometrically spaced breakpoints for r(rho) =
/// n / rho^2 over [eps, rho_max]. Secants of a convex function dominate it on
/// the chord, so the result certifies r >= n/rho^2 by construction; the
/// maximum gap per segment is located analytically and reported.
PwlOverapprox pwl_overapprox(double n, double eps, double rho_max, int segments);

/// Chord construction on the concave curve a*rho^2 + b over the rho-range
/// where the risk lies in [r_lo, r_hi] (the case-study risk substitute).
/// Chords of that parabola still dominate n/rho^2 on each chord because the
/// parabola itself does at the breakpoints and n/rho^2 is convex.
PwlOverapprox pwl_overapprox_quadratic(double n, double a, double b, double r_lo,
                                       double r_hi, int segments);

}  // namespace stlfleet::optimizer
