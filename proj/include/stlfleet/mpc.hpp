#pragma once

#include <Eigen/Dense>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "stlfleet/decomp.hpp"
#include "stlfleet/optimizer.hpp"
#include "stlfleet/plant.hpp"
#include "stlfleet/stl.hpp"

namespace stlfleet::mpc {

enum class RiskCurveMode { Pwl, AppendixQuadratic };

struct MpcConfig {
  double eps = 1e-3;    // lower bound on the tube radius rho
  double big_m = 0.0;   // 0: derived as 2x the normalized workspace diagonal
  double rho_cap = 0.0; // 0: big_m / 2
  int segments = 8;
  RiskCurveMode mode = RiskCurveMode::Pwl;
  double risk_lb = 0.01, risk_ub = 1.0;   // risk box of the quadratic mode
  double quad_a = -0.005, quad_b = 1.01;  // r = a rho^2 + b substitute
  double input_weight = 0.001;            // cost R = input_weight * I
  long node_limit = 100000;
  int horizon = 25;  // N
  decomp::Orthotope workspace;  // original coordinates, for big-M sizing
};

/// A specification an agent has committed to: agent-level formula in the
/// agent's normalized frame, assignment time, risk budget and the active
/// horizon fixed at assignment time.
struct AcceptedSpec {
  stl::Formula formula;
  int k_assign = 0;
  double r_max = 0.5;
  stl::TimeSet horizon;
  std::string name;
};

/// Builds the spec record and freezes its active horizon; throws
/// HorizonOverflow when the horizon does not fit in [0, N].
AcceptedSpec make_accepted(stl::Formula formula, int k_assign, double r_max,
                           std::string name, int N);

/// A shrinking-horizon plan: inputs and nominal states from `solved_at` to N,
/// plus the time-indexed tube radii and risk levels the plan commits to.
struct Plan {
  int solved_at = 0;
  int horizon_n = 0;
  std::vector<Eigen::VectorXd> v;  // [solved_at, N-1]
  std::vector<Eigen::VectorXd> z;  // [solved_at, N], normalized frame
  Eigen::VectorXd rho, r;          // absolute index 0..N; meaningful past solved_at
  double objective = 0.0;
  double local_risk = 0.0;
  long nodes = 0;
  int binaries = 0;

  const Eigen::VectorXd& v_at(int t) const;
  const Eigen::VectorXd& z_at(int t) const;
  /// nominal trajectory as a signal in original coordinates
  stl::Signal nominal_signal(const Eigen::MatrixXd& T_inv) const;
};

/// Mutable per-agent state owned by the fleet loop.
struct AgentRuntime {
  plant::AgentModel model;  // normalized
  Eigen::VectorXd x;        // measured state at time k, normalized frame
  std::vector<Eigen::VectorXd> history;  // measured states 0..k, normalized
  std::vector<AcceptedSpec> accepted;
  Eigen::VectorXd committed_rho, committed_r;  // frozen values for j <= k
  std::optional<Plan> plan;
};

// ---------------------------------------------------------------- encoding

/// Incremental program assembly with named variables, >= rows and equalities.
class ProgramBuilder {
 public:
  int add_var(double lb, double ub, std::string name);
  int add_binary(std::string name);
  void set_lower(int var, double lb);
  void fix(int var, double value);
  void add_ge(std::vector<std::pair<int, double>> terms, double rhs);
  void add_eq(std::vector<std::pair<int, double>> terms, double rhs);
  void add_quadratic_cost(int var, double coeff);  // adds coeff * x^2
  void add_linear_cost(int var, double coeff);
  void mark_infeasible() { infeasible_ = true; }
  bool infeasible() const { return infeasible_; }
  int num_vars() const { return static_cast<int>(lb_.size()); }
  int num_rows() const { return static_cast<int>(rhs_.size()); }
  int num_binaries() const { return static_cast<int>(binaries_.size()); }
  optimizer::ConvexProgram build() const;
  const std::vector<std::string>& names() const { return names_; }

 private:
  std::vector<double> lb_, ub_, qdiag_, cost_;
  std::vector<std::string> names_;
  std::vector<int> binaries_;
  std::vector<std::vector<std::pair<int, double>>> rows_;
  std::vector<double> rhs_;
  std::vector<std::vector<std::pair<int, double>>> eq_rows_;
  std::vector<double> eq_rhs_;
  bool infeasible_ = false;
};

/// Affine expression over program variables.
struct LinExpr {
  std::vector<std::pair<int, double>> terms;
  double constant = 0.0;
};

/// Everything encode_spec needs to know about the surrounding problem:
/// how nominal states map to decision variables, the shared tube radius
/// variables, frozen truth for realized instants, and reachability intervals
/// for pruning.
struct EncodeContext {
  int k_frozen = -1;  // instants <= k_frozen use measured truth
  int horizon_n = 0;
  double big_m = 0.0;
  double rho_lower = 0.0;  // smallest admissible tube radius
  double rho_upper = 0.0;  // largest admissible tube radius
  bool prune = true;       // reachability-based constant folding
  /// g' z(t) as an affine expression (row vector g)
  std::function<LinExpr(int t, const Eigen::RowVectorXd& g)> z_row;
  /// reachability interval of g' z(t); nullopt disables pruning
  std::function<std::optional<std::pair<double, double>>(
      int t, const Eigen::RowVectorXd& g)> z_range;
  /// shared tube radius variable for time t; -1 means rho(t) == 0 (monitor)
  std::function<int(int t)> rho_var;
  /// measured truth of a predicate at a realized instant
  std::function<bool(const stl::Predicate&, int t)> frozen_truth;
  /// notification for every created predicate binary (row < 0: positive
  /// instance); lets the problem owner build rounding heuristics
  std::function<void(int var, const stl::Predicate* pred, int row, int t,
                     bool positive)> on_binary;
};

struct EncodeStats {
  int binaries = 0;
  int pruned_instances = 0;
  bool infeasible = false;
};

/// Big-M mixed-integer encoding of one spec instantiated at its assignment
/// time. Binary variables mark predicate instances (one per polytope row for
/// negated predicates); all structure above them is monotone and stays
/// continuous. With integral binaries and rho == 0, block feasibility is
/// equivalent to Boolean satisfaction; with rho(t) > 0 the predicate rows are
/// tightened by a Euclidean ball margin (rows have unit norm).
EncodeStats encode_spec(ProgramBuilder& builder, const AcceptedSpec& spec,
                        const EncodeContext& ctx);

// ------------------------------------------------------------ MPC problems

struct BinaryMeta {
  int var = -1;
  const stl::Predicate* pred = nullptr;
  int row = -1;  // -1: positive instance; otherwise the negated polytope row
  int t = 0;
  bool positive = true;
};

struct BuiltProblem {
  optimizer::ConvexProgram program;
  std::vector<std::string> var_names;
  bool infeasible_at_build = false;
  int k = 0;
  int horizon_n = 0;
  int v_start = 0;  // v variables first, m per step over [k, N-1]
  int z_start = 0;  // then nominal states, n per step over [k+1, N]
  int m = 0;
  int nx = 0;
  double big_m = 0.0;
  double rho_floor_value = 0.0;  // implicit rho at times without variables
  double r_floor_value = 0.0;
  std::map<int, std::pair<int, int>> risk_vars;  // t -> (rho var, r var)
  std::shared_ptr<std::vector<BinaryMeta>> binary_meta;
  int total_binaries = 0;

  Eigen::VectorXd z_of(const Eigen::VectorXd& x, int t,
                       const Eigen::VectorXd& x_now) const;
};

/// Solver options for an assembled problem: node limit plus a truthful
/// rounding heuristic that fixes every predicate binary from the relaxation's
/// nominal trajectory (for negated boxes, the most violated face).
optimizer::SolveOptions solver_options(const BuiltProblem& bp,
                                       const MpcConfig& cfg,
                                       const Eigen::VectorXd& x_now);

/// Assemble the shrinking-horizon tube MPC at time k for the accepted specs
/// plus an optional candidate. The nominal states are condensed out, so the
/// program is over v, rho, r and the encoding variables only.
BuiltProblem build_problem(const AgentRuntime& agent,
                           const std::vector<AcceptedSpec>& accepted,
                           const AcceptedSpec* candidate, int k,
                           const MpcConfig& cfg);

/// Extract the plan (v, z, rho, r, local risk of `candidate`) from a solved
/// problem.
Plan extract_plan(const BuiltProblem& bp, const AgentRuntime& agent,
                  const std::vector<AcceptedSpec>& accepted,
                  const AcceptedSpec* candidate,
                  const optimizer::Solution& sol);

enum class StepKind { AcceptWithPlan, MeasurementOnly, KeepPrevious };

struct SolveRecord {
  std::string agent;
  int k = 0;
  int stage = 0;
  optimizer::SolveStatus status = optimizer::SolveStatus::NumericalFailure;
  double objective = 0.0;
  double local_risk = 0.0;
  int binaries = 0;
  long nodes = 0;
  double big_m = 0.0;
};

using DebugSink = std::function<void(const SolveRecord&)>;

struct StepOutcome {
  StepKind kind = StepKind::KeepPrevious;
  std::optional<Plan> plan;
  double local_risk = 0.0;
  optimizer::SolveStatus stage1 = optimizer::SolveStatus::Infeasible;
  optimizer::SolveStatus stage2 = optimizer::SolveStatus::Infeasible;
};

/// Three-stage fallback: (1) solve with the candidate included, (2) solve with
/// the accepted set only, (3) keep the previous strategy. Never throws on
/// solver failure; each stage degrades to the next.
StepOutcome solve_step(const AgentRuntime& agent,
                       const std::vector<AcceptedSpec>& accepted,
                       const AcceptedSpec* candidate, int k,
                       const MpcConfig& cfg, const DebugSink& sink = {});

/// Effective big-M: configured value or twice the normalized workspace
/// diagonal.
double effective_big_m(const MpcConfig& cfg, const Eigen::MatrixXd& T);

}  // namespace stlfleet::mpc
