#pragma once

#include <Eigen/Dense>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace stlfleet::stl {

/// Robustness of TRUE; keeps min/max trees finite.
constexpr double kRobTop = 1e9;

/// Affine predicate mu := (G x >= b) with unit-norm rows. The satisfying set
/// is a polytope for task predicates; single-halfspace predicates are allowed
/// for plain monitoring (boundedness only matters once a predicate is
/// decomposed, and is checked there).
class Predicate {
 public:
  Predicate(Eigen::MatrixXd G, Eigen::VectorXd b, std::string label = "");

  const Eigen::MatrixXd& G() const { return G_; }
  const Eigen::VectorXd& b() const { return b_; }
  int dim() const { return static_cast<int>(G_.cols()); }
  int rows() const { return static_cast<int>(G_.rows()); }
  const std::string& label() const { return label_; }

  /// h(x) = Gx - b
  Eigen::VectorXd margins(const Eigen::VectorXd& x) const;
  bool holds(const Eigen::VectorXd& x) const;
  /// min_i h_i(x); the quantitative margin used by robustness
  double robustness(const Eigen::VectorXd& x) const;

  /// axis-aligned box lower <= x <= upper as a predicate; `dim` may exceed the
  /// box dimension, in which case `coords` selects the constrained axes
  static Predicate box(const Eigen::VectorXd& lower, const Eigen::VectorXd& upper,
                       std::string label = "");
  static Predicate box_in_dims(int dim, const std::vector<int>& coords,
                               const Eigen::VectorXd& lower,
                               const Eigen::VectorXd& upper,
                               std::string label = "");

  /// agent-state slots (of width `slot_dim`) this predicate reads
  std::vector<int> slots(int slot_dim) const;
  /// restriction of a single-slot predicate to that slot's coordinates
  Predicate restrict_to_slot(int slot, int slot_dim) const;

 private:
  Eigen::MatrixXd G_;
  Eigen::VectorXd b_;
  std::string label_;
};

using PredicatePtr = std::shared_ptr<const Predicate>;
using PredicateTable = std::map<std::string, PredicatePtr>;

enum class Kind { True, Pred, NegPred, Not, And, Or, Always, Until };

/// Immutable formula AST. Public construction goes through the factories;
/// everything the parser or to_nnf emits is in negation normal form (Not nodes
/// only exist transiently between parsing and NNF rewriting).
/// F[a,b] phi is stored as TRUE U[a,b] phi.
class Formula {
 public:
  Formula() : Formula(top()) {}

  static Formula top();
  static Formula pred(PredicatePtr p);
  static Formula neg_pred(PredicatePtr p);
  static Formula negation(Formula f);  // general negation (pre-NNF only)
  static Formula conj(std::vector<Formula> children);
  static Formula disj(std::vector<Formula> children);
  static Formula always(int a, int b, Formula child);
  static Formula until(int a, int b, Formula left, Formula right);
  static Formula eventually(int a, int b, Formula child);

  Kind kind() const;
  const PredicatePtr& predicate() const;
  int lo() const;  // interval bounds of temporal nodes
  int hi() const;
  const std::vector<Formula>& children() const;

  bool is_nnf() const;
  /// state dimension read by the predicates (0 if none)
  int dim() const;
  std::string to_string() const;

  /// structural identity (shared nodes compare equal fast)
  bool same_node(const Formula& o) const { return node_ == o.node_; }
  const void* node_id() const { return node_.get(); }

 private:
  struct Node;
  explicit Formula(std::shared_ptr<const Node> n) : node_(std::move(n)) {}
  std::shared_ptr<const Node> node_;
};

/// Discrete-time vector signal starting at time `start`.
struct Signal {
  int start = 0;
  std::vector<Eigen::VectorXd> values;

  int dim() const { return values.empty() ? 0 : static_cast<int>(values[0].size()); }
  int end() const { return start + static_cast<int>(values.size()); }  // exclusive
  bool covers(int t) const { return t >= start && t < end(); }
  const Eigen::VectorXd& at(int t) const;

  static Signal constant(int start, int length, const Eigen::VectorXd& value);
};

/// Finite sorted set of time indices.
struct TimeSet {
  std::vector<int> times;  // sorted, unique

  bool empty() const { return times.empty(); }
  int min() const { return times.front(); }
  int max() const { return times.back(); }
  bool contains(int t) const;
  void insert(int t);
  void merge(const TimeSet& o);
};

/// Parse a formula over the published grammar. Inline predicates
/// "(a1*x1 + ... >= c)" are row-normalized; named predicates resolve through
/// the table. The result is NNF. `expected_dim` = 0 infers the dimension.
Formula parse_formula(const std::string& text, const PredicateTable& predicates,
                      int expected_dim = 0);

/// Push negations down to predicates (De Morgan + temporal duality).
/// Negating a general Until has no dual in this syntax and is rejected.
Formula to_nnf(const Formula& f);

/// Boolean satisfaction of `f` by the signal suffix at time k (Definition-1
/// style recursion). The signal must cover active_horizon(f, k).
bool satisfies(const Formula& f, const Signal& s, int k);

/// Quantitative robustness: predicate -> min-margin, conjunction -> min,
/// disjunction -> max, always -> min over the window, until -> max over
/// witnesses of min(right, window mins). Sign-consistent with satisfies away
/// from zero.
double robustness(const Formula& f, const Signal& s, int k,
                  double rob_top = kRobTop);

/// All time instants needed to evaluate f asserted at time k.
TimeSet active_horizon(const Formula& f, int k);

}  // namespace stlfleet::stl
