#include "stlfleet/decomp.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <set>

#include "stlfleet/errors.hpp"
#include "stlfleet/optimizer.hpp"

namespace stlfleet::decomp {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using stl::Formula;
using stl::Kind;
using stl::Predicate;

namespace {

optimizer::SolveOptions geometry_lp_options() {
  optimizer::SolveOptions o;
  o.tol_feas = 1e-10;
  o.tol_opt = 1e-12;
  o.max_iterations = 200;
  return o;
}

optimizer::Solution solve_lp_or_throw(const optimizer::ConvexProgram& p,
                                      const char* what) {
  auto sol = optimizer::solve_convex(p, geometry_lp_options());
  switch (sol.status) {
    case optimizer::SolveStatus::Optimal:
      return sol;
    case optimizer::SolveStatus::Infeasible:
      fail(Errc::EmptyPolytope, std::string(what) + ": polytope is empty");
    case optimizer::SolveStatus::Unbounded:
      fail(Errc::NotBounded, std::string(what) + ": polytope is unbounded");
    default:
      fail(Errc::NumericalFailure, std::string(what) + ": LP did not converge");
  }
}

}  // namespace

bool Polytope::contains(const VectorXd& x, double tol) const {
  return (G * x - b).minCoeff() >= -tol;
}

bool Orthotope::contains(const VectorXd& x, double tol) const {
  return (x - lower).minCoeff() >= -tol && (upper - x).minCoeff() >= -tol;
}

double Orthotope::volume() const {
  double v = 1.0;
  for (int i = 0; i < dim(); ++i) v *= std::max(0.0, upper(i) - lower(i));
  return v;
}

stl::Predicate Orthotope::as_predicate(std::string label) const {
  return Predicate::box(lower, upper, std::move(label));
}

Orthotope bounding_orthotope(const Polytope& P) {
  const int n = P.dim();
  if (n == 0) fail(Errc::InvalidRange, "zero-dimensional polytope");
  Orthotope box;
  box.lower.resize(n);
  box.upper.resize(n);
  for (int i = 0; i < n; ++i) {
    auto p = optimizer::ConvexProgram::make(n);
    p.Ain = P.G;
    p.bin = P.b;
    p.c.setZero();
    p.c(i) = 1.0;  // min x_i
    box.lower(i) = solve_lp_or_throw(p, "bounding_orthotope").value;
    p.c(i) = -1.0;  // max x_i
    box.upper(i) = -solve_lp_or_throw(p, "bounding_orthotope").value;
  }
  return box;
}

Orthotope inscribed_orthotope(const Polytope& P) {
  const int n = P.dim();
  if (n == 0) fail(Errc::InvalidRange, "zero-dimensional polytope");
  const int q = static_cast<int>(P.G.rows());

  // variables (l, u, t): containment row per polytope face uses the box
  // support point, which is linear once the face-normal signs are known
  auto containment = [&](int extra_rows) {
    MatrixXd A = MatrixXd::Zero(q + n + extra_rows, 2 * n + 1);
    VectorXd rhs(q + n + extra_rows);
    for (int r = 0; r < q; ++r) {
      for (int i = 0; i < n; ++i) {
        const double g = P.G(r, i);
        if (g >= 0.0)
          A(r, i) = g;  // g_i * l_i
        else
          A(r, n + i) = g;  // g_i * u_i
      }
      rhs(r) = P.b(r);
    }
    for (int i = 0; i < n; ++i) {  // u_i - l_i - t >= 0
      A(q + i, i) = -1.0;
      A(q + i, n + i) = 1.0;
      A(q + i, 2 * n) = -1.0;
      rhs(q + i) = 0.0;
    }
    return std::make_pair(A, rhs);
  };

  auto p1 = optimizer::ConvexProgram::make(2 * n + 1);
  std::tie(p1.Ain, p1.bin) = containment(0);
  p1.c(2 * n) = -1.0;  // max t
  p1.lb(2 * n) = 0.0;
  auto s1 = solve_lp_or_throw(p1, "inscribed_orthotope");
  const double t_star = s1.x(2 * n);
  if (t_star < 1e-9)
    fail(Errc::DegeneratePolytope,
         "no full-dimensional inscribed box (max-min-side below 1e-9)");

  // tie-break on the optimal face: maximize the total side length
  auto p2 = optimizer::ConvexProgram::make(2 * n + 1);
  std::tie(p2.Ain, p2.bin) = containment(0);
  for (int i = 0; i < n; ++i) {
    p2.c(i) = 1.0;       // min sum l
    p2.c(n + i) = -1.0;  // max sum u
  }
  p2.lb(2 * n) = t_star;
  p2.ub(2 * n) = t_star;
  auto s2 = solve_lp_or_throw(p2, "inscribed_orthotope");

  Orthotope box;
  box.lower = s2.x.head(n);
  box.upper = s2.x.segment(n, n);
  // certify containment before returning
  for (int r = 0; r < q; ++r) {
    double support = 0.0;
    for (int i = 0; i < n; ++i)
      support += std::min(P.G(r, i) * box.lower(i), P.G(r, i) * box.upper(i));
    if (support < P.b(r) - 1e-8)
      fail(Errc::NumericalFailure, "inscribed box containment certificate failed");
  }
  return box;
}

Orthotope project_orthotope(const Orthotope& B, const std::vector<int>& coords) {
  if (coords.empty()) fail(Errc::EmptyCoordSet, "projection needs coordinates");
  Orthotope out;
  out.lower.resize(coords.size());
  out.upper.resize(coords.size());
  for (size_t i = 0; i < coords.size(); ++i) {
    const int c = coords[i];
    if (c < 0 || c >= B.dim())
      fail(Errc::IndexOutOfRange,
           "projection coordinate " + std::to_string(c) + " out of range");
    out.lower(i) = B.lower(c);
    out.upper(i) = B.upper(c);
  }
  return out;
}

namespace {

void collect_slots(const Formula& f, int agent_dim, std::set<int>& out) {
  if (f.predicate())
    for (int s : f.predicate()->slots(agent_dim)) out.insert(s);
  for (const auto& c : f.children()) collect_slots(c, agent_dim, out);
}

Formula restrict_formula(const Formula& f, int slot, int agent_dim) {
  switch (f.kind()) {
    case Kind::True:
      return f;
    case Kind::Pred:
      return Formula::pred(std::make_shared<Predicate>(
          f.predicate()->restrict_to_slot(slot, agent_dim)));
    case Kind::NegPred:
      return Formula::neg_pred(std::make_shared<Predicate>(
          f.predicate()->restrict_to_slot(slot, agent_dim)));
    case Kind::Not:
      fail(Errc::NotInNnf, "decomposition requires NNF");
    case Kind::And: {
      std::vector<Formula> ch;
      for (const auto& c : f.children())
        ch.push_back(restrict_formula(c, slot, agent_dim));
      return Formula::conj(std::move(ch));
    }
    case Kind::Or: {
      std::vector<Formula> ch;
      for (const auto& c : f.children())
        ch.push_back(restrict_formula(c, slot, agent_dim));
      return Formula::disj(std::move(ch));
    }
    case Kind::Always:
      return Formula::always(f.lo(), f.hi(),
                             restrict_formula(f.children()[0], slot, agent_dim));
    case Kind::Until:
      return Formula::until(f.lo(), f.hi(),
                            restrict_formula(f.children()[0], slot, agent_dim),
                            restrict_formula(f.children()[1], slot, agent_dim));
  }
  fail(Errc::UnsupportedStructure, "unreachable");
}

// columns of the concatenated state spanned by the given slots
std::vector<int> slot_columns(const std::vector<int>& slots, int agent_dim) {
  std::vector<int> cols;
  for (int s : slots)
    for (int c = 0; c < agent_dim; ++c) cols.push_back(s * agent_dim + c);
  return cols;
}

Polytope subspace_polytope(const Predicate& p, const std::vector<int>& cols) {
  MatrixXd G(p.rows(), cols.size());
  for (size_t j = 0; j < cols.size(); ++j) G.col(j) = p.G().col(cols[j]);
  return Polytope{G, p.b()};
}

struct Ctx {
  int nu;
  int agent_dim;
  DecomposeOptions opts;
};

std::vector<Formula> dec(const Formula& f, const Ctx& ctx);

std::vector<Formula> all_true(int nu) {
  return std::vector<Formula>(nu, Formula::top());
}

// largest inscribed-box minimum side over the positive predicates of f;
// used only as the disjunct-selection heuristic
double disjunct_score(const Formula& f, const Ctx& ctx) {
  double score = std::numeric_limits<double>::infinity();
  std::function<void(const Formula&)> walk = [&](const Formula& g) {
    if (g.kind() == Kind::Pred) {
      auto slots = g.predicate()->slots(ctx.agent_dim);
      try {
        Orthotope box =
            inscribed_orthotope(subspace_polytope(*g.predicate(),
                                                  slot_columns(slots, ctx.agent_dim)));
        score = std::min(score, box.min_side());
      } catch (const Error&) {
        score = -std::numeric_limits<double>::infinity();
      }
    }
    for (const auto& c : g.children()) walk(c);
  };
  walk(f);
  return score;
}

std::vector<Formula> dec_predicate(const Formula& f, const Ctx& ctx) {
  const Predicate& p = *f.predicate();
  const bool positive = f.kind() == Kind::Pred;
  auto slots = p.slots(ctx.agent_dim);
  auto out = all_true(ctx.nu);
  if (slots.empty()) return out;  // vacuous predicate
  if (slots.size() == 1) {
    Formula local = restrict_formula(f, slots[0], ctx.agent_dim);
    out[slots[0]] = local;
    return out;
  }
  // Lemma-1 box decomposition over the spanned subspace
  const auto cols = slot_columns(slots, ctx.agent_dim);
  const Polytope sub = subspace_polytope(p, cols);
  const Orthotope box = positive ? inscribed_orthotope(sub) : bounding_orthotope(sub);
  const std::string suffix = positive ? "_in" : "_out";
  for (size_t si = 0; si < slots.size(); ++si) {
    std::vector<int> local(ctx.agent_dim);
    for (int c = 0; c < ctx.agent_dim; ++c)
      local[c] = static_cast<int>(si) * ctx.agent_dim + c;
    Orthotope slice = project_orthotope(box, local);
    std::string label =
        p.label().empty() ? "" : p.label() + suffix + ".s" + std::to_string(slots[si]);
    auto bp = std::make_shared<Predicate>(slice.as_predicate(label));
    out[slots[si]] = positive ? Formula::pred(bp) : Formula::neg_pred(bp);
  }
  return out;
}

std::vector<Formula> dec(const Formula& f, const Ctx& ctx) {
  switch (f.kind()) {
    case Kind::True:
      return all_true(ctx.nu);
    case Kind::Pred:
    case Kind::NegPred:
      return dec_predicate(f, ctx);
    case Kind::Not:
      fail(Errc::NotInNnf, "decomposition requires NNF");
    case Kind::And: {
      std::vector<std::vector<Formula>> parts;
      for (const auto& c : f.children()) parts.push_back(dec(c, ctx));
      std::vector<Formula> out;
      for (int j = 0; j < ctx.nu; ++j) {
        std::vector<Formula> ch;
        for (auto& part : parts)
          if (part[j].kind() != Kind::True) ch.push_back(part[j]);
        out.push_back(Formula::conj(std::move(ch)));
      }
      return out;
    }
    case Kind::Or: {
      std::set<int> slots;
      collect_slots(f, ctx.agent_dim, slots);
      if (slots.size() <= 1) {
        auto out = all_true(ctx.nu);
        if (!slots.empty())
          out[*slots.begin()] = restrict_formula(f, *slots.begin(), ctx.agent_dim);
        return out;
      }
      if (!ctx.opts.select_disjunct)
        fail(Errc::UnsupportedStructure,
             "multi-agent disjunction without disjunct selection");
      // keep the roomiest disjunct; satisfying it implies the disjunction
      int best = 0;
      double best_score = -std::numeric_limits<double>::infinity();
      for (size_t i = 0; i < f.children().size(); ++i) {
        const double s = disjunct_score(f.children()[i], ctx);
        if (s > best_score) {
          best_score = s;
          best = static_cast<int>(i);
        }
      }
      return dec(f.children()[best], ctx);
    }
    case Kind::Always: {
      auto part = dec(f.children()[0], ctx);
      std::vector<Formula> out;
      for (int j = 0; j < ctx.nu; ++j)
        out.push_back(part[j].kind() == Kind::True
                          ? Formula::top()
                          : Formula::always(f.lo(), f.hi(), part[j]));
      return out;
    }
    case Kind::Until: {
      std::set<int> slots;
      collect_slots(f, ctx.agent_dim, slots);
      if (slots.size() <= 1) {
        auto out = all_true(ctx.nu);
        if (!slots.empty())
          out[*slots.begin()] = restrict_formula(f, *slots.begin(), ctx.agent_dim);
        return out;
      }
      if (!ctx.opts.pin_witness)
        fail(Errc::UnsupportedStructure,
             "multi-agent until without a pinned witness time");
      // pin the witness at the earliest window instant: the conjunction
      // G[0,a] left & G[a,a] right implies left U[a,b] right
      const Formula pinned = Formula::conj(
          {Formula::always(0, f.lo(), f.children()[0]),
           Formula::always(f.lo(), f.lo(), f.children()[1])});
      return dec(pinned, ctx);
    }
  }
  fail(Errc::UnsupportedStructure, "unreachable");
}

}  // namespace

DecomposedTask decompose(const stl::Formula& f, int nu, int agent_dim,
                         const DecomposeOptions& opts) {
  if (nu < 1) fail(Errc::InvalidRange, "nu must be >= 1");
  if (agent_dim < 1) fail(Errc::InvalidRange, "agent dimension must be >= 1");
  if (!f.is_nnf()) fail(Errc::NotInNnf, "decomposition requires NNF");
  const int d = f.dim();
  if (d > 0 && d != nu * agent_dim)
    fail(Errc::DimensionMismatch,
         "formula reads " + std::to_string(d) + " dims, expected " +
             std::to_string(nu * agent_dim));

  DecomposedTask task;
  task.nu = nu;
  if (nu == 1) {
    task.subformulas = {f};  // identity decomposition
    return task;
  }
  Ctx ctx{nu, agent_dim, opts};
  task.subformulas = dec(f, ctx);
  return task;
}

std::vector<double> split_risk(double r_max, int nu) {
  if (!(r_max > 0.0) || !(r_max < 1.0))
    fail(Errc::InvalidRisk, "r_max must lie in (0,1)");
  if (nu < 1) fail(Errc::InvalidRisk, "nu must be >= 1");
  std::vector<double> out(nu, r_max / nu);
  double partial = 0.0;
  for (int i = 0; i + 1 < nu; ++i) partial += out[i];
  out[nu - 1] = r_max - partial;  // last element absorbs rounding
  return out;
}

}  // namespace stlfleet::decomp
