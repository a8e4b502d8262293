#include "stlfleet/mpc.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <sstream>
#include <tuple>

#include "stlfleet/errors.hpp"

namespace stlfleet::mpc {

using Eigen::MatrixXd;
using Eigen::RowVectorXd;
using Eigen::VectorXd;
using optimizer::SolveStatus;
using stl::Formula;
using stl::Kind;

AcceptedSpec make_accepted(stl::Formula formula, int k_assign, double r_max,
                           std::string name, int N) {
  if (!formula.is_nnf()) fail(Errc::NotInNnf, "spec must be in NNF");
  if (!(r_max > 0.0) || !(r_max < 1.0))
    fail(Errc::InvalidRisk, "spec " + name + ": r_max must lie in (0,1)");
  if (k_assign < 0) fail(Errc::InvalidRange, "negative assignment time");
  AcceptedSpec s;
  s.formula = std::move(formula);
  s.k_assign = k_assign;
  s.r_max = r_max;
  s.name = std::move(name);
  s.horizon = stl::active_horizon(s.formula, k_assign);
  if (!s.horizon.empty() && s.horizon.max() > N)
    fail(Errc::HorizonOverflow,
         "spec " + s.name + " needs time " + std::to_string(s.horizon.max()) +
             " beyond the mission horizon " + std::to_string(N));
  return s;
}

const VectorXd& Plan::v_at(int t) const {
  const int idx = t - solved_at;
  if (idx < 0 || idx >= static_cast<int>(v.size()))
    fail(Errc::IndexOutOfRange, "plan has no input for time " + std::to_string(t));
  return v[idx];
}

const VectorXd& Plan::z_at(int t) const {
  const int idx = t - solved_at;
  if (idx < 0 || idx >= static_cast<int>(z.size()))
    fail(Errc::IndexOutOfRange, "plan has no state for time " + std::to_string(t));
  return z[idx];
}

stl::Signal Plan::nominal_signal(const MatrixXd& T_inv) const {
  stl::Signal s;
  s.start = solved_at;
  s.values.reserve(z.size());
  for (const auto& zi : z) s.values.push_back(T_inv * zi);
  return s;
}

// ------------------------------------------------------------ ProgramBuilder

int ProgramBuilder::add_var(double lb, double ub, std::string name) {
  lb_.push_back(lb);
  ub_.push_back(ub);
  qdiag_.push_back(0.0);
  cost_.push_back(0.0);
  names_.push_back(std::move(name));
  return static_cast<int>(lb_.size()) - 1;
}

int ProgramBuilder::add_binary(std::string name) {
  const int v = add_var(0.0, 1.0, std::move(name));
  binaries_.push_back(v);
  return v;
}

void ProgramBuilder::set_lower(int var, double lb) {
  lb_[var] = std::max(lb_[var], lb);
}

void ProgramBuilder::fix(int var, double value) {
  lb_[var] = value;
  ub_[var] = value;
}

void ProgramBuilder::add_ge(std::vector<std::pair<int, double>> terms, double rhs) {
  rows_.push_back(std::move(terms));
  rhs_.push_back(rhs);
}

void ProgramBuilder::add_eq(std::vector<std::pair<int, double>> terms, double rhs) {
  eq_rows_.push_back(std::move(terms));
  eq_rhs_.push_back(rhs);
}

void ProgramBuilder::add_quadratic_cost(int var, double coeff) {
  qdiag_[var] += 2.0 * coeff;  // ConvexProgram cost is 0.5 x'Qx
}

void ProgramBuilder::add_linear_cost(int var, double coeff) {
  cost_[var] += coeff;
}

optimizer::ConvexProgram ProgramBuilder::build() const {
  const int n = num_vars();
  auto p = optimizer::ConvexProgram::make(n);
  bool any_q = false;
  for (double q : qdiag_)
    if (q != 0.0) any_q = true;
  if (any_q) {
    p.Q = MatrixXd::Zero(n, n);
    for (int i = 0; i < n; ++i) p.Q(i, i) = qdiag_[i];
  }
  for (int i = 0; i < n; ++i) {
    p.c(i) = cost_[i];
    p.lb(i) = lb_[i];
    p.ub(i) = ub_[i];
  }
  p.Ain = MatrixXd::Zero(num_rows(), n);
  p.bin = VectorXd::Zero(num_rows());
  for (int r = 0; r < num_rows(); ++r) {
    for (const auto& [j, a] : rows_[r]) p.Ain(r, j) += a;
    p.bin(r) = rhs_[r];
  }
  const int ne = static_cast<int>(eq_rhs_.size());
  if (ne > 0) {
    p.Aeq = MatrixXd::Zero(ne, n);
    p.beq = VectorXd::Zero(ne);
    for (int r = 0; r < ne; ++r) {
      for (const auto& [j, a] : eq_rows_[r]) p.Aeq(r, j) += a;
      p.beq(r) = eq_rhs_[r];
    }
  }
  p.binaries = binaries_;
  return p;
}

// ----------------------------------------------------------------- encoder

namespace {

struct Enc {
  int var = -1;
  int konst = -1;  // 0 / 1 when constant
  bool is_const() const { return konst >= 0; }
  static Enc constant(bool v) { return Enc{-1, v ? 1 : 0}; }
  static Enc variable(int v) { return Enc{v, -1}; }
};

class SpecEncoder {
 public:
  SpecEncoder(ProgramBuilder& b, const EncodeContext& ctx, std::string tag)
      : b_(b), ctx_(ctx), tag_(std::move(tag)) {}

  EncodeStats run(const AcceptedSpec& spec) {
    encode_req(spec.formula, spec.k_assign);
    stats_.infeasible = b_.infeasible();
    return stats_;
  }

 private:
  using NodeKey = std::pair<const void*, int>;
  using InstKey = std::tuple<const void*, bool, int>;

  std::string nm(const char* what, int t) const {
    return tag_ + "." + what + "@" + std::to_string(t);
  }

  // ---- predicate instances -------------------------------------------
  // One binary per referenced positive instance; one binary per polytope row
  // for a negated instance (outside = at least one face violated). Instances
  // on the conjunctive spine need no binaries at all: their rows are hard.

  // constant-folds an instance through frozen truth or reachability
  std::optional<bool> classify(const stl::PredicatePtr& p, bool positive, int t) {
    if (t > ctx_.horizon_n)
      fail(Errc::HorizonOverflow,
           "predicate instance at time " + std::to_string(t) + " beyond horizon");
    if (t <= ctx_.k_frozen) {
      const bool truth = ctx_.frozen_truth(*p, t);
      return positive ? truth : !truth;
    }
    if (!ctx_.prune || !ctx_.z_range) return std::nullopt;
    constexpr double kMargin = 1e-7;
    const auto& G = p->G();
    const auto& bvec = p->b();
    const int q = p->rows();
    bool impossible, guaranteed;
    std::vector<std::pair<double, double>> ranges(q);
    bool have_all = true;
    for (int r = 0; r < q; ++r) {
      auto iv = ctx_.z_range(t, G.row(r));
      if (!iv) {
        have_all = false;
        break;
      }
      ranges[r] = *iv;
    }
    if (!have_all) return std::nullopt;
    if (positive) {
      impossible = false;
      guaranteed = true;
      for (int r = 0; r < q; ++r) {
        if (ranges[r].second < bvec(r) + ctx_.rho_lower - kMargin) impossible = true;
        if (ranges[r].first < bvec(r) + ctx_.rho_upper + kMargin) guaranteed = false;
      }
    } else {
      impossible = true;
      guaranteed = false;
      for (int r = 0; r < q; ++r) {
        if (!(ranges[r].first > bvec(r) - ctx_.rho_lower + kMargin)) impossible = false;
        if (ranges[r].second < bvec(r) - ctx_.rho_upper - kMargin) guaranteed = true;
      }
    }
    if (impossible) {
      ++stats_.pruned_instances;
      return false;
    }
    if (guaranteed) {
      ++stats_.pruned_instances;
      return true;
    }
    return std::nullopt;
  }

  // smallest M making a predicate row vacuous when its binary is off
  double row_big_m(const stl::PredicatePtr& p, int r, bool positive, int t) {
    double need = ctx_.big_m;
    if (ctx_.z_range) {
      if (auto iv = ctx_.z_range(t, p->G().row(r))) {
        need = positive ? p->b()(r) + ctx_.rho_upper - iv->first
                        : iv->second + ctx_.rho_upper - p->b()(r);
        need += 1.0;
      }
    }
    return std::max(1.0, need);
  }

  // row terms for "g z(t) >= b + rho" (positive) / "g z(t) <= b - rho"
  // (negative); `relax_var` < 0 makes the row hard
  void emit_row(const stl::PredicatePtr& p, int r, bool positive, int t,
                int relax_var) {
    LinExpr e = ctx_.z_row(t, p->G().row(r));
    const int rho = ctx_.rho_var ? ctx_.rho_var(t) : -1;
    std::vector<std::pair<int, double>> terms;
    terms.reserve(e.terms.size() + 2);
    const double sign = positive ? 1.0 : -1.0;
    for (auto& [j, a] : e.terms) terms.emplace_back(j, sign * a);
    if (rho >= 0) terms.emplace_back(rho, -1.0);
    double rhs = sign * (p->b()(r) - e.constant);
    if (relax_var >= 0) {
      const double M = row_big_m(p, r, positive, t);
      terms.emplace_back(relax_var, -M);
      rhs -= M;
    }
    b_.add_ge(std::move(terms), rhs);
  }

  Enc instance(const stl::PredicatePtr& p, bool positive, int t) {
    const InstKey key{p.get(), positive, t};
    if (inst_req_memo_.count(key)) return Enc::constant(true);
    if (auto it = inst_memo_.find(key); it != inst_memo_.end()) return it->second;
    Enc e = make_instance(p, positive, t);
    inst_memo_.emplace(key, e);
    return e;
  }

  int new_binary(const stl::PredicatePtr& p, int row, int t, bool positive,
                 const char* what) {
    const int w = b_.add_binary(nm(what, t));
    ++stats_.binaries;
    if (ctx_.on_binary) ctx_.on_binary(w, p.get(), row, t, positive);
    return w;
  }

  Enc make_instance(const stl::PredicatePtr& p, bool positive, int t) {
    if (auto k = classify(p, positive, t)) return Enc::constant(*k);
    const int q = p->rows();
    if (positive) {
      const int w = new_binary(p, -1, t, true, "pred");
      for (int r = 0; r < q; ++r) emit_row(p, r, true, t, w);
      return Enc::variable(w);
    }
    std::vector<int> rows_w;
    for (int r = 0; r < q; ++r) {
      const int w = new_binary(p, r, t, false, "negrow");
      emit_row(p, r, false, t, w);
      rows_w.push_back(w);
    }
    if (rows_w.size() == 1) return Enc::variable(rows_w[0]);
    const int y = b_.add_var(0.0, 1.0, nm("neg", t));
    std::vector<std::pair<int, double>> sum;
    for (int w : rows_w) sum.emplace_back(w, 1.0);
    sum.emplace_back(y, -1.0);
    b_.add_ge(std::move(sum), 0.0);
    return Enc::variable(y);
  }

  void instance_required(const stl::PredicatePtr& p, bool positive, int t) {
    const InstKey key{p.get(), positive, t};
    if (inst_req_memo_.count(key)) return;
    if (auto it = inst_memo_.find(key); it != inst_memo_.end()) {
      // already referenced: pin the existing encoding
      if (it->second.is_const()) {
        if (it->second.konst == 0) b_.mark_infeasible();
      } else if (positive) {
        b_.fix(it->second.var, 1.0);
      } else {
        b_.set_lower(it->second.var, 1.0);
      }
      inst_req_memo_.insert(key);
      return;
    }
    inst_req_memo_.insert(key);
    if (auto k = classify(p, positive, t)) {
      if (!*k) b_.mark_infeasible();
      return;
    }
    const int q = p->rows();
    if (positive) {
      for (int r = 0; r < q; ++r) emit_row(p, r, true, t, -1);
      return;
    }
    if (q == 1) {
      emit_row(p, 0, false, t, -1);
      return;
    }
    std::vector<std::pair<int, double>> sum;
    for (int r = 0; r < q; ++r) {
      const int w = new_binary(p, r, t, false, "negrow");
      emit_row(p, r, false, t, w);
      sum.emplace_back(w, 1.0);
    }
    b_.add_ge(std::move(sum), 1.0);
  }

  // ---- until witnesses ------------------------------------------------
  // Returns the selector encodings, or a constant-true sentinel when some
  // witness is certain.
  struct Witnesses {
    bool certain = false;
    std::vector<int> selectors;
  };

  Witnesses until_witnesses(const Formula& f, int t) {
    Witnesses out;
    const Formula& left = f.children()[0];
    const Formula& right = f.children()[1];
    std::vector<Enc> prefix;  // encodings of left at [t, k1]
    bool prefix_dead = false;
    for (int k2 = t; k2 < t + f.lo(); ++k2) {
      Enc e = encode_ref(left, k2);
      if (e.is_const() && e.konst == 0) prefix_dead = true;
      prefix.push_back(e);
    }
    for (int k1 = t + f.lo(); k1 <= t + f.hi() && !prefix_dead; ++k1) {
      Enc el = encode_ref(left, k1);
      if (el.is_const() && el.konst == 0) prefix_dead = true;
      prefix.push_back(el);
      if (prefix_dead) break;
      Enc er = encode_ref(right, k1);
      if (er.is_const() && er.konst == 0) continue;
      std::vector<int> parts;
      for (const Enc& e : prefix)
        if (!e.is_const()) parts.push_back(e.var);
      if (!er.is_const()) parts.push_back(er.var);
      if (parts.empty()) {
        out.certain = true;  // right and the whole left prefix are certain
        return out;
      }
      if (parts.size() == 1) {
        out.selectors.push_back(parts[0]);
        continue;
      }
      const int u = b_.add_var(0.0, 1.0, nm("wit", k1));
      for (int pv : parts) b_.add_ge({{pv, 1.0}, {u, -1.0}}, 0.0);
      out.selectors.push_back(u);
    }
    return out;
  }

  // ---- referenced encoding (node value as a [0,1] variable) -----------
  Enc encode_ref(const Formula& f, int t) {
    const NodeKey key{f.node_id(), t};
    if (req_memo_.count(key)) return Enc::constant(true);
    if (auto it = ref_memo_.find(key); it != ref_memo_.end()) return it->second;
    Enc e = make_ref(f, t);
    ref_memo_.emplace(key, e);
    return e;
  }

  Enc make_ref(const Formula& f, int t) {
    switch (f.kind()) {
      case Kind::True:
        return Enc::constant(true);
      case Kind::Pred:
        return instance(f.predicate(), true, t);
      case Kind::NegPred:
        return instance(f.predicate(), false, t);
      case Kind::Not:
        fail(Errc::NotInNnf, "encoding requires NNF");
      case Kind::And: {
        std::vector<int> parts;
        for (const auto& c : f.children()) {
          Enc e = encode_ref(c, t);
          if (e.is_const()) {
            if (e.konst == 0) return Enc::constant(false);
            continue;
          }
          parts.push_back(e.var);
        }
        return conj_var(parts, t);
      }
      case Kind::Or: {
        std::vector<int> parts;
        for (const auto& c : f.children()) {
          Enc e = encode_ref(c, t);
          if (e.is_const()) {
            if (e.konst == 1) return Enc::constant(true);
            continue;
          }
          parts.push_back(e.var);
        }
        return disj_var(parts, t);
      }
      case Kind::Always: {
        std::vector<int> parts;
        for (int t2 = t + f.lo(); t2 <= t + f.hi(); ++t2) {
          Enc e = encode_ref(f.children()[0], t2);
          if (e.is_const()) {
            if (e.konst == 0) return Enc::constant(false);
            continue;
          }
          parts.push_back(e.var);
        }
        return conj_var(parts, t);
      }
      case Kind::Until: {
        Witnesses w = until_witnesses(f, t);
        if (w.certain) return Enc::constant(true);
        return disj_var(w.selectors, t);
      }
    }
    fail(Errc::UnsupportedStructure, "unreachable");
  }

  Enc conj_var(const std::vector<int>& parts, int t) {
    if (parts.empty()) return Enc::constant(true);
    if (parts.size() == 1) return Enc::variable(parts[0]);
    const int y = b_.add_var(0.0, 1.0, nm("and", t));
    for (int pv : parts) b_.add_ge({{pv, 1.0}, {y, -1.0}}, 0.0);
    return Enc::variable(y);
  }

  Enc disj_var(const std::vector<int>& parts, int t) {
    if (parts.empty()) return Enc::constant(false);
    if (parts.size() == 1) return Enc::variable(parts[0]);
    const int y = b_.add_var(0.0, 1.0, nm("or", t));
    std::vector<std::pair<int, double>> row;
    for (int pv : parts) row.emplace_back(pv, 1.0);
    row.emplace_back(y, -1.0);
    b_.add_ge(std::move(row), 0.0);
    return Enc::variable(y);
  }

  // ---- required encoding (node must hold) ------------------------------
  void encode_req(const Formula& f, int t) {
    const NodeKey key{f.node_id(), t};
    if (req_memo_.count(key)) return;
    if (auto it = ref_memo_.find(key); it != ref_memo_.end()) {
      // already referenced: pin the existing variable instead of re-emitting
      if (it->second.is_const()) {
        if (it->second.konst == 0) b_.mark_infeasible();
      } else {
        b_.set_lower(it->second.var, 1.0);
      }
      req_memo_.insert(key);
      return;
    }
    req_memo_.insert(key);
    switch (f.kind()) {
      case Kind::True:
        return;
      case Kind::Pred:
      case Kind::NegPred:
        instance_required(f.predicate(), f.kind() == Kind::Pred, t);
        return;
      case Kind::Not:
        fail(Errc::NotInNnf, "encoding requires NNF");
      case Kind::And:
        for (const auto& c : f.children()) encode_req(c, t);
        return;
      case Kind::Or: {
        std::vector<int> parts;
        for (const auto& c : f.children()) {
          Enc e = encode_ref(c, t);
          if (e.is_const()) {
            if (e.konst == 1) return;
            continue;
          }
          parts.push_back(e.var);
        }
        if (parts.empty()) {
          b_.mark_infeasible();
          return;
        }
        std::vector<std::pair<int, double>> row;
        for (int pv : parts) row.emplace_back(pv, 1.0);
        b_.add_ge(std::move(row), 1.0);
        return;
      }
      case Kind::Always:
        for (int t2 = t + f.lo(); t2 <= t + f.hi(); ++t2)
          encode_req(f.children()[0], t2);
        return;
      case Kind::Until: {
        Witnesses w = until_witnesses(f, t);
        if (w.certain) return;
        if (w.selectors.empty()) {
          b_.mark_infeasible();
          return;
        }
        std::vector<std::pair<int, double>> row;
        for (int u : w.selectors) row.emplace_back(u, 1.0);
        b_.add_ge(std::move(row), 1.0);
        return;
      }
    }
  }

  ProgramBuilder& b_;
  const EncodeContext& ctx_;
  std::string tag_;
  EncodeStats stats_;
  std::map<NodeKey, Enc> ref_memo_;
  std::set<NodeKey> req_memo_;
  std::map<InstKey, Enc> inst_memo_;
  std::set<InstKey> inst_req_memo_;
};

}  // namespace

EncodeStats encode_spec(ProgramBuilder& builder, const AcceptedSpec& spec,
                        const EncodeContext& ctx) {
  SpecEncoder enc(builder, ctx, spec.name.empty() ? "spec" : spec.name);
  return enc.run(spec);
}

// ------------------------------------------------------------- build/solve

double effective_big_m(const MpcConfig& cfg, const MatrixXd& T) {
  if (cfg.big_m > 0.0) return cfg.big_m;
  if (cfg.workspace.dim() > 0 && T.rows() == cfg.workspace.dim())
    return 2.0 * (T * (cfg.workspace.upper - cfg.workspace.lower)).norm();
  return 1e4;
}

namespace {

optimizer::PwlOverapprox risk_curve(const MpcConfig& cfg, int n, double rho_hi) {
  if (cfg.mode == RiskCurveMode::AppendixQuadratic)
    return optimizer::pwl_overapprox_quadratic(n, cfg.quad_a, cfg.quad_b,
                                               cfg.risk_lb, cfg.risk_ub,
                                               cfg.segments);
  return optimizer::pwl_overapprox(n, cfg.eps, rho_hi, cfg.segments);
}

}  // namespace

BuiltProblem build_problem(const AgentRuntime& agent,
                           const std::vector<AcceptedSpec>& accepted,
                           const AcceptedSpec* candidate, int k,
                           const MpcConfig& cfg) {
  const auto& model = agent.model;
  const int N = cfg.horizon;
  const int n = model.n();
  const int m = model.m();
  if (k < 0 || k >= N) fail(Errc::InvalidRange, "solve time outside [0, N)");
  if (static_cast<int>(agent.history.size()) < k + 1)
    fail(Errc::InvalidRange, "agent history does not reach time k");

  BuiltProblem bp;
  bp.k = k;
  bp.horizon_n = N;
  bp.m = m;
  bp.nx = n;
  bp.binary_meta = std::make_shared<std::vector<BinaryMeta>>();
  const double M0 = effective_big_m(cfg, model.T);
  bp.big_m = M0;

  ProgramBuilder b;

  // nominal inputs v(t), t in [k, N-1]
  bp.v_start = 0;
  for (int t = k; t < N; ++t)
    for (int j = 0; j < m; ++j) {
      const int var = b.add_var(model.input_box.lower(j), model.input_box.upper(j),
                                "v[" + std::to_string(t) + "][" + std::to_string(j) + "]");
      b.add_quadratic_cost(var, cfg.input_weight);
    }
  auto v_var = [&](int t, int j) { return bp.v_start + (t - k) * m + j; };

  // nominal states z(t), t in [k+1, N]; z(k) is the measurement (Eq. 5b) and
  // stays a constant
  bp.z_start = b.num_vars();
  for (int t = k + 1; t <= N; ++t)
    for (int i = 0; i < n; ++i)
      b.add_var(-optimizer::kInf, optimizer::kInf,
                "z[" + std::to_string(t) + "][" + std::to_string(i) + "]");
  auto z_var = [&](int t, int i) { return bp.z_start + (t - k - 1) * n + i; };

  // dynamics rows z(t+1) = A z(t) + B v(t)
  for (int t = k; t < N; ++t)
    for (int i = 0; i < n; ++i) {
      std::vector<std::pair<int, double>> terms;
      terms.reserve(n + m + 1);
      terms.emplace_back(z_var(t + 1, i), 1.0);
      double rhs = 0.0;
      for (int j = 0; j < n; ++j) {
        if (model.A(i, j) == 0.0) continue;
        if (t == k)
          rhs += model.A(i, j) * agent.x(j);
        else
          terms.emplace_back(z_var(t, j), -model.A(i, j));
      }
      for (int j = 0; j < m; ++j)
        if (model.B(i, j) != 0.0) terms.emplace_back(v_var(t, j), -model.B(i, j));
      b.add_eq(std::move(terms), rhs);
    }

  // reachability intervals for pruning and big-M sizing
  std::vector<MatrixXd> Apow(N - k + 1);
  Apow[0] = MatrixXd::Identity(n, n);
  for (int p = 1; p <= N - k; ++p) Apow[p] = model.A * Apow[p - 1];
  std::vector<VectorXd> z_const(N - k + 1);
  for (int p = 0; p <= N - k; ++p) z_const[p] = Apow[p] * agent.x;
  std::vector<MatrixXd> AB(N - k);
  for (int p = 0; p < N - k; ++p) AB[p] = Apow[p] * model.B;

  const VectorXd v_mid = 0.5 * (model.input_box.lower + model.input_box.upper);
  const VectorXd v_half = 0.5 * (model.input_box.upper - model.input_box.lower);

  EncodeContext ctx;
  ctx.k_frozen = k;
  ctx.horizon_n = N;
  ctx.big_m = M0;
  ctx.z_row = [&, k](int t, const RowVectorXd& g) {
    LinExpr e;
    if (t == k) {
      e.constant = g.dot(agent.x);
      return e;
    }
    for (int i = 0; i < n; ++i)
      if (g(i) != 0.0) e.terms.emplace_back(z_var(t, i), g(i));
    return e;
  };
  ctx.z_range = [&, k](int t, const RowVectorXd& g)
      -> std::optional<std::pair<double, double>> {
    double mid = g.dot(z_const[t - k]);
    double rad = 0.0;
    for (int tau = k; tau < t; ++tau) {
      const RowVectorXd gc = g * AB[t - 1 - tau];
      mid += gc.dot(v_mid);
      rad += gc.cwiseAbs().dot(v_half);
    }
    return std::make_pair(mid - rad, mid + rad);
  };
  ctx.frozen_truth = [&](const stl::Predicate& p, int t) {
    return p.holds(agent.history.at(t));
  };
  ctx.on_binary = [&](int var, const stl::Predicate* pred, int row, int t,
                      bool positive) {
    bp.binary_meta->push_back({var, pred, row, t, positive});
  };

  // shared tube radius / risk variables, created on demand
  const double rho_cap = cfg.rho_cap > 0.0 ? cfg.rho_cap : M0 / 2.0;
  auto curve = risk_curve(cfg, n, std::min(M0 / 2.0, rho_cap));
  const double rho_lo = std::max(cfg.eps, curve.lower());
  const double rho_hi = std::min({curve.upper(), M0 / 2.0, rho_cap});
  if (!(rho_lo <= rho_hi))
    fail(Errc::InvalidRange, "empty tube radius range; check eps/big_m/rho_cap");
  const bool risk_box = cfg.mode == RiskCurveMode::AppendixQuadratic;
  const double r_lb = risk_box ? cfg.risk_lb : 0.0;
  const double r_ub = risk_box ? cfg.risk_ub : optimizer::kInf;
  bp.rho_floor_value = rho_hi;
  bp.r_floor_value = std::clamp(curve.eval(rho_hi), r_lb, risk_box ? r_ub : 1.0);
  ctx.rho_lower = rho_lo;
  ctx.rho_upper = rho_hi;

  auto ensure_risk = [&](int t) -> std::pair<int, int> {
    auto it = bp.risk_vars.find(t);
    if (it != bp.risk_vars.end()) return it->second;
    const int rho = b.add_var(rho_lo, rho_hi, "rho[" + std::to_string(t) + "]");
    const int r = b.add_var(r_lb, r_ub, "r[" + std::to_string(t) + "]");
    for (int s = 0; s < curve.segments(); ++s)
      b.add_ge({{r, 1.0}, {rho, -curve.slopes(s)}}, curve.intercepts(s));
    b.add_linear_cost(r, 1.0);
    bp.risk_vars.emplace(t, std::make_pair(rho, r));
    return {rho, r};
  };
  ctx.rho_var = [&](int t) { return ensure_risk(t).first; };

  // encode all specs against the shared context
  std::vector<const AcceptedSpec*> specs;
  for (const auto& s : accepted) specs.push_back(&s);
  if (candidate) specs.push_back(candidate);
  for (const AcceptedSpec* s : specs) {
    EncodeStats st = encode_spec(b, *s, ctx);
    bp.total_binaries += st.binaries;
    if (b.infeasible()) break;
  }

  // per-spec risk budgets over the frozen horizon, Chebyshev accounting
  if (!b.infeasible()) {
    for (const AcceptedSpec* s : specs) {
      double remaining = s->r_max;
      std::vector<std::pair<int, double>> terms;
      for (int t : s->horizon.times) {
        if (t <= s->k_assign) continue;  // assignment instant carries no risk
        if (t <= k) {
          remaining -= (t < agent.committed_r.size()) ? agent.committed_r(t) : 0.0;
        } else if (auto it = bp.risk_vars.find(t); it != bp.risk_vars.end()) {
          terms.emplace_back(it->second.second, -1.0);
        } else {
          remaining -= bp.r_floor_value;
        }
      }
      if (remaining < -1e-12) {
        b.mark_infeasible();
        break;
      }
      if (!terms.empty()) b.add_ge(std::move(terms), -remaining);
    }
  }

  bp.infeasible_at_build = b.infeasible();
  bp.var_names = b.names();
  bp.program = b.build();
  return bp;
}

Plan extract_plan(const BuiltProblem& bp, const AgentRuntime& agent,
                  const std::vector<AcceptedSpec>& accepted,
                  const AcceptedSpec* candidate,
                  const optimizer::Solution& sol) {
  const auto& model = agent.model;
  const int k = bp.k;
  const int N = bp.horizon_n;
  const int m = bp.m;

  Plan plan;
  plan.solved_at = k;
  plan.horizon_n = N;
  plan.objective = sol.value;
  plan.nodes = sol.nodes;
  plan.binaries = bp.total_binaries;
  plan.v.reserve(N - k);
  for (int t = k; t < N; ++t)
    plan.v.push_back(sol.x.segment(bp.v_start + (t - k) * m, m));
  // rebuild the nominal trajectory through the dynamics so the x = z + e
  // bookkeeping downstream is exact even when the solver left equality
  // residuals at solver precision
  plan.z.reserve(N - k + 1);
  plan.z.push_back(agent.x);
  for (int t = k; t < N; ++t)
    plan.z.push_back(model.A * plan.z.back() + model.B * plan.v[t - k]);

  plan.rho = VectorXd::Zero(N + 1);
  plan.r = VectorXd::Zero(N + 1);
  auto mark_time = [&](int t) {
    if (t <= k || t > N) return;
    if (auto it = bp.risk_vars.find(t); it != bp.risk_vars.end()) {
      plan.rho(t) = sol.x(it->second.first);
      plan.r(t) = sol.x(it->second.second);
    } else {
      plan.rho(t) = bp.rho_floor_value;
      plan.r(t) = bp.r_floor_value;
    }
  };
  for (const auto& s : accepted)
    for (int t : s.horizon.times) mark_time(t);
  if (candidate)
    for (int t : candidate->horizon.times) mark_time(t);

  if (candidate) {
    double local = 0.0;
    for (int t : candidate->horizon.times)
      if (t > k) local += plan.r(t);
    plan.local_risk = local;
  }
  return plan;
}

Eigen::VectorXd BuiltProblem::z_of(const Eigen::VectorXd& x, int t,
                                   const Eigen::VectorXd& x_now) const {
  if (t <= k) return x_now;
  return x.segment(z_start + (t - k - 1) * nx, nx);
}

optimizer::SolveOptions solver_options(const BuiltProblem& bp,
                                       const MpcConfig& cfg,
                                       const Eigen::VectorXd& x_now) {
  optimizer::SolveOptions opts;
  opts.node_limit = cfg.node_limit;
  // feasibility is what the guarantee chain needs; optimality within a few
  // percent of the cost is plenty for ranking bids, so the search is budgeted
  // and the best incumbent wins when the budget runs out
  opts.gap_abs = 1e-6;
  opts.gap_rel = 0.05;
  opts.dive_limit = 64;
  opts.return_incumbent_on_node_limit = true;
  // capture only what the hint needs; metadata is shared, not copied
  auto meta = bp.binary_meta;
  const int k = bp.k, z_start = bp.z_start, nx = bp.nx;
  // a face pinned from the relaxation must stay valid when the dive re-routes
  // the plan, so only clearly decided instants are pinned
  const double deep = 4.0 * bp.rho_floor_value;
  const Eigen::VectorXd x0 = x_now;
  opts.incumbent_hint = [meta, k, z_start, nx, deep,
                         x0](const Eigen::VectorXd& x) {
    auto z_at = [&](int t) {
      return t <= k ? x0 : Eigen::VectorXd(x.segment(z_start + (t - k - 1) * nx, nx));
    };
    std::vector<std::pair<int, double>> fix;
    fix.reserve(meta->size());
    // one truth decision per predicate instant keeps positive and negated
    // occurrences of the same instant consistent
    using Site = std::pair<const stl::Predicate*, int>;
    std::set<Site> positive_sites;
    std::map<Site, bool> truth;
    std::map<Site, std::pair<int, double>> least_face;
    for (const BinaryMeta& bm : *meta) {
      const Site site{bm.pred, bm.t};
      if (!truth.count(site))
        truth[site] = bm.pred->margins(z_at(bm.t)).minCoeff() > 0.0;
      if (bm.positive) {
        positive_sites.insert(site);
        continue;
      }
      const double margin = bm.pred->G().row(bm.row).dot(z_at(bm.t)) -
                            bm.pred->b()(bm.row);
      auto it = least_face.find(site);
      if (it == least_face.end() || margin < it->second.second)
        least_face[site] = {bm.var, margin};
    }
    for (const BinaryMeta& bm : *meta) {
      const Site site{bm.pred, bm.t};
      if (bm.positive) {
        // pin only satisfied instances; unmet witnesses stay free so the
        // follow-up dive can pick where to send the plan
        if (truth[site]) fix.emplace_back(bm.var, 1.0);
        continue;
      }
      if (truth[site]) {
        fix.emplace_back(bm.var, 0.0);  // the negation is false here
      } else if (!positive_sites.count(site) &&
                 least_face[site].second <= -deep) {
        // activate exactly the least-satisfied face, but only where the
        // violation is deep enough to survive replanning; shallow instants
        // and instants that also carry a positive occurrence stay free
        fix.emplace_back(bm.var,
                         bm.var == least_face[site].first ? 1.0 : 0.0);
      }
    }
    return fix;
  };

  // route decisions (positive witnesses) branch before obstacle faces
  {
    auto positive = std::make_shared<std::vector<bool>>();
    int max_var = 0;
    for (const BinaryMeta& bm : *meta) max_var = std::max(max_var, bm.var);
    positive->assign(max_var + 1, false);
    for (const BinaryMeta& bm : *meta)
      if (bm.positive) (*positive)[bm.var] = true;
    opts.branch_class = [positive](int var) {
      return (var < static_cast<int>(positive->size()) && (*positive)[var]) ? 0 : 1;
    };
  }

  // once every positive instance is integral the route is decided, and all
  // remaining face binaries follow from the trajectory itself
  opts.dive_finisher = [meta, k, z_start, nx,
                        x0](const Eigen::VectorXd& x) {
    using Site = std::pair<const stl::Predicate*, int>;
    std::vector<std::pair<int, double>> fix;
    for (const BinaryMeta& bm : *meta) {
      if (!bm.positive) continue;
      const double v = x(bm.var);
      if (std::abs(v - std::round(v)) > 1e-6) return fix;  // not decided yet
    }
    auto z_at = [&](int t) {
      return t <= k ? x0 : Eigen::VectorXd(x.segment(z_start + (t - k - 1) * nx, nx));
    };
    std::map<Site, std::pair<int, double>> least_face;
    for (const BinaryMeta& bm : *meta) {
      if (bm.positive) continue;
      const double margin = bm.pred->G().row(bm.row).dot(z_at(bm.t)) -
                            bm.pred->b()(bm.row);
      auto key = Site{bm.pred, bm.t};
      auto it = least_face.find(key);
      if (it == least_face.end() || margin < it->second.second)
        least_face[key] = {bm.var, margin};
    }
    for (const BinaryMeta& bm : *meta) {
      if (bm.positive) {
        fix.emplace_back(bm.var, std::round(x(bm.var)));
        continue;
      }
      const Site site{bm.pred, bm.t};
      const bool inside = bm.pred->margins(z_at(bm.t)).minCoeff() > 0.0;
      if (inside)
        fix.emplace_back(bm.var, 0.0);
      else
        fix.emplace_back(bm.var,
                         bm.var == least_face[site].first ? 1.0 : 0.0);
    }
    return fix;
  };
  return opts;
}

StepOutcome solve_step(const AgentRuntime& agent,
                       const std::vector<AcceptedSpec>& accepted,
                       const AcceptedSpec* candidate, int k,
                       const MpcConfig& cfg, const DebugSink& sink) {
  StepOutcome out;
  auto emit = [&](int stage, SolveStatus st, double obj, double lr, int bins,
                  long nodes, double M) {
    if (!sink) return;
    SolveRecord rec;
    rec.agent = agent.model.id;
    rec.k = k;
    rec.stage = stage;
    rec.status = st;
    rec.objective = obj;
    rec.local_risk = lr;
    rec.binaries = bins;
    rec.nodes = nodes;
    rec.big_m = M;
    sink(rec);
  };

  if (candidate) {
    BuiltProblem bp = build_problem(agent, accepted, candidate, k, cfg);
    if (bp.infeasible_at_build) {
      out.stage1 = SolveStatus::Infeasible;
      emit(1, out.stage1, 0.0, 0.0, bp.total_binaries, 0, bp.big_m);
    } else {
      optimizer::Solution sol =
          optimizer::solve_micqp(bp.program, solver_options(bp, cfg, agent.x));
      out.stage1 = sol.status;
      if (sol.optimal()) {
        Plan plan = extract_plan(bp, agent, accepted, candidate, sol);
        out.kind = StepKind::AcceptWithPlan;
        out.local_risk = plan.local_risk;
        emit(1, sol.status, sol.value, plan.local_risk, bp.total_binaries,
             sol.nodes, bp.big_m);
        out.plan = std::move(plan);
        return out;
      }
      emit(1, sol.status, 0.0, 0.0, bp.total_binaries, sol.nodes, bp.big_m);
    }
  }

  {
    BuiltProblem bp = build_problem(agent, accepted, nullptr, k, cfg);
    if (bp.infeasible_at_build) {
      out.stage2 = SolveStatus::Infeasible;
      emit(2, out.stage2, 0.0, 0.0, bp.total_binaries, 0, bp.big_m);
    } else {
      optimizer::Solution sol =
          optimizer::solve_micqp(bp.program, solver_options(bp, cfg, agent.x));
      out.stage2 = sol.status;
      emit(2, sol.status, sol.value, 0.0, bp.total_binaries, sol.nodes, bp.big_m);
      if (sol.optimal()) {
        out.kind = StepKind::MeasurementOnly;
        out.plan = extract_plan(bp, agent, accepted, nullptr, sol);
        return out;
      }
    }
  }

  out.kind = StepKind::KeepPrevious;
  return out;
}

}  // namespace stlfleet::mpc
