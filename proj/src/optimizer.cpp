#include "stlfleet/optimizer.hpp"

#include <Eigen/Sparse>
#include <algorithm>
#include <cmath>
#include <functional>
#include <queue>
#include <sstream>

#include "stlfleet/errors.hpp"

namespace stlfleet::optimizer {

namespace {

using Eigen::MatrixXd;
using Eigen::VectorXd;

struct IpmResult {
  SolveStatus status = SolveStatus::NumericalFailure;
  VectorXd q;
  VectorXd lambda;
  int iterations = 0;
};

// Core primal-dual interior point method for
//   min 0.5 q'Hq + g'q  s.t.  Mq >= h
// (Mehrotra predictor-corrector, infeasible start). H must be PSD.
IpmResult ipm_core(const MatrixXd& H, const VectorXd& g, const MatrixXd& M,
                   const VectorXd& h, const VectorXd* warm_q,
                   const SolveOptions& opts) {
  const int n = static_cast<int>(g.size());
  const int m = static_cast<int>(h.size());
  IpmResult out;

  if (m == 0) {
    // Unconstrained: stationary point or unbounded descent direction.
    if (n == 0) {
      out.status = SolveStatus::Optimal;
      out.q.resize(0);
      return out;
    }
    Eigen::LDLT<MatrixXd> ldlt(H);
    VectorXd q = ldlt.solve(-g);
    if ((H * q + g).lpNorm<Eigen::Infinity>() > 1e-7 * (1.0 + g.lpNorm<Eigen::Infinity>())) {
      out.status = SolveStatus::Unbounded;
      return out;
    }
    out.status = SolveStatus::Optimal;
    out.q = q;
    return out;
  }

  VectorXd q = warm_q ? *warm_q : VectorXd::Zero(n);
  VectorXd s = (M * q - h).cwiseMax(1.0);
  VectorXd lambda = VectorXd::Ones(m);

  const double hnorm = 1.0 + h.lpNorm<Eigen::Infinity>();
  const double gnorm = 1.0 + g.lpNorm<Eigen::Infinity>();

  MatrixXd G(n, n);
  VectorXd rd(n), rp(m), w(m), rhs(n), dq(n), ds(m), dlam(m), ct(m);
  VectorXd dq_aff(n), ds_aff(m), dlam_aff(m);

  // best iterate so far, by the worst of the three scaled optimality ratios;
  // degenerate problems may stall just short of the strict target
  double best_metric = kInf;
  VectorXd best_q, best_lambda;
  double last_mu = kInf;
  int stalled = 0;

  for (int it = 0; it < opts.max_iterations; ++it) {
    rd = H * q + g - M.transpose() * lambda;
    rp = M * q - s - h;
    const double mu = s.dot(lambda) / m;
    const double obj = 0.5 * q.dot(H * q) + g.dot(q);

    const double ratio_p =
        rp.lpNorm<Eigen::Infinity>() / (opts.tol_feas * hnorm);
    const double ratio_d =
        rd.lpNorm<Eigen::Infinity>() /
        (100 * opts.tol_feas * (gnorm + lambda.lpNorm<Eigen::Infinity>()));
    const double ratio_mu = mu / (opts.tol_opt * (1.0 + std::abs(obj)));
    const double metric = std::max({ratio_p, ratio_d, ratio_mu});
    if (metric < best_metric) {
      best_metric = metric;
      best_q = q;
      best_lambda = lambda;
    }
    if (metric <= 1.0) {
      out.status = SolveStatus::Optimal;
      out.q = q;
      out.lambda = lambda;
      out.iterations = it;
      return out;
    }

    if (q.lpNorm<Eigen::Infinity>() > 1e13 || obj < -1e18) {
      out.status = ratio_p <= 1.0 ? SolveStatus::Unbounded
                                  : SolveStatus::NumericalFailure;
      out.iterations = it;
      return out;
    }

    // centering progress check; a long stall will not fix itself
    stalled = (mu > 0.95 * last_mu) ? stalled + 1 : 0;
    last_mu = mu;
    if (stalled >= 12) break;

    w = lambda.cwiseQuotient(s).cwiseMax(1e-16).cwiseMin(1e16);
    G.noalias() = M.transpose() * w.asDiagonal() * M;
    if (H.size() > 0) G += H;

    Eigen::LLT<MatrixXd> llt;
    const double gscale = 1.0 + G.trace() / n;
    double reg = 0.0;
    bool factored = false;
    for (int attempt = 0; attempt < 8 && !factored; ++attempt) {
      llt.compute(reg > 0 ? MatrixXd(G + reg * MatrixXd::Identity(n, n)) : G);
      factored = llt.info() == Eigen::Success;
      if (!factored) reg = (reg == 0.0) ? 1e-14 * gscale : reg * 100.0;
      if (reg > 1e-4 * gscale) break;
    }
    if (!factored) {
      out.status = SolveStatus::NumericalFailure;
      out.iterations = it;
      return out;
    }

    auto direction = [&](const VectorXd& compl_target) {
      // eliminate ds, dlam; see the KKT reduction in the IPM literature
      ct = (compl_target - lambda.cwiseProduct(s)).cwiseQuotient(s);
      rhs = -rd + M.transpose() * ct - M.transpose() * (w.cwiseProduct(rp));
      dq = llt.solve(rhs);
      ds = M * dq + rp;
      dlam = ct - w.cwiseProduct(ds);
    };

    auto max_step = [](const VectorXd& v, const VectorXd& dv) {
      double a = 1.0;
      for (int i = 0; i < v.size(); ++i)
        if (dv(i) < 0.0) a = std::min(a, -v(i) / dv(i));
      return a;
    };

    // predictor
    direction(VectorXd::Zero(m));
    dq_aff = dq;
    ds_aff = ds;
    dlam_aff = dlam;
    const double ap_aff = max_step(s, ds_aff);
    const double ad_aff = max_step(lambda, dlam_aff);
    const double mu_aff =
        (s + ap_aff * ds_aff).dot(lambda + ad_aff * dlam_aff) / m;
    double sigma = std::pow(mu_aff / std::max(mu, 1e-300), 3.0);
    sigma = std::clamp(sigma, 1e-8, 1.0);

    // corrector
    direction(VectorXd::Constant(m, sigma * mu) -
              ds_aff.cwiseProduct(dlam_aff));
    const double tau = 0.995;
    const double ap = std::min(1.0, tau * max_step(s, ds));
    const double ad = std::min(1.0, tau * max_step(lambda, dlam));

    q += ap * dq;
    s += ap * ds;
    lambda += ad * dlam;
  }

  // iteration cap or stall: accept the best iterate if it is within two
  // orders of the strict target (still far inside the 1e-7 KKT contract)
  if (best_metric <= 100.0) {
    out.status = SolveStatus::Optimal;
    out.q = best_q;
    out.lambda = best_lambda;
    out.iterations = opts.max_iterations;
    return out;
  }
  out.status = SolveStatus::NumericalFailure;
  out.iterations = opts.max_iterations;
  return out;
}

// ------------------------------------------------------------- sparse path
//
// Large structured programs (the tube MPC instances) go through a sparse
// augmented-KKT interior point instead of dense normal equations. Equality
// rows are kept in the KKT system with dual regularization, which keeps the
// factorization quasi-definite.

using SpMat = Eigen::SparseMatrix<double>;

struct SparseIpmResult {
  SolveStatus status = SolveStatus::NumericalFailure;
  VectorXd q, y, lambda;
  int iterations = 0;
};

SparseIpmResult ipm_sparse(const SpMat& H, const VectorXd& g, const SpMat& Aeq,
                           const VectorXd& beq, const SpMat& M, const VectorXd& h,
                           const VectorXd* warm_q, const SolveOptions& opts) {
  const int n = static_cast<int>(g.size());
  const int p = static_cast<int>(beq.size());
  const int m = static_cast<int>(h.size());
  SparseIpmResult out;

  VectorXd q = warm_q ? *warm_q : VectorXd::Zero(n);
  VectorXd y = VectorXd::Zero(p);
  VectorXd s = m > 0 ? VectorXd((M * q - h).cwiseMax(1.0)) : VectorXd();
  VectorXd lambda = VectorXd::Ones(m);

  const double hnorm = 1.0 + (m > 0 ? h.lpNorm<Eigen::Infinity>() : 0.0);
  const double bnorm = 1.0 + (p > 0 ? beq.lpNorm<Eigen::Infinity>() : 0.0);
  const double gnorm = 1.0 + g.lpNorm<Eigen::Infinity>();

  const double delta_p = 1e-8;
  const double delta_d = 1e-8;

  // static structure of the lower-triangular KKT: [q | y | u_lambda]
  std::vector<Eigen::Triplet<double>> trips;
  auto build_kkt = [&](const VectorXd& dvec) {
    trips.clear();
    for (int c = 0; c < H.outerSize(); ++c)
      for (SpMat::InnerIterator it(H, c); it; ++it)
        if (it.row() >= it.col()) trips.emplace_back(it.row(), it.col(), it.value());
    for (int i = 0; i < n; ++i) trips.emplace_back(i, i, delta_p);
    for (int c = 0; c < Aeq.outerSize(); ++c)
      for (SpMat::InnerIterator it(Aeq, c); it; ++it)
        trips.emplace_back(n + it.row(), it.col(), it.value());
    for (int i = 0; i < p; ++i) trips.emplace_back(n + i, n + i, -delta_d);
    for (int c = 0; c < M.outerSize(); ++c)
      for (SpMat::InnerIterator it(M, c); it; ++it)
        trips.emplace_back(n + p + it.row(), it.col(), it.value());
    for (int i = 0; i < m; ++i)
      trips.emplace_back(n + p + i, n + p + i, -(dvec(i) + delta_d));
    SpMat kkt(n + p + m, n + p + m);
    kkt.setFromTriplets(trips.begin(), trips.end());
    return kkt;
  };

  Eigen::SimplicialLDLT<SpMat, Eigen::Lower> ldlt;
  bool analyzed = false;

  double best_metric = kInf;
  VectorXd best_q, best_y, best_lambda;
  double last_mu = kInf;
  int stalled = 0;

  VectorXd rd(n), re(p), rp(m), ct(m);

  for (int it = 0; it < opts.max_iterations; ++it) {
    rd = g - M.transpose() * lambda;
    rd.noalias() += H * q;
    if (p > 0) rd.noalias() -= Aeq.transpose() * y;
    if (p > 0) re = Aeq * q - beq;
    if (m > 0) rp = M * q - s - h;
    const double mu = m > 0 ? s.dot(lambda) / m : 0.0;
    const double obj = 0.5 * q.dot(H * q) + g.dot(q);

    const double ratio_p =
        (m > 0 ? rp.lpNorm<Eigen::Infinity>() : 0.0) / (opts.tol_feas * hnorm);
    const double ratio_e =
        (p > 0 ? re.lpNorm<Eigen::Infinity>() : 0.0) / (opts.tol_feas * bnorm);
    const double ratio_d =
        rd.lpNorm<Eigen::Infinity>() /
        (100 * opts.tol_feas * (gnorm + lambda.lpNorm<Eigen::Infinity>()));
    const double ratio_mu = mu / (opts.tol_opt * (1.0 + std::abs(obj)));
    const double metric = std::max({ratio_p, ratio_e, ratio_d, ratio_mu});
    if (metric < best_metric) {
      best_metric = metric;
      best_q = q;
      best_y = y;
      best_lambda = lambda;
    }
    if (metric <= 1.0) {
      out.status = SolveStatus::Optimal;
      out.q = q;
      out.y = y;
      out.lambda = lambda;
      out.iterations = it;
      return out;
    }
    if (q.lpNorm<Eigen::Infinity>() > 1e13 || obj < -1e18) {
      out.status = (ratio_p <= 1.0 && ratio_e <= 1.0)
                       ? SolveStatus::Unbounded
                       : SolveStatus::NumericalFailure;
      out.iterations = it;
      return out;
    }
    stalled = (mu > 0.95 * last_mu) ? stalled + 1 : 0;
    last_mu = mu;
    if (stalled >= 12) break;

    VectorXd dvec =
        m > 0 ? VectorXd(s.cwiseQuotient(lambda).cwiseMax(1e-16).cwiseMin(1e16))
              : VectorXd();
    SpMat kkt = build_kkt(dvec);
    if (!analyzed) {
      ldlt.analyzePattern(kkt);
      analyzed = true;
    }
    ldlt.factorize(kkt);
    if (ldlt.info() != Eigen::Success) {
      out.status = SolveStatus::NumericalFailure;
      out.iterations = it;
      return out;
    }

    VectorXd rhs(n + p + m), sol(n + p + m);
    VectorXd dq(n), dy(p), dlam(m), ds(m);
    auto solve_dir = [&](const VectorXd& compl_target) {
      rhs.segment(0, n) = -rd;
      if (p > 0) rhs.segment(n, p) = -re;
      if (m > 0) {
        ct = (compl_target - lambda.cwiseProduct(s)).cwiseQuotient(lambda);
        rhs.segment(n + p, m) = -rp + ct;
      }
      sol = ldlt.solve(rhs);
      // one refinement round against the unregularized operator
      VectorXd resid = rhs;
      resid.segment(0, n) -= H * sol.segment(0, n);
      if (p > 0) {
        resid.segment(0, n) -= Aeq.transpose() * sol.segment(n, p);
        resid.segment(n, p) -= Aeq * sol.segment(0, n);
      }
      if (m > 0) {
        resid.segment(0, n) -= M.transpose() * sol.segment(n + p, m);
        resid.segment(n + p, m) -= M * sol.segment(0, n);
        resid.segment(n + p, m) +=
            dvec.cwiseProduct(sol.segment(n + p, m));
      }
      sol += ldlt.solve(resid);
      dq = sol.segment(0, n);
      dy = -sol.segment(n, p);
      dlam = -sol.segment(n + p, m);
      if (m > 0) ds = M * dq + rp;
    };

    auto max_step = [](const VectorXd& v, const VectorXd& dv) {
      double a = 1.0;
      for (int i = 0; i < v.size(); ++i)
        if (dv(i) < 0.0) a = std::min(a, -v(i) / dv(i));
      return a;
    };

    if (m == 0) {
      solve_dir(VectorXd());
      q += dq;
      y += dy;
      continue;
    }

    solve_dir(VectorXd::Zero(m));
    VectorXd dq_aff = dq, dy_aff = dy, dlam_aff = dlam, ds_aff = ds;
    const double ap_aff = max_step(s, ds_aff);
    const double ad_aff = max_step(lambda, dlam_aff);
    const double mu_aff =
        (s + ap_aff * ds_aff).dot(lambda + ad_aff * dlam_aff) / m;
    double sigma = std::pow(mu_aff / std::max(mu, 1e-300), 3.0);
    sigma = std::clamp(sigma, 1e-8, 1.0);

    solve_dir(VectorXd::Constant(m, sigma * mu) - ds_aff.cwiseProduct(dlam_aff));
    const double tau = 0.995;
    const double ap = std::min(1.0, tau * max_step(s, ds));
    const double ad = std::min(1.0, tau * max_step(lambda, dlam));
    q += ap * dq;
    s += ap * ds;
    y += ad * dy;
    lambda += ad * dlam;
  }

  if (best_metric <= 100.0) {
    out.status = SolveStatus::Optimal;
    out.q = best_q;
    out.y = best_y;
    out.lambda = best_lambda;
    out.iterations = opts.max_iterations;
    return out;
  }
  out.status = SolveStatus::NumericalFailure;
  out.iterations = opts.max_iterations;
  return out;
}

// Inequality system in reduced coordinates, with row scaling.
struct FoldedSystem {
  MatrixXd M;
  VectorXd h;
  VectorXd row_scale;           // original row / scale = stored row
  std::vector<int> origin_row;  // index into the unreduced folded rows
};

// Equality reduction x = x_p + Z q. Z has orthonormal columns.
struct Reduction {
  bool trivial = true;  // no equalities: x == q
  VectorXd x_p;
  MatrixXd Z;
  int dim = 0;

  VectorXd lift(const VectorXd& q) const {
    return trivial ? q : VectorXd(x_p + Z * q);
  }
};

struct Prepared {
  Reduction red;
  MatrixXd H;
  VectorXd g;
  FoldedSystem sys;
  bool infeasible = false;
  bool pinned = false;  // equalities fully determine x
  VectorXd pinned_x;
  double cost_offset = 0.0;
};

// Fold boxes and Ain into one >= system over x, honoring per-node bound
// overrides, then reduce by equalities.
Prepared prepare(const ConvexProgram& p, const VectorXd* lb_over,
                 const VectorXd* ub_over, const SolveOptions& opts) {
  Prepared prep;
  const int n = p.n;
  const VectorXd& lb = lb_over ? *lb_over : p.lb;
  const VectorXd& ub = ub_over ? *ub_over : p.ub;

  for (int i = 0; i < n; ++i)
    if (lb(i) > ub(i) + 1e-12) {
      prep.infeasible = true;
      return prep;
    }

  std::vector<std::pair<int, double>> box_rows;  // (var, bound) lb rows then ub
  int n_lb = 0, n_ub = 0;
  for (int i = 0; i < n; ++i) n_lb += std::isfinite(lb(i)) ? 1 : 0;
  for (int i = 0; i < n; ++i) n_ub += std::isfinite(ub(i)) ? 1 : 0;

  const int m_in = static_cast<int>(p.bin.size());
  const int m = m_in + n_lb + n_ub;
  MatrixXd M(m, n);
  VectorXd h(m);
  if (m_in > 0) {
    M.topRows(m_in) = p.Ain;
    h.head(m_in) = p.bin;
  }
  int r = m_in;
  for (int i = 0; i < n; ++i)
    if (std::isfinite(lb(i))) {
      M.row(r).setZero();
      M(r, i) = 1.0;
      h(r) = lb(i);
      ++r;
    }
  for (int i = 0; i < n; ++i)
    if (std::isfinite(ub(i))) {
      M.row(r).setZero();
      M(r, i) = -1.0;
      h(r) = -ub(i);
      ++r;
    }

  // equality reduction
  Reduction& red = prep.red;
  if (p.Aeq.rows() > 0) {
    red.trivial = false;
    Eigen::ColPivHouseholderQR<MatrixXd> qr(p.Aeq);
    red.x_p = qr.solve(p.beq);
    if ((p.Aeq * red.x_p - p.beq).lpNorm<Eigen::Infinity>() >
        1e-8 * (1.0 + p.beq.lpNorm<Eigen::Infinity>())) {
      prep.infeasible = true;
      return prep;
    }
    Eigen::FullPivLU<MatrixXd> lu(p.Aeq);
    lu.setThreshold(1e-10);
    const int dk = static_cast<int>(lu.dimensionOfKernel());
    if (dk == 0) {
      prep.pinned = true;
      prep.pinned_x = red.x_p;
      prep.infeasible = ((M * red.x_p - h).minCoeff() < -opts.tol_feas * 1e3 *
                         (1.0 + h.lpNorm<Eigen::Infinity>()));
      // exact tolerance checked by caller against folded rows
      prep.infeasible = false;
      for (int i = 0; i < m; ++i)
        if (M.row(i).dot(red.x_p) < h(i) - 1e-7 * (1.0 + std::abs(h(i))))
          prep.infeasible = true;
      return prep;
    }
    MatrixXd ker = lu.kernel();
    Eigen::HouseholderQR<MatrixXd> kqr(ker);
    red.Z = kqr.householderQ() * MatrixXd::Identity(n, dk);
    red.dim = dk;
  } else {
    red.trivial = true;
    red.dim = n;
  }

  // reduced cost
  if (red.trivial) {
    prep.H = p.has_quadratic_cost() ? p.Q : MatrixXd::Zero(n, n);
    prep.g = p.c;
  } else {
    if (p.has_quadratic_cost()) {
      prep.H = red.Z.transpose() * p.Q * red.Z;
      prep.g = red.Z.transpose() * (p.c + p.Q * red.x_p);
      prep.cost_offset = 0.5 * red.x_p.dot(p.Q * red.x_p) + p.c.dot(red.x_p);
    } else {
      prep.H = MatrixXd::Zero(red.dim, red.dim);
      prep.g = red.Z.transpose() * p.c;
      prep.cost_offset = p.c.dot(red.x_p);
    }
  }

  // reduced inequality system; rows that became constant on the feasible
  // affine subspace are decided here instead of stalling the interior point
  FoldedSystem& sys = prep.sys;
  MatrixXd Mr;
  VectorXd hr;
  if (red.trivial) {
    Mr = std::move(M);
    hr = std::move(h);
  } else {
    Mr = M * red.Z;
    hr = h - M * red.x_p;
  }
  std::vector<int> keep;
  for (int i = 0; i < Mr.rows(); ++i) {
    if (Mr.row(i).lpNorm<Eigen::Infinity>() > 1e-10) {
      keep.push_back(i);
    } else if (hr(i) > 1e-7 * (1.0 + std::abs(hr(i)))) {
      prep.infeasible = true;  // constant row demands the impossible
      return prep;
    }
  }
  sys.M.resize(keep.size(), Mr.cols());
  sys.h.resize(keep.size());
  for (size_t i = 0; i < keep.size(); ++i) {
    sys.M.row(i) = Mr.row(keep[i]);
    sys.h(i) = hr(keep[i]);
  }
  sys.row_scale.resize(sys.M.rows());
  for (int i = 0; i < sys.M.rows(); ++i) {
    double d = sys.M.row(i).lpNorm<Eigen::Infinity>();
    d = std::clamp(d, 1e-8, 1e8);
    sys.row_scale(i) = d;
    sys.M.row(i) /= d;
    sys.h(i) /= d;
  }
  return prep;
}

Solution finish(const ConvexProgram& p, const Prepared& prep,
                const IpmResult& res) {
  Solution sol;
  sol.status = res.status;
  sol.iterations = res.iterations;
  if (res.status != SolveStatus::Optimal) return sol;
  sol.x = prep.red.lift(res.q);
  sol.value = p.objective(sol.x);

  // KKT residual in reduced coordinates: stationarity + worst primal violation
  const VectorXd grad = prep.H * res.q + prep.g;
  double stat = 0.0;
  if (res.lambda.size() > 0) {
    stat = (grad - prep.sys.M.transpose() * res.lambda).lpNorm<Eigen::Infinity>();
    const VectorXd slack = prep.sys.M * res.q - prep.sys.h;
    const double pviol = std::max(0.0, -slack.minCoeff());
    sol.kkt_residual = std::max(stat, pviol);
  } else {
    sol.kkt_residual = grad.lpNorm<Eigen::Infinity>();
  }
  return sol;
}

// Phase 1: margin LP  min t  s.t.  Mq + 1 t >= h, t >= -1.
// Always feasible and bounded; t* <= 0 certifies feasibility with margin.
IpmResult phase1(const MatrixXd& M, const VectorXd& h, const SolveOptions& opts,
                 double* margin) {
  const int n = static_cast<int>(M.cols());
  const int m = static_cast<int>(h.size());
  MatrixXd M1(m + 1, n + 1);
  M1.setZero();
  M1.topLeftCorner(m, n) = M;
  M1.col(n).head(m).setOnes();
  M1(m, n) = 1.0;
  VectorXd h1(m + 1);
  h1.head(m) = h;
  h1(m) = -1.0;
  VectorXd g = VectorXd::Zero(n + 1);
  g(n) = 1.0;
  VectorXd q0 = VectorXd::Zero(n + 1);
  q0(n) = (m > 0 ? std::max(0.0, h.maxCoeff()) : 0.0) + 1.0;
  MatrixXd H0 = MatrixXd::Zero(n + 1, n + 1);
  // feasibility only needs the margin to ~1e-8; do not inherit ultra-tight
  // caller tolerances here
  SolveOptions p1o = opts;
  p1o.tol_feas = std::max(opts.tol_feas, 1e-9);
  p1o.tol_opt = std::max(opts.tol_opt, 1e-10);
  IpmResult r = ipm_core(H0, g, M1, h1, &q0, p1o);
  if (r.status == SolveStatus::Optimal && margin) *margin = r.q(n);
  return r;
}

// Full sparse pipeline: fold bounds into rows, margin-LP feasibility phase,
// then the sparse interior point on the original variables.
Solution solve_sparse(const ConvexProgram& p, const VectorXd& lb,
                      const VectorXd& ub, const SolveOptions& opts) {
  Solution sol;
  const int n = p.n;

  std::vector<Eigen::Triplet<double>> trips;
  int m = 0;
  std::vector<double> hs;
  auto add_row = [&](const auto& fill, double rhs) {
    fill(m);
    hs.push_back(rhs);
    ++m;
  };
  for (int r = 0; r < p.Ain.rows(); ++r) {
    double scale = std::clamp(p.Ain.row(r).lpNorm<Eigen::Infinity>(), 1e-8, 1e8);
    add_row(
        [&](int row) {
          for (int c = 0; c < n; ++c)
            if (p.Ain(r, c) != 0.0) trips.emplace_back(row, c, p.Ain(r, c) / scale);
        },
        p.bin(r) / scale);
  }
  for (int i = 0; i < n; ++i) {
    if (std::isfinite(lb(i)))
      add_row([&](int row) { trips.emplace_back(row, i, 1.0); }, lb(i));
    if (std::isfinite(ub(i)))
      add_row([&](int row) { trips.emplace_back(row, i, -1.0); }, -ub(i));
  }
  SpMat M(m, n);
  M.setFromTriplets(trips.begin(), trips.end());
  VectorXd h = Eigen::Map<VectorXd>(hs.data(), m);

  SpMat H(n, n);
  if (p.has_quadratic_cost()) {
    trips.clear();
    for (int r = 0; r < n; ++r)
      for (int c = 0; c < n; ++c)
        if (p.Q(r, c) != 0.0) trips.emplace_back(r, c, p.Q(r, c));
    H.setFromTriplets(trips.begin(), trips.end());
  }
  SpMat Aeq(p.Aeq.rows(), n);
  if (p.Aeq.rows() > 0) {
    trips.clear();
    for (int r = 0; r < p.Aeq.rows(); ++r)
      for (int c = 0; c < n; ++c)
        if (p.Aeq(r, c) != 0.0) trips.emplace_back(r, c, p.Aeq(r, c));
    Aeq.setFromTriplets(trips.begin(), trips.end());
  }
  const VectorXd beq = p.beq.size() > 0 ? p.beq : VectorXd();

  // phase 1: min t s.t. Mq + 1t >= h, t >= -1, Aeq q = beq
  VectorXd q0;
  {
    SpMat M1(m + 1, n + 1);
    trips.clear();
    for (int c = 0; c < M.outerSize(); ++c)
      for (SpMat::InnerIterator it(M, c); it; ++it)
        trips.emplace_back(it.row(), it.col(), it.value());
    for (int r = 0; r < m; ++r) trips.emplace_back(r, n, 1.0);
    trips.emplace_back(m, n, 1.0);
    M1.setFromTriplets(trips.begin(), trips.end());
    VectorXd h1(m + 1);
    h1.head(m) = h;
    h1(m) = -1.0;
    SpMat H1(n + 1, n + 1);
    SpMat Aeq1(Aeq.rows(), n + 1);
    if (Aeq.rows() > 0) {
      trips.clear();
      for (int c = 0; c < Aeq.outerSize(); ++c)
        for (SpMat::InnerIterator it(Aeq, c); it; ++it)
          trips.emplace_back(it.row(), it.col(), it.value());
      Aeq1.setFromTriplets(trips.begin(), trips.end());
    }
    VectorXd g1 = VectorXd::Zero(n + 1);
    g1(n) = 1.0;
    VectorXd start = VectorXd::Zero(n + 1);
    start(n) = (m > 0 ? std::max(0.0, h.maxCoeff()) : 0.0) + 1.0;
    SolveOptions p1o = opts;
    p1o.tol_feas = std::max(opts.tol_feas, 1e-9);
    p1o.tol_opt = std::max(opts.tol_opt, 1e-10);
    auto r1 = ipm_sparse(H1, g1, Aeq1, beq, M1, h1, &start, p1o);
    if (r1.status != SolveStatus::Optimal) {
      sol.status = SolveStatus::NumericalFailure;
      sol.reason = "phase-1 did not converge";
      return sol;
    }
    if (r1.q(n) > 1e-7) {
      sol.status = SolveStatus::Infeasible;
      std::ostringstream os;
      os << "phase-1 margin " << r1.q(n);
      sol.reason = os.str();
      return sol;
    }
    q0 = r1.q.head(n);
  }

  auto r2 = ipm_sparse(H, p.c, Aeq, beq, M, h, &q0, opts);
  if (r2.status == SolveStatus::Optimal) {
    sol.status = SolveStatus::Optimal;
    sol.x = r2.q;
    sol.value = p.objective(sol.x);
    sol.iterations = r2.iterations;
    VectorXd grad = p.c;
    if (p.has_quadratic_cost()) grad += p.Q * sol.x;
    VectorXd stat = grad - M.transpose() * r2.lambda;
    if (Aeq.rows() > 0) stat -= Aeq.transpose() * r2.y;
    const VectorXd slack = M * sol.x - h;
    sol.kkt_residual = std::max(stat.lpNorm<Eigen::Infinity>(),
                                std::max(0.0, -slack.minCoeff()));
    return sol;
  }
  sol.status = r2.status == SolveStatus::Unbounded ? SolveStatus::Unbounded
                                                   : SolveStatus::NumericalFailure;
  if (sol.status == SolveStatus::NumericalFailure)
    sol.reason = "interior point iteration cap";
  sol.iterations = r2.iterations;
  return sol;
}

Solution solve_relaxation_dense(const ConvexProgram& p, const VectorXd* lb_over,
                                const VectorXd* ub_over, const SolveOptions& opts) {
  Solution sol;
  Prepared prep = prepare(p, lb_over, ub_over, opts);
  if (prep.infeasible) {
    sol.status = SolveStatus::Infeasible;
    sol.reason = "bounds or equalities inconsistent";
    return sol;
  }
  if (prep.pinned) {
    sol.status = SolveStatus::Optimal;
    sol.x = prep.pinned_x;
    sol.value = p.objective(sol.x);
    return sol;
  }

  double margin = 0.0;
  IpmResult p1 = phase1(prep.sys.M, prep.sys.h, opts, &margin);
  if (p1.status != SolveStatus::Optimal) {
    sol.status = SolveStatus::NumericalFailure;
    sol.reason = "phase-1 did not converge";
    return sol;
  }
  if (margin > 1e-7) {
    sol.status = SolveStatus::Infeasible;
    std::ostringstream os;
    os << "phase-1 margin " << margin;
    sol.reason = os.str();
    return sol;
  }

  VectorXd q0 = p1.q.head(prep.red.dim);
  IpmResult p2 = ipm_core(prep.H, prep.g, prep.sys.M, prep.sys.h, &q0, opts);
  if (p2.status == SolveStatus::Infeasible) {
    // phase-1 said feasible; trust it and flag numerics instead
    p2.status = SolveStatus::NumericalFailure;
  }
  Solution out = finish(p, prep, p2);
  if (out.status == SolveStatus::NumericalFailure)
    out.reason = "interior point iteration cap";
  return out;
}

// Variables fixed by their bounds (branch-and-bound does this constantly) are
// substituted out before any factorization work.
Solution solve_relaxation(const ConvexProgram& p, const VectorXd* lb_over,
                          const VectorXd* ub_over, const SolveOptions& opts) {
  const VectorXd& lb = lb_over ? *lb_over : p.lb;
  const VectorXd& ub = ub_over ? *ub_over : p.ub;
  const int n = p.n;

  std::vector<int> free_idx;
  std::vector<int> pin_idx;
  free_idx.reserve(n);
  for (int i = 0; i < n; ++i) {
    if (lb(i) > ub(i) + 1e-12) {
      Solution bad;
      bad.status = SolveStatus::Infeasible;
      bad.reason = "crossed bounds";
      return bad;
    }
    if (lb(i) == ub(i))
      pin_idx.push_back(i);
    else
      free_idx.push_back(i);
  }

  if (!pin_idx.empty()) {
    const int nf = static_cast<int>(free_idx.size());
    VectorXd xfix = VectorXd::Zero(n);
    for (int i : pin_idx) xfix(i) = lb(i);

    ConvexProgram q = ConvexProgram::make(nf);
    if (p.has_quadratic_cost()) {
      q.Q.resize(nf, nf);
      for (int a = 0; a < nf; ++a)
        for (int b = 0; b < nf; ++b) q.Q(a, b) = p.Q(free_idx[a], free_idx[b]);
      const VectorXd qc = p.Q * xfix;
      for (int a = 0; a < nf; ++a) q.c(a) = p.c(free_idx[a]) + qc(free_idx[a]);
    } else {
      for (int a = 0; a < nf; ++a) q.c(a) = p.c(free_idx[a]);
    }
    for (int a = 0; a < nf; ++a) {
      q.lb(a) = lb(free_idx[a]);
      q.ub(a) = ub(free_idx[a]);
    }
    if (p.Aeq.rows() > 0) {
      q.Aeq.resize(p.Aeq.rows(), nf);
      for (int a = 0; a < nf; ++a) q.Aeq.col(a) = p.Aeq.col(free_idx[a]);
      q.beq = p.beq - p.Aeq * xfix;
    }
    if (p.Ain.rows() > 0) {
      q.Ain.resize(p.Ain.rows(), nf);
      for (int a = 0; a < nf; ++a) q.Ain.col(a) = p.Ain.col(free_idx[a]);
      q.bin = p.bin - p.Ain * xfix;
    }
    if (nf == 0) {
      // fully pinned: just check the rows
      Solution sol;
      bool ok = true;
      if (p.Aeq.rows() > 0)
        ok = ok && (p.Aeq * xfix - p.beq).lpNorm<Eigen::Infinity>() <=
                       1e-7 * (1.0 + p.beq.lpNorm<Eigen::Infinity>());
      if (p.Ain.rows() > 0) ok = ok && ((p.Ain * xfix - p.bin).minCoeff() >= -1e-7);
      sol.status = ok ? SolveStatus::Optimal : SolveStatus::Infeasible;
      if (ok) {
        sol.x = xfix;
        sol.value = p.objective(xfix);
      }
      return sol;
    }
    Solution inner = solve_relaxation(q, nullptr, nullptr, opts);
    if (!inner.optimal()) return inner;
    Solution sol = inner;
    sol.x = xfix;
    for (int a = 0; a < nf; ++a) sol.x(free_idx[a]) = inner.x(a);
    sol.value = p.objective(sol.x);
    return sol;
  }

  // route by size: structured MPC-scale programs use the sparse KKT path
  const int rows = static_cast<int>(p.Ain.rows() + p.Aeq.rows());
  if (n >= 120 || rows >= 240) return solve_sparse(p, lb, ub, opts);
  return solve_relaxation_dense(p, lb_over, ub_over, opts);
}

// most fractional binary within the lowest priority class that still has a
// fractional entry (deterministic: ties by lowest index), or -1
int pick_branch_var(const ConvexProgram& p, const VectorXd& x, double tol,
                    const std::function<int(int)>& branch_class) {
  int best = -1;
  int best_class = std::numeric_limits<int>::max();
  double best_dist = 0.0;
  for (int j : p.binaries) {
    const double d = std::abs(x(j) - std::round(x(j)));
    if (d <= tol) continue;
    const int cls = branch_class ? branch_class(j) : 0;
    if (cls < best_class || (cls == best_class && d > best_dist)) {
      best_class = cls;
      best_dist = d;
      best = j;
    }
  }
  return best;
}

}  // namespace

ConvexProgram ConvexProgram::make(int nvars) {
  ConvexProgram p;
  p.n = nvars;
  p.c = VectorXd::Zero(nvars);
  p.lb = VectorXd::Constant(nvars, -kInf);
  p.ub = VectorXd::Constant(nvars, kInf);
  return p;
}

double ConvexProgram::objective(const Eigen::VectorXd& x) const {
  double v = c.dot(x);
  if (has_quadratic_cost()) v += 0.5 * x.dot(Q * x);
  return v;
}

void ConvexProgram::validate() const {
  if (n < 0) fail(Errc::InvalidRange, "negative variable count");
  if (c.size() != n) fail(Errc::InvalidRange, "cost vector size mismatch");
  if (lb.size() != n || ub.size() != n)
    fail(Errc::InvalidRange, "bound vector size mismatch");
  if (has_quadratic_cost()) {
    if (Q.rows() != n || Q.cols() != n)
      fail(Errc::InvalidRange, "Q dimension mismatch");
    const double asym = (Q - Q.transpose()).lpNorm<Eigen::Infinity>();
    if (asym > 1e-9 * (1.0 + Q.lpNorm<Eigen::Infinity>()))
      fail(Errc::InvalidRange, "Q not symmetric");
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(Q, Eigen::EigenvaluesOnly);
    const double lo = es.eigenvalues().minCoeff();
    const double hi = std::max(1.0, es.eigenvalues().maxCoeff());
    if (lo < -1e-9 * hi) fail(Errc::InvalidRange, "Q not positive semidefinite");
  }
  if (Aeq.rows() > 0 && (Aeq.cols() != n || beq.size() != Aeq.rows()))
    fail(Errc::InvalidRange, "equality block dimension mismatch");
  if (Ain.rows() > 0 && (Ain.cols() != n || bin.size() != Ain.rows()))
    fail(Errc::InvalidRange, "inequality block dimension mismatch");
  for (int j : binaries)
    if (j < 0 || j >= n) fail(Errc::InvalidRange, "binary index out of range");
}

std::string ConvexProgram::dump(const std::vector<std::string>* names) const {
  auto var = [&](int j) {
    if (names && j < static_cast<int>(names->size())) return (*names)[j];
    return "x" + std::to_string(j);
  };
  std::ostringstream os;
  os << "minimize\n  ";
  bool first = true;
  if (has_quadratic_cost()) {
    for (int i = 0; i < n; ++i)
      if (Q(i, i) != 0.0) {
        os << (first ? "" : " + ") << 0.5 * Q(i, i) << " " << var(i) << "^2";
        first = false;
      }
  }
  for (int i = 0; i < n; ++i)
    if (c(i) != 0.0) {
      os << (first ? "" : " + ") << c(i) << " " << var(i);
      first = false;
    }
  if (first) os << "0";
  os << "\nsubject to\n";
  for (int r = 0; r < Aeq.rows(); ++r) {
    os << "  ";
    bool f2 = true;
    for (int j = 0; j < n; ++j)
      if (Aeq(r, j) != 0.0) {
        os << (f2 ? "" : " + ") << Aeq(r, j) << " " << var(j);
        f2 = false;
      }
    os << " = " << beq(r) << "\n";
  }
  for (int r = 0; r < Ain.rows(); ++r) {
    os << "  ";
    bool f2 = true;
    for (int j = 0; j < n; ++j)
      if (Ain(r, j) != 0.0) {
        os << (f2 ? "" : " + ") << Ain(r, j) << " " << var(j);
        f2 = false;
      }
    os << " >= " << bin(r) << "\n";
  }
  os << "bounds\n";
  for (int j = 0; j < n; ++j)
    os << "  " << lb(j) << " <= " << var(j) << " <= " << ub(j) << "\n";
  if (!binaries.empty()) {
    os << "binary\n ";
    for (int j : binaries) os << " " << var(j);
    os << "\n";
  }
  return os.str();
}

const char* status_name(SolveStatus s) {
  switch (s) {
    case SolveStatus::Optimal: return "optimal";
    case SolveStatus::Infeasible: return "infeasible";
    case SolveStatus::Unbounded: return "unbounded";
    case SolveStatus::NumericalFailure: return "numerical_failure";
    case SolveStatus::NodeLimit: return "node_limit";
  }
  return "?";
}

Solution solve_convex(const ConvexProgram& p, const SolveOptions& opts) {
  p.validate();
  return solve_relaxation(p, nullptr, nullptr, opts);
}

Solution solve_micqp(const ConvexProgram& p, const SolveOptions& opts) {
  p.validate();
  if (p.binaries.empty()) return solve_relaxation(p, nullptr, nullptr, opts);

  VectorXd lb = p.lb, ub = p.ub;
  for (int j : p.binaries) {
    lb(j) = std::max(lb(j), 0.0);
    ub(j) = std::min(ub(j), 1.0);
  }

  struct Node {
    double bound;
    long seq;
    std::vector<std::pair<int, double>> fixes;  // var -> value
    // best-first on the bound; equal bounds pop newest-first, which plunges
    // depth-first through plateaus until an incumbent prunes them
    bool operator>(const Node& o) const {
      if (bound != o.bound) return bound > o.bound;
      return seq < o.seq;
    }
  };
  std::priority_queue<Node, std::vector<Node>, std::greater<Node>> queue;
  long seq = 0;
  long nodes = 0;

  bool have_incumbent = false;
  Solution incumbent;

  auto solve_node = [&](const std::vector<std::pair<int, double>>& fixes) {
    VectorXd l = lb, u = ub;
    for (auto& [j, v] : fixes) {
      l(j) = v;
      u(j) = v;
    }
    return solve_relaxation(p, &l, &u, opts);
  };

  auto try_incumbent = [&](const Solution& cand) {
    if (!cand.optimal()) return;
    if (!have_incumbent || cand.value < incumbent.value) {
      incumbent = cand;
      have_incumbent = true;
    }
  };

  // re-solve with all binaries fixed to the rounding of `relax`; used both to
  // polish an integral relaxation and as the root heuristic. `relax` itself is
  // only a valid incumbent when it was already integral.
  auto snap = [&](const Solution& relax,
                  const std::vector<std::pair<int, double>>& fixes,
                  bool relax_integral) {
    std::vector<std::pair<int, double>> f = fixes;
    for (int j : p.binaries) f.emplace_back(j, std::round(relax.x(j)));
    ++nodes;
    Solution s = solve_node(f);
    if (s.optimal())
      try_incumbent(s);
    else if (relax_integral)
      try_incumbent(relax);
  };

  auto cutoff = [&]() {
    return incumbent.value - opts.gap_abs -
           opts.gap_rel * std::abs(incumbent.value) -
           1e-12 * std::abs(incumbent.value);
  };

  // dive-and-fix: follow the relaxation, batch-fixing near-decided binaries
  // and rounding the most fractional one up (down on failure) until integral
  auto dive = [&](std::vector<std::pair<int, double>> fixes) {
    std::vector<bool> fixed(p.n, false);
    for (auto& [j, v] : fixes) fixed[j] = true;
    for (int round = 0; round < opts.dive_limit; ++round) {
      ++nodes;
      Solution sol = solve_node(fixes);
      if (!sol.optimal()) return;
      if (opts.dive_finisher) {
        auto finish = opts.dive_finisher(sol.x);
        bool any_new = false;
        for (auto& [j, v] : finish) {
          if (fixed[j]) continue;
          fixes.emplace_back(j, v);
          fixed[j] = true;
          any_new = true;
        }
        if (any_new) continue;  // re-solve with the finishing batch applied
      }
      int frac = -1;
      int frac_class = std::numeric_limits<int>::max();
      double frac_dist = -1.0;
      for (int j : p.binaries) {
        if (fixed[j]) continue;
        const double v = sol.x(j);
        const double d = std::abs(v - std::round(v));
        if (d <= 0.01) {
          fixes.emplace_back(j, std::round(v));
          fixed[j] = true;
          continue;
        }
        const int cls = opts.branch_class ? opts.branch_class(j) : 0;
        if (cls < frac_class || (cls == frac_class && d > frac_dist)) {
          frac_class = cls;
          frac_dist = d;
          frac = j;
        }
      }
      if (frac < 0) {
        ++nodes;
        Solution done = solve_node(fixes);
        if (done.optimal()) try_incumbent(done);
        return;
      }
      const double nearest = std::round(sol.x(frac));
      fixes.emplace_back(frac, nearest);
      fixed[frac] = true;
      ++nodes;
      Solution probe = solve_node(fixes);
      if (!probe.optimal()) fixes.back().second = 1.0 - nearest;  // flip
    }
  };

  // root
  ++nodes;
  Solution root = solve_node({});
  if (root.status == SolveStatus::Unbounded) return root;
  if (!root.optimal()) {
    root.nodes = nodes;
    return root;
  }

  int j0 = pick_branch_var(p, root.x, opts.integrality_tol, opts.branch_class);
  if (j0 < 0) {
    snap(root, {}, true);
    if (have_incumbent) {
      incumbent.status = SolveStatus::Optimal;
      incumbent.nodes = nodes;
      return incumbent;
    }
  } else {
    // incumbent probes: caller rounding (possibly partial, finished by a
    // dive), plain rounding, then a cold dive
    if (opts.incumbent_hint) {
      std::vector<std::pair<int, double>> fixes = opts.incumbent_hint(root.x);
      ++nodes;
      Solution hinted = solve_node(fixes);
      if (hinted.optimal()) {
        if (pick_branch_var(p, hinted.x, opts.integrality_tol, opts.branch_class) < 0)
          snap(hinted, fixes, true);
        else if (opts.dive_limit > 0)
          dive(std::move(fixes));
      }
    }
    if (!have_incumbent) snap(root, {}, false);
    if (!have_incumbent && opts.dive_limit > 0) dive({});
    queue.push(Node{root.value, seq++, {{j0, 0.0}}});
    queue.push(Node{root.value, seq++, {{j0, 1.0}}});
  }

  Solution limit_hit;
  while (!queue.empty()) {
    Node node = queue.top();
    queue.pop();
    if (have_incumbent && node.bound >= cutoff()) continue;
    if (nodes >= opts.node_limit) {
      if (opts.return_incumbent_on_node_limit && have_incumbent) {
        incumbent.status = SolveStatus::Optimal;
        incumbent.nodes = nodes;
        incumbent.reason = "node budget reached; best incumbent returned";
        return incumbent;
      }
      limit_hit.status = SolveStatus::NodeLimit;
      limit_hit.reason = "node limit exceeded";
      limit_hit.nodes = nodes;
      if (have_incumbent) {
        limit_hit.x = incumbent.x;
        limit_hit.value = incumbent.value;
      }
      return limit_hit;
    }
    ++nodes;
    Solution sol = solve_node(node.fixes);
    if (sol.status == SolveStatus::Unbounded) {
      sol.nodes = nodes;
      return sol;
    }
    if (!sol.optimal()) continue;
    if (have_incumbent && sol.value >= cutoff()) continue;
    const int j = pick_branch_var(p, sol.x, opts.integrality_tol, opts.branch_class);
    if (j < 0) {
      snap(sol, node.fixes, true);
      continue;
    }
    auto f0 = node.fixes;
    f0.emplace_back(j, 0.0);
    auto f1 = node.fixes;
    f1.emplace_back(j, 1.0);
    queue.push(Node{sol.value, seq++, std::move(f0)});
    queue.push(Node{sol.value, seq++, std::move(f1)});
  }

  if (have_incumbent) {
    incumbent.status = SolveStatus::Optimal;
    incumbent.nodes = nodes;
    return incumbent;
  }
  Solution none;
  none.status = SolveStatus::Infeasible;
  none.reason = "all branch-and-bound nodes pruned";
  none.nodes = nodes;
  return none;
}

double PwlOverapprox::eval(double rho) const {
  double v = -kInf;
  for (int s = 0; s < segments(); ++s)
    v = std::max(v, slopes(s) * rho + intercepts(s));
  return v;
}

namespace {

PwlOverapprox chords_of(double n, const VectorXd& bp,
                        const std::function<double(double)>& curve) {
  PwlOverapprox out;
  const int S = static_cast<int>(bp.size()) - 1;
  out.breakpoints = bp;
  out.slopes.resize(S);
  out.intercepts.resize(S);
  out.dim_n = n;
  double gap = 0.0;
  for (int s = 0; s < S; ++s) {
    const double r0 = bp(s), r1 = bp(s + 1);
    const double f0 = curve(r0), f1 = curve(r1);
    const double slope = (f1 - f0) / (r1 - r0);
    out.slopes(s) = slope;
    out.intercepts(s) = f0 - slope * r0;
    // the gap to n/rho^2 is maximal where the derivatives match
    if (slope < 0.0) {
      double rstar = std::cbrt(-2.0 * n / slope);
      rstar = std::clamp(rstar, r0, r1);
      gap = std::max(gap, out.slopes(s) * rstar + out.intercepts(s) - n / (rstar * rstar));
    }
  }
  out.max_gap = gap;
  return out;
}

VectorXd geometric(double lo, double hi, int S) {
  VectorXd bp(S + 1);
  const double ratio = std::pow(hi / lo, 1.0 / S);
  bp(0) = lo;
  for (int s = 1; s < S; ++s) bp(s) = bp(s - 1) * ratio;
  bp(S) = hi;
  return bp;
}

}  // namespace

PwlOverapprox pwl_overapprox(double n, double eps, double rho_max, int segments) {
  if (!(n > 0.0) || !(eps > 0.0) || !(eps < rho_max) || segments < 1)
    fail(Errc::InvalidRange, "pwl_overapprox requires 0 < eps < rho_max, n > 0, S >= 1");
  return chords_of(n, geometric(eps, rho_max, segments),
                   [n](double rho) { return n / (rho * rho); });
}

PwlOverapprox pwl_overapprox_quadratic(double n, double a, double b, double r_lo,
                                       double r_hi, int segments) {
  if (!(n > 0.0) || !(a < 0.0) || !(0.0 < r_lo) || !(r_lo < r_hi) || !(r_hi < b) ||
      segments < 1)
    fail(Errc::InvalidRange, "quadratic risk substitute parameters out of range");
  const double rho_lo = std::sqrt((b - r_hi) / (-a));
  const double rho_hi = std::sqrt((b - r_lo) / (-a));
  VectorXd bp = geometric(rho_lo, rho_hi, segments);
  // the substitute is only admissible where the parabola dominates n/rho^2;
  // the secants below then sit between n/rho^2 and the parabola, so they are
  // sound and never tighter than the substitute itself
  for (int i = 0; i < bp.size(); ++i) {
    const double rho = bp(i);
    if (a * rho * rho + b < n / (rho * rho) - 1e-9)
      fail(Errc::InvalidRange, "quadratic substitute does not dominate n/rho^2");
  }
  return chords_of(n, bp, [n](double rho) { return n / (rho * rho); });
}

}  // namespace stlfleet::optimizer
