#include <doctest.h>

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "stlfleet/errors.hpp"
#include "stlfleet/optimizer.hpp"

using namespace stlfleet;
using namespace stlfleet::optimizer;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

// slow projected-gradient reference for box-constrained QPs; independent of
// the interior-point path it cross-checks
double projected_gradient_value(const ConvexProgram& p, int iters = 200000) {
  VectorXd x = 0.5 * (p.lb + p.ub);
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(p.Q, Eigen::EigenvaluesOnly);
  const double step = 1.0 / std::max(es.eigenvalues().maxCoeff(), 1e-6);
  for (int it = 0; it < iters; ++it) {
    VectorXd g = p.Q * x + p.c;
    x = (x - step * g).cwiseMax(p.lb).cwiseMin(p.ub);
  }
  return p.objective(x);
}

// exhaustive assignment oracle: min total cost over injective subspec->agent
double enumerate_assignment(const MatrixXd& cost,
                            const std::vector<std::vector<bool>>& mask,
                            bool* feasible) {
  const int agents = static_cast<int>(cost.rows());
  const int subs = static_cast<int>(cost.cols());
  double best = std::numeric_limits<double>::infinity();
  std::vector<bool> used(agents, false);
  std::function<void(int, double)> rec = [&](int j, double acc) {
    if (j == subs) {
      best = std::min(best, acc);
      return;
    }
    for (int i = 0; i < agents; ++i) {
      if (used[i] || !mask[i][j]) continue;
      used[i] = true;
      rec(j + 1, acc + cost(i, j));
      used[i] = false;
    }
  };
  rec(0, 0.0);
  *feasible = std::isfinite(best);
  return best;
}

}  // namespace

TEST_CASE("solve_convex: one-variable LP") {
  auto p = ConvexProgram::make(1);
  p.c(0) = 1.0;
  p.Ain = MatrixXd::Constant(1, 1, 1.0);
  p.bin = VectorXd::Constant(1, 3.0);
  auto sol = solve_convex(p);
  REQUIRE(sol.optimal());
  CHECK(sol.x(0) == doctest::Approx(3.0).epsilon(1e-8));
  CHECK(sol.value == doctest::Approx(3.0).epsilon(1e-8));
  CHECK(sol.kkt_residual <= 1e-7);
}

TEST_CASE("solve_convex: min ||x||^2 on the unit-sum hyperplane") {
  auto p = ConvexProgram::make(4);
  p.Q = 2.0 * MatrixXd::Identity(4, 4);
  p.Aeq = MatrixXd::Constant(1, 4, 1.0);
  p.beq = VectorXd::Constant(1, 1.0);
  auto sol = solve_convex(p);
  REQUIRE(sol.optimal());
  for (int i = 0; i < 4; ++i) CHECK(sol.x(i) == doctest::Approx(0.25).epsilon(1e-7));
  CHECK(sol.value == doctest::Approx(0.25).epsilon(1e-7));
}

TEST_CASE("solve_convex: infeasible and unbounded detection") {
  auto p = ConvexProgram::make(1);
  p.Ain = MatrixXd::Zero(2, 1);
  p.Ain(0, 0) = 1.0;   // x >= 1
  p.Ain(1, 0) = -1.0;  // x <= 0
  p.bin = VectorXd::Zero(2);
  p.bin(0) = 1.0;
  CHECK(solve_convex(p).status == SolveStatus::Infeasible);

  auto q = ConvexProgram::make(1);
  q.c(0) = -1.0;
  q.Ain = MatrixXd::Constant(1, 1, 1.0);
  q.bin = VectorXd::Constant(1, 0.0);
  CHECK(solve_convex(q).status == SolveStatus::Unbounded);
}

TEST_CASE("solve_convex: random box QPs match a projected-gradient oracle") {
  std::mt19937_64 gen(42);
  std::uniform_real_distribution<double> unif(-1.0, 1.0);
  for (int trial = 0; trial < 12; ++trial) {
    const int n = 3 + static_cast<int>(gen() % 4);
    MatrixXd A(n, n);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) A(i, j) = unif(gen);
    auto p = ConvexProgram::make(n);
    p.Q = A.transpose() * A + 0.1 * MatrixXd::Identity(n, n);
    for (int i = 0; i < n; ++i) {
      p.c(i) = unif(gen);
      p.lb(i) = -1.0 + 0.2 * unif(gen);
      p.ub(i) = 1.0 + 0.2 * unif(gen);
    }
    auto sol = solve_convex(p);
    REQUIRE(sol.optimal());
    CHECK(sol.value == doctest::Approx(projected_gradient_value(p)).epsilon(1e-5));
    CHECK(sol.kkt_residual <= 1e-7);
  }
}

TEST_CASE("solve_micqp: degenerates to solve_convex without binaries") {
  auto p = ConvexProgram::make(2);
  p.Q = MatrixXd::Identity(2, 2);
  p.c << -1.0, -2.0;
  p.lb.setConstant(-5.0);
  p.ub.setConstant(5.0);
  auto a = solve_convex(p);
  auto b = solve_micqp(p);
  REQUIRE(a.optimal());
  REQUIRE(b.optimal());
  CHECK(a.value == doctest::Approx(b.value).epsilon(1e-12));
}

TEST_CASE("solve_micqp: contradictory rows are infeasible") {
  auto p = ConvexProgram::make(1);
  p.binaries = {0};
  p.Ain = MatrixXd::Zero(2, 1);
  p.Ain(0, 0) = 1.0;
  p.Ain(1, 0) = -1.0;
  p.bin = VectorXd::Zero(2);
  p.bin(0) = 0.75;  // x >= 0.75 and x <= 0.25 with x binary
  p.bin(1) = -0.25;
  CHECK(solve_micqp(p).status == SolveStatus::Infeasible);
}

TEST_CASE("solve_micqp: 3x3 assignment equals exhaustive enumeration") {
  std::mt19937_64 gen(7);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  for (int trial = 0; trial < 100; ++trial) {
    const int agents = 3, subs = 3;
    MatrixXd cost(agents, subs);
    for (int i = 0; i < agents; ++i)
      for (int j = 0; j < subs; ++j) cost(i, j) = unif(gen);
    std::vector<std::vector<bool>> mask(agents, std::vector<bool>(subs, true));

    auto p = ConvexProgram::make(agents * subs);
    for (int i = 0; i < agents; ++i)
      for (int j = 0; j < subs; ++j) {
        const int v = i * subs + j;
        p.c(v) = cost(i, j);
        p.lb(v) = 0.0;
        p.ub(v) = 1.0;
        p.binaries.push_back(v);
      }
    p.Aeq = MatrixXd::Zero(subs, p.n);
    p.beq = VectorXd::Ones(subs);
    for (int j = 0; j < subs; ++j)
      for (int i = 0; i < agents; ++i) p.Aeq(j, i * subs + j) = 1.0;
    p.Ain = MatrixXd::Zero(agents, p.n);
    p.bin = VectorXd::Constant(agents, -1.0);
    for (int i = 0; i < agents; ++i)
      for (int j = 0; j < subs; ++j) p.Ain(i, i * subs + j) = -1.0;

    auto sol = solve_micqp(p);
    bool feasible = false;
    const double ref = enumerate_assignment(cost, mask, &feasible);
    REQUIRE(feasible);
    REQUIRE(sol.optimal());
    CHECK(sol.value == doctest::Approx(ref).epsilon(1e-7));
  }
}

TEST_CASE("solve_micqp: deterministic solver path") {
  auto p = ConvexProgram::make(4);
  p.Q = MatrixXd::Identity(4, 4);
  p.c.resize(4);
  p.c << 0.3, -0.7, 0.2, -0.1;
  p.binaries = {0, 1};
  p.lb << 0, 0, -2, -2;
  p.ub << 1, 1, 2, 2;
  p.Ain = MatrixXd::Zero(1, 4);
  p.Ain << 1, 1, 0.3, 0.3;
  p.bin = VectorXd::Constant(1, 0.9);
  auto a = solve_micqp(p);
  auto b = solve_micqp(p);
  REQUIRE(a.optimal());
  CHECK(a.value == b.value);
  CHECK((a.x - b.x).lpNorm<Eigen::Infinity>() == 0.0);
  CHECK(a.nodes == b.nodes);
}

TEST_CASE("solve_micqp: node limit reported as its own status") {
  const int n = 10;
  auto p = ConvexProgram::make(n);
  std::mt19937_64 gen(3);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  MatrixXd row(1, n);
  for (int i = 0; i < n; ++i) {
    p.c(i) = -unif(gen);
    row(0, i) = 0.3 + 0.5 * unif(gen);
    p.binaries.push_back(i);
    p.lb(i) = 0;
    p.ub(i) = 1;
  }
  p.Ain = -row;  // sum w_i x_i <= 2
  p.bin = VectorXd::Constant(1, -2.0);
  SolveOptions opts;
  opts.node_limit = 2;
  CHECK(solve_micqp(p, opts).status == SolveStatus::NodeLimit);
  CHECK(solve_micqp(p).optimal());
}

TEST_CASE("pwl_overapprox: single secant on [1,2], n=1") {
  auto pwl = pwl_overapprox(1.0, 1.0, 2.0, 1);
  REQUIRE(pwl.segments() == 1);
  CHECK(pwl.eval(1.0) == doctest::Approx(1.0));
  CHECK(pwl.eval(2.0) == doctest::Approx(0.25));
  CHECK(pwl.eval(1.5) == doctest::Approx(0.625));
  CHECK(pwl.eval(1.5) >= 1.0 / (1.5 * 1.5));
}

TEST_CASE("pwl_overapprox: dominance over n/rho^2 at dense samples") {
  for (int S : {1, 4, 16, 64}) {
    auto pwl = pwl_overapprox(2.0, 1e-3, 50.0, S);
    for (int i = 0; i <= 10000; ++i) {
      const double rho = 1e-3 * std::pow(50.0 / 1e-3, i / 10000.0);
      CHECK(pwl.eval(rho) >= 2.0 / (rho * rho) - 1e-9);
    }
  }
}

TEST_CASE("pwl_overapprox: refinement convergence trend") {
  auto s64 = pwl_overapprox(2.0, 1e-3, 50.0, 64);
  auto s640 = pwl_overapprox(2.0, 1e-3, 50.0, 640);
  // secant error decays ~quadratically in the local mesh, so ten times the
  // segments must shrink the certified gap by better than ten times
  CHECK(s640.max_gap < s64.max_gap);
  CHECK(s640.max_gap <= s64.max_gap / 10.0);
}

TEST_CASE("pwl_overapprox_quadratic: case-study curve") {
  auto pwl = pwl_overapprox_quadratic(2.0, -0.005, 1.01, 0.01, 1.0, 8);
  CHECK(pwl.lower() == doctest::Approx(std::sqrt(2.0)));
  CHECK(pwl.upper() == doctest::Approx(std::sqrt(200.0)));
  for (int i = 0; i <= 1000; ++i) {
    const double rho = pwl.lower() + (pwl.upper() - pwl.lower()) * i / 1000.0;
    const double parabola = -0.005 * rho * rho + 1.01;
    CHECK(pwl.eval(rho) >= 2.0 / (rho * rho) - 1e-9);
    CHECK(pwl.eval(rho) <= parabola + 1e-9);  // chords stay below the parabola
  }
  // a parabola that dips under n/rho^2 must be refused
  CHECK_THROWS_AS(pwl_overapprox_quadratic(2.0, -0.005, 0.5, 0.01, 0.4, 4), Error);
}

TEST_CASE("pwl_overapprox: invalid ranges throw") {
  CHECK_THROWS_AS(pwl_overapprox(1.0, 0.0, 1.0, 4), Error);
  CHECK_THROWS_AS(pwl_overapprox(1.0, 2.0, 1.0, 4), Error);
  CHECK_THROWS_AS(pwl_overapprox(1.0, 0.5, 1.0, 0), Error);
}

TEST_CASE("dump emits an LP-style listing") {
  auto p = ConvexProgram::make(2);
  p.c << 1.0, 0.0;
  p.Ain = MatrixXd::Constant(1, 2, 1.0);
  p.bin = VectorXd::Constant(1, 1.0);
  p.binaries = {1};
  const std::string text = p.dump();
  CHECK(text.find("minimize") != std::string::npos);
  CHECK(text.find(">=") != std::string::npos);
  CHECK(text.find("binary") != std::string::npos);
}
