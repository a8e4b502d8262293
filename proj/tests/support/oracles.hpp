#pragma once

// Test-only reference implementations, kept independent of the library code
// paths they cross-check.

#include <Eigen/Dense>
#include <random>
#include <vector>

#include "stlfleet/stl.hpp"

namespace stlfleet::testing {

// Definition-1 evaluator by explicit witness enumeration. Every temporal
// operator loops over all (k1, k2) candidates; no early exits, no sharing
// with the library recursion.
inline bool brute_satisfies(const stl::Formula& f, const stl::Signal& s, int k) {
  using stl::Kind;
  switch (f.kind()) {
    case Kind::True:
      return true;
    case Kind::Pred:
      return (f.predicate()->G() * s.at(k) - f.predicate()->b()).minCoeff() >= 0.0;
    case Kind::NegPred:
      return (f.predicate()->G() * s.at(k) - f.predicate()->b()).minCoeff() < 0.0;
    case Kind::Not:
      return !brute_satisfies(f.children()[0], s, k);
    case Kind::And: {
      bool all = true;
      for (const auto& c : f.children()) all = all && brute_satisfies(c, s, k);
      return all;
    }
    case Kind::Or: {
      bool any = false;
      for (const auto& c : f.children()) any = any || brute_satisfies(c, s, k);
      return any;
    }
    case Kind::Always: {
      bool all = true;
      for (int t = k + f.lo(); t <= k + f.hi(); ++t)
        all = all && brute_satisfies(f.children()[0], s, t);
      return all;
    }
    case Kind::Until: {
      bool any = false;
      for (int k1 = k + f.lo(); k1 <= k + f.hi(); ++k1) {
        bool witness = brute_satisfies(f.children()[1], s, k1);
        for (int k2 = k; k2 <= k1; ++k2)
          witness = witness && brute_satisfies(f.children()[0], s, k2);
        any = any || witness;
      }
      return any;
    }
  }
  return false;
}

// Random NNF formulas and signals for property tests.
class FormulaGen {
 public:
  FormulaGen(uint64_t seed, int dim, int max_depth, int max_window)
      : gen_(seed), dim_(dim), max_depth_(max_depth), max_window_(max_window) {}

  stl::PredicatePtr random_predicate() {
    std::uniform_real_distribution<double> center(-2.0, 2.0);
    std::uniform_real_distribution<double> size(0.4, 2.5);
    if (coin()) {
      Eigen::VectorXd lo(dim_), hi(dim_);
      for (int i = 0; i < dim_; ++i) {
        const double c = center(gen_);
        const double h = 0.5 * size(gen_);
        lo(i) = c - h;
        hi(i) = c + h;
      }
      return std::make_shared<stl::Predicate>(stl::Predicate::box(lo, hi));
    }
    Eigen::MatrixXd G(1, dim_);
    for (int i = 0; i < dim_; ++i) G(0, i) = center(gen_);
    if (G.row(0).norm() < 1e-6) G(0, 0) = 1.0;
    Eigen::VectorXd b(1);
    b(0) = center(gen_);
    return std::make_shared<stl::Predicate>(G, b);
  }

  stl::Formula random_formula(int depth = 0) {
    std::uniform_int_distribution<int> pick(0, depth >= max_depth_ ? 1 : 6);
    std::uniform_int_distribution<int> win(0, max_window_);
    switch (pick(gen_)) {
      case 0:
        return stl::Formula::pred(random_predicate());
      case 1:
        return stl::Formula::neg_pred(random_predicate());
      case 2:
        return stl::Formula::conj({random_formula(depth + 1),
                                   random_formula(depth + 1)});
      case 3:
        return stl::Formula::disj({random_formula(depth + 1),
                                   random_formula(depth + 1)});
      case 4: {
        const int a = win(gen_);
        const int b = a + win(gen_) % std::max(1, max_window_ - a + 1);
        return stl::Formula::always(a, b, random_formula(depth + 1));
      }
      case 5: {
        const int a = win(gen_);
        const int b = a + win(gen_) % std::max(1, max_window_ - a + 1);
        return stl::Formula::eventually(a, b, random_formula(depth + 1));
      }
      default: {
        const int a = win(gen_);
        const int b = a + win(gen_) % std::max(1, max_window_ - a + 1);
        return stl::Formula::until(a, b, random_formula(depth + 1),
                                   random_formula(depth + 1));
      }
    }
  }

  stl::Signal random_signal(int start, int length) {
    std::uniform_real_distribution<double> coord(-3.0, 3.0);
    stl::Signal s;
    s.start = start;
    for (int t = 0; t < length; ++t) {
      Eigen::VectorXd x(dim_);
      for (int i = 0; i < dim_; ++i) x(i) = coord(gen_);
      s.values.push_back(x);
    }
    return s;
  }

  bool coin() { return (gen_() & 1) != 0; }
  std::mt19937_64& rng() { return gen_; }

 private:
  std::mt19937_64 gen_;
  int dim_;
  int max_depth_;
  int max_window_;
};

// the Appendix Example-2 diamond |x1| + |x2| <= 1 written as h(x) >= 0
inline stl::PredicatePtr diamond_predicate() {
  Eigen::MatrixXd G(4, 2);
  G << -1, 1, -1, -1, 1, 1, 1, -1;
  Eigen::VectorXd b = Eigen::VectorXd::Constant(4, -1.0);
  return std::make_shared<stl::Predicate>(G, b, "diamond");
}

}  // namespace stlfleet::testing
