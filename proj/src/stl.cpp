#include "stlfleet/stl.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdlib>
#include <functional>
#include <sstream>

#include "stlfleet/errors.hpp"

namespace stlfleet::stl {

using Eigen::MatrixXd;
using Eigen::VectorXd;

// ---------------------------------------------------------------- Predicate

Predicate::Predicate(MatrixXd G, VectorXd b, std::string label)
    : G_(std::move(G)), b_(std::move(b)), label_(std::move(label)) {
  if (G_.rows() == 0 || G_.cols() == 0)
    fail(Errc::InvalidRange, "predicate needs at least one row and column");
  if (G_.rows() != b_.size())
    fail(Errc::DimensionMismatch, "predicate G/b row mismatch");
  for (int r = 0; r < G_.rows(); ++r) {
    const double norm = G_.row(r).norm();
    if (norm < 1e-12)
      fail(Errc::InvalidRange, "zero predicate row in " + label_);
    G_.row(r) /= norm;
    b_(r) /= norm;
  }
}

VectorXd Predicate::margins(const VectorXd& x) const {
  if (x.size() != dim())
    fail(Errc::DimensionMismatch, "predicate evaluated on wrong dimension");
  return G_ * x - b_;
}

bool Predicate::holds(const VectorXd& x) const {
  return margins(x).minCoeff() >= 0.0;
}

double Predicate::robustness(const VectorXd& x) const {
  return margins(x).minCoeff();
}

Predicate Predicate::box(const VectorXd& lower, const VectorXd& upper,
                         std::string label) {
  const int n = static_cast<int>(lower.size());
  std::vector<int> coords(n);
  for (int i = 0; i < n; ++i) coords[i] = i;
  return box_in_dims(n, coords, lower, upper, std::move(label));
}

Predicate Predicate::box_in_dims(int dim, const std::vector<int>& coords,
                                 const VectorXd& lower, const VectorXd& upper,
                                 std::string label) {
  const int k = static_cast<int>(coords.size());
  if (lower.size() != k || upper.size() != k)
    fail(Errc::DimensionMismatch, "box bound size mismatch");
  for (int i = 0; i < k; ++i)
    if (lower(i) > upper(i)) fail(Errc::InvalidRange, "box lower > upper");
  MatrixXd G = MatrixXd::Zero(2 * k, dim);
  VectorXd b(2 * k);
  for (int i = 0; i < k; ++i) {
    const int c = coords[i];
    if (c < 0 || c >= dim) fail(Errc::IndexOutOfRange, "box coordinate index");
    G(i, c) = 1.0;
    b(i) = lower(i);
    G(k + i, c) = -1.0;
    b(k + i) = -upper(i);
  }
  return Predicate(std::move(G), std::move(b), std::move(label));
}

std::vector<int> Predicate::slots(int slot_dim) const {
  std::vector<int> out;
  if (slot_dim <= 0 || dim() % slot_dim != 0)
    fail(Errc::DimensionMismatch, "predicate dimension not a multiple of slot width");
  for (int s = 0; s * slot_dim < dim(); ++s) {
    bool used = false;
    for (int c = s * slot_dim; c < (s + 1) * slot_dim; ++c)
      if (G_.col(c).cwiseAbs().maxCoeff() > 0.0) used = true;
    if (used) out.push_back(s);
  }
  return out;
}

Predicate Predicate::restrict_to_slot(int slot, int slot_dim) const {
  auto used = slots(slot_dim);
  if (used.size() != 1 || used[0] != slot)
    fail(Errc::UnsupportedStructure,
         "predicate does not read exactly the requested agent slot");
  return Predicate(G_.middleCols(slot * slot_dim, slot_dim), b_, label_);
}

// ------------------------------------------------------------------ Formula

struct Formula::Node {
  Kind kind;
  PredicatePtr pred;
  int a = 0, b = 0;
  std::vector<Formula> children;
};

Formula Formula::top() {
  static const Formula t = [] {
    auto n = std::make_shared<Node>();
    n->kind = Kind::True;
    return Formula(n);
  }();
  return t;
}

Formula Formula::pred(PredicatePtr p) {
  auto n = std::make_shared<Node>();
  n->kind = Kind::Pred;
  n->pred = std::move(p);
  return Formula(n);
}

Formula Formula::neg_pred(PredicatePtr p) {
  auto n = std::make_shared<Node>();
  n->kind = Kind::NegPred;
  n->pred = std::move(p);
  return Formula(n);
}

Formula Formula::negation(Formula f) {
  auto n = std::make_shared<Node>();
  n->kind = Kind::Not;
  n->children.push_back(std::move(f));
  return Formula(n);
}

Formula Formula::conj(std::vector<Formula> children) {
  if (children.empty()) return top();
  if (children.size() == 1) return children[0];
  auto n = std::make_shared<Node>();
  n->kind = Kind::And;
  n->children = std::move(children);
  return Formula(n);
}

Formula Formula::disj(std::vector<Formula> children) {
  if (children.size() == 1) return children[0];
  auto n = std::make_shared<Node>();
  n->kind = Kind::Or;
  n->children = std::move(children);
  return Formula(n);
}

namespace {
void check_interval(int a, int b) {
  if (a < 0 || b < 0)
    fail(Errc::IntervalOrder, "temporal interval bounds must be nonnegative");
  if (a > b)
    fail(Errc::IntervalOrder, "temporal interval [" + std::to_string(a) + "," +
                                  std::to_string(b) + "] has a > b");
}
}  // namespace

Formula Formula::always(int a, int b, Formula child) {
  check_interval(a, b);
  auto n = std::make_shared<Node>();
  n->kind = Kind::Always;
  n->a = a;
  n->b = b;
  n->children.push_back(std::move(child));
  return Formula(n);
}

Formula Formula::until(int a, int b, Formula left, Formula right) {
  check_interval(a, b);
  auto n = std::make_shared<Node>();
  n->kind = Kind::Until;
  n->a = a;
  n->b = b;
  n->children.push_back(std::move(left));
  n->children.push_back(std::move(right));
  return Formula(n);
}

Formula Formula::eventually(int a, int b, Formula child) {
  // stored as TRUE U[a,b] child
  return until(a, b, top(), std::move(child));
}

Kind Formula::kind() const { return node_->kind; }
const PredicatePtr& Formula::predicate() const { return node_->pred; }
int Formula::lo() const { return node_->a; }
int Formula::hi() const { return node_->b; }
const std::vector<Formula>& Formula::children() const { return node_->children; }

bool Formula::is_nnf() const {
  if (kind() == Kind::Not) return false;
  for (const auto& c : children())
    if (!c.is_nnf()) return false;
  return true;
}

int Formula::dim() const {
  int d = 0;
  if (node_->pred) d = node_->pred->dim();
  for (const auto& c : children()) d = std::max(d, c.dim());
  return d;
}

namespace {

std::string pred_to_string(const Predicate& p) {
  if (!p.label().empty()) return p.label();
  if (p.rows() == 1) {
    std::ostringstream os;
    os << "(";
    bool first = true;
    for (int j = 0; j < p.dim(); ++j) {
      const double a = p.G()(0, j);
      if (a == 0.0) continue;
      if (!first) os << " + ";
      os << a << "*x" << (j + 1);
      first = false;
    }
    if (first) os << "0";
    os << " >= " << p.b()(0) << ")";
    return os.str();
  }
  std::ostringstream os;
  os << "<" << p.rows() << "-row polytope>";
  return os.str();
}

}  // namespace

std::string Formula::to_string() const {
  switch (kind()) {
    case Kind::True:
      return "TRUE";
    case Kind::Pred:
      return pred_to_string(*predicate());
    case Kind::NegPred:
      return "!" + pred_to_string(*predicate());
    case Kind::Not:
      return "!(" + children()[0].to_string() + ")";
    case Kind::And:
    case Kind::Or: {
      if (children().empty()) return kind() == Kind::And ? "TRUE" : "FALSE";
      std::string sep = kind() == Kind::And ? " & " : " | ";
      std::string out = "(";
      for (size_t i = 0; i < children().size(); ++i) {
        if (i) out += sep;
        out += children()[i].to_string();
      }
      return out + ")";
    }
    case Kind::Always:
      return "G[" + std::to_string(lo()) + "," + std::to_string(hi()) + "] (" +
             children()[0].to_string() + ")";
    case Kind::Until:
      if (children()[0].kind() == Kind::True)
        return "F[" + std::to_string(lo()) + "," + std::to_string(hi()) +
               "] (" + children()[1].to_string() + ")";
      return "(" + children()[0].to_string() + " U[" + std::to_string(lo()) +
             "," + std::to_string(hi()) + "] " + children()[1].to_string() + ")";
  }
  return "?";
}

// ------------------------------------------------------------------- Signal

const VectorXd& Signal::at(int t) const {
  if (!covers(t))
    fail(Errc::SignalTooShort, "signal does not cover time " + std::to_string(t) +
                                   " (covers [" + std::to_string(start) + "," +
                                   std::to_string(end() - 1) + "])");
  return values[t - start];
}

Signal Signal::constant(int start, int length, const VectorXd& value) {
  Signal s;
  s.start = start;
  s.values.assign(length, value);
  return s;
}

// ------------------------------------------------------------------ TimeSet

bool TimeSet::contains(int t) const {
  return std::binary_search(times.begin(), times.end(), t);
}

void TimeSet::insert(int t) {
  auto it = std::lower_bound(times.begin(), times.end(), t);
  if (it == times.end() || *it != t) times.insert(it, t);
}

void TimeSet::merge(const TimeSet& o) {
  std::vector<int> out;
  out.reserve(times.size() + o.times.size());
  std::set_union(times.begin(), times.end(), o.times.begin(), o.times.end(),
                 std::back_inserter(out));
  times = std::move(out);
}

// ------------------------------------------------------------------- to_nnf

namespace {
Formula nnf_of(const Formula& f);

Formula negate_nnf(const Formula& f) {
  switch (f.kind()) {
    case Kind::True:
      return Formula::disj({});  // FALSE
    case Kind::Pred:
      return Formula::neg_pred(f.predicate());
    case Kind::NegPred:
      return Formula::pred(f.predicate());
    case Kind::Not:
      return nnf_of(f.children()[0]);
    case Kind::And: {
      std::vector<Formula> out;
      for (const auto& c : f.children()) out.push_back(negate_nnf(c));
      return Formula::disj(std::move(out));
    }
    case Kind::Or: {
      std::vector<Formula> out;
      for (const auto& c : f.children()) out.push_back(negate_nnf(c));
      return Formula::conj(std::move(out));
    }
    case Kind::Always:
      return Formula::eventually(f.lo(), f.hi(), negate_nnf(f.children()[0]));
    case Kind::Until:
      if (f.children()[0].kind() == Kind::True)  // not-eventually = always-not
        return Formula::always(f.lo(), f.hi(), negate_nnf(f.children()[1]));
      fail(Errc::UnsupportedStructure,
           "negation of a general until has no dual in this syntax");
  }
  fail(Errc::UnsupportedStructure, "unreachable");
}

Formula nnf_of(const Formula& f) {
  switch (f.kind()) {
    case Kind::True:
    case Kind::Pred:
    case Kind::NegPred:
      return f;
    case Kind::Not:
      return negate_nnf(f.children()[0]);
    case Kind::And: {
      std::vector<Formula> out;
      for (const auto& c : f.children()) out.push_back(nnf_of(c));
      return Formula::conj(std::move(out));
    }
    case Kind::Or: {
      std::vector<Formula> out;
      for (const auto& c : f.children()) out.push_back(nnf_of(c));
      return Formula::disj(std::move(out));
    }
    case Kind::Always:
      return Formula::always(f.lo(), f.hi(), nnf_of(f.children()[0]));
    case Kind::Until:
      return Formula::until(f.lo(), f.hi(), nnf_of(f.children()[0]),
                            nnf_of(f.children()[1]));
  }
  fail(Errc::UnsupportedStructure, "unreachable");
}
}  // namespace

Formula to_nnf(const Formula& f) { return nnf_of(f); }

// ---------------------------------------------------------------- semantics

namespace {
// the contract asks for SignalTooShort whenever the active horizon is not
// covered, not merely when a lazy witness search happens to read past the end
void check_coverage(const Formula& f, const Signal& s, int k) {
  const TimeSet h = active_horizon(f, k);
  if (h.empty()) return;
  if (!s.covers(h.min()) || !s.covers(h.max()))
    fail(Errc::SignalTooShort,
         "signal [" + std::to_string(s.start) + "," + std::to_string(s.end() - 1) +
             "] does not cover the active horizon [" + std::to_string(h.min()) +
             "," + std::to_string(h.max()) + "]");
}

bool satisfies_impl(const Formula& f, const Signal& s, int k) {
  switch (f.kind()) {
    case Kind::True:
      return true;
    case Kind::Pred:
      return f.predicate()->holds(s.at(k));
    case Kind::NegPred:
      return !f.predicate()->holds(s.at(k));
    case Kind::Not:
      fail(Errc::NotInNnf, "satisfies requires an NNF formula");
    case Kind::And:
      for (const auto& c : f.children())
        if (!satisfies_impl(c, s, k)) return false;
      return true;
    case Kind::Or:
      for (const auto& c : f.children())
        if (satisfies_impl(c, s, k)) return true;
      return false;
    case Kind::Always:
      for (int t = k + f.lo(); t <= k + f.hi(); ++t)
        if (!satisfies_impl(f.children()[0], s, t)) return false;
      return true;
    case Kind::Until: {
      const Formula& left = f.children()[0];
      const Formula& right = f.children()[1];
      // left must hold on [k, k1] inclusive
      for (int t = k; t < k + f.lo(); ++t)
        if (!satisfies_impl(left, s, t)) return false;
      for (int k1 = k + f.lo(); k1 <= k + f.hi(); ++k1) {
        if (!satisfies_impl(left, s, k1)) return false;
        if (satisfies_impl(right, s, k1)) return true;
      }
      return false;
    }
  }
  return false;
}

double robustness_impl(const Formula& f, const Signal& s, int k, double rob_top) {
  switch (f.kind()) {
    case Kind::True:
      return rob_top;
    case Kind::Pred:
      return f.predicate()->robustness(s.at(k));
    case Kind::NegPred:
      return -f.predicate()->robustness(s.at(k));
    case Kind::Not:
      fail(Errc::NotInNnf, "robustness requires an NNF formula");
    case Kind::And: {
      double v = rob_top;
      for (const auto& c : f.children())
        v = std::min(v, robustness_impl(c, s, k, rob_top));
      return v;
    }
    case Kind::Or: {
      double v = -rob_top;
      for (const auto& c : f.children())
        v = std::max(v, robustness_impl(c, s, k, rob_top));
      return v;
    }
    case Kind::Always: {
      double v = rob_top;
      for (int t = k + f.lo(); t <= k + f.hi(); ++t)
        v = std::min(v, robustness_impl(f.children()[0], s, t, rob_top));
      return v;
    }
    case Kind::Until: {
      const Formula& left = f.children()[0];
      const Formula& right = f.children()[1];
      double best = -rob_top;
      double prefix = rob_top;
      for (int t = k; t < k + f.lo(); ++t)
        prefix = std::min(prefix, robustness_impl(left, s, t, rob_top));
      for (int k1 = k + f.lo(); k1 <= k + f.hi(); ++k1) {
        prefix = std::min(prefix, robustness_impl(left, s, k1, rob_top));
        best = std::max(best,
                        std::min(robustness_impl(right, s, k1, rob_top), prefix));
      }
      return best;
    }
  }
  return 0.0;
}

}  // namespace

bool satisfies(const Formula& f, const Signal& s, int k) {
  check_coverage(f, s, k);
  return satisfies_impl(f, s, k);
}

double robustness(const Formula& f, const Signal& s, int k, double rob_top) {
  check_coverage(f, s, k);
  return robustness_impl(f, s, k, rob_top);
}

TimeSet active_horizon(const Formula& f, int k) {
  TimeSet out;
  switch (f.kind()) {
    case Kind::True:
      return out;
    case Kind::Pred:
    case Kind::NegPred:
      out.insert(k);
      return out;
    case Kind::Not:
      fail(Errc::NotInNnf, "active_horizon requires an NNF formula");
    case Kind::And:
    case Kind::Or:
      for (const auto& c : f.children()) out.merge(active_horizon(c, k));
      return out;
    case Kind::Always:
      for (int t = k + f.lo(); t <= k + f.hi(); ++t)
        out.merge(active_horizon(f.children()[0], t));
      return out;
    case Kind::Until: {
      const Formula& left = f.children()[0];
      const Formula& right = f.children()[1];
      for (int k1 = k + f.lo(); k1 <= k + f.hi(); ++k1) {
        out.merge(active_horizon(right, k1));
        for (int k2 = k; k2 <= k1; ++k2) out.merge(active_horizon(left, k2));
      }
      return out;
    }
  }
  return out;
}

// ------------------------------------------------------------------- parser

namespace {

enum class Tok {
  End, Ident, Number, True_, LParen, RParen, LBracket, RBracket, Comma,
  Amp, Pipe, Bang, Arrow, Ge, Le, Star, Plus, Minus,
};

struct Token {
  Tok kind;
  std::string text;
  double number = 0.0;
  int pos = 0;
};

class Lexer {
 public:
  explicit Lexer(const std::string& text) {
    size_t i = 0;
    const size_t n = text.size();
    while (i < n) {
      if (std::isspace(static_cast<unsigned char>(text[i]))) {
        ++i;
        continue;
      }
      const int pos = static_cast<int>(i);
      const char c = text[i];
      auto push = [&](Tok k, size_t len) {
        tokens_.push_back({k, text.substr(i, len), 0.0, pos});
        i += len;
      };
      if (c == '(') push(Tok::LParen, 1);
      else if (c == ')') push(Tok::RParen, 1);
      else if (c == '[') push(Tok::LBracket, 1);
      else if (c == ']') push(Tok::RBracket, 1);
      else if (c == ',') push(Tok::Comma, 1);
      else if (c == '&') push(Tok::Amp, 1);
      else if (c == '|') push(Tok::Pipe, 1);
      else if (c == '!') push(Tok::Bang, 1);
      else if (c == '*') push(Tok::Star, 1);
      else if (c == '+') push(Tok::Plus, 1);
      else if (c == '-' && i + 1 < n && text[i + 1] == '>') push(Tok::Arrow, 2);
      else if (c == '-') push(Tok::Minus, 1);
      else if (c == '>' && i + 1 < n && text[i + 1] == '=') push(Tok::Ge, 2);
      else if (c == '<' && i + 1 < n && text[i + 1] == '=') push(Tok::Le, 2);
      else if (std::isdigit(static_cast<unsigned char>(c)) || c == '.') {
        size_t j = i;
        while (j < n && (std::isdigit(static_cast<unsigned char>(text[j])) ||
                         text[j] == '.' || text[j] == 'e' || text[j] == 'E' ||
                         ((text[j] == '+' || text[j] == '-') && j > i &&
                          (text[j - 1] == 'e' || text[j - 1] == 'E'))))
          ++j;
        Token t{Tok::Number, text.substr(i, j - i), 0.0, pos};
        t.number = std::strtod(t.text.c_str(), nullptr);
        tokens_.push_back(t);
        i = j;
      } else if (std::isalpha(static_cast<unsigned char>(c)) || c == '_') {
        size_t j = i;
        while (j < n && (std::isalnum(static_cast<unsigned char>(text[j])) ||
                         text[j] == '_'))
          ++j;
        std::string id = text.substr(i, j - i);
        tokens_.push_back({id == "TRUE" ? Tok::True_ : Tok::Ident, id, 0.0, pos});
        i = j;
      } else {
        fail(Errc::SyntaxError, "unexpected character '" + std::string(1, c) +
                                    "' at position " + std::to_string(pos));
      }
    }
    tokens_.push_back({Tok::End, "", 0.0, static_cast<int>(n)});
  }

  const std::vector<Token>& tokens() const { return tokens_; }

 private:
  std::vector<Token> tokens_;
};

class Parser {
 public:
  Parser(const std::string& text, const PredicateTable& table, int expected_dim)
      : lexer_(text), table_(table) {
    // the ambient dimension must be known before inline predicates are built
    dim_ = expected_dim;
    for (const auto& t : lexer_.tokens()) {
      if (t.kind != Tok::Ident) continue;
      int idx = var_index(t.text);
      if (idx > 0) {
        dim_ = std::max(dim_, idx);
        continue;
      }
      auto it = table_.find(t.text);
      if (it != table_.end()) {
        if (expected_dim > 0 && it->second->dim() != expected_dim)
          fail(Errc::DimensionMismatch,
               "predicate " + t.text + " has dimension " +
                   std::to_string(it->second->dim()) + ", expected " +
                   std::to_string(expected_dim));
        dim_ = std::max(dim_, it->second->dim());
      }
    }
    if (dim_ == 0) dim_ = 1;
  }

  Formula run() {
    Formula f = parse_implied();
    expect(Tok::End, "end of input");
    return to_nnf(f);
  }

 private:
  static int var_index(const std::string& id) {
    // variables are x1, x2, ...; anything else is a predicate name
    if (id.size() < 2 || id[0] != 'x') return 0;
    for (size_t i = 1; i < id.size(); ++i)
      if (!std::isdigit(static_cast<unsigned char>(id[i]))) return 0;
    const int v = std::atoi(id.c_str() + 1);
    return v > 0 ? v : 0;
  }

  const Token& peek() const { return lexer_.tokens()[pos_]; }
  const Token& next() { return lexer_.tokens()[pos_++]; }
  bool accept(Tok k) {
    if (peek().kind == k) {
      ++pos_;
      return true;
    }
    return false;
  }
  void expect(Tok k, const std::string& what) {
    if (!accept(k))
      fail(Errc::SyntaxError, "expected " + what + " at position " +
                                  std::to_string(peek().pos) + ", found '" +
                                  peek().text + "'");
  }

  std::pair<int, int> parse_interval() {
    expect(Tok::LBracket, "'['");
    const int a = parse_int();
    expect(Tok::Comma, "','");
    const int b = parse_int();
    expect(Tok::RBracket, "']'");
    return {a, b};
  }

  int parse_int() {
    const Token& t = peek();
    if (t.kind != Tok::Number || t.number != std::floor(t.number))
      fail(Errc::SyntaxError,
           "expected integer at position " + std::to_string(t.pos));
    ++pos_;
    return static_cast<int>(t.number);
  }

  Formula parse_implied() {
    Formula lhs = parse_or();
    if (accept(Tok::Arrow)) {
      Formula rhs = parse_implied();  // right associative
      return Formula::disj({Formula::negation(lhs), rhs});
    }
    return lhs;
  }

  Formula parse_or() {
    std::vector<Formula> parts{parse_and()};
    while (accept(Tok::Pipe)) parts.push_back(parse_and());
    return parts.size() == 1 ? parts[0] : Formula::disj(std::move(parts));
  }

  Formula parse_and() {
    std::vector<Formula> parts{parse_until()};
    while (accept(Tok::Amp)) parts.push_back(parse_until());
    return parts.size() == 1 ? parts[0] : Formula::conj(std::move(parts));
  }

  Formula parse_until() {
    Formula lhs = parse_unary();
    while (peek().kind == Tok::Ident && peek().text == "U" &&
           lexer_.tokens()[pos_ + 1].kind == Tok::LBracket) {
      ++pos_;
      auto [a, b] = parse_interval();
      Formula rhs = parse_unary();
      lhs = Formula::until(a, b, std::move(lhs), std::move(rhs));
    }
    return lhs;
  }

  Formula parse_unary() {
    if (accept(Tok::Bang)) return Formula::negation(parse_unary());
    if (peek().kind == Tok::Ident &&
        (peek().text == "G" || peek().text == "F") &&
        lexer_.tokens()[pos_ + 1].kind == Tok::LBracket) {
      const bool always = peek().text == "G";
      ++pos_;
      auto [a, b] = parse_interval();
      Formula child = parse_unary();
      return always ? Formula::always(a, b, std::move(child))
                    : Formula::eventually(a, b, std::move(child));
    }
    return parse_primary();
  }

  Formula parse_primary() {
    const Token& t = peek();
    if (accept(Tok::True_)) return Formula::top();
    if (t.kind == Tok::Ident) {
      auto it = table_.find(t.text);
      if (it == table_.end())
        fail(Errc::UnknownPredicate, "unknown predicate '" + t.text +
                                         "' at position " + std::to_string(t.pos));
      ++pos_;
      return Formula::pred(it->second);
    }
    if (t.kind == Tok::LParen) {
      const size_t save = pos_;
      ++pos_;
      if (auto inl = try_inline_predicate()) return *inl;
      pos_ = save;
      expect(Tok::LParen, "'('");
      Formula f = parse_implied();
      expect(Tok::RParen, "')'");
      return f;
    }
    fail(Errc::SyntaxError, "expected formula at position " +
                                std::to_string(t.pos) + ", found '" + t.text + "'");
  }

  // "(" affine (">="|"<=") number ")" over variables x1..xd, constants folded
  std::optional<Formula> try_inline_predicate() {
    VectorXd row = VectorXd::Zero(dim_);
    double lhs_const = 0.0;
    double sign = 1.0;
    bool any_var = false;
    bool expect_term = true;
    while (true) {
      const Token& t = peek();
      if (expect_term) {
        if (t.kind == Tok::Minus) {
          sign = -sign;
          ++pos_;
          continue;
        }
        if (t.kind == Tok::Plus) {
          ++pos_;
          continue;
        }
        if (t.kind == Tok::Number) {
          const double num = t.number;
          ++pos_;
          if (accept(Tok::Star)) {
            const Token& v = peek();
            const int idx = v.kind == Tok::Ident ? var_index(v.text) : 0;
            if (idx == 0 || idx > dim_) return std::nullopt;
            ++pos_;
            row(idx - 1) += sign * num;
            any_var = true;
          } else {
            lhs_const += sign * num;
          }
          sign = 1.0;
          expect_term = false;
          continue;
        }
        if (t.kind == Tok::Ident) {
          const int idx = var_index(t.text);
          if (idx == 0 || idx > dim_) return std::nullopt;
          ++pos_;
          row(idx - 1) += sign;
          any_var = true;
          sign = 1.0;
          expect_term = false;
          continue;
        }
        return std::nullopt;
      }
      if (t.kind == Tok::Plus) {
        ++pos_;
        expect_term = true;
        continue;
      }
      if (t.kind == Tok::Minus) {
        ++pos_;
        sign = -1.0;
        expect_term = true;
        continue;
      }
      if (t.kind == Tok::Ge || t.kind == Tok::Le) break;
      return std::nullopt;
    }
    const bool ge = peek().kind == Tok::Ge;
    ++pos_;
    double rhs_sign = 1.0;
    while (peek().kind == Tok::Minus) {
      rhs_sign = -rhs_sign;
      ++pos_;
    }
    if (peek().kind != Tok::Number) return std::nullopt;
    const double rhs = rhs_sign * peek().number;
    ++pos_;
    if (peek().kind != Tok::RParen) return std::nullopt;
    ++pos_;
    if (!any_var) return std::nullopt;
    double b = rhs - lhs_const;
    if (!ge) {
      row = -row;
      b = -b;
    }
    MatrixXd G(1, dim_);
    G.row(0) = row;
    VectorXd bv(1);
    bv(0) = b;
    return Formula::pred(std::make_shared<Predicate>(std::move(G), bv));
  }

  Lexer lexer_;
  const PredicateTable& table_;
  size_t pos_ = 0;
  int dim_ = 0;
};

}  // namespace

Formula parse_formula(const std::string& text, const PredicateTable& predicates,
                      int expected_dim) {
  Parser p(text, predicates, expected_dim);
  Formula f = p.run();
  // all predicates must agree on the ambient dimension
  int d = 0;
  std::function<void(const Formula&)> scan = [&](const Formula& g) {
    if (g.predicate()) {
      if (d == 0) d = g.predicate()->dim();
      if (g.predicate()->dim() != d)
        fail(Errc::DimensionMismatch,
             "predicates of mixed dimension in one formula");
    }
    for (const auto& c : g.children()) scan(c);
  };
  scan(f);
  if (expected_dim > 0 && d > 0 && d != expected_dim)
    fail(Errc::DimensionMismatch, "formula dimension " + std::to_string(d) +
                                      " != expected " + std::to_string(expected_dim));
  return f;
}

}  // namespace stlfleet::stl
