#include "stlfleet/plant.hpp"

#include <algorithm>
#include <cmath>

#include "stlfleet/errors.hpp"

namespace stlfleet::plant {

using Eigen::MatrixXd;
using Eigen::VectorXd;

NoiseStream::NoiseStream(uint64_t seed, const MatrixXd& covariance)
    : stream_(seed) {
  Eigen::LLT<MatrixXd> llt(covariance);
  if (llt.info() != Eigen::Success)
    fail(Errc::SingularCovariance, "noise covariance is not positive definite");
  chol_ = llt.matrixL();
}

VectorXd NoiseStream::draw() {
  VectorXd xi(chol_.rows());
  for (int i = 0; i < xi.size(); ++i) xi(i) = stream_.normal();
  return chol_ * xi;
}

namespace {

double spectral_radius(const MatrixXd& M) {
  return M.eigenvalues().cwiseAbs().maxCoeff();
}

}  // namespace

void AgentModel::validate() const {
  if (A.rows() != A.cols() || B.rows() != A.rows())
    fail(Errc::DimensionMismatch, "agent " + id + ": A/B dimensions");
  if (K.rows() != m() || K.cols() != n())
    fail(Errc::DimensionMismatch, "agent " + id + ": K must be m x n");
  if (noise_mean.size() != n() || noise_mean.lpNorm<Eigen::Infinity>() > 1e-12)
    fail(Errc::ScenarioInvalid,
         "agent " + id + ": noise must be zero-mean (Assumption 2)");
  if (noise_cov.rows() != n() || noise_cov.cols() != n())
    fail(Errc::DimensionMismatch, "agent " + id + ": noise covariance size");
  Eigen::LLT<MatrixXd> llt(noise_cov);
  if (llt.info() != Eigen::Success)
    fail(Errc::SingularCovariance,
         "agent " + id + ": noise covariance must be strictly positive definite");
  if (input_box.dim() != m())
    fail(Errc::DimensionMismatch, "agent " + id + ": input box dimension");
  const double sr = spectral_radius(a_closed());
  if (sr >= 1.0 - 1e-9)
    fail(Errc::Unstable, "agent " + id + ": spectral radius of A+BK is " +
                             std::to_string(sr));
}

MatrixXd stationary_covariance(const MatrixXd& A_K, const MatrixXd& W) {
  if (A_K.rows() != A_K.cols() || W.rows() != A_K.rows() || W.cols() != W.rows())
    fail(Errc::DimensionMismatch, "stationary_covariance dimensions");
  if (spectral_radius(A_K) >= 1.0 - 1e-12)
    fail(Errc::Unstable, "A_K spectral radius >= 1, no stationary covariance");
  MatrixXd S = W;
  for (int it = 0; it < 100000; ++it) {
    MatrixXd next = A_K * S * A_K.transpose() + W;
    const double delta = (next - S).norm();
    S = std::move(next);
    // relative criterion: noise covariances can be many orders below 1
    if (delta < 1e-13 * (S.norm() + 1e-300)) {
      S = 0.5 * (S + S.transpose());
      return S;
    }
    if (!S.allFinite() || S.norm() > 1e14)
      fail(Errc::Unstable, "Lyapunov iteration diverged");
  }
  fail(Errc::NumericalFailure, "Lyapunov iteration did not converge");
}

AgentModel normalize(const AgentModel& model) {
  const int n = model.n();
  const MatrixXd A_K = model.a_closed();
  const MatrixXd S = stationary_covariance(A_K, model.noise_cov);

  AgentModel out = model;
  if ((S - MatrixXd::Identity(n, n)).lpNorm<Eigen::Infinity>() <= 1e-8) {
    out.sigma_inf = MatrixXd::Identity(n, n);
    out.T = MatrixXd::Identity(n, n);
    out.T_inv = MatrixXd::Identity(n, n);
    out.normalized = true;
    return out;
  }

  Eigen::SelfAdjointEigenSolver<MatrixXd> es(S);
  if (es.eigenvalues().minCoeff() <= 1e-14)
    fail(Errc::SingularCovariance, "stationary covariance is singular");
  const VectorXd inv_sqrt = es.eigenvalues().cwiseSqrt().cwiseInverse();
  const MatrixXd T =
      es.eigenvectors() * inv_sqrt.asDiagonal() * es.eigenvectors().transpose();
  const MatrixXd T_inv = T.inverse();

  out.A = T * model.A * T_inv;
  out.B = T * model.B;
  out.K = model.K * T_inv;
  out.noise_cov = T * model.noise_cov * T.transpose();
  out.noise_cov = 0.5 * (out.noise_cov + out.noise_cov.transpose());
  out.sigma_inf = MatrixXd::Identity(n, n);
  out.T = T;
  out.T_inv = T_inv;
  out.normalized = true;

  const MatrixXd A_Ky = out.a_closed();
  const MatrixXd residual =
      A_Ky * out.sigma_inf * A_Ky.transpose() + out.noise_cov - out.sigma_inf;
  if (residual.lpNorm<Eigen::Infinity>() > 1e-8)
    fail(Errc::NumericalFailure, "normalization residual above 1e-8");
  return out;
}

StepResult step(const AgentModel& model, const AgentState& st,
                const VectorXd& v, NoiseStream& noise) {
  StepResult out;
  VectorXd u = v + model.K * st.e;
  bool clipped = false;
  for (int i = 0; i < u.size(); ++i) {
    const double c = std::clamp(u(i), model.input_box.lower(i),
                                model.input_box.upper(i));
    if (c != u(i)) clipped = true;
    u(i) = c;
  }
  const VectorXd w = noise.draw();
  out.next.z = model.A * st.z + model.B * v;
  out.next.x = model.A * st.x + model.B * u + w;
  out.next.e = out.next.x - out.next.z;  // keeps x = z + e exact under clipping
  out.next.k = st.k + 1;
  out.u = u;
  out.clipped = clipped;
  return out;
}

double error_tail_bound(int n, double rho) {
  if (!(rho > 0.0)) fail(Errc::NonpositiveRadius, "tail bound needs rho > 0");
  if (n < 1) fail(Errc::InvalidRange, "dimension must be positive");
  return std::min(1.0, static_cast<double>(n) / (rho * rho));
}

MatrixXd lqr_gain(const MatrixXd& A, const MatrixXd& B) {
  const int n = static_cast<int>(A.rows());
  const int m = static_cast<int>(B.cols());
  const MatrixXd Q = MatrixXd::Identity(n, n);
  const MatrixXd R = MatrixXd::Identity(m, m);
  MatrixXd P = Q;
  for (int it = 0; it < 100000; ++it) {
    const MatrixXd BtPA = B.transpose() * P * A;
    const MatrixXd gain_den = R + B.transpose() * P * B;
    const MatrixXd next =
        Q + A.transpose() * P * A -
        BtPA.transpose() * gain_den.ldlt().solve(BtPA);
    const double delta = (next - P).lpNorm<Eigen::Infinity>();
    P = next;
    if (delta < 1e-13) break;
    if (!P.allFinite() || P.norm() > 1e14)
      fail(Errc::Unstable, "Riccati iteration diverged; (A,B) not stabilizable?");
  }
  const MatrixXd gain_den = R + B.transpose() * P * B;
  return -gain_den.ldlt().solve(B.transpose() * P * A);
}

stl::Predicate to_normalized_frame(const stl::Predicate& p,
                                   const MatrixXd& T_inv) {
  if (p.dim() != T_inv.rows())
    fail(Errc::DimensionMismatch, "predicate/transform dimension mismatch");
  // g'x >= b with x = T_inv y becomes (g' T_inv) y >= b; the constructor
  // renormalizes rows so margins stay Euclidean in the normalized frame
  return stl::Predicate(p.G() * T_inv, p.b(), p.label());
}

stl::Formula to_normalized_frame(const stl::Formula& f, const MatrixXd& T_inv) {
  using stl::Formula;
  using stl::Kind;
  switch (f.kind()) {
    case Kind::True:
      return f;
    case Kind::Pred:
      return Formula::pred(std::make_shared<stl::Predicate>(
          to_normalized_frame(*f.predicate(), T_inv)));
    case Kind::NegPred:
      return Formula::neg_pred(std::make_shared<stl::Predicate>(
          to_normalized_frame(*f.predicate(), T_inv)));
    case Kind::Not:
      fail(Errc::NotInNnf, "normalization requires NNF");
    case Kind::And: {
      std::vector<Formula> ch;
      for (const auto& c : f.children()) ch.push_back(to_normalized_frame(c, T_inv));
      return Formula::conj(std::move(ch));
    }
    case Kind::Or: {
      std::vector<Formula> ch;
      for (const auto& c : f.children()) ch.push_back(to_normalized_frame(c, T_inv));
      return Formula::disj(std::move(ch));
    }
    case Kind::Always:
      return Formula::always(f.lo(), f.hi(),
                             to_normalized_frame(f.children()[0], T_inv));
    case Kind::Until:
      return Formula::until(f.lo(), f.hi(),
                            to_normalized_frame(f.children()[0], T_inv),
                            to_normalized_frame(f.children()[1], T_inv));
  }
  fail(Errc::UnsupportedStructure, "unreachable");
}

}  // namespace stlfleet::plant
