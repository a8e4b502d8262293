#pragma once

#include <Eigen/Dense>
#include <string>

#include "stlfleet/decomp.hpp"
#include "stlfleet/rng.hpp"

namespace stlfleet::plant {

/// Per-agent noise source: w = L xi with L the Cholesky factor of the noise
/// covariance and xi iid standard normal from a keyed deterministic stream.
class NoiseStream {
 public:
  NoiseStream(uint64_t seed, const Eigen::MatrixXd& covariance);
  Eigen::VectorXd draw();

 private:
  RandomStream stream_;
  Eigen::MatrixXd chol_;
};

/// Linear agent x+ = A x + B u + w with stabilizing error feedback K.
/// `T` maps original coordinates to the normalized frame y = T x in which the
/// stationary error covariance is the identity; inputs are not transformed.
struct AgentModel {
  std::string id;
  Eigen::MatrixXd A, B, K;  // K is m x n
  Eigen::VectorXd noise_mean;
  Eigen::MatrixXd noise_cov;
  decomp::Orthotope input_box;  // bounds on u, in R^m
  Eigen::MatrixXd sigma_inf;
  bool normalized = false;
  Eigen::MatrixXd T, T_inv;

  int n() const { return static_cast<int>(A.rows()); }
  int m() const { return static_cast<int>(B.cols()); }
  Eigen::MatrixXd a_closed() const { return A + B * K; }

  void validate() const;  // stabilizability of A+BK, SPD noise, zero mean
};

struct AgentState {
  Eigen::VectorXd x, z, e;  // x = z + e by construction
  int k = 0;
};

struct StepResult {
  AgentState next;
  Eigen::VectorXd u;  // applied input, after clipping
  bool clipped = false;
};

/// Solve A_K S A_K' + W = S by fixed-point iteration. Throws Unstable when
/// the spectral radius of A_K is not strictly below one.
Eigen::MatrixXd stationary_covariance(const Eigen::MatrixXd& A_K,
                                      const Eigen::MatrixXd& W);

/// Coordinate change y = Sigma_inf^{-1/2} x; the returned model has
/// stationary error covariance I (to 1e-8) and carries T / T_inv so
/// trajectories and predicates can be mapped both ways.
AgentModel normalize(const AgentModel& model);

/// One closed-loop step: z+ = Az + Bv, u = v + K e clipped into the input
/// box, x+ = Ax + Bu + w, e+ = x+ - z+. Without clipping this reduces to the
/// textbook error recursion e+ = A_K e + w.
StepResult step(const AgentModel& model, const AgentState& st,
                const Eigen::VectorXd& v, NoiseStream& noise);

/// Chebyshev tail bound for the stationary normalized error:
/// P(||e|| > rho) <= min(1, n / rho^2).
double error_tail_bound(int n, double rho);

/// Discrete LQR gain with unit weights, for scenarios that do not supply K.
Eigen::MatrixXd lqr_gain(const Eigen::MatrixXd& A, const Eigen::MatrixXd& B);

/// Map a predicate over original coordinates into the normalized frame
/// (rows renormalized to unit length so tube margins stay Euclidean).
stl::Predicate to_normalized_frame(const stl::Predicate& p,
                                   const Eigen::MatrixXd& T_inv);
stl::Formula to_normalized_frame(const stl::Formula& f,
                                 const Eigen::MatrixXd& T_inv);

}  // namespace stlfleet::plant
