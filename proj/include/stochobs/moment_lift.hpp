#pragma once

#include <Eigen/Dense>

#include "stochobs/core_model.hpp"

namespace stochobs {

/// Column-stacking vectorization: vec(X)(i + j n) = X(i, j).
Eigen::VectorXd vec(const Eigen::MatrixXd& X);
Eigen::MatrixXd unvec(const Eigen::VectorXd& v, Eigen::Index n);

/// Generator of the second-moment flow X(t) = E[x(t) x(t)^T] under the
/// feedback u = F x:
///
///   X' = (A+BF) X + X (A+BF)^T + sum_i (C_i+D_i F) X (C_i+D_i F)^T,
///
/// stored as the n^2 x n^2 matrix acting on vec(X).
struct MomentGenerator {
  Eigen::MatrixXd L;
  Eigen::MatrixXd F;
  int n = 0;
};

MomentGenerator build_generator(const StochasticSystem& sys,
                                const Eigen::MatrixXd& F);

/// Open-loop generator (F = 0).
MomentGenerator build_generator(const StochasticSystem& sys);

/// Largest real part among the eigenvalues of L. Negative iff the closed loop
/// is mean-square exponentially stable.
double spectral_abscissa(const MomentGenerator& gen);

/// X(t) = unvec(exp(t L) vec(X0)), symmetrized.
Eigen::MatrixXd propagate_second_moment(const MomentGenerator& gen,
                                        const Eigen::MatrixXd& X0, double t);

/// Solution S(t) of the adjoint flow S' = Abar^T S + S Abar +
/// sum_i Cbar_i^T S Cbar_i started from S(0) = S0. For every x0,
/// E|x(t; x0)|^2 = x0^T S(t) x0 when S0 = I.
Eigen::MatrixXd adjoint_flow(const MomentGenerator& gen,
                             const Eigen::MatrixXd& S0, double t);

struct GrowthConstant {
  double tau = 0.0;
  double c0 = 0.0;
};

/// Tight constant in E|x(tau; 0, xi)|^2 <= c0 E|xi|^2 for the uncontrolled
/// system: the largest eigenvalue of the adjoint flow S(tau) from S(0) = I.
GrowthConstant growth_constant_c0(const StochasticSystem& sys, double tau);

}  // namespace stochobs
