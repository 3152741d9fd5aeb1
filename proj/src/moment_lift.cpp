#include "stochobs/moment_lift.hpp"

#include <stdexcept>

#include <Eigen/Eigenvalues>
#include <unsupported/Eigen/KroneckerProduct>
#include <unsupported/Eigen/MatrixFunctions>

#include "stochobs/errors.hpp"

namespace stochobs {

Eigen::VectorXd vec(const Eigen::MatrixXd& X) {
  return Eigen::Map<const Eigen::VectorXd>(X.data(), X.size());
}

Eigen::MatrixXd unvec(const Eigen::VectorXd& v, Eigen::Index n) {
  if (v.size() != n * n) throw std::invalid_argument("unvec: size mismatch");
  return Eigen::Map<const Eigen::MatrixXd>(v.data(), n, n);
}

MomentGenerator build_generator(const StochasticSystem& sys,
                                const Eigen::MatrixXd& F) {
  require_valid(sys);
  if (F.rows() != sys.m || F.cols() != sys.n) {
    throw std::invalid_argument("build_generator: F must be m x n");
  }
  const int n = sys.n;
  const Eigen::MatrixXd I = Eigen::MatrixXd::Identity(n, n);
  const Eigen::MatrixXd Abar = sys.A + sys.B * F;

  // vec(M X) = (I (x) M) vec(X) and vec(X M^T) = (M (x) I) vec(X).
  MomentGenerator gen;
  gen.n = n;
  gen.F = F;
  gen.L = Eigen::kroneckerProduct(I, Abar).eval() +
          Eigen::kroneckerProduct(Abar, I).eval();
  for (int i = 0; i < sys.d; ++i) {
    const Eigen::MatrixXd Cbar = sys.C[i] + sys.D[i] * F;
    gen.L += Eigen::kroneckerProduct(Cbar, Cbar).eval();
  }
  return gen;
}

MomentGenerator build_generator(const StochasticSystem& sys) {
  return build_generator(sys, Eigen::MatrixXd::Zero(sys.m, sys.n));
}

double spectral_abscissa(const MomentGenerator& gen) {
  Eigen::EigenSolver<Eigen::MatrixXd> eig(gen.L, /*computeEigenvectors=*/false);
  if (eig.info() != Eigen::Success) {
    throw NumericalFailure("spectral_abscissa: eigenvalue solver failed");
  }
  return eig.eigenvalues().real().maxCoeff();
}

Eigen::MatrixXd propagate_second_moment(const MomentGenerator& gen,
                                        const Eigen::MatrixXd& X0, double t) {
  if (X0.rows() != gen.n || X0.cols() != gen.n) {
    throw std::invalid_argument("propagate_second_moment: X0 must be n x n");
  }
  if (t == 0.0) return 0.5 * (X0 + X0.transpose());
  const Eigen::MatrixXd E = (t * gen.L).exp();
  Eigen::MatrixXd X = unvec(E * vec(X0), gen.n);
  return 0.5 * (X + X.transpose());
}

Eigen::MatrixXd adjoint_flow(const MomentGenerator& gen,
                             const Eigen::MatrixXd& S0, double t) {
  // The trace-adjoint of X -> unvec(L vec X) has matrix L^T in the same
  // vectorization.
  const Eigen::MatrixXd E = (t * gen.L.transpose()).exp();
  Eigen::MatrixXd S = unvec(E * vec(S0), gen.n);
  return 0.5 * (S + S.transpose());
}

GrowthConstant growth_constant_c0(const StochasticSystem& sys, double tau) {
  if (!(tau > 0.0)) {
    throw std::invalid_argument("growth_constant_c0: tau must be positive");
  }
  const MomentGenerator gen = build_generator(sys);
  const Eigen::MatrixXd S =
      adjoint_flow(gen, Eigen::MatrixXd::Identity(sys.n, sys.n), tau);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(S,
                                                     Eigen::EigenvaluesOnly);
  if (eig.info() != Eigen::Success) {
    throw NumericalFailure("growth_constant_c0: eigenvalue solver failed");
  }
  return GrowthConstant{tau, eig.eigenvalues().maxCoeff()};
}

}  // namespace stochobs
