#pragma once

#include <string>
#include <vector>

#include <Eigen/Dense>

namespace stochobs {

/// Constant-coefficient linear system with multiplicative noise
///
///   dx = (A x + B u) dt + sum_i (C_i x + D_i u) dw^i,
///
/// with state dimension n, control dimension m and d scalar Brownian
/// drivers. The dual (observed BSDE) system is read off the same record
/// with every matrix transposed.
struct StochasticSystem {
  int n = 0;
  int m = 0;
  int d = 0;
  Eigen::MatrixXd A;
  Eigen::MatrixXd B;
  std::vector<Eigen::MatrixXd> C;
  std::vector<Eigen::MatrixXd> D;

  /// System with all matrices zero-initialised to the right shapes.
  static StochasticSystem Zero(int n, int m, int d);
};

/// Time horizon [0, T] split into K equal steps.
struct HorizonConfig {
  double T = 1.0;
  int K = 1;

  HorizonConfig() = default;
  HorizonConfig(double horizon, int steps);

  double delta_t() const { return T / K; }
};

/// Returns a list of human-readable violations; empty means the system is
/// well formed (consistent shapes, finite entries).
std::vector<std::string> validate_system(const StochasticSystem& sys);

/// Throws std::invalid_argument with the joined violation list unless valid.
void require_valid(const StochasticSystem& sys);

/// Hautus test for stabilizability of the deterministic pair (A, B): every
/// eigenvalue with Re(lambda) >= -tol must leave [lambda I - A | B] with full
/// numerical rank n (singular values above tol times the largest one).
bool hautus_stabilizability(const Eigen::MatrixXd& A, const Eigen::MatrixXd& B,
                            double tol = 1e-9);

}  // namespace stochobs
