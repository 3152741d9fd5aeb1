#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <variant>

#include <Eigen/Dense>

#include "stochobs/core_model.hpp"

namespace stochobs {

/// Stabilizing solution of the stochastic algebraic Riccati equation for the
/// unit-weight cost E int (|x|^2 + |u|^2) dt.
struct RiccatiSolution {
  Eigen::MatrixXd P;
  Eigen::MatrixXd F;
  double residual = 0.0;
  /// residual divided by the summed norms of the equation's terms.
  double relative_residual = 0.0;
  int iterations = 0;
  double closed_loop_abscissa = 0.0;
};

/// No stabilizing gain exists; the Riccati equation has no solution in S^n_+.
struct NotSolvable {
  std::string reason;
};

using SareResult = std::variant<RiccatiSolution, NotSolvable>;

enum class RiccatiForm {
  /// P A + A^T P + sum C^T P C + I - S^T R^{-1} S = 0 with
  /// R = I + sum D^T P D, S = B^T P + sum D^T P C.
  kStandard,
  /// The variant with +S^T R^{-1} S and no identity term; only its residual
  /// is exposed, for comparison.
  kPrinted,
};

struct SareOptions {
  double tol = 1e-12;
  int max_iter = 100;
  int restarts = 50;
  std::uint64_t seed = 20240607;
};

/// Riccati operator applied to P, in the requested form.
Eigen::MatrixXd riccati_operator(const StochasticSystem& sys,
                                 const Eigen::MatrixXd& P,
                                 RiccatiForm form = RiccatiForm::kStandard);

double riccati_residual(const StochasticSystem& sys, const Eigen::MatrixXd& P,
                        RiccatiForm form = RiccatiForm::kStandard);

/// sqrt(n) + |PA + A^T P| + sum |C^T P C| + |S^T R^-1 S|: the rounding level
/// of the standard residual is about machine epsilon times this.
double riccati_residual_scale(const StochasticSystem& sys,
                              const Eigen::MatrixXd& P);

/// F = -(I + sum D^T P D)^{-1} (B^T P + sum D^T P C).
Eigen::MatrixXd feedback_gain(const Eigen::MatrixXd& P,
                              const StochasticSystem& sys);

/// <P x0, x0>.
double lq_value(const Eigen::MatrixXd& P, const Eigen::VectorXd& x0);

/// Gain with negative second-moment abscissa, if one is found. Tries F = 0,
/// a ladder of -s B^T gains, then seeded Nelder-Mead restarts minimizing the
/// abscissa. Restarts are tried in a fixed order so the result is
/// reproducible.
std::optional<Eigen::MatrixXd> find_stabilizing_gain(const StochasticSystem& sys,
                                                     int restarts,
                                                     std::uint64_t seed);

/// Newton-Kleinman iteration from a stabilizing initial gain. Converged when
/// the residual is below tol, or below tol * riccati_residual_scale once the
/// iteration stops improving. Returns
/// NotSolvable when no stabilizing gain can be found (and, for C = D = 0,
/// the Hautus test also fails). Throws NumericalFailure when the lifted
/// Lyapunov solve is singular or the iteration does not converge.
SareResult solve_sare(const StochasticSystem& sys, const SareOptions& opts = {});

}  // namespace stochobs
