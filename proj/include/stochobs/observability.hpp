#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "stochobs/core_model.hpp"
#include "stochobs/tree.hpp"

namespace stochobs {

/// Largest terminal dimension n*L for which dense forms are assembled.
inline constexpr Eigen::Index kDefaultMaxDenseDim = 1024;

/// Quadratic forms of the observed BSDE on terminal coordinates. A terminal
/// variable y1 is flattened leaf-major (see TerminalVariable::flat):
///   |y0|^2             = y1^T M0 y1,   M0 = R^T R
///   dt sum_t E|z_t|^2  = y1^T Q y1
///   E|y1|^2            = y1^T diag(N) y1
struct ObservabilityForms {
  int n = 0;
  int K = 0;
  double delta_t = 0.0;
  Eigen::MatrixXd R;  // n x nL, y0 = R y1
  Eigen::MatrixXd M0;
  Eigen::MatrixXd Q;
  Eigen::VectorXd N;

  Eigen::Index dim() const { return N.size(); }
  double T() const { return delta_t * K; }
};

/// Throws BudgetExceeded when n*L > max_dim.
ObservabilityForms assemble_forms(const NoiseTree& tree,
                                  const StochasticSystem& sys,
                                  Eigen::Index max_dim = kDefaultMaxDenseDim);

struct ObservabilityReport {
  double delta = 0.0;
  double T = 0.0;
  double c_opt = 0.0;  // +infinity when not delta-observable
  bool observable = false;
  /// Dense route only: terminal variable (flat) attaining c_opt, or one that
  /// violates every finite constant when c_opt is infinite.
  Eigen::VectorXd witness;
};

/// inf{c >= 0 : M0 <= c Q + delta N}, computed in N-whitened coordinates
/// from the spectral decomposition of Q.
ObservabilityReport optimal_constant(const ObservabilityForms& forms,
                                     double delta);

/// c Q + delta N - M0 is positive semidefinite up to a relative 1e-10.
bool is_delta_observable(const ObservabilityForms& forms, double delta,
                         double c);

// Tree-free route. The value of the control problem
//   min_u (1/c) ||u||^2 + (1/delta) E|x_T|^2
// on the tree is x0^T V0(c) x0, and c is an admissible constant iff
// V0(c) <= I. It depends on the tree only through one step, so it scales to
// any depth.

/// V0(c) for delta > 0; c may be +infinity (unpenalized control).
Eigen::MatrixXd observability_value(const NoiseStep& step, int K,
                                    const StochasticSystem& sys, double delta,
                                    double c);

/// Feedback gains u_t = K_t x_t of the control problem above, t = 0..K-1.
std::vector<Eigen::MatrixXd> observability_gains(const NoiseStep& step, int K,
                                                 const StochasticSystem& sys,
                                                 double delta, double c);

/// Pi0 with min{dt sum E|z|^2 : y0 = v} = v^T Pi0 v (the delta = 0 case).
Eigen::MatrixXd output_energy_floor(const NoiseStep& step, int K,
                                    const StochasticSystem& sys);

ObservabilityReport optimal_constant_recursive(const NoiseStep& step, int K,
                                               const StochasticSystem& sys,
                                               double delta);

bool is_delta_observable_recursive(const NoiseStep& step, int K,
                                   const StochasticSystem& sys, double delta,
                                   double c);

enum class Route { kAuto, kDense, kRecursive };

struct ObservabilityQuery {
  TreeDriver driver;
  HorizonConfig horizon;
  double delta = 0.0;
  Route route = Route::kAuto;
  Eigen::Index max_dense_dim = kDefaultMaxDenseDim;
  std::size_t max_leaves = kDefaultMaxLeaves;
};

/// Route kAuto uses dense forms when n*L <= max_dense_dim.
Route resolve_route(const ObservabilityQuery& q, const StochasticSystem& sys);

ObservabilityReport observe(const StochasticSystem& sys,
                            const ObservabilityQuery& q);

bool observable_with(const StochasticSystem& sys, const ObservabilityQuery& q,
                     double c);

struct InvarianceRow {
  std::string driver;
  int K = 0;
  double c_opt = 0.0;
  bool observable = false;
  bool dense = false;
};

struct InvarianceGap {
  int K = 0;
  double max_relative_gap = 0.0;
};

struct InvarianceTable {
  double T = 0.0;
  double delta = 0.0;
  std::vector<InvarianceRow> rows;
  std::vector<InvarianceGap> gaps;
  /// Gaps do not increase along K_list (rounding-level gaps below 1e-12
  /// count as equal).
  bool non_increasing = true;
};

/// c_opt for every (driver, K). For each K the same route is used for all
/// drivers: dense when all of them fit max_dense_dim, else recursive.
InvarianceTable invariance_experiment(const StochasticSystem& sys, double T,
                                      double delta,
                                      const std::vector<TreeDriver>& drivers,
                                      const std::vector<int>& K_list,
                                      Eigen::Index max_dense_dim =
                                          kDefaultMaxDenseDim,
                                      std::size_t max_leaves =
                                          kDefaultMaxLeaves);

/// |a-b| / max(|a|,|b|), 0 when both are 0 or both infinite.
double relative_gap(double a, double b);

}  // namespace stochobs
