#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "stochobs/core_model.hpp"
#include "stochobs/null_control.hpp"
#include "stochobs/observability.hpp"
#include "stochobs/riccati.hpp"
#include "stochobs/tree.hpp"

namespace stochobs {

/// Per-interval record of the piecewise construction. Record k holds the
/// state second moment at time kT and the control energy spent on
/// [(k-1)T, kT] (zero for k = 0). Monte Carlo estimates carry standard
/// errors; `exact_*` values come from the second-moment transfer on the tree.
struct IntervalRecord {
  int k = 0;
  double second_moment = 0.0;
  double second_moment_se = 0.0;
  double exact_second_moment = 0.0;
  double control_energy = 0.0;
  double control_energy_se = 0.0;
  double exact_control_energy = 0.0;
  double cumulative_energy = 0.0;
  double cumulative_energy_se = 0.0;
  double exact_cumulative_energy = 0.0;
};

struct StabilizerRun {
  std::vector<IntervalRecord> intervals;
  int paths = 0;
  std::uint64_t seed = 0;
  double delta = 0.0;
  double c = 0.0;
  double T = 0.0;
  double x0_norm2 = 0.0;
  /// Least-squares slope of log E|x_k|^2 against k and its standard error.
  double decay_slope = 0.0;
  double decay_slope_se = 0.0;
};

/// Monte Carlo over sampled tree paths. On each interval the control at a
/// visited node is kernel(node) applied to the path's state at the start of
/// the interval; every interval restarts the kernel from the current state.
/// Path p draws from its own generator seeded from (seed, p).
StabilizerRun run_piecewise(const NoiseTree& tree, const StochasticSystem& sys,
                            const ControlKernel& kernel,
                            const Eigen::VectorXd& x0, int k_max, int paths,
                            std::uint64_t seed,
                            std::size_t max_samples = 200'000'000);

/// Checks of a piecewise run against the geometric targets
///   E|x_k|^2 <= delta^k |x0|^2 and
///   cumulative energy <= c delta^-1 c0 (1 - delta)^-1 |x0|^2,
/// each with a 3 standard error allowance.
struct PiecewiseVerdict {
  double energy_bound = 0.0;
  int decay_violations = 0;
  int energy_violations = 0;
  bool slope_pass = false;
  bool pass() const { return decay_violations == 0 && energy_violations == 0; }
};

PiecewiseVerdict check_piecewise(const StabilizerRun& run, double c0);

struct CurvePoint {
  double t = 0.0;
  double second_moment = 0.0;   // trace X(t)
  double control_moment = 0.0;  // trace F X(t) F^T
};

/// Feedback => controllability constants: E|x_F(t)|^2 <= c(alpha)
/// e^{-alpha t} |x0|^2, the horizon T(delta) where the right side reaches
/// delta, and the check ||u_F||^2 <= |F|^2 c(alpha) alpha^-1 (1 - e^{-alpha T})
/// on [0, T(delta)].
struct FeedbackControllability {
  double alpha = 0.0;
  double c_alpha = 0.0;
  double delta = 0.0;
  double T_delta = 0.0;
  double control_energy = 0.0;
  double control_bound = 0.0;
  double terminal_second_moment = 0.0;
  bool pass = false;
};

struct FeedbackRun {
  double abscissa = 0.0;
  bool diverges = false;
  std::vector<CurvePoint> curve;
  double quadrature = 0.0;
  double tail = 0.0;
  double cost = 0.0;  // quadrature + tail, +inf when diverging
  double t_end = 0.0;
  std::optional<FeedbackControllability> controllability;
};

/// Exact closed-loop second-moment curve under u = F x from X(0) = x0 x0^T,
/// reported every dt_report up to t_max, and the cost
///   int_0^inf (trace X + trace F X F^T) dt
/// by Simpson quadrature, extended past t_max until the remaining tail (exact
/// via the inverse generator) is below 1e-4 of the total.
FeedbackRun run_riccati_feedback(const StochasticSystem& sys,
                                 const Eigen::MatrixXd& F,
                                 const Eigen::VectorXd& x0, double t_max,
                                 double dt_report, double delta = 0.5);

struct EquivalenceOptions {
  std::vector<double> T_grid{1.0, 2.0};
  std::vector<double> delta_grid{0.5};
  int K = 6;
  TreeDriver driver = TreeDriver::bernoulli();
  Eigen::Index max_dense_dim = kDefaultMaxDenseDim;
  std::size_t max_leaves = kDefaultMaxLeaves;
  SareOptions sare;
};

struct EquivalenceReport {
  bool riccati_solvable = false;        // (a)
  bool feedback_stabilizable = false;   // (b)
  bool weakly_observable = false;       // (c)
  bool null_controllable = false;       // (d)
  bool agreement = false;
  int K_used = 0;
  bool refined = false;
  std::optional<bool> hautus;  // only for C = D = 0
  double closed_loop_abscissa = 0.0;
  double grid_T = 0.0;
  double grid_delta = 0.0;
  double c_opt = 0.0;
  /// Spectral radius of the one-interval second-moment transfer under the
  /// null-control kernel at the grid point (below 1 means the piecewise
  /// construction contracts); NaN when (c) fails.
  double rho = 0.0;
  std::string riccati_note;
  std::optional<Theorem51Report> theorem51;
};

EquivalenceReport equivalence_harness(const StochasticSystem& sys,
                                      const EquivalenceOptions& opts);

/// Kernel for (c, delta) on `tree`, dense when n*L fits max_dense_dim.
ControlKernel build_kernel(const NoiseTree& tree, const StochasticSystem& sys,
                           double c, double delta, Eigen::Index max_dense_dim);

/// n^2 x n^2 matrix of X -> E[Phi X Phi^T] over one interval under `kernel`,
/// and the matching control-energy functional X -> dt sum E|g X|^2 written as
/// a row vector on vec(X).
struct IntervalTransfer {
  Eigen::MatrixXd moment;
  Eigen::RowVectorXd energy;
};

IntervalTransfer interval_transfer(const NoiseTree& tree,
                                   const StochasticSystem& sys,
                                   const ControlKernel& kernel);

}  // namespace stochobs
