#pragma once

#include <string>
#include <vector>

#include <Eigen/Dense>

#include "stochobs/core_model.hpp"
#include "stochobs/observability.hpp"
#include "stochobs/tree.hpp"

namespace stochobs {

/// G = c Q + delta N on terminal coordinates, factored once. In the
/// probability-weighted inner product the Gramian equation G f = xi reads
/// (c Q + delta N) f = N xi.
class GramianMatrix {
 public:
  GramianMatrix(const ObservabilityForms& forms, double c, double delta);

  const Eigen::MatrixXd& form() const { return G_; }
  double c() const { return c_; }
  double delta() const { return delta_; }

  /// f with G f = xi in the L^2 sense (xi, f flat terminal variables).
  Eigen::VectorXd solve(const Eigen::VectorXd& xi) const;

  /// lambda_min(N^{-1/2} G N^{-1/2}); at least delta.
  double weighted_lambda_min() const;

 private:
  Eigen::MatrixXd G_;
  Eigen::VectorXd N_;
  double c_;
  double delta_;
  Eigen::LLT<Eigen::MatrixXd> llt_;
};

GramianMatrix assemble_gramian(const ObservabilityForms& forms, double c,
                               double delta);

struct BoundCheck {
  double value = 0.0;
  double bound = 0.0;
  bool pass = false;
};

struct SynthesisResult {
  double c = 0.0;
  double delta = 0.0;
  bool dense = true;
  Eigen::VectorXd x_s;
  TerminalVariable f;
  AdaptedField u;  // depth K-1
  AdaptedField x;  // controlled state, depth K
  double control_energy = 0.0;   // dt sum E|u_t|^2
  double terminal_energy = 0.0;  // E|x_T|^2
  double f_energy = 0.0;         // E|f|^2
  /// Growth constants over [0, T]: exact for the tree dynamics, and the
  /// continuous-time value (reported only).
  double c0_tree = 0.0;
  double c0_continuous = 0.0;
  /// max |x_T - delta f| over leaves and max |u + c z(f)| over nodes.
  double terminal_identity_error = 0.0;
  double control_identity_error = 0.0;
  /// | ||u||^2 - c (<G f, f> - delta E|f|^2) |
  double energy_identity_error = 0.0;
  BoundCheck control_bound;             // c delta^-1 c0_tree |x_s|^2
  BoundCheck control_bound_continuous;  // same with c0_continuous
  BoundCheck terminal_bound;            // delta |x_s|^2
  BoundCheck f_bound;                   // delta^-1 |x_s|^2

  bool bounds_pass() const {
    return control_bound.pass && terminal_bound.pass && f_bound.pass;
  }
};

/// Dense synthesis from precomputed forms: f = G^{-1} x(T; 0, x_s),
/// u = -c z(f). Throws std::invalid_argument unless
/// is_delta_observable(forms, delta, c).
SynthesisResult synthesize_control(const NoiseTree& tree,
                                   const StochasticSystem& sys,
                                   const Eigen::VectorXd& x_s, double c,
                                   double delta,
                                   const ObservabilityForms& forms);

/// Same control computed as the optimal feedback of
///   min (1/c) ||u||^2 + (1/delta) E|x_T|^2,
/// which needs no forms; f is recovered as x_T / delta.
SynthesisResult synthesize_control_recursive(const NoiseTree& tree,
                                             const StochasticSystem& sys,
                                             const Eigen::VectorXd& x_s,
                                             double c, double delta);

/// Linear map x_s -> u(node) for every internal node.
struct ControlKernel {
  double c = 0.0;
  double delta = 0.0;
  double T = 0.0;
  int K = 0;
  std::vector<Eigen::MatrixXd> gains;  // one m x n matrix per internal node

  AdaptedField apply(const NoiseTree& tree, const Eigen::VectorXd& x_s) const;
};

ControlKernel control_kernel(const NoiseTree& tree, const StochasticSystem& sys,
                             double c, double delta,
                             const ObservabilityForms& forms);

ControlKernel control_kernel_recursive(const NoiseTree& tree,
                                       const StochasticSystem& sys, double c,
                                       double delta);

struct BasisCase {
  int index = 0;
  double control_energy = 0.0;
  double control_bound = 0.0;
  double terminal_energy = 0.0;
  double terminal_bound = 0.0;
  double identity_error = 0.0;
  bool pass = false;
};

struct Theorem51Report {
  bool applicable = false;
  std::string reason;
  double delta = 0.0;
  double T = 0.0;
  int K = 0;
  bool dense = true;
  double c_opt = 0.0;
  double c_used = 0.0;
  double c0_tree = 0.0;
  double c0_continuous = 0.0;

  // Observability => null controllability with cost sqrt(c delta^-1 c0).
  std::vector<BasisCase> cases;
  bool forward_pass = false;

  // Null controllability => observability. c_hat is the measured cost
  // sup ||u|| / |x_s| (operator norm over all x_s); c_hat_basis the maximum
  // over the canonical basis.
  double c_hat = 0.0;
  double c_hat_basis = 0.0;
  double converse_c = 0.0;      // c_hat (1 + 2/(1-delta))
  double converse_c_sq = 0.0;   // c_hat^2 (1 + 2/(1-delta))
  double converse_delta = 0.0;  // (1 + delta)/2
  bool converse_pass = false;
  bool converse_sq_pass = false;
  /// Smallest c making (c, (1+delta)/2) admissible, for comparison.
  double converse_c_opt = 0.0;
};

Theorem51Report verify_theorem_5_1(const StochasticSystem& sys,
                                   const ObservabilityQuery& q);

}  // namespace stochobs
