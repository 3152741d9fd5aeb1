#include "stochobs/null_control.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include <Eigen/Eigenvalues>

#include "stochobs/errors.hpp"
#include "stochobs/moment_lift.hpp"

namespace stochobs {

namespace {

void check_synthesis_args(const NoiseTree& tree, const StochasticSystem& sys,
                          const Eigen::VectorXd& x_s, double c, double delta) {
  require_valid(sys);
  if (tree.d() != sys.d) {
    throw std::invalid_argument("synthesize_control: noise dimension mismatch");
  }
  if (x_s.size() != sys.n || !x_s.allFinite()) {
    throw std::invalid_argument("synthesize_control: x_s must be finite, size n");
  }
  if (!(c > 0.0) || !std::isfinite(c)) {
    throw std::invalid_argument("synthesize_control: c must be finite and > 0");
  }
  if (!(delta > 0.0 && delta < 1.0)) {
    throw std::invalid_argument("synthesize_control: delta must lie in (0, 1)");
  }
}

[[noreturn]] void not_admissible(double c, double delta) {
  throw std::invalid_argument(
      "synthesize_control: c = " + std::to_string(c) +
      " is not a delta-observability constant for delta = " +
      std::to_string(delta) + " (is_delta_observable is false)");
}

double max_abs(const Eigen::MatrixXd& M) {
  return M.size() == 0 ? 0.0 : M.cwiseAbs().maxCoeff();
}

BoundCheck check(double value, double bound) {
  // Relative slack for rounding in the energies themselves.
  return {value, bound, value <= bound * (1.0 + 1e-10) + 1e-14};
}

// Fills energies, identities and bounds once u, x and f are known.
void finish(SynthesisResult& r, const NoiseTree& tree,
            const StochasticSystem& sys) {
  const BackwardSolution bs = solve_bsde(tree, sys, r.f);
  const TerminalVariable xT = terminal_layer(tree, r.x);
  r.control_energy = control_energy(tree, r.u);
  r.terminal_energy = terminal_inner(tree, xT, xT);
  r.f_energy = terminal_inner(tree, r.f, r.f);
  r.terminal_identity_error = max_abs(xT.values - r.delta * r.f.values);
  r.control_identity_error = max_abs(
      r.u.values.leftCols(tree.internal_count()) +
      r.c * bs.z.values.leftCols(tree.internal_count()));
  r.energy_identity_error =
      std::abs(r.control_energy - r.c * r.c * control_energy(tree, bs.z));

  r.c0_tree = tree_growth_constant(tree.step(), sys, tree.K());
  r.c0_continuous = growth_constant_c0(sys, tree.T()).c0;
  const double x2 = r.x_s.squaredNorm();
  r.control_bound = check(r.control_energy, r.c / r.delta * r.c0_tree * x2);
  r.control_bound_continuous =
      check(r.control_energy, r.c / r.delta * r.c0_continuous * x2);
  r.terminal_bound = check(r.terminal_energy, r.delta * x2);
  r.f_bound = check(r.f_energy, x2 / r.delta);
}

}  // namespace

GramianMatrix::GramianMatrix(const ObservabilityForms& forms, double c,
                             double delta)
    : N_(forms.N), c_(c), delta_(delta) {
  if (!(c > 0.0) || !std::isfinite(c)) {
    throw std::invalid_argument("assemble_gramian: c must be finite and > 0");
  }
  if (!(delta > 0.0 && delta < 1.0)) {
    throw std::invalid_argument("assemble_gramian: delta must lie in (0, 1)");
  }
  G_ = c * forms.Q;
  G_.diagonal() += delta * forms.N;
  llt_.compute(G_);
  if (llt_.info() != Eigen::Success) {
    throw NumericalFailure("assemble_gramian: Cholesky factorization failed");
  }
}

Eigen::VectorXd GramianMatrix::solve(const Eigen::VectorXd& xi) const {
  if (xi.size() != N_.size()) {
    throw std::invalid_argument("GramianMatrix::solve: size mismatch");
  }
  return llt_.solve(N_.cwiseProduct(xi));
}

double GramianMatrix::weighted_lambda_min() const {
  const Eigen::VectorXd s = N_.cwiseSqrt().cwiseInverse();
  const Eigen::MatrixXd W = s.asDiagonal() * G_ * s.asDiagonal();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(
      0.5 * (W + W.transpose()), Eigen::EigenvaluesOnly);
  if (eig.info() != Eigen::Success) {
    throw NumericalFailure("weighted_lambda_min: eigenvalue solver failed");
  }
  return eig.eigenvalues().minCoeff();
}

GramianMatrix assemble_gramian(const ObservabilityForms& forms, double c,
                               double delta) {
  return GramianMatrix(forms, c, delta);
}

SynthesisResult synthesize_control(const NoiseTree& tree,
                                   const StochasticSystem& sys,
                                   const Eigen::VectorXd& x_s, double c,
                                   double delta,
                                   const ObservabilityForms& forms) {
  check_synthesis_args(tree, sys, x_s, c, delta);
  if (forms.dim() != sys.n * tree.leaf_count() || forms.K != tree.K()) {
    throw std::invalid_argument("synthesize_control: forms do not match tree");
  }
  if (!is_delta_observable(forms, delta, c)) not_admissible(c, delta);

  SynthesisResult r;
  r.c = c;
  r.delta = delta;
  r.dense = true;
  r.x_s = x_s;

  const GramianMatrix G(forms, c, delta);
  const AdaptedField free_state = simulate_forward(tree, sys, x_s);
  const Eigen::VectorXd f = G.solve(terminal_layer(tree, free_state).flat());
  r.f = TerminalVariable::from_flat(f, sys.n);

  const BackwardSolution bs = solve_bsde(tree, sys, r.f);
  r.u = bs.z;
  r.u.values *= -c;
  r.x = simulate_forward(tree, sys, x_s, r.u);

  const double Gff = f.dot(G.form() * f);
  const double Nff = f.dot(forms.N.cwiseProduct(f));
  finish(r, tree, sys);
  r.energy_identity_error = std::abs(r.control_energy - c * (Gff - delta * Nff));
  return r;
}

SynthesisResult synthesize_control_recursive(const NoiseTree& tree,
                                             const StochasticSystem& sys,
                                             const Eigen::VectorXd& x_s,
                                             double c, double delta) {
  check_synthesis_args(tree, sys, x_s, c, delta);
  if (!is_delta_observable_recursive(tree.step(), tree.K(), sys, delta, c)) {
    not_admissible(c, delta);
  }
  const std::vector<Eigen::MatrixXd> gains =
      observability_gains(tree.step(), tree.K(), sys, delta, c);

  SynthesisResult r;
  r.c = c;
  r.delta = delta;
  r.dense = false;
  r.x_s = x_s;

  // Closed-loop sweep: the control at a node is the depth gain applied to
  // the state at that node.
  const NoiseStep& step = tree.step();
  const double dt = tree.delta_t();
  r.u = AdaptedField::Zero(tree, sys.m, tree.K() - 1);
  r.x = AdaptedField::Zero(tree, sys.n, tree.K());
  r.x.values.col(0) = x_s;
  for (Eigen::Index node = 0; node < tree.internal_count(); ++node) {
    const Eigen::VectorXd xn = r.x.values.col(node);
    const Eigen::VectorXd un = gains[tree.depth(node)] * xn;
    r.u.values.col(node) = un;
    const Eigen::VectorXd drift = xn + dt * (sys.A * xn + sys.B * un);
    const Eigen::Index c0 = tree.first_child(node);
    for (int k = 0; k < step.branching(); ++k) {
      Eigen::VectorXd next = drift;
      for (int i = 0; i < sys.d; ++i) {
        next += step.increments(k, i) * (sys.C[i] * xn + sys.D[i] * un);
      }
      r.x.values.col(c0 + k) = next;
    }
  }
  r.f = terminal_layer(tree, r.x);
  r.f.values /= delta;
  finish(r, tree, sys);
  return r;
}

AdaptedField ControlKernel::apply(const NoiseTree& tree,
                                  const Eigen::VectorXd& x_s) const {
  if (static_cast<Eigen::Index>(gains.size()) != tree.internal_count()) {
    throw std::invalid_argument("ControlKernel::apply: tree mismatch");
  }
  const int m = gains.empty() ? 0 : static_cast<int>(gains.front().rows());
  AdaptedField u = AdaptedField::Zero(tree, m, tree.K() - 1);
  for (std::size_t node = 0; node < gains.size(); ++node) {
    u.values.col(node) = gains[node] * x_s;
  }
  return u;
}

namespace {

template <class Synth>
ControlKernel build_kernel(const NoiseTree& tree, const StochasticSystem& sys,
                           double c, double delta, Synth&& synth) {
  ControlKernel k;
  k.c = c;
  k.delta = delta;
  k.T = tree.T();
  k.K = tree.K();
  k.gains.assign(tree.internal_count(), Eigen::MatrixXd::Zero(sys.m, sys.n));
  for (int j = 0; j < sys.n; ++j) {
    const SynthesisResult r = synth(Eigen::VectorXd::Unit(sys.n, j));
    for (Eigen::Index node = 0; node < tree.internal_count(); ++node) {
      k.gains[node].col(j) = r.u.values.col(node);
    }
  }
  return k;
}

}  // namespace

ControlKernel control_kernel(const NoiseTree& tree, const StochasticSystem& sys,
                             double c, double delta,
                             const ObservabilityForms& forms) {
  return build_kernel(tree, sys, c, delta, [&](const Eigen::VectorXd& e) {
    return synthesize_control(tree, sys, e, c, delta, forms);
  });
}

ControlKernel control_kernel_recursive(const NoiseTree& tree,
                                       const StochasticSystem& sys, double c,
                                       double delta) {
  return build_kernel(tree, sys, c, delta, [&](const Eigen::VectorXd& e) {
    return synthesize_control_recursive(tree, sys, e, c, delta);
  });
}

Theorem51Report verify_theorem_5_1(const StochasticSystem& sys,
                                   const ObservabilityQuery& q) {
  require_valid(sys);
  Theorem51Report rep;
  rep.delta = q.delta;
  rep.T = q.horizon.T;
  rep.K = q.horizon.K;
  if (!(q.delta > 0.0 && q.delta < 1.0)) {
    rep.reason = "delta must lie in (0, 1)";
    return rep;
  }
  const Route route = resolve_route(q, sys);
  rep.dense = route == Route::kDense;
  const NoiseTree tree = build_tree(q.driver, q.horizon, sys.d, q.max_leaves);

  ObservabilityForms forms;
  ObservabilityReport obs;
  if (rep.dense) {
    forms = assemble_forms(tree, sys, q.max_dense_dim);
    obs = optimal_constant(forms, q.delta);
  } else {
    obs = optimal_constant_recursive(tree.step(), tree.K(), sys, q.delta);
  }
  rep.c_opt = obs.c_opt;
  if (!obs.observable) {
    rep.reason = "not delta-observable on this tree (c_opt infinite)";
    return rep;
  }
  rep.applicable = true;
  // Any admissible constant works; c_opt = 0 means the bound holds with no
  // control at all, and c = 1 is then admissible too.
  rep.c_used = obs.c_opt > 0.0 ? obs.c_opt : 1.0;

  std::vector<AdaptedField> controls;
  rep.forward_pass = true;
  for (int j = 0; j < sys.n; ++j) {
    const Eigen::VectorXd e = Eigen::VectorXd::Unit(sys.n, j);
    const SynthesisResult r =
        rep.dense
            ? synthesize_control(tree, sys, e, rep.c_used, q.delta, forms)
            : synthesize_control_recursive(tree, sys, e, rep.c_used, q.delta);
    rep.c0_tree = r.c0_tree;
    rep.c0_continuous = r.c0_continuous;
    BasisCase bc;
    bc.index = j;
    bc.control_energy = r.control_energy;
    bc.control_bound = r.control_bound.bound;
    bc.terminal_energy = r.terminal_energy;
    bc.terminal_bound = r.terminal_bound.bound;
    bc.identity_error =
        std::max(r.terminal_identity_error, r.control_identity_error);
    bc.pass = r.control_bound.pass && r.terminal_bound.pass;
    rep.forward_pass = rep.forward_pass && bc.pass;
    rep.c_hat_basis = std::max(rep.c_hat_basis, std::sqrt(r.control_energy));
    rep.cases.push_back(bc);
    controls.push_back(r.u);
  }

  // Energy Gram matrix of the basis controls; by linearity its top
  // eigenvalue is the squared operator norm x_s -> u.
  Eigen::MatrixXd E(sys.n, sys.n);
  for (int i = 0; i < sys.n; ++i) {
    for (int j = 0; j <= i; ++j) {
      double acc = 0.0;
      for (int t = 0; t < tree.K(); ++t) {
        acc += depth_inner(tree, t, controls[i], controls[j]);
      }
      E(i, j) = E(j, i) = tree.delta_t() * acc;
    }
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(E, Eigen::EigenvaluesOnly);
  if (eig.info() != Eigen::Success) {
    throw NumericalFailure("verify_theorem_5_1: eigenvalue solver failed");
  }
  rep.c_hat = std::sqrt(std::max(eig.eigenvalues().maxCoeff(), 0.0));

  const double factor = 1.0 + 2.0 / (1.0 - q.delta);
  rep.converse_delta = 0.5 * (1.0 + q.delta);
  rep.converse_c = rep.c_hat * factor;
  rep.converse_c_sq = rep.c_hat * rep.c_hat * factor;
  ObservabilityQuery q2 = q;
  q2.delta = rep.converse_delta;
  q2.route = route;
  if (rep.dense) {
    rep.converse_pass = is_delta_observable(forms, q2.delta, rep.converse_c);
    rep.converse_sq_pass =
        is_delta_observable(forms, q2.delta, rep.converse_c_sq);
    rep.converse_c_opt = optimal_constant(forms, q2.delta).c_opt;
  } else {
    rep.converse_pass = observable_with(sys, q2, rep.converse_c);
    rep.converse_sq_pass = observable_with(sys, q2, rep.converse_c_sq);
    rep.converse_c_opt = observe(sys, q2).c_opt;
  }
  return rep;
}

}  // namespace stochobs
