#pragma once

#include <cstddef>
#include <iosfwd>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "stochobs/core_model.hpp"

namespace stochobs {

/// Cap on the number of leaves of a noise tree.
inline constexpr std::size_t kDefaultMaxLeaves = 200000;

enum class DriverKind { kBernoulli, kTrinomial, kQuantizedGaussian };

/// One-dimensional increment law used on every branch of the tree. All kinds
/// have mean zero and variance exactly delta_t after scaling:
///   bernoulli           {-1, +1} sqrt(dt), probabilities 1/2
///   trinomial           {-sqrt 3, 0, +sqrt 3} sqrt(dt), (1/6, 2/3, 1/6)
///   quantized_gaussian  Gauss-Hermite nodes/weights, levels >= 3
struct TreeDriver {
  DriverKind kind = DriverKind::kBernoulli;
  int levels = 2;

  static TreeDriver bernoulli() { return {DriverKind::kBernoulli, 2}; }
  static TreeDriver trinomial() { return {DriverKind::kTrinomial, 3}; }
  static TreeDriver quantized_gaussian(int levels);

  /// "bernoulli", "trinomial" or "quantized_gaussian(L)"; parse() accepts the
  /// same spellings.
  std::string name() const;
  static TreeDriver parse(const std::string& text);

  /// Support points and probabilities for unit variance.
  void unit_support(Eigen::VectorXd& points, Eigen::VectorXd& probs) const;
};

/// Branching of one time step for a d-dimensional driver: the product of the
/// per-component supports. Row b of `increments` is the increment vector of
/// branch b; branch order is lexicographic in the support order with the
/// first component varying slowest.
struct NoiseStep {
  double delta_t = 0.0;
  int d = 0;
  Eigen::MatrixXd increments;  // b x d
  Eigen::VectorXd probs;       // b

  int branching() const { return static_cast<int>(probs.size()); }
};

NoiseStep make_noise_step(const TreeDriver& driver, double delta_t, int d);

/// Full non-recombining tree of depth K stored breadth first. Node ids at
/// depth t occupy [depth_begin(t), depth_begin(t+1)); the k-th child of the
/// node at position j within its depth sits at position j*b + k of the next
/// depth.
class NoiseTree {
 public:
  NoiseTree(TreeDriver driver, NoiseStep step, int K);

  const TreeDriver& driver() const { return driver_; }
  const NoiseStep& step() const { return step_; }
  int K() const { return K_; }
  int d() const { return step_.d; }
  double delta_t() const { return step_.delta_t; }
  double T() const { return step_.delta_t * K_; }
  int branching() const { return step_.branching(); }

  Eigen::Index node_count() const { return depth_begin_.back(); }
  Eigen::Index internal_count() const { return depth_begin_[K_]; }
  Eigen::Index leaf_count() const { return depth_size(K_); }
  Eigen::Index depth_begin(int t) const { return depth_begin_[t]; }
  Eigen::Index depth_size(int t) const {
    return depth_begin_[t + 1] - depth_begin_[t];
  }
  /// Number of nodes with depth <= t.
  Eigen::Index nodes_through(int t) const { return depth_begin_[t + 1]; }

  int depth(Eigen::Index node) const { return depth_[node]; }
  Eigen::Index parent(Eigen::Index node) const { return parent_[node]; }
  int branch(Eigen::Index node) const { return branch_[node]; }
  double prob(Eigen::Index node) const { return prob_[node]; }
  Eigen::Index first_child(Eigen::Index node) const;

  /// Path probabilities of the leaves, in leaf order.
  Eigen::VectorXd leaf_probs() const;

 private:
  TreeDriver driver_;
  NoiseStep step_;
  int K_;
  std::vector<Eigen::Index> depth_begin_;
  std::vector<Eigen::Index> parent_;
  std::vector<int> depth_;
  std::vector<int> branch_;
  std::vector<double> prob_;
};

/// Throws BudgetExceeded when the tree would have more than max_leaves leaves.
NoiseTree build_tree(const TreeDriver& driver, const HorizonConfig& horizon,
                     int d, std::size_t max_leaves = kDefaultMaxLeaves);

/// One value in R^dim for every node of depth <= depth; column = node id.
struct AdaptedField {
  int dim = 0;
  int depth = 0;
  Eigen::MatrixXd values;

  static AdaptedField Zero(const NoiseTree& tree, int dim, int depth);
};

/// Element of L^2(F_T; R^n) on the tree: column l holds the value at leaf l.
/// Flattened (leaf-major) it is the column-major data of `values`.
struct TerminalVariable {
  Eigen::MatrixXd values;

  Eigen::VectorXd flat() const {
    return Eigen::Map<const Eigen::VectorXd>(values.data(), values.size());
  }
  static TerminalVariable from_flat(const Eigen::VectorXd& v, int n);
};

/// Adapted solution (y, Y_1..Y_d, z) of the discrete observed BSDE.
struct BackwardSolution {
  AdaptedField y;               // depth K
  std::vector<AdaptedField> Y;  // depth K-1 each
  AdaptedField z;               // depth K-1
  Eigen::VectorXd y0;
};

/// Euler step on every branch:
///   x' = x + (A x + B u) dt + sum_i (C_i x + D_i u) xi_i.
/// Pass an empty field (dim 0) for u = 0.
AdaptedField simulate_forward(const NoiseTree& tree,
                              const StochasticSystem& sys,
                              const Eigen::VectorXd& x0,
                              const AdaptedField& u);

AdaptedField simulate_forward(const NoiseTree& tree,
                              const StochasticSystem& sys,
                              const Eigen::VectorXd& x0);

/// Backward recursion that is the exact adjoint of simulate_forward. At an
/// internal node with children values w_b:
///   m   = sum_b p_b w_b
///   Y_i = (1/dt) sum_b p_b xi_{b,i} w_b
///   y   = m + dt (A^T m + sum_i C_i^T Y_i)
///   z   = B^T m + sum_i D_i^T Y_i
BackwardSolution solve_bsde(const NoiseTree& tree, const StochasticSystem& sys,
                            const TerminalVariable& y1);

/// Leaf layer of a depth-K field.
TerminalVariable terminal_layer(const NoiseTree& tree,
                                const AdaptedField& field);

/// sum over nodes at depth t of p(node) <a(node), b(node)>.
double depth_inner(const NoiseTree& tree, int t, const AdaptedField& a,
                   const AdaptedField& b);

/// E<a, b> for terminal variables.
double terminal_inner(const NoiseTree& tree, const TerminalVariable& a,
                      const TerminalVariable& b);

/// dt * sum_{t < K} E|u_t|^2.
double control_energy(const NoiseTree& tree, const AdaptedField& u);

/// |E<x_T, y1> - <x0, y0> - dt sum_t E<u_t, z_t>|.
double duality_residual(const NoiseTree& tree, const StochasticSystem& sys,
                        const AdaptedField& u, const Eigen::VectorXd& x0,
                        const TerminalVariable& y1);

/// Matrix S with E|x_K|^2 = x0^T S x0 for the uncontrolled tree dynamics
/// over `steps` steps, and its largest eigenvalue (the discrete c0).
Eigen::MatrixXd tree_second_moment_transfer(const NoiseStep& step,
                                            const StochasticSystem& sys,
                                            int steps);
double tree_growth_constant(const NoiseStep& step, const StochasticSystem& sys,
                            int steps);

/// CSV layout "node,depth,v0,...,v{dim-1}" in breadth-first node order.
void write_field_csv(std::ostream& os, const NoiseTree& tree,
                     const AdaptedField& field);
AdaptedField read_field_csv(std::istream& is, const NoiseTree& tree);

}  // namespace stochobs
