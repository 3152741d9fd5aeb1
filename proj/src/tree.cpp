#include "stochobs/tree.hpp"

#include <cmath>
#include <iomanip>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include <Eigen/Eigenvalues>

#include "stochobs/errors.hpp"

namespace stochobs {

TreeDriver TreeDriver::quantized_gaussian(int levels) {
  if (levels < 3) {
    throw std::invalid_argument("quantized_gaussian driver needs >= 3 levels");
  }
  return {DriverKind::kQuantizedGaussian, levels};
}

std::string TreeDriver::name() const {
  switch (kind) {
    case DriverKind::kBernoulli:
      return "bernoulli";
    case DriverKind::kTrinomial:
      return "trinomial";
    case DriverKind::kQuantizedGaussian:
      return "quantized_gaussian(" + std::to_string(levels) + ")";
  }
  return "unknown";
}

TreeDriver TreeDriver::parse(const std::string& text) {
  if (text == "bernoulli") return bernoulli();
  if (text == "trinomial") return trinomial();
  const std::string prefix = "quantized_gaussian";
  if (text.rfind(prefix, 0) == 0) {
    std::string rest = text.substr(prefix.size());
    if (rest.empty()) return quantized_gaussian(3);
    if (rest.size() >= 3 && rest.front() == '(' && rest.back() == ')') {
      const std::string digits = rest.substr(1, rest.size() - 2);
      std::size_t used = 0;
      int levels = 0;
      try {
        levels = std::stoi(digits, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used == digits.size() && used > 0) return quantized_gaussian(levels);
    }
  }
  throw std::invalid_argument("unknown driver '" + text + "'");
}

void TreeDriver::unit_support(Eigen::VectorXd& points,
                              Eigen::VectorXd& probs) const {
  switch (kind) {
    case DriverKind::kBernoulli:
      points = Eigen::Vector2d(-1.0, 1.0);
      probs = Eigen::Vector2d(0.5, 0.5);
      return;
    case DriverKind::kTrinomial:
      points = Eigen::Vector3d(-std::sqrt(3.0), 0.0, std::sqrt(3.0));
      probs = Eigen::Vector3d(1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0);
      return;
    case DriverKind::kQuantizedGaussian: {
      // Golub-Welsch for the probabilists' Hermite weight: the Jacobi matrix
      // has zero diagonal and off-diagonal sqrt(k).
      const int L = levels;
      Eigen::MatrixXd J = Eigen::MatrixXd::Zero(L, L);
      for (int k = 1; k < L; ++k) {
        J(k - 1, k) = J(k, k - 1) = std::sqrt(static_cast<double>(k));
      }
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(J);
      if (eig.info() != Eigen::Success) {
        throw NumericalFailure("Gauss-Hermite: eigenvalue solver failed");
      }
      Eigen::VectorXd x = eig.eigenvalues();
      Eigen::VectorXd w = eig.eigenvectors().row(0).transpose().array().square();
      // Enforce the symmetry the rule has exactly, then pin the first two
      // moments to 0 and 1.
      Eigen::VectorXd xs(L), ws(L);
      for (int k = 0; k < L; ++k) {
        xs(k) = 0.5 * (x(k) - x(L - 1 - k));
        ws(k) = 0.5 * (w(k) + w(L - 1 - k));
      }
      ws /= ws.sum();
      xs /= std::sqrt(ws.dot(xs.cwiseAbs2()));
      points = xs;
      probs = ws;
      return;
    }
  }
}

NoiseStep make_noise_step(const TreeDriver& driver, double delta_t, int d) {
  if (!(delta_t > 0.0) || d < 1) {
    throw std::invalid_argument("make_noise_step: need delta_t > 0 and d >= 1");
  }
  Eigen::VectorXd points, probs;
  driver.unit_support(points, probs);
  const int s = static_cast<int>(points.size());
  int b = 1;
  for (int i = 0; i < d; ++i) {
    if (b > std::numeric_limits<int>::max() / s) {
      throw BudgetExceeded("noise step branching", std::numeric_limits<int>::max(),
                           std::numeric_limits<int>::max());
    }
    b *= s;
  }

  NoiseStep step;
  step.delta_t = delta_t;
  step.d = d;
  step.increments.resize(b, d);
  step.probs.resize(b);
  const double scale = std::sqrt(delta_t);
  for (int k = 0; k < b; ++k) {
    int rem = k;
    double p = 1.0;
    for (int i = d - 1; i >= 0; --i) {
      const int idx = rem % s;
      rem /= s;
      step.increments(k, i) = scale * points(idx);
      p *= probs(idx);
    }
    step.probs(k) = p;
  }
  return step;
}

NoiseTree::NoiseTree(TreeDriver driver, NoiseStep step, int K)
    : driver_(driver), step_(std::move(step)), K_(K) {
  const Eigen::Index b = step_.branching();
  depth_begin_.resize(K_ + 2);
  depth_begin_[0] = 0;
  Eigen::Index width = 1;
  for (int t = 0; t <= K_; ++t) {
    depth_begin_[t + 1] = depth_begin_[t] + width;
    width *= b;
  }
  const Eigen::Index total = depth_begin_.back();
  parent_.assign(total, -1);
  depth_.assign(total, 0);
  branch_.assign(total, -1);
  prob_.assign(total, 1.0);
  for (int t = 0; t < K_; ++t) {
    for (Eigen::Index j = 0; j < depth_size(t); ++j) {
      const Eigen::Index node = depth_begin_[t] + j;
      const Eigen::Index child0 = depth_begin_[t + 1] + j * b;
      for (Eigen::Index k = 0; k < b; ++k) {
        const Eigen::Index c = child0 + k;
        parent_[c] = node;
        depth_[c] = t + 1;
        branch_[c] = static_cast<int>(k);
        prob_[c] = prob_[node] * step_.probs(k);
      }
    }
  }
}

Eigen::Index NoiseTree::first_child(Eigen::Index node) const {
  const int t = depth_[node];
  return depth_begin_[t + 1] + (node - depth_begin_[t]) * branching();
}

Eigen::VectorXd NoiseTree::leaf_probs() const {
  return Eigen::Map<const Eigen::VectorXd>(prob_.data() + depth_begin_[K_],
                                           leaf_count());
}

NoiseTree build_tree(const TreeDriver& driver, const HorizonConfig& horizon,
                     int d, std::size_t max_leaves) {
  if (horizon.K < 1 || !(horizon.T > 0.0)) {
    throw std::invalid_argument("build_tree: need T > 0 and K >= 1");
  }
  NoiseStep step = make_noise_step(driver, horizon.delta_t(), d);
  const auto b = static_cast<std::size_t>(step.branching());
  std::size_t leaves = 1;
  for (int t = 0; t < horizon.K; ++t) {
    if (leaves > max_leaves / b) {
      // Report the exact size when it fits, otherwise a saturated count.
      long double exact = std::pow(static_cast<long double>(b), horizon.K);
      const auto requested =
          exact > static_cast<long double>(std::numeric_limits<std::size_t>::max())
              ? std::numeric_limits<std::size_t>::max()
              : static_cast<std::size_t>(exact);
      throw BudgetExceeded("build_tree: leaf count", requested, max_leaves);
    }
    leaves *= b;
  }
  return NoiseTree(driver, std::move(step), horizon.K);
}

AdaptedField AdaptedField::Zero(const NoiseTree& tree, int dim, int depth) {
  AdaptedField f;
  f.dim = dim;
  f.depth = depth;
  f.values = Eigen::MatrixXd::Zero(dim, tree.nodes_through(depth));
  return f;
}

TerminalVariable TerminalVariable::from_flat(const Eigen::VectorXd& v, int n) {
  if (n < 1 || v.size() % n != 0) {
    throw std::invalid_argument("TerminalVariable::from_flat: size mismatch");
  }
  TerminalVariable y;
  y.values = Eigen::Map<const Eigen::MatrixXd>(v.data(), n, v.size() / n);
  return y;
}

AdaptedField simulate_forward(const NoiseTree& tree,
                              const StochasticSystem& sys,
                              const Eigen::VectorXd& x0,
                              const AdaptedField& u) {
  require_valid(sys);
  if (tree.d() != sys.d) {
    throw std::invalid_argument("simulate_forward: noise dimension mismatch");
  }
  if (x0.size() != sys.n) {
    throw std::invalid_argument("simulate_forward: x0 must have size n");
  }
  const bool has_control = u.dim != 0;
  if (has_control &&
      (u.dim != sys.m || u.values.cols() < tree.internal_count())) {
    throw std::invalid_argument(
        "simulate_forward: control must be an m-dimensional field on all "
        "internal nodes");
  }

  const int K = tree.K();
  const double dt = tree.delta_t();
  const NoiseStep& step = tree.step();
  const int b = step.branching();

  AdaptedField x = AdaptedField::Zero(tree, sys.n, K);
  x.values.col(0) = x0;
  Eigen::VectorXd drift(sys.n);
  Eigen::MatrixXd diffusion(sys.n, sys.d);
  for (Eigen::Index node = 0; node < tree.internal_count(); ++node) {
    const auto xn = x.values.col(node);
    drift = xn + dt * (sys.A * xn);
    for (int i = 0; i < sys.d; ++i) diffusion.col(i) = sys.C[i] * xn;
    if (has_control) {
      const auto un = u.values.col(node);
      drift += dt * (sys.B * un);
      for (int i = 0; i < sys.d; ++i) diffusion.col(i) += sys.D[i] * un;
    }
    const Eigen::Index c0 = tree.first_child(node);
    for (int k = 0; k < b; ++k) {
      x.values.col(c0 + k) =
          drift + diffusion * step.increments.row(k).transpose();
    }
  }
  return x;
}

AdaptedField simulate_forward(const NoiseTree& tree,
                              const StochasticSystem& sys,
                              const Eigen::VectorXd& x0) {
  return simulate_forward(tree, sys, x0, AdaptedField{});
}

BackwardSolution solve_bsde(const NoiseTree& tree, const StochasticSystem& sys,
                            const TerminalVariable& y1) {
  require_valid(sys);
  if (tree.d() != sys.d) {
    throw std::invalid_argument("solve_bsde: noise dimension mismatch");
  }
  if (y1.values.rows() != sys.n || y1.values.cols() != tree.leaf_count()) {
    throw std::invalid_argument("solve_bsde: terminal variable must be n x L");
  }
  if (!y1.values.allFinite()) {
    throw std::invalid_argument("solve_bsde: terminal variable not finite");
  }

  const int K = tree.K();
  const double dt = tree.delta_t();
  const NoiseStep& step = tree.step();
  const int b = step.branching();

  BackwardSolution sol;
  sol.y = AdaptedField::Zero(tree, sys.n, K);
  sol.Y.assign(sys.d, AdaptedField::Zero(tree, sys.n, K - 1));
  sol.z = AdaptedField::Zero(tree, sys.m, K - 1);
  sol.y.values.rightCols(tree.leaf_count()) = y1.values;

  const Eigen::MatrixXd At = sys.A.transpose();
  const Eigen::MatrixXd Bt = sys.B.transpose();
  // Weighted children blocks: m = W p and Y_i = W (p .* xi_i) / dt.
  const Eigen::VectorXd& p = step.probs;
  Eigen::MatrixXd noise_weights(b, sys.d);
  for (int i = 0; i < sys.d; ++i) {
    noise_weights.col(i) = p.cwiseProduct(step.increments.col(i)) / dt;
  }

  Eigen::VectorXd mean(sys.n);
  Eigen::MatrixXd Yn(sys.n, sys.d);
  for (int t = K - 1; t >= 0; --t) {
    for (Eigen::Index j = 0; j < tree.depth_size(t); ++j) {
      const Eigen::Index node = tree.depth_begin(t) + j;
      const auto children = sol.y.values.middleCols(tree.first_child(node), b);
      mean.noalias() = children * p;
      Yn.noalias() = children * noise_weights;
      Eigen::VectorXd drift = At * mean;
      Eigen::VectorXd out = Bt * mean;
      for (int i = 0; i < sys.d; ++i) {
        drift += sys.C[i].transpose() * Yn.col(i);
        out += sys.D[i].transpose() * Yn.col(i);
        sol.Y[i].values.col(node) = Yn.col(i);
      }
      sol.y.values.col(node) = mean + dt * drift;
      sol.z.values.col(node) = out;
    }
  }
  sol.y0 = sol.y.values.col(0);
  return sol;
}

TerminalVariable terminal_layer(const NoiseTree& tree,
                                const AdaptedField& field) {
  if (field.depth != tree.K()) {
    throw std::invalid_argument("terminal_layer: field must reach depth K");
  }
  TerminalVariable y;
  y.values = field.values.rightCols(tree.leaf_count());
  return y;
}

double depth_inner(const NoiseTree& tree, int t, const AdaptedField& a,
                   const AdaptedField& b) {
  double acc = 0.0;
  const Eigen::Index begin = tree.depth_begin(t);
  for (Eigen::Index j = 0; j < tree.depth_size(t); ++j) {
    const Eigen::Index node = begin + j;
    acc += tree.prob(node) * a.values.col(node).dot(b.values.col(node));
  }
  return acc;
}

double terminal_inner(const NoiseTree& tree, const TerminalVariable& a,
                      const TerminalVariable& b) {
  const Eigen::VectorXd p = tree.leaf_probs();
  return (a.values.cwiseProduct(b.values).colwise().sum()).dot(p.transpose());
}

double control_energy(const NoiseTree& tree, const AdaptedField& u) {
  double acc = 0.0;
  for (int t = 0; t < tree.K(); ++t) acc += depth_inner(tree, t, u, u);
  return tree.delta_t() * acc;
}

double duality_residual(const NoiseTree& tree, const StochasticSystem& sys,
                        const AdaptedField& u, const Eigen::VectorXd& x0,
                        const TerminalVariable& y1) {
  const AdaptedField x = simulate_forward(tree, sys, x0, u);
  const BackwardSolution bs = solve_bsde(tree, sys, y1);
  const double lhs = terminal_inner(tree, terminal_layer(tree, x), y1);
  double control_term = 0.0;
  if (u.dim != 0) {
    for (int t = 0; t < tree.K(); ++t) {
      control_term += depth_inner(tree, t, u, bs.z);
    }
    control_term *= tree.delta_t();
  }
  return std::abs(lhs - x0.dot(bs.y0) - control_term);
}

Eigen::MatrixXd tree_second_moment_transfer(const NoiseStep& step,
                                            const StochasticSystem& sys,
                                            int steps) {
  require_valid(sys);
  const int n = sys.n;
  const double dt = step.delta_t;
  std::vector<Eigen::MatrixXd> G(step.branching());
  for (int k = 0; k < step.branching(); ++k) {
    G[k] = Eigen::MatrixXd::Identity(n, n) + dt * sys.A;
    for (int i = 0; i < sys.d; ++i) G[k] += step.increments(k, i) * sys.C[i];
  }
  Eigen::MatrixXd S = Eigen::MatrixXd::Identity(n, n);
  for (int t = 0; t < steps; ++t) {
    Eigen::MatrixXd next = Eigen::MatrixXd::Zero(n, n);
    for (int k = 0; k < step.branching(); ++k) {
      next += step.probs(k) * G[k].transpose() * S * G[k];
    }
    S = 0.5 * (next + next.transpose());
  }
  return S;
}

double tree_growth_constant(const NoiseStep& step, const StochasticSystem& sys,
                            int steps) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(
      tree_second_moment_transfer(step, sys, steps), Eigen::EigenvaluesOnly);
  if (eig.info() != Eigen::Success) {
    throw NumericalFailure("tree_growth_constant: eigenvalue solver failed");
  }
  return eig.eigenvalues().maxCoeff();
}

void write_field_csv(std::ostream& os, const NoiseTree& tree,
                     const AdaptedField& field) {
  os << "node,depth";
  for (int k = 0; k < field.dim; ++k) os << ",v" << k;
  os << '\n';
  os << std::setprecision(17);
  for (Eigen::Index node = 0; node < field.values.cols(); ++node) {
    os << node << ',' << tree.depth(node);
    for (int k = 0; k < field.dim; ++k) os << ',' << field.values(k, node);
    os << '\n';
  }
}

AdaptedField read_field_csv(std::istream& is, const NoiseTree& tree) {
  std::string line;
  if (!std::getline(is, line) || line.rfind("node,depth", 0) != 0) {
    throw std::invalid_argument("read_field_csv: missing header");
  }
  int dim = 0;
  for (char ch : line) dim += (ch == ',');
  dim -= 1;
  std::vector<std::vector<double>> rows;
  int max_depth = 0;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<double> vals;
    long long node = -1;
    int depth = -1;
    std::getline(ss, cell, ',');
    node = std::stoll(cell);
    std::getline(ss, cell, ',');
    depth = std::stoi(cell);
    if (node != static_cast<long long>(rows.size()) ||
        node >= tree.node_count() || depth != tree.depth(node)) {
      throw std::invalid_argument("read_field_csv: node order mismatch");
    }
    while (std::getline(ss, cell, ',')) vals.push_back(std::stod(cell));
    if (static_cast<int>(vals.size()) != dim) {
      throw std::invalid_argument("read_field_csv: ragged row");
    }
    max_depth = depth;
    rows.push_back(std::move(vals));
  }
  AdaptedField f = AdaptedField::Zero(tree, dim, max_depth);
  if (static_cast<Eigen::Index>(rows.size()) != f.values.cols()) {
    throw std::invalid_argument("read_field_csv: incomplete depth layer");
  }
  for (std::size_t c = 0; c < rows.size(); ++c) {
    for (int k = 0; k < dim; ++k) f.values(k, c) = rows[c][k];
  }
  return f;
}

}  // namespace stochobs
