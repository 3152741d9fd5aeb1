#include "stochobs/core_model.hpp"

#include <complex>
#include <sstream>
#include <stdexcept>

#include <Eigen/Eigenvalues>
#include <Eigen/SVD>

#include "stochobs/errors.hpp"

namespace stochobs {

StochasticSystem StochasticSystem::Zero(int n, int m, int d) {
  StochasticSystem sys;
  sys.n = n;
  sys.m = m;
  sys.d = d;
  sys.A = Eigen::MatrixXd::Zero(n, n);
  sys.B = Eigen::MatrixXd::Zero(n, m);
  sys.C.assign(d, Eigen::MatrixXd::Zero(n, n));
  sys.D.assign(d, Eigen::MatrixXd::Zero(n, m));
  return sys;
}

HorizonConfig::HorizonConfig(double horizon, int steps) : T(horizon), K(steps) {
  if (!(horizon > 0.0) || steps < 1) {
    throw std::invalid_argument("HorizonConfig: need T > 0 and K >= 1");
  }
}

namespace {

void check_matrix(const std::string& name, const Eigen::MatrixXd& M,
                  Eigen::Index rows, Eigen::Index cols,
                  std::vector<std::string>& out) {
  if (M.rows() != rows || M.cols() != cols) {
    std::ostringstream msg;
    msg << name << " shape: expected " << rows << "x" << cols << ", got "
        << M.rows() << "x" << M.cols();
    out.push_back(msg.str());
    return;
  }
  if (!M.allFinite()) out.push_back(name + " non-finite entry");
}

}  // namespace

std::vector<std::string> validate_system(const StochasticSystem& sys) {
  std::vector<std::string> out;
  if (sys.n < 1) out.push_back("n must be positive");
  if (sys.m < 1) out.push_back("m must be positive");
  if (sys.d < 1) out.push_back("d must be positive");
  if (!out.empty()) return out;

  check_matrix("A", sys.A, sys.n, sys.n, out);
  check_matrix("B", sys.B, sys.n, sys.m, out);
  if (static_cast<int>(sys.C.size()) != sys.d) {
    out.push_back("C count: expected " + std::to_string(sys.d) + ", got " +
                  std::to_string(sys.C.size()));
  } else {
    for (int i = 0; i < sys.d; ++i) {
      check_matrix("C" + std::to_string(i + 1), sys.C[i], sys.n, sys.n, out);
    }
  }
  if (static_cast<int>(sys.D.size()) != sys.d) {
    out.push_back("D count: expected " + std::to_string(sys.d) + ", got " +
                  std::to_string(sys.D.size()));
  } else {
    for (int i = 0; i < sys.d; ++i) {
      check_matrix("D" + std::to_string(i + 1), sys.D[i], sys.n, sys.m, out);
    }
  }
  return out;
}

void require_valid(const StochasticSystem& sys) {
  const auto violations = validate_system(sys);
  if (violations.empty()) return;
  std::string msg = "invalid system:";
  for (const auto& v : violations) msg += " [" + v + "]";
  throw std::invalid_argument(msg);
}

bool hautus_stabilizability(const Eigen::MatrixXd& A, const Eigen::MatrixXd& B,
                            double tol) {
  if (A.rows() != A.cols() || B.rows() != A.rows()) {
    throw std::invalid_argument("hautus_stabilizability: inconsistent shapes");
  }
  if (!(tol > 0.0)) {
    throw std::invalid_argument("hautus_stabilizability: tol must be positive");
  }
  const Eigen::Index n = A.rows();
  const Eigen::Index m = B.cols();

  Eigen::EigenSolver<Eigen::MatrixXd> eig(A, /*computeEigenvectors=*/false);
  if (eig.info() != Eigen::Success) {
    throw NumericalFailure("hautus_stabilizability: eigenvalue solver failed");
  }

  using Complex = std::complex<double>;
  Eigen::MatrixXcd pencil(n, n + m);
  for (Eigen::Index k = 0; k < n; ++k) {
    const Complex lambda = eig.eigenvalues()(k);
    // Closed right half-plane, widened by tol so eigenvalues rounded just
    // below the axis are still tested.
    if (lambda.real() < -tol) continue;

    pencil.leftCols(n) =
        lambda * Eigen::MatrixXcd::Identity(n, n) - A.cast<Complex>();
    pencil.rightCols(m) = B.cast<Complex>();
    Eigen::JacobiSVD<Eigen::MatrixXcd> svd(pencil);
    const auto& sv = svd.singularValues();
    const double threshold = tol * (sv.size() > 0 ? sv(0) : 0.0);
    Eigen::Index rank = 0;
    for (Eigen::Index j = 0; j < sv.size(); ++j) {
      if (sv(j) > threshold && sv(j) > 0.0) ++rank;
    }
    if (rank < n) return false;
  }
  return true;
}

}  // namespace stochobs
