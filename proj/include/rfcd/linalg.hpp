/*
   Copyright 2026 The rfcd Authors

   Licensed under the Apache License, Version 2.0 (the "License");
   you may not use this file except in compliance with the License.
   You may obtain a copy of the License at

       http://www.apache.org/licenses/LICENSE-2.0

   Unless required by applicable law or agreed to in writing, software
   distributed under the License is distributed on an "AS IS" BASIS,
   WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
   See the License for the specific language governing permissions and
   limitations under the License.
*/

#pragma once

#include <atomic>
#include <cmath>
#include <cstddef>
#include <string>

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>
#include <lapacke.h>

#include "rfcd/errors.hpp"

namespace rfcd {

// Process-wide cap on the bytes a single routine may allocate for dense
// matrices. Overridable from the command line.
inline std::atomic<std::size_t>& memory_cap_bytes() {
  static std::atomic<std::size_t> cap{std::size_t{4} << 30};
  return cap;
}

inline void check_memory_budget(double bytes, const std::string& module, const std::string& what) {
  const auto cap = static_cast<double>(memory_cap_bytes().load());
  if (bytes > cap)
    throw ResourceError(module, what + " needs " + std::to_string(static_cast<long long>(bytes / (1 << 20))) +
                                    " MiB, above the memory cap of " +
                                    std::to_string(static_cast<long long>(cap / (1 << 20))) + " MiB");
}

inline double dense_bytes(double rows, double cols, double copies = 1.0) {
  return rows * cols * copies * static_cast<double>(sizeof(double));
}

template <typename Derived>
void symmetrize(Eigen::MatrixBase<Derived>& m) {
  m.derived() = (0.5 * (m + m.transpose())).eval();
}

// max |M - M^T| relative to max |M| (zero for the zero matrix).
inline double asymmetry(const Eigen::MatrixXd& m) {
  const double scale = m.cwiseAbs().maxCoeff();
  if (scale == 0.0) return 0.0;
  return (m - m.transpose()).cwiseAbs().maxCoeff() / scale;
}

// Cholesky factorization of a symmetric positive-definite matrix. Solves
// are const and touch no shared state, so one factor may serve many
// threads.
class SpdFactor {
 public:
  SpdFactor() = default;

  SpdFactor(const Eigen::MatrixXd& m, const std::string& module, const std::string& what = "curvature") {
    if (m.rows() != m.cols()) throw DomainError(module, what + " must be square");
    if (!m.allFinite()) throw SingularCurvatureError(module, what + " has non-finite entries");
    llt_.compute(m);
    if (llt_.info() != Eigen::Success)
      throw SingularCurvatureError(module, what + " is not positive definite (Cholesky failed)");
    const auto diag = llt_.matrixLLT().diagonal();
    const double max_pivot = m.diagonal().cwiseAbs().maxCoeff();
    const double min_pivot = diag.cwiseAbs2().minCoeff();
    if (!(min_pivot > 64.0 * Eigen::NumTraits<double>::epsilon() * max_pivot))
      throw SingularCurvatureError(module, what + " is singular within tolerance (min pivot " +
                                               std::to_string(min_pivot) + ")");
    size_ = m.rows();
  }

  Eigen::Index size() const noexcept { return size_; }

  Eigen::MatrixXd solve(const Eigen::MatrixXd& rhs) const { return llt_.solve(rhs); }
  Eigen::VectorXd solve(const Eigen::VectorXd& rhs) const { return llt_.solve(rhs); }

 private:
  Eigen::LLT<Eigen::MatrixXd> llt_;
  Eigen::Index size_ = 0;
};

// Ascending eigenvalues with orthonormal eigenvectors in the columns.
struct EigSystem {
  Eigen::VectorXd lambdas;
  Eigen::MatrixXd vectors;

  Eigen::Index size() const noexcept { return lambdas.size(); }
};

namespace detail {

inline void check_symmetric_input(const Eigen::MatrixXd& m) {
  if (m.rows() != m.cols()) throw DomainError("spectral-diagnostics", "eigendecompose: matrix must be square");
  if (!m.allFinite()) throw DomainError("spectral-diagnostics", "eigendecompose: non-finite entries");
  if (asymmetry(m) > 1e-8) throw DomainError("spectral-diagnostics", "eigendecompose: matrix is not symmetric");
}

inline lapack_int lapack_dim(Eigen::Index n) {
  return static_cast<lapack_int>(n);
}

}  // namespace detail

namespace detail {

// Cheap randomized check of an eigensystem: for a fixed probe z,
// |M V z - V L z| and |V^T V z - z| must be small relative to the scales
// involved. Costs O(n^2).
inline bool plausible_eigensystem(const Eigen::MatrixXd& m, const EigSystem& eig) {
  const Eigen::Index n = m.rows();
  if (n == 0) return true;
  if (!eig.lambdas.allFinite() || !eig.vectors.allFinite()) return false;
  Eigen::VectorXd z(n);
  for (Eigen::Index i = 0; i < n; ++i) z[i] = std::cos(1.0 + 0.7 * static_cast<double>(i));
  const Eigen::VectorXd w = eig.vectors * z;
  const Eigen::VectorXd lhs = m * w;
  const Eigen::VectorXd rhs = eig.vectors * (eig.lambdas.cwiseProduct(z));
  const double scale = (m.norm() + eig.lambdas.cwiseAbs().maxCoeff()) * z.norm();
  const double tol = 1e-8;
  if ((lhs - rhs).norm() > tol * scale) return false;
  return (eig.vectors.transpose() * w - z).norm() <= tol * z.norm();
}

inline EigSystem lapack_eigendecompose(const Eigen::MatrixXd& m) {
  const Eigen::Index n = m.rows();
  EigSystem out;
  out.vectors = 0.5 * (m + m.transpose());
  out.lambdas.resize(n);
  if (n == 0) return out;
  const lapack_int info = LAPACKE_dsyevd(LAPACK_COL_MAJOR, 'V', 'L', lapack_dim(n), out.vectors.data(),
                                         lapack_dim(n), out.lambdas.data());
  if (info != 0)
    throw NumericalError("spectral-diagnostics", "eigensolver did not converge (info " + std::to_string(info) + ")");
  return out;
}

inline EigSystem eigen_eigendecompose(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(0.5 * (m + m.transpose()));
  if (solver.info() != Eigen::Success) throw NumericalError("spectral-diagnostics", "eigensolver did not converge");
  return {solver.eigenvalues(), solver.eigenvectors()};
}

}  // namespace detail

// Number of dense eigensolves that failed validation of the LAPACK result
// and were recomputed with the built-in solver.
inline std::atomic<int>& eigensolver_fallbacks() {
  static std::atomic<int> count{0};
  return count;
}

// Runs a 256 x 256 LAPACK eigensolve and validates it. Some optimized BLAS
// builds select faulty kernels on particular CPUs; callers may use this to
// detect that before a long run.
inline bool lapack_selftest() {
  const Eigen::Index n = 256;
  Eigen::MatrixXd m(n, n);
  for (Eigen::Index j = 0; j < n; ++j)
    for (Eigen::Index i = 0; i < n; ++i) m(i, j) = std::sin(0.37 * static_cast<double>(i * n + j));
  m = (0.5 * (m + m.transpose())).eval();
  return detail::plausible_eigensystem(m, detail::lapack_eigendecompose(m));
}

// Dense symmetric eigendecomposition (LAPACK divide and conquer). A result
// that fails the probe check is recomputed with Eigen's solver.
inline EigSystem eigendecompose(const Eigen::MatrixXd& m) {
  detail::check_symmetric_input(m);
  const Eigen::Index n = m.rows();
  check_memory_budget(dense_bytes(n, n, 3), "spectral-diagnostics", "eigendecomposition");
  EigSystem out = detail::lapack_eigendecompose(m);
  if (detail::plausible_eigensystem(m, out)) return out;
  eigensolver_fallbacks()++;
  out = detail::eigen_eigendecompose(m);
  if (!detail::plausible_eigensystem(m, out))
    throw NumericalError("spectral-diagnostics", "eigensystem failed the residual check");
  return out;
}

// Eigenvalues only, ascending.
inline Eigen::VectorXd eigenvalues(const Eigen::MatrixXd& m) {
  return eigendecompose(m).lambdas;
}

}  // namespace rfcd
