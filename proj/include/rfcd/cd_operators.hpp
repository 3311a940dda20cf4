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

// The distillation curvature U_cd = dt^2 a1^2 A + beta I, its channel
// A = S - mu1^2 S (U + gamma I)^{-1} S, and closed-form student dynamics
// under the quadratic one-step loss.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/QR>

#include "rfcd/config.hpp"
#include "rfcd/errors.hpp"
#include "rfcd/features.hpp"
#include "rfcd/flow.hpp"
#include "rfcd/linalg.hpp"
#include "rfcd/teacher.hpp"

namespace rfcd {

// A written as B C B^T with the d x d core C = I - mu1^2 B^T (U + gamma I)^{-1} B.
struct ChannelA {
  Eigen::MatrixXd core;
  double ridge = 0.0;
  double mu1 = 0.0;
};

inline ChannelA build_A_core(const RandomFeatures& features, const TeacherCurvature& curvature, double mu1,
                             double ridge) {
  if (!(ridge >= 0.0) || !std::isfinite(ridge)) throw DomainError("cd-operators", "ridge must be finite and >= 0");
  if (features.p() != curvature.p()) throw DomainError("cd-operators", "features and curvature disagree on p");
  Eigen::MatrixXd k;
  if (ridge == 0.0) {
    k = curvature.factor().solve(features.B());
  } else {
    Eigen::MatrixXd shifted = curvature.U();
    shifted.diagonal().array() += ridge;
    k = SpdFactor(shifted, "cd-operators", "U + ridge I").solve(features.B());
  }
  ChannelA out;
  out.ridge = ridge;
  out.mu1 = mu1;
  out.core = -(mu1 * mu1) * (features.B().transpose() * k);
  out.core.diagonal().array() += 1.0;
  symmetrize(out.core);
  return out;
}

inline Eigen::MatrixXd expand_A(const RandomFeatures& features, const ChannelA& channel) {
  const Eigen::MatrixXd bc = features.B() * channel.core;
  Eigen::MatrixXd a = bc * features.B().transpose();
  symmetrize(a);
  return a;
}

inline Eigen::MatrixXd build_A(const RandomFeatures& features, const TeacherCurvature& curvature, double mu1,
                               double ridge) {
  const int p = features.p();
  check_memory_budget(dense_bytes(p, p, 2), "cd-operators", "channel A");
  return expand_A(features, build_A_core(features, curvature, mu1, ridge));
}

struct CdOperators {
  Eigen::MatrixXd A;
  Eigen::MatrixXd U_cd;
  double ridge_used = 0.0;
  CdCoefficients coeffs_used;
  // Scale dt^2 a1^2 applied to A.
  double channel_scale = 0.0;
  // Core of A when it was built through build_A_core, for the structured
  // eigensolver.
  std::optional<Eigen::MatrixXd> core;

  int p() const noexcept { return static_cast<int>(U_cd.rows()); }
};

inline CdOperators assemble_U_cd(Eigen::MatrixXd a, const CdCoefficients& coeffs, const ExperimentConfig& config,
                                 double ridge_used = 0.0) {
  if (a.rows() != a.cols()) throw DomainError("cd-operators", "A must be square");
  if (!a.allFinite()) throw DomainError("cd-operators", "A has non-finite entries");
  CdOperators ops;
  ops.ridge_used = ridge_used;
  ops.coeffs_used = coeffs;
  ops.channel_scale = config.dt_step * config.dt_step * coeffs.a1 * coeffs.a1;
  ops.U_cd = ops.channel_scale * a;
  ops.U_cd.diagonal().array() += coeffs.beta();
  symmetrize(ops.U_cd);
  ops.A = std::move(a);
  return ops;
}

inline CdOperators assemble_U_cd(const RandomFeatures& features, const ChannelA& channel,
                                 const CdCoefficients& coeffs, const ExperimentConfig& config) {
  check_memory_budget(dense_bytes(features.p(), features.p(), 3), "cd-operators", "U_cd");
  auto ops = assemble_U_cd(expand_A(features, channel), coeffs, config, channel.ridge);
  ops.core = channel.core;
  return ops;
}

// Eigensystem of U_cd from a QR factorization of B: with B = Q R, the
// orthogonal complement of range(B) carries the eigenvalue beta exactly and
// the range block reduces to a min(p, d) dense problem.
inline EigSystem structured_eigensystem(const RandomFeatures& features, const CdOperators& ops) {
  if (!ops.core) throw DomainError("cd-operators", "structured eigensystem needs the core of A");
  const int p = features.p();
  const int d = features.d();
  const int r = std::min(p, d);
  check_memory_budget(dense_bytes(p, p, 3), "cd-operators", "structured eigensystem");

  Eigen::HouseholderQR<Eigen::MatrixXd> qr(features.B());
  const Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(p, p);
  const Eigen::MatrixXd rr = qr.matrixQR().topRows(r).triangularView<Eigen::Upper>();

  Eigen::MatrixXd block = ops.channel_scale * (rr * *ops.core * rr.transpose());
  symmetrize(block);
  const EigSystem inner = eigendecompose(block);
  const double beta = ops.coeffs_used.beta();

  std::vector<double> values(p);
  Eigen::MatrixXd vectors(p, p);
  vectors.leftCols(r) = q.leftCols(r) * inner.vectors;
  for (int i = 0; i < r; ++i) values[i] = inner.lambdas[i] + beta;
  vectors.rightCols(p - r) = q.rightCols(p - r);
  for (int i = r; i < p; ++i) values[i] = beta;

  std::vector<int> order(p);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int x, int y) { return values[x] < values[y]; });
  EigSystem out;
  out.lambdas.resize(p);
  out.vectors.resize(p, p);
  for (int i = 0; i < p; ++i) {
    out.lambdas[i] = values[order[i]];
    out.vectors.col(i) = vectors.col(order[i]);
  }
  return out;
}

struct StudentFlowState {
  Eigen::MatrixXd B0;  // d x p
  double tau = 0.0;
  Eigen::MatrixXd B;   // B(tau)
  // |B(tau) v_i|^2 for the eigenvectors v_i of U_cd.
  Eigen::VectorXd mode_energies;
};

inline StudentFlowState initial_state(Eigen::MatrixXd b0, const EigSystem& eig) {
  if (b0.cols() != eig.size()) throw DomainError("cd-operators", "student layer width does not match U_cd");
  StudentFlowState s;
  s.mode_energies = (b0 * eig.vectors).colwise().squaredNorm().transpose();
  s.B = b0;
  s.B0 = std::move(b0);
  return s;
}

// Gradient flow of L(B) = Tr(B U_cd B^T)/p from B0 for time tau:
// B(tau) = B0 exp(-(2/p) tau U_cd).
inline StudentFlowState student_gradient_flow(const StudentFlowState& state, const EigSystem& eig, double tau) {
  if (!(tau >= 0.0) || !std::isfinite(tau)) throw DomainError("cd-operators", "flow time must be finite and >= 0");
  if (state.B0.cols() != eig.size()) throw DomainError("cd-operators", "student layer width does not match U_cd");
  const double p = static_cast<double>(eig.size());
  const Eigen::ArrayXd decay = (-(2.0 / p) * tau * eig.lambdas.array()).exp();
  const Eigen::MatrixXd coords = state.B0 * eig.vectors;
  StudentFlowState out;
  out.B0 = state.B0;
  out.tau = tau;
  out.B = (coords * decay.matrix().asDiagonal()) * eig.vectors.transpose();
  out.mode_energies = coords.colwise().squaredNorm().transpose().array() * decay.square();
  return out;
}

inline StudentFlowState student_gradient_flow(const StudentFlowState& state, const CdOperators& ops,
                                              const EigSystem& eig, double tau) {
  if (ops.p() != eig.size()) throw DomainError("cd-operators", "eigensystem does not belong to U_cd");
  return student_gradient_flow(state, eig, tau);
}

// (1/p) Tr(B U B^T) evaluated directly.
inline double quadratic_loss(const Eigen::MatrixXd& b, const Eigen::MatrixXd& u) {
  return (b * u).cwiseProduct(b).sum() / static_cast<double>(u.rows());
}

// The same loss from mode energies: sum_i lambda_i E_i / p.
inline double spectral_loss(const StudentFlowState& state, const EigSystem& eig) {
  return eig.lambdas.dot(state.mode_energies) / static_cast<double>(eig.size());
}

}  // namespace rfcd
