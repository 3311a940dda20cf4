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


#include <gtest/gtest.h>

#include <cmath>

#include "rfcd/cd_operators.hpp"

namespace rfcd {
namespace {

TeacherConstants unit_constants() {
  TeacherConstants k;
  k.forward = forward_params(0.01, SigmaSpec::isotropic(), 1);
  return k;
}

TeacherCurvature curvature_of(Eigen::MatrixXd u) {
  const int p = static_cast<int>(u.rows());
  return TeacherCurvature(std::move(u), Eigen::MatrixXd(), CurvatureProvenance{0, p, 0, 0, unit_constants()});
}

CdCoefficients coefficients(double a1, double a0, double beta) {
  CdCoefficients c;
  c.a1 = a1;
  c.a0 = a0;
  c.shift.theorem = beta;
  c.shift.pf_drift = beta;
  return c;
}

// Small but complete teacher so that every operator is built the normal way.
struct SmallSystem {
  ExperimentConfig config;
  TeacherConstants constants;
  RandomFeatures features;
  std::optional<TeacherCurvature> curvature;
  CdCoefficients coeffs;

  explicit SmallSystem(double dt = 1e-3) {
    config.d = 12;
    config.psi_p = 6;
    config.psi_n = 3;
    config.dt_step = dt;
    config.mc_constants = 5000;
    config.mc_flow = 5000;
    constants = estimate_teacher_constants(config);
    features = make_random_features(config);
    curvature.emplace(build_teacher_curvature(features, constants, config));
    const auto map = make_teacher_score(features, *curvature, config);
    const auto flow = estimate_flow_constants(map, config);
    coeffs = with_beta(cd_coefficients(flow, config.activation, config), trace_uinv_s(map), config);
  }

  CdOperators operators(double ridge = 0.0) const {
    return assemble_U_cd(features, build_A_core(features, *curvature, constants.mu1, ridge), coeffs, config);
  }
};

Eigen::MatrixXd kernel_basis(const RandomFeatures& f) {
  Eigen::FullPivLU<Eigen::MatrixXd> lu(f.B().transpose());
  return lu.kernel();
}

TEST(ChannelA, ZeroSlopeGivesFeatureGram) {
  const SmallSystem sys;
  const Eigen::MatrixXd a = build_A(sys.features, *sys.curvature, 0.0, 0.0);
  EXPECT_LE((a - sys.features.S()).norm(), 1e-13 * sys.features.S().norm());
}

TEST(ChannelA, CommutingCase) {
  const int d = 5;
  const RandomFeatures f(std::sqrt(static_cast<double>(d)) * Eigen::MatrixXd::Identity(d, d));
  const auto cur = curvature_of(Eigen::MatrixXd::Identity(d, d));
  const double mu1 = 0.6;
  const Eigen::MatrixXd a = build_A(f, cur, mu1, 0.0);
  EXPECT_LE((a - (1.0 - mu1 * mu1) * Eigen::MatrixXd::Identity(d, d)).norm(), 1e-14);
}

TEST(ChannelA, KernelOfFeaturesIsAnnihilated) {
  const SmallSystem sys;
  const Eigen::MatrixXd a = build_A(sys.features, *sys.curvature, sys.constants.mu1, 0.0);
  const Eigen::MatrixXd ker = kernel_basis(sys.features);
  ASSERT_EQ(ker.cols(), sys.features.p() - sys.features.d());
  EXPECT_LE((a * ker).norm(), 1e-10 * a.norm() * ker.norm());
  EXPECT_LE(asymmetry(a), 1e-10);
}

TEST(ChannelA, RidgeAndSingularity) {
  const SmallSystem sys;
  const Eigen::MatrixXd a0 = build_A(sys.features, *sys.curvature, sys.constants.mu1, 0.0);
  const Eigen::MatrixXd a2 = build_A(sys.features, *sys.curvature, sys.constants.mu1, 2.0);
  EXPECT_GT((a0 - a2).norm(), 0.0);
  EXPECT_THROW(build_A(sys.features, *sys.curvature, sys.constants.mu1, -1.0), DomainError);
  const auto singular = curvature_of(Eigen::MatrixXd::Zero(sys.features.p(), sys.features.p()));
  EXPECT_THROW(build_A(sys.features, singular, 0.5, 0.0), SingularCurvatureError);
}

TEST(UCd, SymmetricWithNullspaceAtom) {
  const SmallSystem sys;
  const auto ops = sys.operators();
  const double beta = sys.coeffs.beta();
  EXPECT_LE(asymmetry(ops.U_cd), 1e-10);
  const Eigen::MatrixXd ker = kernel_basis(sys.features);
  for (int j = 0; j < ker.cols(); ++j) {
    const Eigen::VectorXd v = ker.col(j);
    EXPECT_LE((ops.U_cd * v - beta * v).norm(), 1e-10 * std::max(beta, ops.U_cd.norm()) * v.norm());
  }
}

TEST(UCd, AtomMultiplicityFromBothSolvers) {
  const SmallSystem sys;
  const auto ops = sys.operators();
  const double beta = sys.coeffs.beta();
  const auto structured = structured_eigensystem(sys.features, ops);
  const Eigen::VectorXd dense = eigenvalues(ops.U_cd);
  int atom = 0;
  for (Eigen::Index i = 0; i < structured.size(); ++i) atom += std::abs(structured.lambdas[i] - beta) <= 1e-9 * beta;
  EXPECT_GE(atom, sys.features.p() - sys.features.d());
  const double scale = std::max(std::abs(dense.maxCoeff()), std::abs(dense.minCoeff()));
  EXPECT_LE((structured.lambdas - dense).cwiseAbs().maxCoeff(), 1e-10 * scale);
  const Eigen::MatrixXd back = structured.vectors * structured.lambdas.asDiagonal() * structured.vectors.transpose();
  EXPECT_LE((back - ops.U_cd).norm(), 1e-10 * std::max(ops.U_cd.norm(), beta));
}

TEST(UCd, ZeroStepIsZero) {
  const SmallSystem sys(0.0);
  EXPECT_EQ(sys.coeffs.beta(), 0.0);
  const auto ops = sys.operators();
  EXPECT_EQ(ops.U_cd.norm(), 0.0);
}

TEST(UCd, ScalarChannel) {
  const int d = 4;
  const RandomFeatures f(2.0 * Eigen::MatrixXd::Identity(d, d));
  const auto cur = curvature_of(Eigen::MatrixXd::Identity(d, d));
  ExperimentConfig c;
  c.d = d;
  c.psi_p = 1;
  const double mu1 = 0.6, a1 = -0.3, beta = 1e-9;
  const auto ops = assemble_U_cd(f, build_A_core(f, cur, mu1, 0.0), coefficients(a1, 0.07, beta), c);
  const double expected = c.dt_step * c.dt_step * a1 * a1 * (1.0 - mu1 * mu1) + beta;
  EXPECT_LE((ops.U_cd - expected * Eigen::MatrixXd::Identity(d, d)).norm(), 1e-15 * expected * d);
}

TEST(UCd, RejectsMalformedInput) {
  ExperimentConfig c;
  EXPECT_THROW(assemble_U_cd(Eigen::MatrixXd::Zero(2, 3), coefficients(-1, 0, 0), c), DomainError);
  Eigen::MatrixXd bad = Eigen::MatrixXd::Identity(2, 2);
  bad(0, 0) = std::nan("");
  EXPECT_THROW(assemble_U_cd(bad, coefficients(-1, 0, 0), c), DomainError);
}

EigSystem diagonal_system(const Eigen::VectorXd& lambdas) {
  EigSystem e;
  e.lambdas = lambdas;
  e.vectors = Eigen::MatrixXd::Identity(lambdas.size(), lambdas.size());
  return e;
}

TEST(StudentFlow, ZeroTimeIsIdentity) {
  const SmallSystem sys;
  const auto ops = sys.operators();
  const auto eig = structured_eigensystem(sys.features, ops);
  Eigen::MatrixXd b0(sys.features.d(), sys.features.p());
  RandomStream(1, StreamPurpose::kTest).fill_normal(b0);
  const auto s = student_gradient_flow(initial_state(b0, eig), ops, eig, 0.0);
  EXPECT_LE((s.B - b0).norm(), 1e-12 * b0.norm());
  EXPECT_THROW(student_gradient_flow(initial_state(b0, eig), ops, eig, -1.0), DomainError);
}

TEST(StudentFlow, ScalarCurvatureDecaysUniformly) {
  const int p = 6;
  const double cval = 0.4, tau = 3.0;
  const auto eig = eigendecompose(cval * Eigen::MatrixXd::Identity(p, p));
  Eigen::MatrixXd b0(2, p);
  RandomStream(2, StreamPurpose::kTest).fill_normal(b0);
  const auto s = student_gradient_flow(initial_state(b0, eig), eig, tau);
  EXPECT_LE((s.B - std::exp(-2.0 * cval * tau / p) * b0).norm(), 1e-14 * b0.norm());
}

TEST(StudentFlow, TwoLevelEnergyRatio) {
  const double beta = 1e-3, gap = 0.5, tau = 4.0;
  Eigen::VectorXd lambdas(4);
  lambdas << beta, beta, beta + gap, beta + gap;
  const auto eig = diagonal_system(lambdas);
  Eigen::MatrixXd b0(3, 4);
  RandomStream(3, StreamPurpose::kTest).fill_normal(b0);
  const auto start = initial_state(b0, eig);
  const auto s = student_gradient_flow(start, eig, tau);
  const double r0 = (start.mode_energies[2] + start.mode_energies[3]) / (start.mode_energies[0] + start.mode_energies[1]);
  const double r1 = (s.mode_energies[2] + s.mode_energies[3]) / (s.mode_energies[0] + s.mode_energies[1]);
  EXPECT_NEAR(r1 / r0, std::exp(-4.0 * gap * tau / 4.0), 1e-14);
}

TEST(StudentFlow, EnergyNonIncreasingForPsdCurvature) {
  Eigen::MatrixXd m(8, 8);
  RandomStream(4, StreamPurpose::kTest).fill_normal(m);
  const Eigen::MatrixXd u = m * m.transpose() / 8.0;
  const auto eig = eigendecompose(u);
  Eigen::MatrixXd b0(3, 8);
  RandomStream(5, StreamPurpose::kTest).fill_normal(b0);
  const auto start = initial_state(b0, eig);
  double prev = b0.squaredNorm();
  for (double tau : {0.1, 1.0, 5.0, 20.0, 100.0}) {
    const double e = student_gradient_flow(start, eig, tau).B.squaredNorm();
    EXPECT_LE(e, prev * (1.0 + 1e-12));
    prev = e;
  }
}

TEST(StudentFlow, LossIdentityAndMonotonicity) {
  const SmallSystem sys;
  const auto ops = sys.operators();
  const auto eig = structured_eigensystem(sys.features, ops);
  Eigen::MatrixXd b0(sys.features.d(), sys.features.p());
  RandomStream(6, StreamPurpose::kTest).fill_normal(b0);
  const auto start = initial_state(b0, eig);
  double prev = spectral_loss(start, eig);
  for (double tau : {1e2, 1e4, 1e5, 1e6}) {
    const auto s = student_gradient_flow(start, ops, eig, tau);
    const double direct = quadratic_loss(s.B, ops.U_cd);
    const double spectral = spectral_loss(s, eig);
    EXPECT_NEAR(direct, spectral, 1e-8 * std::abs(direct));
    EXPECT_LE(spectral, prev + 1e-15 * std::abs(prev));
    prev = spectral;
  }
}

}  // namespace
}  // namespace rfcd
