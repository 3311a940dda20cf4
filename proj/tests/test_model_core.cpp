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

#include "rfcd/activation.hpp"
#include "rfcd/config.hpp"
#include "rfcd/features.hpp"
#include "rfcd/forward.hpp"
#include "rfcd/linalg.hpp"
#include "rfcd/moments.hpp"

namespace rfcd {
namespace {

// High-precision references computed with mpmath at 30 digits.
constexpr double kDeltaVar001 = 0.019801326693244698187;
constexpr double kSech2Mean = 0.60570550960215882558;  // E[sech^2(Z)], Z ~ N(0, 1)

TEST(Config, DefaultsValidate) {
  ExperimentConfig c;
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(c.p(), 3200);
  EXPECT_EQ(c.n(), 400);
}

TEST(Config, RejectsBadValues) {
  const auto rejects = [](auto mutate) {
    ExperimentConfig c;
    mutate(c);
    EXPECT_THROW(c.validate(), DomainError);
  };
  rejects([](ExperimentConfig& c) { c.d = 0; });
  rejects([](ExperimentConfig& c) { c.psi_p = 0.333; });
  rejects([](ExperimentConfig& c) { c.psi_n = 0.0; });
  rejects([](ExperimentConfig& c) { c.t_prime = 0.0; });
  rejects([](ExperimentConfig& c) { c.dt_step = -1e-3; });
  rejects([](ExperimentConfig& c) { c.ridge_gamma = -1.0; });
  rejects([](ExperimentConfig& c) { c.mc_flow = 0; });
  rejects([](ExperimentConfig& c) { c.sigma_spec = SigmaSpec::isotropic(0.0); });
  rejects([](ExperimentConfig& c) { c.sigma_spec = SigmaSpec::diagonal(Eigen::VectorXd::Ones(3)); });
}

TEST(Config, ParsesNames) {
  EXPECT_EQ(parse_activation("erf"), ActivationKind::kErf);
  EXPECT_EQ(parse_beta_convention("pf-drift"), BetaConvention::kPfDrift);
  EXPECT_THROW(parse_activation("relu"), DomainError);
  EXPECT_THROW(parse_beta_convention("other"), DomainError);
}

TEST(Activation, IdentityIsLinear) {
  const Activation act(ActivationKind::kIdentity);
  for (double x : {-3.0, -0.5, 0.0, 2.0}) {
    EXPECT_EQ(act.sigma(x), x);
    EXPECT_EQ(act.sigma_prime(x), 1.0);
    EXPECT_EQ(act.sigma_second(x), 0.0);
  }
}

TEST(Activation, TanhDerivativesMatchFiniteDifferences) {
  const Activation act(ActivationKind::kTanh);
  const double h = 1e-4;
  for (double x = -4.0; x <= 4.0; x += 0.25) {
    EXPECT_LT(std::abs(act.sigma(x)), 1.0);
    EXPECT_NEAR(act.sigma_prime(x), 1.0 - act.sigma(x) * act.sigma(x), 1e-15);
    const double fd1 = (act.sigma(x + h) - act.sigma(x - h)) / (2 * h);
    const double fd2 = (act.sigma_prime(x + h) - act.sigma_prime(x - h)) / (2 * h);
    EXPECT_LE(std::abs(fd1 - act.sigma_prime(x)), 2.0 * h * h);
    EXPECT_LE(std::abs(fd2 - act.sigma_second(x)), 4.0 * h * h);
  }
}

TEST(Activation, ErfDerivativesMatchFiniteDifferences) {
  const Activation act(ActivationKind::kErf);
  const double h = 1e-4;
  for (double x = -3.0; x <= 3.0; x += 0.25) {
    const double fd1 = (act.sigma(x + h) - act.sigma(x - h)) / (2 * h);
    const double fd2 = (act.sigma_prime(x + h) - act.sigma_prime(x - h)) / (2 * h);
    EXPECT_LE(std::abs(fd1 - act.sigma_prime(x)), 4.0 * h * h);
    EXPECT_LE(std::abs(fd2 - act.sigma_second(x)), 8.0 * h * h);
  }
}

TEST(Activation, ApplyMatchesScalar) {
  Eigen::MatrixXd m(2, 3);
  m << -1, 0, 0.5, 2, -3, 0.1;
  for (auto kind : {ActivationKind::kTanh, ActivationKind::kErf, ActivationKind::kIdentity}) {
    const Activation act(kind);
    Eigen::MatrixXd h = m;
    act.apply(h);
    for (int j = 0; j < 3; ++j)
      for (int i = 0; i < 2; ++i) EXPECT_DOUBLE_EQ(h(i, j), act.sigma(m(i, j)));
  }
}

TEST(ForwardParams, ZeroTimeHasNoNoise) {
  const auto fp = forward_params(0.0, SigmaSpec::isotropic(), 10);
  EXPECT_EQ(fp.delta_var, 0.0);
  EXPECT_EQ(fp.decay, 1.0);
}

TEST(ForwardParams, IsotropicUnitCovarianceKeepsUnitScale) {
  for (double t : {0.0, 0.01, 0.1, 1.0, 10.0}) EXPECT_EQ(forward_params(t, SigmaSpec::isotropic(), 7).gamma_t, 1.0);
}

TEST(ForwardParams, ReferenceValueAtSmallTime) {
  EXPECT_NEAR(forward_params(0.01, SigmaSpec::isotropic(), 3).delta_var, kDeltaVar001, 1e-17);
}

TEST(ForwardParams, MonotoneAndBounded) {
  // Beyond t ~ 18, 1 - e^{-2t} rounds to 1 in double precision.
  double prev = -1.0;
  for (double t = 0.0; t < 15.0; t += 0.37) {
    const double v = forward_params(t, SigmaSpec::isotropic(), 1).delta_var;
    EXPECT_GE(v, 0.0);
    EXPECT_LT(v, 1.0);
    EXPECT_GT(v, prev);
    prev = v;
  }
  EXPECT_THROW(forward_params(-0.1, SigmaSpec::isotropic(), 1), DomainError);
}

TEST(ForwardParams, AnisotropicScale) {
  Eigen::VectorXd diag(4);
  diag << 1, 2, 3, 6;
  const auto fp = forward_params(0.3, SigmaSpec::diagonal(diag), 4);
  EXPECT_NEAR(fp.gamma_t * fp.gamma_t, std::exp(-0.6) * 3.0 + fp.delta_var, 1e-14);
}

TEST(SampleForward, Limits) {
  Eigen::VectorXd x0(3), xi(3);
  x0 << 1, -2, 0.5;
  xi << 0.3, 0.1, -1;
  EXPECT_EQ(sample_forward(x0, 0.0, xi), x0);
  EXPECT_LT((sample_forward(Eigen::VectorXd::Zero(3), 40.0, xi) - xi).norm(), 1e-15);
  const Eigen::VectorXd expected = 0.99004983374916805337 * x0 + 0.14071718691490637594 * xi;
  EXPECT_LT((sample_forward(x0, 0.01, xi) - expected).norm(), 1e-15);
  xi[1] = std::nan("");
  EXPECT_THROW(sample_forward(x0, 0.01, xi), DomainError);
}

TEST(GaussianMoment, ConstantIsExact) {
  for (double v : {0.0, 0.5, 3.0}) {
    EXPECT_EQ(gaussian_moment([](double) { return 1.0; }, v, MonteCarloMethod{1000, 1, 0}).value, 1.0);
    EXPECT_NEAR(gaussian_moment([](double) { return 1.0; }, v, QuadratureMethod{64}).value, 1.0, 1e-14);
  }
}

TEST(GaussianMoment, SecondMomentByQuadrature) {
  EXPECT_NEAR(gaussian_moment([](double z) { return z * z; }, 1.0, QuadratureMethod{64}).value, 1.0, 1e-12);
  EXPECT_NEAR(gaussian_moment([](double z) { return z * z * z * z; }, 2.0, QuadratureMethod{64}).value, 12.0, 1e-11);
}

TEST(GaussianMoment, TanhSlopeReference) {
  const Activation act(ActivationKind::kTanh);
  const auto q = gaussian_moment([&](double z) { return act.sigma_prime(z); }, 1.0, QuadratureMethod{200});
  EXPECT_NEAR(q.value, kSech2Mean, 1e-14);
  EXPECT_EQ(q.std_error, 0.0);
  const auto mc = gaussian_moment([&](double z) { return act.sigma_prime(z); }, 1.0, MonteCarloMethod{200000, 3, 0});
  EXPECT_NEAR(mc.value, kSech2Mean, 4.0 * mc.std_error);
}

TEST(GaussianMoment, NonFiniteIntegrandReportsDraw) {
  const auto bad = [](double z) { return z > 1.0 ? std::nan("") : z; };
  try {
    gaussian_moment(bad, 1.0, MonteCarloMethod{1000, 0, 0});
    FAIL() << "expected EstimationError";
  } catch (const EstimationError& e) {
    EXPECT_NE(std::string(e.what()).find("at draw"), std::string::npos);
  }
  EXPECT_THROW(gaussian_moment(bad, 1.0, QuadratureMethod{20}), EstimationError);
  EXPECT_THROW(gaussian_moment(bad, -1.0, QuadratureMethod{20}), DomainError);
}

TEST(RandomFeatures, SmallShapeAndSymmetry) {
  ExperimentConfig c;
  c.d = 2;
  c.psi_p = 1;
  c.psi_n = 1;
  const auto f = make_random_features(c);
  EXPECT_EQ(f.W().rows(), 2);
  EXPECT_EQ(f.W().cols(), 2);
  EXPECT_EQ(asymmetry(f.S()), 0.0);
}

TEST(RandomFeatures, RankBoundWhenWide) {
  ExperimentConfig c;
  c.d = 12;
  c.psi_p = 5;
  const auto f = make_random_features(c);
  const Eigen::VectorXd lambdas = eigenvalues(f.S());
  int zeros = 0;
  for (Eigen::Index i = 0; i < lambdas.size(); ++i) zeros += std::abs(lambdas[i]) < 1e-10 ? 1 : 0;
  EXPECT_GE(zeros, f.p() - f.d());
  EXPECT_GE(lambdas.minCoeff(), -1e-10);
}

TEST(RandomFeatures, EntryStatisticsAtDefaultSize) {
  ExperimentConfig c;
  const auto f = make_random_features(c);
  const double n = static_cast<double>(f.W().size());
  const double mean = f.W().mean();
  const double var = (f.W().array() - mean).square().sum() / (n - 1);
  EXPECT_LT(std::abs(mean), 4.0 / std::sqrt(n));
  EXPECT_NEAR(var, 1.0, 0.05);
  EXPECT_NEAR(f.S().diagonal().mean(), 1.0, 0.03);
}

TEST(RandomFeatures, MemoryCapIsEnforced) {
  const auto saved = memory_cap_bytes().load();
  memory_cap_bytes() = 1 << 20;
  ExperimentConfig c;
  EXPECT_THROW(make_random_features(c), ResourceError);
  memory_cap_bytes() = saved;
}

TEST(Eigendecompose, SmallCases) {
  Eigen::MatrixXd m = Eigen::Vector2d(2.0, 1.0).asDiagonal();
  const auto e = eigendecompose(m);
  EXPECT_DOUBLE_EQ(e.lambdas[0], 1.0);
  EXPECT_DOUBLE_EQ(e.lambdas[1], 2.0);
  const auto id = eigendecompose(Eigen::MatrixXd::Identity(30, 30));
  EXPECT_LT((id.lambdas.array() - 1.0).abs().maxCoeff(), 1e-14);
  Eigen::MatrixXd bad = Eigen::MatrixXd::Identity(3, 3);
  bad(0, 2) = 1.0;
  EXPECT_THROW(eigendecompose(bad), DomainError);
}

TEST(Eigendecompose, ReconstructsRandomSymmetric) {
  for (int n : {50, 300}) {
    Eigen::MatrixXd m(n, n);
    RandomStream(5, StreamPurpose::kTest, n).fill_normal(m);
    m = (m + m.transpose()).eval();
    const auto e = eigendecompose(m);
    const Eigen::MatrixXd back = e.vectors * e.lambdas.asDiagonal() * e.vectors.transpose();
    EXPECT_LE((back - m).norm(), 1e-8 * m.norm()) << "n = " << n;
  }
}

}  // namespace
}  // namespace rfcd
