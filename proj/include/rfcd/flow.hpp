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

// Probability-flow moment constants and the one-step distillation
// coefficients a1, a0 and the isotropic shift beta.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <sstream>
#include <vector>

#include <Eigen/Dense>

#include "rfcd/activation.hpp"
#include "rfcd/config.hpp"
#include "rfcd/errors.hpp"
#include "rfcd/features.hpp"
#include "rfcd/forward.hpp"
#include "rfcd/moments.hpp"
#include "rfcd/parallel.hpp"
#include "rfcd/random.hpp"
#include "rfcd/teacher.hpp"

namespace rfcd {

// Smallest kappa^2 the coefficient formulas accept.
inline constexpr double kKappaFloor = 1e-8;

// Negative a0 within this absolute tolerance is roundoff.
inline constexpr double kA0ClampTolerance = 1e-10;

// Above this p (and when d is larger than the probe count) the trace
// Tr(U^{-1} S) is estimated stochastically.
inline constexpr int kHutchinsonThreshold = 4096;
inline constexpr int kHutchinsonProbes = 256;

struct FlowConstants {
  double eta = 0.0;
  double upsilon = 0.0;
  double gamma_flow = 1.0;  // 1 + eta
  double kappa2 = 1.0;      // 1 + 2 eta + upsilon
  double se_eta = 0.0;
  double se_upsilon = 0.0;
  double se_kappa2 = 0.0;
  std::int64_t samples = 0;

  static FlowConstants from_moments(double eta, double upsilon) {
    FlowConstants f;
    f.eta = eta;
    f.upsilon = upsilon;
    f.gamma_flow = 1.0 + eta;
    f.kappa2 = 1.0 + 2.0 * eta + upsilon;
    return f;
  }
};

inline void check_kappa(double kappa2, double se_kappa2 = 0.0) {
  if (!(kappa2 > kKappaFloor) || kappa2 <= 4.0 * se_kappa2) {
    std::ostringstream msg;
    msg << "kappa^2 = " << kappa2 << " (stderr " << se_kappa2
        << ") is not bounded away from zero; the flow is degenerate";
    throw DegenerateFlowError("flow-coefficients", msg.str());
  }
}

namespace detail {
inline constexpr Eigen::Index kScoreBatch = 512;
}

// eta = E[x^T s(x)]/d and upsilon = E[|s(x)|^2]/d over x ~ p_{t'}.
// `score` maps a d x m block of inputs to a d x m block of scores.
template <typename ScoreFn>
  requires std::invocable<ScoreFn&, const Eigen::MatrixXd&>
FlowConstants estimate_flow_constants(ScoreFn&& score, const ExperimentConfig& config, const RunOptions& options = {}) {
  config.validate();
  const auto total = static_cast<std::size_t>(config.mc_flow);
  const int d = config.d;
  const Eigen::VectorXd sd = config.sigma_spec.stddev(d);
  const double decay = std::exp(-config.t_prime);
  const double noise = std::sqrt(-std::expm1(-2.0 * config.t_prime));

  std::vector<double> inner(total), norm2(total), kappa(total);
  for_each_chunk(total, kSampleChunk, options.threads, [&](const ChunkRange& r) {
    RandomStream data(config.seed, chunk_stream(StreamPurpose::kFlowSamples, 0, r.index));
    RandomStream fresh(config.seed, chunk_stream(StreamPurpose::kFlowSamples, 1, r.index));
    for (std::size_t start = r.begin; start < r.end; start += detail::kScoreBatch) {
      const auto m = static_cast<Eigen::Index>(std::min<std::size_t>(detail::kScoreBatch, r.end - start));
      Eigen::MatrixXd x0(d, m), xi(d, m);
      data.fill_normal(x0);
      fresh.fill_normal(xi);
      const Eigen::MatrixXd x = decay * (sd.asDiagonal() * x0) + noise * xi;
      const Eigen::MatrixXd s = score(x);
      if (s.rows() != d || s.cols() != m) throw DomainError("flow-coefficients", "score returned the wrong shape");
      for (Eigen::Index j = 0; j < m; ++j) {
        const std::size_t i = start + static_cast<std::size_t>(j);
        inner[i] = x.col(j).dot(s.col(j)) / d;
        norm2[i] = s.col(j).squaredNorm() / d;
        kappa[i] = 1.0 + 2.0 * inner[i] + norm2[i];
        if (!std::isfinite(kappa[i])) {
          std::ostringstream msg;
          msg << "non-finite score at flow sample " << i;
          throw NumericalError("flow-coefficients", msg.str());
        }
      }
    }
  });

  const auto e = mean_with_stderr(inner);
  const auto u = mean_with_stderr(norm2);
  const auto k = mean_with_stderr(kappa);
  FlowConstants f = FlowConstants::from_moments(e.value, u.value);
  f.se_eta = e.std_error;
  f.se_upsilon = u.std_error;
  f.se_kappa2 = total > 1 ? k.std_error : 0.0;
  f.samples = static_cast<std::int64_t>(total);
  check_kappa(f.kappa2, f.se_kappa2);
  return f;
}

inline FlowConstants estimate_flow_constants(const TeacherScoreMap& map, const ExperimentConfig& config,
                                             const RunOptions& options = {}) {
  return estimate_flow_constants([&map](const Eigen::MatrixXd& x) { return map.score_batch(x); }, config, options);
}

// Gaussian moments of the activation slope, G ~ N(0, 1):
// m0 = E s', m2 = E s' G^2, q0 = E s'^2, q2 = E s'^2 G^2.
struct SlopeMoments {
  double m0 = 1.0;
  double m2 = 1.0;
  double q0 = 1.0;
  double q2 = 1.0;
};

inline SlopeMoments slope_moments(ActivationKind kind, int nodes = 200) {
  if (kind == ActivationKind::kIdentity) return {};
  const Activation act(kind);
  const MomentMethod quad = QuadratureMethod{nodes};
  const auto s1 = [&](double g) { return act.sigma_prime(g); };
  const auto s1g = [&](double g) { return act.sigma_prime(g) * g * g; };
  const auto s2 = [&](double g) { return act.sigma_prime(g) * act.sigma_prime(g); };
  const auto s2g = [&](double g) { return act.sigma_prime(g) * act.sigma_prime(g) * g * g; };
  return {gaussian_moment(s1, 1.0, quad).value, gaussian_moment(s1g, 1.0, quad).value,
          gaussian_moment(s2, 1.0, quad).value, gaussian_moment(s2g, 1.0, quad).value};
}

// a1 = -[gamma^2 m2 + (kappa^2 - gamma^2) m0] / kappa^2, arranged so that
// m0 == m2 gives exactly -m0.
inline double a1_from_moments(const SlopeMoments& m, double gamma, double kappa2) {
  return -(gamma * gamma * (m.m2 - m.m0) + kappa2 * m.m0) / kappa2;
}

inline double a0_raw_from_moments(const SlopeMoments& m, double gamma, double kappa2, double a1) {
  return (gamma * gamma * (m.q2 - m.q0) + kappa2 * m.q0) / kappa2 - a1 * a1;
}

inline double clamp_a0(double a0) {
  if (a0 >= 0.0) return a0;
  if (a0 >= -kA0ClampTolerance) return 0.0;
  std::ostringstream msg;
  msg << "a0 = " << a0 << " is negative beyond tolerance";
  throw EstimationError("flow-coefficients", msg.str());
}

struct TraceEstimate {
  double value = 0.0;  // Tr(U^{-1} S)
  double std_error = 0.0;
  bool stochastic = false;
  int probes = 0;
};

struct BetaShift {
  double theorem = 0.0;
  double pf_drift = 0.0;
  BetaConvention convention = BetaConvention::kTheorem;
  TraceEstimate trace;

  double selected() const { return convention == BetaConvention::kTheorem ? theorem : pf_drift; }
};

struct CdCoefficients {
  double a1 = -1.0;
  double a0 = 0.0;
  double gamma = 1.0;
  double kappa2 = 1.0;
  SlopeMoments moments;
  BetaShift shift;

  double beta() const { return shift.selected(); }
};

inline CdCoefficients cd_coefficients(const FlowConstants& flow, ActivationKind activation,
                                      const ExperimentConfig& config) {
  (void)config;
  check_kappa(flow.kappa2);
  CdCoefficients c;
  c.gamma = flow.gamma_flow;
  c.kappa2 = flow.kappa2;
  c.moments = slope_moments(activation);
  c.a1 = a1_from_moments(c.moments, c.gamma, c.kappa2);
  c.a0 = clamp_a0(a0_raw_from_moments(c.moments, c.gamma, c.kappa2, c.a1));
  return c;
}

// Monte Carlo estimate of (a1, a0) for a given (gamma, kappa^2), used to
// cross-check the quadrature path.
struct CoefficientEstimate {
  double a1 = 0.0;
  double a0 = 0.0;
  double se_a1 = 0.0;
  double se_a0 = 0.0;
};

inline CoefficientEstimate cd_coefficients_monte_carlo(double gamma, double kappa2, ActivationKind activation,
                                                       std::int64_t samples, std::uint64_t seed,
                                                       const RunOptions& options = {}) {
  check_kappa(kappa2);
  if (samples < 2) throw DomainError("flow-coefficients", "need at least 2 samples");
  const Activation act(activation);
  const double g2 = gamma * gamma;
  const auto total = static_cast<std::size_t>(samples);
  std::vector<double> lin(total), quad(total);
  for_each_chunk(total, kSampleChunk, options.threads, [&](const ChunkRange& r) {
    RandomStream rng(seed, chunk_stream(StreamPurpose::kCoefficientMc, 0, r.index));
    for (std::size_t i = r.begin; i < r.end; ++i) {
      const double g = rng.normal();
      const double s = act.sigma_prime(g);
      lin[i] = -(g2 * s * (g * g - 1.0) + kappa2 * s) / kappa2;
      quad[i] = (g2 * s * s * (g * g - 1.0) + kappa2 * s * s) / kappa2;
    }
  });
  const auto a1 = mean_with_stderr(lin);
  std::vector<double> lin_a0(total);
  for (std::size_t i = 0; i < total; ++i) lin_a0[i] = quad[i] - 2.0 * a1.value * lin[i];
  const auto q = mean_with_stderr(quad);
  const auto infl = mean_with_stderr(lin_a0);
  return {a1.value, q.value - a1.value * a1.value, a1.std_error, infl.std_error};
}

// Tr(U^{-1} S) from the resolved features K = U^{-1} B when available,
// otherwise by Rademacher probes through the curvature factor.
inline TraceEstimate trace_uinv_s(const TeacherCurvature& curvature, const RandomFeatures& features,
                                  std::uint64_t seed) {
  TraceEstimate t;
  const auto& factor = curvature.factor();
  if (features.p() <= kHutchinsonThreshold || features.d() <= kHutchinsonProbes) {
    const Eigen::MatrixXd k = factor.solve(features.B());
    t.value = (features.B().array() * k.array()).sum();
    return t;
  }
  t.stochastic = true;
  t.probes = kHutchinsonProbes;
  Eigen::MatrixXd z(features.d(), kHutchinsonProbes);
  RandomStream rng(seed, StreamPurpose::kHutchinson);
  for (Eigen::Index j = 0; j < z.cols(); ++j)
    for (Eigen::Index i = 0; i < z.rows(); ++i) z(i, j) = (rng.next_u32() & 1u) ? 1.0 : -1.0;
  const Eigen::MatrixXd bz = features.B() * z;
  const Eigen::MatrixXd solved = factor.solve(bz);
  std::vector<double> samples(kHutchinsonProbes);
  for (int j = 0; j < kHutchinsonProbes; ++j) samples[j] = bz.col(j).dot(solved.col(j));
  const auto est = mean_with_stderr(samples);
  t.value = est.value;
  t.std_error = est.std_error;
  return t;
}

inline TraceEstimate trace_uinv_s(const TeacherScoreMap& map) {
  return {map.trace_uinv_s(), 0.0, false, 0};
}

// Both shift conventions; `config.beta_convention` picks the one in force.
inline BetaShift beta_shift(const CdCoefficients& coeffs, const TraceEstimate& trace, const ExperimentConfig& config) {
  const double dt2 = config.dt_step * config.dt_step;
  const double t2 = config.t_prime * config.t_prime;
  BetaShift b;
  b.convention = config.beta_convention;
  b.trace = trace;
  b.theorem = coeffs.a0 * coeffs.a1 * coeffs.a1 * dt2 * t2 * trace.value / config.d;
  b.pf_drift = coeffs.a0 * dt2 * coeffs.kappa2;
  return b;
}

inline CdCoefficients with_beta(CdCoefficients coeffs, const TraceEstimate& trace, const ExperimentConfig& config) {
  coeffs.shift = beta_shift(coeffs, trace, config);
  return coeffs;
}

}  // namespace rfcd
