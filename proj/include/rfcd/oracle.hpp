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

// Brute-force checks of the closed forms: empirical feature increments
// along one Euler step of the teacher flow, the empirical distillation
// curvature, and the orthogonal decomposition of the increment second
// moment.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "rfcd/activation.hpp"
#include "rfcd/cd_operators.hpp"
#include "rfcd/config.hpp"
#include "rfcd/errors.hpp"
#include "rfcd/features.hpp"
#include "rfcd/flow.hpp"
#include "rfcd/linalg.hpp"
#include "rfcd/moments.hpp"
#include "rfcd/parallel.hpp"
#include "rfcd/random.hpp"
#include "rfcd/teacher.hpp"

namespace rfcd {

inline constexpr int kOracleMatrixCap = 512;
inline constexpr int kDecompositionCap = 256;

struct IncrementSample {
  Eigen::VectorXd x_nu;
  Eigen::VectorXd xi;
  Eigen::VectorXd x_t;
  Eigen::VectorXd x_hat;
  Eigen::VectorXd delta_x;
  Eigen::VectorXd delta_g;
  Eigen::VectorXd delta_h;
};

// One Euler step of the probability-flow ODE from the forward sample of
// x_nu, using the forward noise drawn from `rng`.
inline IncrementSample sample_increment(const Eigen::VectorXd& x_nu, const TeacherScoreMap& teacher,
                                        const ExperimentConfig& config, RandomStream& rng) {
  const int d = teacher.features().d();
  if (x_nu.size() != d) throw DomainError("mc-oracle", "training point has the wrong dimension");
  IncrementSample s;
  s.x_nu = x_nu;
  s.xi.resize(d);
  rng.fill_normal(s.xi);
  s.x_t = sample_forward(x_nu, config.t_prime, s.xi);
  const Eigen::VectorXd score = teacher.score(s.x_t);
  if (!score.allFinite()) throw NumericalError("mc-oracle", "teacher score is not finite");
  s.delta_x = config.dt_step * (-s.x_t - score);
  s.x_hat = s.x_t + s.delta_x;
  const auto& act = teacher.activation();
  Eigen::VectorXd h_t = teacher.features().preactivation(s.x_t);
  Eigen::VectorXd h_hat = teacher.features().preactivation(s.x_hat);
  s.delta_g = teacher.features().preactivation(s.delta_x);
  if (act.is_identity()) {
    s.delta_h = -s.delta_g;
  } else {
    act.apply(h_t);
    act.apply(h_hat);
    s.delta_h = h_t - h_hat;
  }
  return s;
}

struct EmpiricalCurvature {
  Eigen::MatrixXd U_cd;
  // Mean of |delta_x|^2 / d over all increments, with its standard error.
  MomentEstimate step_norm2;
  std::int64_t samples = 0;
};

// (1/n) sum_nu mean_r delta_h delta_h^T over `reps` forward draws for each
// column of `points`.
inline EmpiricalCurvature empirical_U_cd(const Eigen::MatrixXd& points, const TeacherScoreMap& teacher,
                                         const ExperimentConfig& config, int reps, const RunOptions& options = {},
                                         bool allow_large = false) {
  const RandomFeatures& features = teacher.features();
  const int p = features.p();
  const int d = features.d();
  if (points.rows() != d) throw DomainError("mc-oracle", "training points have the wrong dimension");
  if (points.cols() < 1 || reps < 1) throw DomainError("mc-oracle", "need at least one point and one repetition");
  if (p > kOracleMatrixCap && !allow_large)
    throw ResourceError("mc-oracle", "empirical U_cd is capped at p = " + std::to_string(kOracleMatrixCap) +
                                         " (got p = " + std::to_string(p) + ")");
  const auto total = static_cast<std::size_t>(points.cols()) * static_cast<std::size_t>(reps);
  const std::size_t chunks = chunk_count(total, kSampleChunk);
  check_memory_budget(dense_bytes(p, p, static_cast<double>(chunks) + 2.0), "mc-oracle", "empirical U_cd");

  const double decay = std::exp(-config.t_prime);
  const double noise = std::sqrt(-std::expm1(-2.0 * config.t_prime));
  const auto& act = teacher.activation();
  std::vector<Eigen::MatrixXd> partial(chunks);
  std::vector<double> norms(total);
  for_each_chunk(total, kSampleChunk, options.threads, [&](const ChunkRange& r) {
    RandomStream rng(config.seed, chunk_stream(StreamPurpose::kOracleIncrements, 0, r.index));
    const auto m = static_cast<Eigen::Index>(r.end - r.begin);
    Eigen::MatrixXd xi(d, m);
    rng.fill_normal(xi);
    Eigen::MatrixXd xt(d, m);
    for (Eigen::Index j = 0; j < m; ++j)
      xt.col(j) = decay * points.col(static_cast<Eigen::Index>((r.begin + j) / reps)) + noise * xi.col(j);
    const Eigen::MatrixXd score = teacher.score_batch(xt);
    if (!score.allFinite()) throw NumericalError("mc-oracle", "teacher score is not finite");
    const Eigen::MatrixXd dx = config.dt_step * (-xt - score);
    Eigen::MatrixXd dh;
    if (act.is_identity()) {
      dh = -features.preactivation(dx);
    } else {
      Eigen::MatrixXd ht = features.preactivation(xt);
      Eigen::MatrixXd hh = features.preactivation(xt + dx);
      act.apply(ht);
      act.apply(hh);
      dh = ht - hh;
    }
    partial[r.index] = gram(dh);
    for (Eigen::Index j = 0; j < m; ++j) norms[r.begin + j] = dx.col(j).squaredNorm() / d;
  });

  EmpiricalCurvature out;
  out.U_cd = Eigen::MatrixXd::Zero(p, p);
  for (const auto& part : partial) out.U_cd += part;
  out.U_cd /= static_cast<double>(total);
  out.step_norm2 = mean_with_stderr(norms);
  out.samples = static_cast<std::int64_t>(total);
  return out;
}

struct IncrementLaw {
  double gamma_d2 = 0.0;  // |x|^2 / d
  double delta_d2 = 0.0;  // |dx|^2 / d
  double c_d = 0.0;       // x^T dx / d
};

inline IncrementLaw increment_law(const Eigen::VectorXd& x, const Eigen::VectorXd& delta_x) {
  if (x.size() != delta_x.size()) throw DomainError("mc-oracle", "x and delta_x differ in length");
  const double d = static_cast<double>(x.size());
  IncrementLaw law{x.squaredNorm() / d, delta_x.squaredNorm() / d, x.dot(delta_x) / d};
  if (!(law.delta_d2 > 0.0)) throw DomainError("mc-oracle", "perturbation delta_x is zero");
  if (!(law.gamma_d2 > 0.0)) throw DomainError("mc-oracle", "input x is zero");
  return law;
}

namespace detail {

// Fills g and dg (same shape) with draws of the pre-activation pair of one
// Gaussian feature row.
inline void draw_pairs(const IncrementLaw& law, RandomStream& rng, Eigen::MatrixXd& g, Eigen::MatrixXd& dg) {
  const double gam = std::sqrt(law.gamma_d2);
  const double along = law.c_d / gam;
  const double ortho = std::sqrt(std::max(law.delta_d2 - along * along, 0.0));
  for (Eigen::Index j = 0; j < g.cols(); ++j) {
    for (Eigen::Index i = 0; i < g.rows(); ++i) {
      const double z1 = rng.normal();
      const double z2 = rng.normal();
      g(i, j) = gam * z1;
      dg(i, j) = along * z1 + ortho * z2;
    }
  }
}

inline Eigen::MatrixXd increments(const Activation& act, const Eigen::MatrixXd& g, const Eigen::MatrixXd& dg) {
  if (act.is_identity()) return -dg;
  return g.binaryExpr(dg, [&act](double a, double b) { return act.sigma(a) - act.sigma(a + b); });
}

}  // namespace detail

struct A1A0Estimate {
  double a1 = 0.0;
  double a0 = 0.0;
  double se_a1 = 0.0;
  double se_a0 = 0.0;
  std::int64_t samples = 0;
};

// a1 = E[dh dg] / E[dg^2], a0 = E[dh^2] / E[dg^2] - a1^2, from draws of
// the pair law of one feature row.
inline A1A0Estimate empirical_a1_a0(const Eigen::VectorXd& x, const Eigen::VectorXd& delta_x, ActivationKind activation,
                                    std::int64_t samples, std::uint64_t seed, const RunOptions& options = {}) {
  if (samples < 2) throw DomainError("mc-oracle", "need at least 2 samples");
  const IncrementLaw law = increment_law(x, delta_x);
  const Activation act(activation);
  const auto total = static_cast<std::size_t>(samples);
  std::vector<double> hg(total), gg(total), hh(total);
  for_each_chunk(total, kSampleChunk, options.threads, [&](const ChunkRange& r) {
    RandomStream rng(seed, chunk_stream(StreamPurpose::kDecompositionRows, 1, r.index));
    const auto m = static_cast<Eigen::Index>(r.end - r.begin);
    Eigen::MatrixXd g(1, m), dg(1, m);
    detail::draw_pairs(law, rng, g, dg);
    const Eigen::MatrixXd dh = detail::increments(act, g, dg);
    for (Eigen::Index j = 0; j < m; ++j) {
      hg[r.begin + j] = dh(0, j) * dg(0, j);
      gg[r.begin + j] = dg(0, j) * dg(0, j);
      hh[r.begin + j] = dh(0, j) * dh(0, j);
    }
  });
  double shg = 0.0, sgg = 0.0, shh = 0.0;
  for (std::size_t i = 0; i < total; ++i) {
    shg += hg[i];
    sgg += gg[i];
    shh += hh[i];
  }
  if (!(sgg > 0.0)) throw DomainError("mc-oracle", "sampled perturbations are all zero");
  A1A0Estimate est;
  est.samples = samples;
  est.a1 = shg / sgg;
  est.a0 = shh / sgg - est.a1 * est.a1;
  // Delta-method standard errors of the two ratios.
  const double mgg = sgg / static_cast<double>(total);
  std::vector<double> infl1(total), infl0(total);
  for (std::size_t i = 0; i < total; ++i) {
    infl1[i] = (hg[i] - est.a1 * gg[i]) / mgg;
    infl0[i] = (hh[i] - (est.a0 + est.a1 * est.a1) * gg[i]) / mgg - 2.0 * est.a1 * infl1[i];
  }
  est.se_a1 = mean_with_stderr(infl1).std_error;
  est.se_a0 = mean_with_stderr(infl0).std_error;
  return est;
}

struct OracleQuantity {
  std::string name;
  double closed_form = 0.0;
  double empirical = 0.0;
  double std_error = 0.0;
};

struct SpectrumComparison {
  double trace_closed = 0.0;
  double trace_empirical = 0.0;
  double trace_gap = 0.0;
  std::vector<double> top_closed;
  std::vector<double> top_empirical;
  std::vector<double> top_gaps;
  double bottom_mean = 0.0;
  int bottom_count = 0;
  double beta_theorem = 0.0;
  double beta_pf_drift = 0.0;
  // Convention whose beta is closer to the bottom cluster on a log scale.
  BetaConvention closer = BetaConvention::kTheorem;
};

struct OracleReport {
  std::vector<std::pair<std::string, double>> errors;
  std::vector<OracleQuantity> quantities;
  std::optional<SpectrumComparison> spectrum;

  std::optional<double> error(const std::string& name) const {
    for (const auto& [k, v] : errors)
      if (k == name) return v;
    return std::nullopt;
  }
};

struct DecompositionResult {
  double relative_error = 0.0;
  double noise_floor = 0.0;
  A1A0Estimate coefficients;
  OracleReport report;
};

// Empirical E[dh dh^T | x, dx] over `samples` independent draws of a
// p-row Gaussian feature matrix against a1^2 E[dg dg^T] + a0 E[dg^2] I,
// with a1, a0 pooled over the same draws.
inline DecompositionResult validate_decomposition(const Eigen::VectorXd& x, const Eigen::VectorXd& delta_x, int p,
                                                  ActivationKind activation, std::int64_t samples, std::uint64_t seed,
                                                  const RunOptions& options = {}, bool allow_large = false) {
  if (p < 1) throw DomainError("mc-oracle", "p must be >= 1");
  if (samples < 2) throw DomainError("mc-oracle", "need at least 2 samples");
  if (p > kDecompositionCap && !allow_large)
    throw ResourceError("mc-oracle", "decomposition check is capped at p = " + std::to_string(kDecompositionCap));
  const IncrementLaw law = increment_law(x, delta_x);
  const Activation act(activation);
  const auto total = static_cast<std::size_t>(samples);
  const std::size_t chunk = 1024;
  const std::size_t chunks = chunk_count(total, chunk);
  check_memory_budget(dense_bytes(p, p, 2.0 * static_cast<double>(chunks) + 4.0), "mc-oracle", "decomposition check");

  struct Partial {
    Eigen::MatrixXd hh, gg;
    double hg = 0.0;
  };
  std::vector<Partial> parts(chunks);
  for_each_chunk(total, chunk, options.threads, [&](const ChunkRange& r) {
    RandomStream rng(seed, chunk_stream(StreamPurpose::kDecompositionRows, 0, r.index));
    const auto m = static_cast<Eigen::Index>(r.end - r.begin);
    Eigen::MatrixXd g(p, m), dg(p, m);
    detail::draw_pairs(law, rng, g, dg);
    const Eigen::MatrixXd dh = detail::increments(act, g, dg);
    parts[r.index].hh = gram(dh);
    parts[r.index].gg = gram(dg);
    parts[r.index].hg = (dh.array() * dg.array()).sum();
  });
  Eigen::MatrixXd hh = Eigen::MatrixXd::Zero(p, p);
  Eigen::MatrixXd gg = Eigen::MatrixXd::Zero(p, p);
  double hg = 0.0;
  for (const auto& part : parts) {
    hh += part.hh;
    gg += part.gg;
    hg += part.hg;
  }
  const double n = static_cast<double>(total);
  hh /= n;
  gg /= n;
  hg /= n;
  const double mean_gg = gg.trace() / p;
  const double mean_hh = hh.trace() / p;

  DecompositionResult res;
  res.coefficients.samples = samples;
  res.coefficients.a1 = hg / p / mean_gg;
  res.coefficients.a0 = mean_hh / mean_gg - res.coefficients.a1 * res.coefficients.a1;
  const double a1 = res.coefficients.a1;
  const double a0 = res.coefficients.a0;

  Eigen::MatrixXd model = (a1 * a1) * gg;
  model.diagonal().array() += a0 * mean_gg;
  const double denom = hh.norm();
  res.relative_error = denom > 0.0 ? (hh - model).norm() / denom : 0.0;
  // Off-diagonal sampling noise of the orthogonal remainder, plus a
  // roundoff floor.
  const double mix = (a1 * a1 + a0) > 0.0 ? std::max(a0, 0.0) / (a1 * a1 + a0) : 0.0;
  res.noise_floor = std::max(std::sqrt(std::max(p - 1, 0) / n) * (mix + 2.0 * std::abs(a1) * std::sqrt(mix)),
                             64.0 * std::numeric_limits<double>::epsilon() * std::sqrt(static_cast<double>(p)));
  res.report.errors.emplace_back("decomposition_frobenius_relative", res.relative_error);
  res.report.errors.emplace_back("decomposition_noise_floor", res.noise_floor);
  res.report.quantities.push_back({"a1_pooled", a1, a1, 0.0});
  res.report.quantities.push_back({"a0_pooled", a0, a0, 0.0});
  return res;
}

namespace detail {

inline double relative_gap(double closed, double empirical) {
  if (closed == 0.0 && empirical == 0.0) return 0.0;
  if (closed == 0.0) return std::numeric_limits<double>::infinity();
  return std::abs(empirical - closed) / std::abs(closed);
}

}  // namespace detail

// Trace gap, top-k eigenvalue gaps and the mean of the bottom p - d
// empirical eigenvalues against both beta conventions.
inline OracleReport compare_spectra(const CdOperators& closed, const Eigen::MatrixXd& empirical, int top_k, int d) {
  if (closed.U_cd.rows() != empirical.rows() || empirical.rows() != empirical.cols())
    throw DomainError("mc-oracle", "closed-form and empirical U_cd differ in size");
  const int p = static_cast<int>(empirical.rows());
  top_k = std::clamp(top_k, 0, p);
  SpectrumComparison cmp;
  cmp.trace_closed = closed.U_cd.trace();
  cmp.trace_empirical = empirical.trace();
  cmp.trace_gap = detail::relative_gap(cmp.trace_closed, cmp.trace_empirical);

  const Eigen::VectorXd lc = eigenvalues(closed.U_cd);
  const Eigen::VectorXd le = eigenvalues(empirical);
  for (int i = 0; i < top_k; ++i) {
    cmp.top_closed.push_back(lc[p - 1 - i]);
    cmp.top_empirical.push_back(le[p - 1 - i]);
    cmp.top_gaps.push_back(detail::relative_gap(lc[p - 1 - i], le[p - 1 - i]));
  }
  cmp.bottom_count = std::max(p - d, 0);
  if (cmp.bottom_count > 0) cmp.bottom_mean = le.head(cmp.bottom_count).mean();
  cmp.beta_theorem = closed.coeffs_used.shift.theorem;
  cmp.beta_pf_drift = closed.coeffs_used.shift.pf_drift;
  const auto log_gap = [&](double beta) {
    if (!(beta > 0.0) || !(cmp.bottom_mean > 0.0)) return std::numeric_limits<double>::infinity();
    return std::abs(std::log(cmp.bottom_mean / beta));
  };
  cmp.closer = log_gap(cmp.beta_pf_drift) < log_gap(cmp.beta_theorem) ? BetaConvention::kPfDrift
                                                                       : BetaConvention::kTheorem;

  OracleReport rep;
  rep.errors.emplace_back("trace_relative_gap", cmp.trace_gap);
  for (int i = 0; i < top_k; ++i) rep.errors.emplace_back("top" + std::to_string(i + 1) + "_relative_gap", cmp.top_gaps[i]);
  rep.quantities.push_back({"trace", cmp.trace_closed, cmp.trace_empirical, 0.0});
  rep.quantities.push_back({"bottom_cluster_vs_beta_theorem", cmp.beta_theorem, cmp.bottom_mean, 0.0});
  rep.quantities.push_back({"bottom_cluster_vs_beta_pf_drift", cmp.beta_pf_drift, cmp.bottom_mean, 0.0});
  rep.spectrum = cmp;
  return rep;
}

}  // namespace rfcd
