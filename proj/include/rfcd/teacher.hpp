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

// Gaussian-equivalent teacher: scalar constants, the teacher curvature U
// and the closed-form score of the converged teacher readout.

#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "rfcd/activation.hpp"
#include "rfcd/config.hpp"
#include "rfcd/errors.hpp"
#include "rfcd/features.hpp"
#include "rfcd/forward.hpp"
#include "rfcd/linalg.hpp"
#include "rfcd/moments.hpp"
#include "rfcd/parallel.hpp"
#include "rfcd/random.hpp"

namespace rfcd {

// Relative tolerance under which a slightly negative variance estimate is
// treated as roundoff and set to zero without comment.
inline constexpr double kClampTolerance = 1e-8;

// Sample size below which constant estimates are flagged as unreliable.
inline constexpr std::int64_t kRecommendedConstantSamples = 1000;

// Nodes of the inner quadrature used for conditional expectations over
// the forward noise.
inline constexpr int kInnerQuadratureNodes = 64;

struct TeacherConstants {
  double a_t = 0.0;
  double b_t = 0.0;
  double v_t = 0.0;   // sqrt(v_t2)
  double v_t2 = 0.0;
  double s_t2 = 0.0;
  double mu1 = 0.0;

  double se_a_t = 0.0;
  double se_b_t = 0.0;
  double se_v_t2 = 0.0;
  double se_s_t2 = 0.0;
  double se_mu1 = 0.0;

  // E[F^2] of a single feature coordinate, for the trace cross-check.
  double feature_second_moment = 0.0;
  double se_feature_second_moment = 0.0;

  ForwardParams forward;
  std::int64_t samples = 0;
  std::vector<std::string> warnings;

  // b_t - (sqrt(delta)/Gamma) mu1, zero in the limit.
  double b_mu1_gap() const { return b_t - forward.noise_scale() / forward.gamma_t * mu1; }

  double b_mu1_stderr() const {
    const double k = forward.noise_scale() / forward.gamma_t;
    return std::sqrt(se_b_t * se_b_t + k * k * se_mu1 * se_mu1);
  }

  bool all_finite() const {
    return std::isfinite(a_t) && std::isfinite(b_t) && std::isfinite(v_t2) && std::isfinite(s_t2) &&
           std::isfinite(mu1);
  }
};

namespace detail {

// Returns max(value, 0). Negative values within tolerance of zero are
// roundoff; larger ones are recorded and, under strict mode, fatal.
inline double clamp_variance(double value, double scale, const char* name, const RunOptions& options,
                             std::vector<std::string>& warnings) {
  if (value >= 0.0) return value;
  if (value >= -kClampTolerance * std::max(scale, 1e-300)) return 0.0;
  std::ostringstream msg;
  msg << name << " estimate " << value << " is negative beyond tolerance; clamped to 0";
  if (options.strict) throw EstimationError("teacher-equivalence", msg.str());
  warnings.push_back(msg.str());
  return 0.0;
}

struct SampleStats {
  double mean = 0.0;
  double var = 0.0;  // population variance
};

inline SampleStats stats_of(const std::vector<double>& xs) {
  SampleStats s;
  const auto n = static_cast<double>(xs.size());
  for (double x : xs) s.mean += x;
  s.mean /= n;
  for (double x : xs) s.var += (x - s.mean) * (x - s.mean);
  s.var /= n;
  return s;
}

inline void check_draw(double value, const char* what, std::size_t index) {
  if (!std::isfinite(value)) {
    std::ostringstream msg;
    msg << "non-finite " << what << " at draw " << index;
    throw EstimationError("teacher-equivalence", msg.str());
  }
}

}  // namespace detail

inline TeacherConstants estimate_teacher_constants(const ExperimentConfig& config, const RunOptions& options = {}) {
  config.validate();
  const std::int64_t count = config.mc_constants;
  if (count < 3) throw DomainError("teacher-equivalence", "mc_constants must be >= 3 to form standard errors");

  TeacherConstants c;
  c.forward = forward_params(config);
  c.samples = count;
  const Activation act(config.activation);
  const double decay = c.forward.decay;
  const double noise = c.forward.noise_scale();
  const double gamma = c.forward.gamma_t;
  const double z0_scale = std::sqrt(config.sigma_spec.trace_ratio(config.d));
  const auto& rule = GaussHermiteRule::get(kInnerQuadratureNodes);

  const auto total = static_cast<std::size_t>(count);
  std::vector<double> z0(total), m(total), q(total), slope(total), stein(total);
  for_each_chunk(total, kSampleChunk, options.threads, [&](const ChunkRange& r) {
    RandomStream outer(config.seed, chunk_stream(StreamPurpose::kConstantsOuter, 0, r.index));
    RandomStream inner(config.seed, chunk_stream(StreamPurpose::kConstantsStein, 0, r.index));
    RandomStream mu(config.seed, chunk_stream(StreamPurpose::kConstantsMu1, 0, r.index));
    for (std::size_t i = r.begin; i < r.end; ++i) {
      const double z = z0_scale * outer.normal();
      double mi = 0.0;
      double qi = 0.0;
      for (int k = 0; k < rule.size(); ++k) {
        const double f = act.sigma(decay * z + noise * rule.nodes()[k]);
        mi += rule.weights()[k] * f;
        qi += rule.weights()[k] * f * f;
      }
      z0[i] = z;
      m[i] = mi;
      q[i] = qi;
      slope[i] = act.sigma_prime(gamma * inner.normal());
      const double u = mu.normal();
      stein[i] = act.sigma(gamma * u) * u;
      detail::check_draw(mi, "conditional mean", i);
      detail::check_draw(qi, "conditional second moment", i);
      detail::check_draw(slope[i], "activation slope", i);
      detail::check_draw(stein[i], "Stein moment", i);
    }
  });

  const double n = static_cast<double>(total);
  const auto zs = detail::stats_of(z0);
  const auto ms = detail::stats_of(m);
  double cov = 0.0;
  for (std::size_t i = 0; i < total; ++i) cov += (m[i] - ms.mean) * (z0[i] - zs.mean);
  cov /= n;
  if (!(zs.var > 0.0)) throw EstimationError("teacher-equivalence", "outer samples have zero variance");

  const double reg = cov / zs.var;  // slope of M on Z0
  c.a_t = reg / decay;
  std::vector<double> resid2(total), remainder(total);
  double rss = 0.0;
  for (std::size_t i = 0; i < total; ++i) {
    const double r = (m[i] - ms.mean) - reg * (z0[i] - zs.mean);
    resid2[i] = r * r;
    rss += r * r;
    remainder[i] = q[i] - (m[i] - ms.mean) * (m[i] - ms.mean);
  }
  c.se_a_t = std::sqrt(rss / (n - 2.0) / (n * zs.var)) / decay;

  const auto r2 = mean_with_stderr(resid2);
  const auto slope_mean = mean_with_stderr(slope);
  const auto stein_mean = mean_with_stderr(stein);
  const auto second = mean_with_stderr(q);

  c.b_t = noise * slope_mean.value;
  c.se_b_t = noise * slope_mean.std_error;
  c.mu1 = stein_mean.value;
  c.se_mu1 = stein_mean.std_error;
  c.feature_second_moment = second.value;
  c.se_feature_second_moment = second.std_error;

  const double scale = second.value;
  const double v2_raw = ms.var - reg * reg * zs.var;
  c.v_t2 = detail::clamp_variance(v2_raw, scale, "v_t^2", options, c.warnings);
  c.se_v_t2 = r2.std_error;
  c.v_t = std::sqrt(c.v_t2);

  // E[F^2] - Var(M) is the mean of `remainder`. The conditional variance
  // is close to noise^2 sigma'(decay z)^2, whose mean is known by
  // quadrature, so it serves as a control variate.
  const double drift_var = decay * decay * z0_scale * z0_scale;
  const double control_mean =
      noise * noise *
      gaussian_moment([&](double g) { return act.sigma_prime(g) * act.sigma_prime(g); }, drift_var,
                      QuadratureMethod{200})
          .value;
  std::vector<double> adjusted(total);
  for (std::size_t i = 0; i < total; ++i) {
    const double sp = act.sigma_prime(decay * z0[i]);
    adjusted[i] = remainder[i] - noise * noise * sp * sp;
  }
  const auto adj = mean_with_stderr(adjusted);
  const double s2_raw = adj.value + control_mean - c.b_t * c.b_t;
  c.s_t2 = detail::clamp_variance(s2_raw, scale, "s_t^2", options, c.warnings);
  c.se_s_t2 = std::hypot(adj.std_error, 2.0 * c.b_t * c.se_b_t);

  if (count < kRecommendedConstantSamples)
    c.warnings.push_back("mc_constants = " + std::to_string(count) + " is below the recommended " +
                         std::to_string(kRecommendedConstantSamples) + "; standard errors are large");
  if (!c.all_finite()) throw EstimationError("teacher-equivalence", "constant estimates are not finite");
  return c;
}

// Record of what went into a curvature matrix.
struct CurvatureProvenance {
  std::uint64_t seed = 0;
  int p = 0;
  int d = 0;
  int n = 0;
  TeacherConstants constants;
};

// U = G G^T / n + b_t^2 S + s_t2 I with G = e^{-t} a_t B X' + v_t Omega.
// Immutable after construction; the eigensystem is computed on first use.
class TeacherCurvature {
 public:
  TeacherCurvature(Eigen::MatrixXd u, Eigen::MatrixXd x_train, CurvatureProvenance provenance)
      : u_(std::move(u)), x_train_(std::move(x_train)), provenance_(std::move(provenance)) {
    try {
      factor_.emplace(u_, "teacher-equivalence", "teacher curvature U");
    } catch (const SingularCurvatureError& e) {
      factor_error_ = e.what();
    }
  }

  const Eigen::MatrixXd& U() const noexcept { return u_; }
  // Training inputs X' (d x n), columns are samples.
  const Eigen::MatrixXd& x_train() const noexcept { return x_train_; }
  const CurvatureProvenance& provenance() const noexcept { return provenance_; }
  int p() const noexcept { return static_cast<int>(u_.rows()); }

  bool factorizable() const noexcept { return factor_.has_value(); }

  const SpdFactor& factor() const {
    if (!factor_) throw SingularCurvatureError("teacher-equivalence", factor_error_);
    return *factor_;
  }

  const EigSystem& eigensystem() const {
    std::call_once(eig_->once, [this] { eig_->value = eigendecompose(u_); });
    return eig_->value;
  }

 private:
  struct EigCache {
    std::once_flag once;
    EigSystem value;
  };

  Eigen::MatrixXd u_;
  Eigen::MatrixXd x_train_;
  CurvatureProvenance provenance_;
  std::optional<SpdFactor> factor_;
  std::string factor_error_;
  std::shared_ptr<EigCache> eig_ = std::make_shared<EigCache>();
};

// Draws n training points x ~ N(0, Sigma) as the columns of a d x n matrix.
inline Eigen::MatrixXd draw_training_inputs(const ExperimentConfig& config, int n) {
  Eigen::MatrixXd x(config.d, n);
  RandomStream rng(config.seed, StreamPurpose::kTeacherData);
  rng.fill_normal(x);
  x = config.sigma_spec.stddev(config.d).asDiagonal() * x;
  return x;
}

inline TeacherCurvature build_teacher_curvature(const RandomFeatures& features, const TeacherConstants& constants,
                                                const ExperimentConfig& config) {
  if (!constants.all_finite()) throw DomainError("teacher-equivalence", "teacher constants must be finite");
  if (features.d() != config.d) throw DomainError("teacher-equivalence", "feature dimension does not match config");
  const int n = config.n();
  const int p = features.p();
  check_memory_budget(dense_bytes(p, p, 2) + dense_bytes(p, n, 2), "teacher-equivalence", "teacher curvature");

  Eigen::MatrixXd x_train = draw_training_inputs(config, n);
  Eigen::MatrixXd omega(p, n);
  RandomStream(config.seed, StreamPurpose::kTeacherNoise).fill_normal(omega);

  const Eigen::MatrixXd g =
      (constants.forward.decay * constants.a_t) * features.preactivation(x_train) + constants.v_t * omega;
  Eigen::MatrixXd u = gram(g, 1.0 / n);
  u += (constants.b_t * constants.b_t) * features.S();
  u.diagonal().array() += constants.s_t2;

  CurvatureProvenance prov{config.seed, p, features.d(), n, constants};
  return TeacherCurvature(std::move(u), std::move(x_train), std::move(prov));
}

// Closed-form score of the converged teacher,
//   s(x) = -(mu1 / Gamma) B^T U^{-1} sigma(B x),
// with K = U^{-1} B precomputed by d factor solves. The referenced
// features must outlive the map.
class TeacherScoreMap {
 public:
  TeacherScoreMap(const RandomFeatures& features, const TeacherCurvature& curvature, double mu1,
                  ActivationKind activation = ActivationKind::kTanh)
      : features_(&features),
        activation_(activation),
        mu1_(mu1),
        gamma_t_(curvature.provenance().constants.forward.gamma_t) {
    if (features.p() != curvature.p()) throw DomainError("teacher-equivalence", "U and features disagree on p");
    k_ = curvature.factor().solve(features.B());
  }

  const RandomFeatures& features() const noexcept { return *features_; }
  const Activation& activation() const noexcept { return activation_; }
  double mu1() const noexcept { return mu1_; }
  double gamma_t() const noexcept { return gamma_t_; }
  // U^{-1} B, p x d.
  const Eigen::MatrixXd& resolved_features() const noexcept { return k_; }

  // Scores for the columns of x (d x m).
  Eigen::MatrixXd score_batch(const Eigen::MatrixXd& x) const {
    if (x.rows() != features_->d()) throw DomainError("teacher-equivalence", "score input has wrong dimension");
    Eigen::MatrixXd h = features_->preactivation(x);
    activation_.apply(h);
    return (-mu1_ / gamma_t_) * (k_.transpose() * h);
  }

  Eigen::VectorXd score(const Eigen::VectorXd& x) const { return score_batch(x); }

  // A_phi = -(sqrt(p) mu1 / Gamma) K^T, d x p.
  Eigen::MatrixXd top_layer() const {
    return (-std::sqrt(static_cast<double>(features_->p())) * mu1_ / gamma_t_) * k_.transpose();
  }

  // Tr(U^{-1} S) = Tr(B^T U^{-1} B).
  double trace_uinv_s() const { return (features_->B().array() * k_.array()).sum(); }

 private:
  const RandomFeatures* features_;
  Activation activation_;
  double mu1_;
  double gamma_t_;
  Eigen::MatrixXd k_;
};

inline TeacherScoreMap make_teacher_score(const RandomFeatures& features, const TeacherCurvature& curvature,
                                          const ExperimentConfig& config) {
  return TeacherScoreMap(features, curvature, curvature.provenance().constants.mu1, config.activation);
}

inline Eigen::VectorXd teacher_score(const TeacherScoreMap& map, const Eigen::VectorXd& x) {
  return map.score(x);
}

inline Eigen::MatrixXd teacher_top_layer(const TeacherScoreMap& map) {
  return map.top_layer();
}

}  // namespace rfcd
