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

#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>

#include <Eigen/Dense>

#include "rfcd/errors.hpp"

namespace rfcd {

enum class ActivationKind { kTanh, kIdentity, kErf };

// Which closed form supplies the isotropic shift of U_cd.
//   kTheorem: a0 a1^2 dt^2 t'^2 Tr(U^-1 S) / d
//   kPfDrift: a0 dt^2 kappa^2, i.e. a0 E||dx||^2/d with dx = dt(-x - s(x))
enum class BetaConvention { kTheorem, kPfDrift };

inline std::string_view to_string(ActivationKind kind) {
  switch (kind) {
    case ActivationKind::kTanh: return "tanh";
    case ActivationKind::kIdentity: return "identity";
    case ActivationKind::kErf: return "erf";
  }
  return "?";
}

inline ActivationKind parse_activation(std::string_view name) {
  if (name == "tanh") return ActivationKind::kTanh;
  if (name == "identity") return ActivationKind::kIdentity;
  if (name == "erf") return ActivationKind::kErf;
  throw DomainError("model-core", "unknown activation '" + std::string(name) + "'");
}

inline std::string_view to_string(BetaConvention c) {
  return c == BetaConvention::kTheorem ? "theorem" : "pf_drift";
}

inline BetaConvention parse_beta_convention(std::string_view name) {
  if (name == "theorem") return BetaConvention::kTheorem;
  if (name == "pf_drift" || name == "pf-drift") return BetaConvention::kPfDrift;
  throw DomainError("model-core", "unknown beta convention '" + std::string(name) + "'");
}

// Data covariance: c * I, or diag(v).
class SigmaSpec {
 public:
  SigmaSpec() = default;

  static SigmaSpec isotropic(double scale = 1.0) {
    SigmaSpec s;
    s.scale_ = scale;
    return s;
  }

  static SigmaSpec diagonal(Eigen::VectorXd diag) {
    SigmaSpec s;
    s.diag_ = std::move(diag);
    return s;
  }

  bool is_isotropic() const noexcept { return diag_.size() == 0; }
  double scale() const noexcept { return scale_; }
  const Eigen::VectorXd& diag() const noexcept { return diag_; }

  // Tr(Sigma) / d.
  double trace_ratio(int d) const {
    return is_isotropic() ? scale_ : diag_.sum() / static_cast<double>(d);
  }

  // Per-coordinate standard deviations.
  Eigen::VectorXd stddev(int d) const {
    if (is_isotropic()) return Eigen::VectorXd::Constant(d, std::sqrt(scale_));
    return diag_.array().sqrt().matrix();
  }

  void validate(int d) const {
    if (is_isotropic()) {
      if (!(scale_ > 0.0) || !std::isfinite(scale_))
        throw DomainError("model-core", "isotropic covariance scale must be positive and finite");
      return;
    }
    if (diag_.size() != d)
      throw DomainError("model-core", "diagonal covariance must have length d = " + std::to_string(d));
    if (!diag_.allFinite() || (diag_.array() < 0.0).any() || !(diag_.sum() > 0.0))
      throw DomainError("model-core", "diagonal covariance entries must be finite, non-negative, not all zero");
  }

 private:
  double scale_ = 1.0;
  Eigen::VectorXd diag_;
};

struct ExperimentConfig {
  int d = 100;
  double psi_p = 32.0;
  double psi_n = 4.0;
  double t_prime = 0.01;
  double dt_step = 1e-3;
  ActivationKind activation = ActivationKind::kTanh;
  SigmaSpec sigma_spec = SigmaSpec::isotropic(1.0);
  double ridge_gamma = 2.0;
  double lambda_th = 2.0;
  std::int64_t mc_constants = 200000;
  std::int64_t mc_flow = 50000;
  double atom_eps = 1e-50;
  BetaConvention beta_convention = BetaConvention::kTheorem;
  std::uint64_t seed = 0;

  int p() const { return ratio_to_count(psi_p, "psi_p"); }
  int n() const { return ratio_to_count(psi_n, "psi_n"); }

  void validate() const {
    const auto fail = [](const std::string& msg) { throw DomainError("model-core", msg); };
    if (d < 1) fail("d must be >= 1");
    (void)p();
    (void)n();
    if (!(t_prime > 0.0) || !std::isfinite(t_prime)) fail("t_prime must be > 0");
    if (!(dt_step >= 0.0) || !std::isfinite(dt_step)) fail("dt_step must be >= 0");
    if (!(ridge_gamma >= 0.0) || !std::isfinite(ridge_gamma)) fail("ridge_gamma must be >= 0");
    if (!std::isfinite(lambda_th)) fail("lambda_th must be finite");
    if (mc_constants < 1) fail("mc_constants must be >= 1");
    if (mc_flow < 1) fail("mc_flow must be >= 1");
    if (!(atom_eps >= 0.0)) fail("atom_eps must be >= 0");
    sigma_spec.validate(d);
  }

 private:
  int ratio_to_count(double ratio, const char* name) const {
    const double raw = ratio * static_cast<double>(d);
    const double rounded = std::round(raw);
    if (!std::isfinite(raw) || std::abs(raw - rounded) > 1e-9 * std::max(1.0, std::abs(raw)) || rounded < 1.0 ||
        rounded > 2.0e9)
      throw DomainError("model-core", std::string(name) + " * d must be an integer >= 1 (got " +
                                          std::to_string(raw) + ")");
    return static_cast<int>(rounded);
  }
};

}  // namespace rfcd
