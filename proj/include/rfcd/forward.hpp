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

#include <Eigen/Dense>

#include "rfcd/config.hpp"
#include "rfcd/errors.hpp"

namespace rfcd {

// Scalars of the OU forward process x_t = e^{-t} x_0 + sqrt(delta_t) xi.
struct ForwardParams {
  double t = 0.0;
  double decay = 1.0;      // e^{-t}
  double delta_var = 0.0;  // 1 - e^{-2t}
  double gamma_t = 1.0;    // sqrt(e^{-2t} Tr(Sigma)/d + delta_var)

  double noise_scale() const { return std::sqrt(delta_var); }
};

inline ForwardParams forward_params(double t, const SigmaSpec& sigma, int d) {
  if (!(t >= 0.0) || !std::isfinite(t)) throw DomainError("model-core", "forward time must be finite and >= 0");
  ForwardParams fp;
  fp.t = t;
  fp.decay = std::exp(-t);
  fp.delta_var = -std::expm1(-2.0 * t);
  // Written as 1 + e^{-2t}(r - 1) so that r == 1 gives exactly 1.
  const double ratio = sigma.trace_ratio(d);
  fp.gamma_t = std::sqrt(1.0 + std::exp(-2.0 * t) * (ratio - 1.0));
  return fp;
}

inline ForwardParams forward_params(const ExperimentConfig& config) {
  return forward_params(config.t_prime, config.sigma_spec, config.d);
}

inline Eigen::VectorXd sample_forward(const Eigen::Ref<const Eigen::VectorXd>& x0, double t,
                                      const Eigen::Ref<const Eigen::VectorXd>& xi) {
  if (x0.size() != xi.size()) throw DomainError("model-core", "sample_forward: x0 and xi differ in length");
  if (!(t >= 0.0) || !std::isfinite(t)) throw DomainError("model-core", "forward time must be finite and >= 0");
  if (!x0.allFinite() || !xi.allFinite()) throw DomainError("model-core", "sample_forward: non-finite input");
  return std::exp(-t) * x0 + std::sqrt(-std::expm1(-2.0 * t)) * xi;
}

}  // namespace rfcd
