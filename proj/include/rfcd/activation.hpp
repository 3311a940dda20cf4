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
#include <numbers>

#include <Eigen/Dense>

#include "rfcd/config.hpp"

namespace rfcd {

// Elementwise activation with its first two derivatives.
class Activation {
 public:
  constexpr explicit Activation(ActivationKind kind = ActivationKind::kTanh) : kind_(kind) {}

  constexpr ActivationKind kind() const noexcept { return kind_; }
  constexpr bool is_identity() const noexcept { return kind_ == ActivationKind::kIdentity; }

  double sigma(double x) const {
    switch (kind_) {
      case ActivationKind::kTanh: return std::tanh(x);
      case ActivationKind::kIdentity: return x;
      case ActivationKind::kErf: return std::erf(x);
    }
    return x;
  }

  double sigma_prime(double x) const {
    switch (kind_) {
      case ActivationKind::kTanh: {
        const double t = std::tanh(x);
        return 1.0 - t * t;
      }
      case ActivationKind::kIdentity: return 1.0;
      case ActivationKind::kErf: return kErfSlope * std::exp(-x * x);
    }
    return 1.0;
  }

  double sigma_second(double x) const {
    switch (kind_) {
      case ActivationKind::kTanh: {
        const double t = std::tanh(x);
        return -2.0 * t * (1.0 - t * t);
      }
      case ActivationKind::kIdentity: return 0.0;
      case ActivationKind::kErf: return -2.0 * x * kErfSlope * std::exp(-x * x);
    }
    return 0.0;
  }

  // h = sigma(pre), elementwise, in place.
  template <typename Derived>
  void apply(Eigen::DenseBase<Derived>& pre) const {
    switch (kind_) {
      case ActivationKind::kTanh: pre.derived() = pre.derived().array().tanh(); break;
      case ActivationKind::kIdentity: break;
      case ActivationKind::kErf: pre.derived() = pre.derived().unaryExpr([](double v) { return std::erf(v); }); break;
    }
  }

  template <typename Derived>
  void apply(Eigen::DenseBase<Derived>&& pre) const {
    apply(pre);
  }

 private:
  static constexpr double kErfSlope = 2.0 * std::numbers::inv_sqrtpi;

  ActivationKind kind_;
};

}  // namespace rfcd
