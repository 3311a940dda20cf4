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
#include "rfcd/linalg.hpp"
#include "rfcd/random.hpp"

namespace rfcd {

// Symmetric product X X^T, filled from a rank update so the result is
// exactly symmetric.
inline Eigen::MatrixXd gram(const Eigen::MatrixXd& x, double scale = 1.0) {
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(x.rows(), x.rows());
  out.selfadjointView<Eigen::Lower>().rankUpdate(x, scale);
  out.triangularView<Eigen::StrictlyUpper>() = out.transpose();
  return out;
}

// Frozen first layer shared by teacher and student.
class RandomFeatures {
 public:
  RandomFeatures() = default;

  // Takes an arbitrary p x d weight matrix (tests and oracles build
  // hand-picked ones).
  explicit RandomFeatures(Eigen::MatrixXd w)
      : w_(std::move(w)), b_(w_ / std::sqrt(static_cast<double>(w_.cols()))), s_(gram(b_)) {}

  int p() const noexcept { return static_cast<int>(w_.rows()); }
  int d() const noexcept { return static_cast<int>(w_.cols()); }

  const Eigen::MatrixXd& W() const noexcept { return w_; }
  // W / sqrt(d).
  const Eigen::MatrixXd& B() const noexcept { return b_; }
  // W W^T / d.
  const Eigen::MatrixXd& S() const noexcept { return s_; }

  // Pre-activations W x / sqrt(d) for the columns of x.
  Eigen::MatrixXd preactivation(const Eigen::MatrixXd& x) const { return b_ * x; }

 private:
  Eigen::MatrixXd w_;
  Eigen::MatrixXd b_;
  Eigen::MatrixXd s_;
};

inline RandomFeatures make_random_features(const ExperimentConfig& config) {
  config.validate();
  const int p = config.p();
  const int d = config.d;
  check_memory_budget(dense_bytes(p, p) + dense_bytes(p, d, 2), "model-core", "random features");
  Eigen::MatrixXd w(p, d);
  RandomStream rng(config.seed, StreamPurpose::kFeatures);
  rng.fill_normal(w);
  return RandomFeatures(std::move(w));
}

}  // namespace rfcd
