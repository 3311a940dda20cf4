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

// Gaussian expectations E_{Z ~ N(0, v)}[f(Z)] by Monte Carlo or by
// Gauss-Hermite quadrature, plus the small sample-statistics helpers the
// estimators share.

#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <mutex>
#include <span>
#include <tuple>
#include <sstream>
#include <variant>
#include <vector>

#include <Eigen/Eigenvalues>

#include "rfcd/errors.hpp"
#include "rfcd/parallel.hpp"
#include "rfcd/random.hpp"

namespace rfcd {

struct MomentEstimate {
  double value = 0.0;
  double std_error = 0.0;  // zero for quadrature
  std::int64_t count = 0;
};

// Mean and standard error of a sample (population variance / (n - 1)).
inline MomentEstimate mean_with_stderr(std::span<const double> xs) {
  MomentEstimate est;
  est.count = static_cast<std::int64_t>(xs.size());
  if (xs.empty()) return est;
  double sum = 0.0;
  for (double x : xs) sum += x;
  const double mean = sum / static_cast<double>(xs.size());
  double ss = 0.0;
  for (double x : xs) ss += (x - mean) * (x - mean);
  est.value = mean;
  est.std_error = xs.size() > 1 ? std::sqrt(ss / static_cast<double>(xs.size() - 1) / static_cast<double>(xs.size()))
                             : std::numeric_limits<double>::infinity();
  return est;
}

// Substream for chunk `chunk` of sampling task `task` under `purpose`.
inline std::uint64_t chunk_stream(StreamPurpose purpose, std::uint64_t task, std::uint64_t chunk) {
  return stream_id(purpose, (task << 28) | (chunk & ((std::uint64_t{1} << 28) - 1)));
}

// Probabilists' Gauss-Hermite rule normalised to the standard normal
// density: sum_i w_i f(x_i) ~= E[f(G)], G ~ N(0, 1).
class GaussHermiteRule {
 public:
  static constexpr int kMaxNodes = 400;

  explicit GaussHermiteRule(int nodes) {
    if (nodes < 1 || nodes > kMaxNodes)
      throw DomainError("model-core", "Gauss-Hermite node count must be in [1, 400]");
    const int n = nodes;
    nodes_.resize(n);
    weights_.resize(n);
    if (n == 1) {
      nodes_[0] = 0.0;
      weights_[0] = 1.0;
      return;
    }
    // Golub-Welsch: eigenvalues of the Jacobi matrix are the nodes.
    Eigen::VectorXd diag = Eigen::VectorXd::Zero(n);
    Eigen::VectorXd sub(n - 1);
    for (int k = 1; k < n; ++k) sub[k - 1] = std::sqrt(static_cast<double>(k));
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver;
    solver.computeFromTridiagonal(diag, sub, Eigen::EigenvaluesOnly);
    if (solver.info() != Eigen::Success) throw NumericalError("model-core", "Gauss-Hermite node solve failed");

    // Newton polish on the orthonormal p_n, then Christoffel weights
    // w_i = 1 / sum_{k<n} p_k(x_i)^2, which keep full relative accuracy.
    for (int i = 0; i < n; ++i) {
      double x = solver.eigenvalues()[i];
      for (int it = 0; it < 3; ++it) {
        const auto [pn, pn1, sumsq] = evaluate(n, x);
        const double deriv = std::sqrt(static_cast<double>(n)) * pn1;
        if (deriv == 0.0) break;
        x -= pn / deriv;
      }
      nodes_[i] = x;
    }
    for (int i = 0; i < n / 2; ++i) {
      const double x = 0.5 * (nodes_[n - 1 - i] - nodes_[i]);
      nodes_[i] = -x;
      nodes_[n - 1 - i] = x;
    }
    if (n % 2 == 1) nodes_[n / 2] = 0.0;
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
      weights_[i] = 1.0 / std::get<2>(evaluate(n, nodes_[i]));
      total += weights_[i];
    }
    for (double& w : weights_) w /= total;
  }

  // Shared immutable rule per node count.
  static const GaussHermiteRule& get(int nodes) {
    static std::mutex mu;
    static std::map<int, GaussHermiteRule> cache;
    std::lock_guard lock(mu);
    auto it = cache.find(nodes);
    if (it == cache.end()) it = cache.emplace(nodes, GaussHermiteRule(nodes)).first;
    return it->second;
  }

  int size() const noexcept { return static_cast<int>(nodes_.size()); }
  const std::vector<double>& nodes() const noexcept { return nodes_; }
  const std::vector<double>& weights() const noexcept { return weights_; }

  // E[f(Z)], Z ~ N(0, variance).
  template <typename F>
  double expect(F&& f, double variance = 1.0) const {
    const double scale = std::sqrt(variance);
    double acc = 0.0;
    for (std::size_t i = 0; i < nodes_.size(); ++i) acc += weights_[i] * f(scale * nodes_[i]);
    return acc;
  }

 private:
  // Returns (p_n(x), p_{n-1}(x), sum_{k<n} p_k(x)^2) for orthonormal
  // Hermite polynomials under N(0, 1).
  static std::tuple<double, double, double> evaluate(int n, double x) {
    double prev = 0.0;
    double cur = 1.0;
    double sumsq = 0.0;
    for (int k = 0; k < n; ++k) {
      sumsq += cur * cur;
      const double next = (x * cur - std::sqrt(static_cast<double>(k)) * prev) / std::sqrt(static_cast<double>(k + 1));
      prev = cur;
      cur = next;
    }
    return {cur, prev, sumsq};
  }

  std::vector<double> nodes_;
  std::vector<double> weights_;
};

struct MonteCarloMethod {
  std::int64_t count = 100000;
  std::uint64_t seed = 0;
  std::uint64_t task = 0;  // distinguishes independent estimates under one seed
};

struct QuadratureMethod {
  int nodes = 200;
};

using MomentMethod = std::variant<MonteCarloMethod, QuadratureMethod>;

// E_{Z ~ N(0, variance)}[f(Z)]. Monte Carlo reports a standard error;
// quadrature reports zero error. Both are deterministic in their inputs.
template <typename F>
MomentEstimate gaussian_moment(F&& f, double variance, const MomentMethod& method, const RunOptions& options = {}) {
  if (!(variance >= 0.0) || !std::isfinite(variance))
    throw DomainError("model-core", "gaussian_moment: variance must be finite and >= 0");

  if (const auto* quad = std::get_if<QuadratureMethod>(&method)) {
    const auto& rule = GaussHermiteRule::get(quad->nodes);
    const double scale = std::sqrt(variance);
    double acc = 0.0;
    for (int i = 0; i < rule.size(); ++i) {
      const double z = scale * rule.nodes()[i];
      const double fz = f(z);
      if (!std::isfinite(fz)) {
        std::ostringstream msg;
        msg << "non-finite integrand f(" << z << ") = " << fz << " at quadrature node " << i;
        throw EstimationError("model-core", msg.str());
      }
      acc += rule.weights()[i] * fz;
    }
    return {acc, 0.0, rule.size()};
  }

  const auto& mc = std::get<MonteCarloMethod>(method);
  if (mc.count < 1) throw DomainError("model-core", "gaussian_moment: sample count must be >= 1");
  const auto total = static_cast<std::size_t>(mc.count);
  std::vector<double> values(total);
  const double scale = std::sqrt(variance);
  for_each_chunk(total, kSampleChunk, options.threads, [&](const ChunkRange& r) {
    RandomStream rng(mc.seed, chunk_stream(StreamPurpose::kMomentMc, mc.task, r.index));
    for (std::size_t i = r.begin; i < r.end; ++i) {
      const double z = scale * rng.normal();
      const double fz = f(z);
      if (!std::isfinite(fz)) {
        std::ostringstream msg;
        msg << "non-finite integrand f(" << z << ") = " << fz << " at draw " << i;
        throw EstimationError("model-core", msg.str());
      }
      values[i] = fz;
    }
  });
  return mean_with_stderr(values);
}

}  // namespace rfcd
