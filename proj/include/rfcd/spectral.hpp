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

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "rfcd/errors.hpp"
#include "rfcd/features.hpp"
#include "rfcd/linalg.hpp"

namespace rfcd {

// Relative spread under which eigenvalues are counted as one atom.
inline constexpr double kAtomRelativeSpread = 1e-9;

struct Atom {
  double value = 0.0;
  int multiplicity = 0;
};

struct SpectrumReport {
  int total = 0;
  std::vector<double> kept;  // eigenvalues >= atom_eps, ascending
  int discarded = 0;         // eigenvalues below atom_eps
  int negative = 0;          // eigenvalues strictly below zero
  double min_eigenvalue = 0.0;
  std::vector<double> edges;      // bins + 1 edges
  std::vector<double> densities;  // per bin, integrating to binned / total
  std::vector<Atom> atoms;
  int binned = 0;
};

inline double median(std::vector<double> xs) {
  if (xs.empty()) return std::numeric_limits<double>::quiet_NaN();
  const auto mid = xs.size() / 2;
  std::nth_element(xs.begin(), xs.begin() + static_cast<std::ptrdiff_t>(mid), xs.end());
  const double hi = xs[mid];
  if (xs.size() % 2 == 1) return hi;
  const double lo = *std::max_element(xs.begin(), xs.begin() + static_cast<std::ptrdiff_t>(mid));
  return 0.5 * (lo + hi);
}

namespace detail {

// Sorted input. Linear interpolation between order statistics.
inline double quantile_sorted(const std::vector<double>& xs, double q) {
  const double pos = q * static_cast<double>(xs.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, xs.size() - 1);
  return xs[lo] + (pos - static_cast<double>(lo)) * (xs[hi] - xs[lo]);
}

inline int freedman_diaconis_bins(const std::vector<double>& xs) {
  const double range = xs.back() - xs.front();
  const double iqr = quantile_sorted(xs, 0.75) - quantile_sorted(xs, 0.25);
  const double n = static_cast<double>(xs.size());
  if (!(range > 0.0)) return 1;
  if (!(iqr > 0.0)) return std::max(1, static_cast<int>(std::ceil(std::sqrt(n))));
  const double width = 2.0 * iqr / std::cbrt(n);
  return std::clamp(static_cast<int>(std::ceil(range / width)), 1, 10000);
}

}  // namespace detail

// Histogram of an eigenvalue list with atoms split out. `bins` = 0 selects
// Freedman-Diaconis. Atoms are searched over the full spectrum, so a
// cluster at zero survives the atom_eps cut.
inline SpectrumReport spectral_density(const Eigen::VectorXd& lambdas, int bins = 0, double atom_eps = 1e-50) {
  if (bins < 0) throw DomainError("spectral-diagnostics", "bin count must be >= 0");
  SpectrumReport rep;
  const int p = static_cast<int>(lambdas.size());
  rep.total = p;
  if (p == 0) return rep;

  std::vector<double> all(lambdas.data(), lambdas.data() + p);
  std::sort(all.begin(), all.end());
  rep.min_eigenvalue = all.front();
  for (double v : all) {
    if (v < 0.0) ++rep.negative;
    if (v < atom_eps) ++rep.discarded;
    else rep.kept.push_back(v);
  }

  const int min_count = std::max(2, p / 100);
  std::vector<char> in_atom(p, 0);
  for (int i = 0; i < p;) {
    int j = i + 1;
    while (j < p && all[j] - all[i] <= kAtomRelativeSpread * std::max(std::abs(all[i]), std::abs(all[j]))) ++j;
    if (j - i >= min_count) {
      rep.atoms.push_back({all[i + (j - i) / 2], j - i});
      std::fill(in_atom.begin() + i, in_atom.begin() + j, 1);
    }
    i = j;
  }

  std::vector<double> rest;
  for (int i = 0; i < p; ++i)
    if (!in_atom[i] && all[i] >= atom_eps) rest.push_back(all[i]);
  rep.binned = static_cast<int>(rest.size());
  if (rest.empty()) return rep;

  const int nb = bins > 0 ? bins : detail::freedman_diaconis_bins(rest);
  double lo = rest.front();
  double hi = rest.back();
  if (!(hi > lo)) {
    const double h = 0.5 * std::max(std::abs(lo) * kAtomRelativeSpread, std::numeric_limits<double>::min());
    lo -= h;
    hi += h;
  }
  const double width = (hi - lo) / nb;
  rep.edges.resize(nb + 1);
  for (int b = 0; b <= nb; ++b) rep.edges[b] = lo + width * b;
  rep.edges.back() = hi;
  std::vector<int> counts(nb, 0);
  for (double v : rest) {
    int b = static_cast<int>((v - lo) / width);
    counts[std::clamp(b, 0, nb - 1)]++;
  }
  rep.densities.resize(nb);
  for (int b = 0; b < nb; ++b)
    rep.densities[b] = counts[b] / (static_cast<double>(p) * (rep.edges[b + 1] - rep.edges[b]));
  return rep;
}

inline SpectrumReport spectral_density(const EigSystem& eig, int bins = 0, double atom_eps = 1e-50) {
  return spectral_density(eig.lambdas, bins, atom_eps);
}

struct Partition {
  std::vector<int> mem;
  std::vector<int> gen;
};

inline Partition partition_mem_gen(const Eigen::VectorXd& lambdas, double lambda_th) {
  Partition part;
  for (Eigen::Index i = 0; i < lambdas.size(); ++i)
    (lambdas[i] < lambda_th ? part.mem : part.gen).push_back(static_cast<int>(i));
  return part;
}

inline Partition partition_mem_gen(const EigSystem& eig, double lambda_th) {
  return partition_mem_gen(eig.lambdas, lambda_th);
}

// Features expressed in the eigenbasis of U: C = V^T B and Y = C C^T, so
// that Y(k, i) = u_k^T S u_i. Computed once and shared by every ridge.
struct ModeBasis {
  Eigen::VectorXd lambdas;
  Eigen::VectorXd visibility;  // a_i = u_i^T S u_i
  Eigen::MatrixXd y;
};

inline ModeBasis make_mode_basis(const EigSystem& eig_u, const RandomFeatures& features) {
  if (eig_u.size() != features.p()) throw DomainError("spectral-diagnostics", "eigensystem and features disagree on p");
  check_memory_budget(dense_bytes(features.p(), features.p(), 2), "spectral-diagnostics", "mode basis");
  ModeBasis basis;
  basis.lambdas = eig_u.lambdas;
  const Eigen::MatrixXd c = eig_u.vectors.transpose() * features.B();
  basis.visibility = c.rowwise().squaredNorm();
  basis.y = gram(c);
  return basis;
}

struct ModeDiagnostics {
  Eigen::VectorXd lambda_U;
  Eigen::VectorXd a;
  Eigen::VectorXd b;
  Eigen::VectorXd alpha;
  std::vector<char> is_mem;
  Eigen::VectorXd frac_bmem;
  std::vector<char> frac_flagged;  // zero denominator, fracBmem reported as 0
  double ridge = 0.0;
  double mu1 = 0.0;
  double lambda_th = 0.0;

  int size() const noexcept { return static_cast<int>(lambda_U.size()); }
};

inline ModeDiagnostics mode_diagnostics(const ModeBasis& basis, double mu1, double ridge, double lambda_th) {
  if (!(ridge >= 0.0) || !std::isfinite(ridge)) throw DomainError("spectral-diagnostics", "ridge must be finite and >= 0");
  const Eigen::Index p = basis.lambdas.size();
  const Eigen::ArrayXd shifted = basis.lambdas.array() + ridge;
  if (p > 0 && !(shifted.minCoeff() > 0.0))
    throw SingularCurvatureError("spectral-diagnostics", "U + ridge I is not positive definite");
  const Eigen::VectorXd inv = shifted.inverse().matrix();

  ModeDiagnostics diag;
  diag.lambda_U = basis.lambdas;
  diag.a = basis.visibility;
  diag.ridge = ridge;
  diag.mu1 = mu1;
  diag.lambda_th = lambda_th;
  diag.is_mem.resize(p);
  Eigen::VectorXd mem_weight = Eigen::VectorXd::Zero(p);
  for (Eigen::Index k = 0; k < p; ++k) {
    diag.is_mem[k] = basis.lambdas[k] < lambda_th;
    if (diag.is_mem[k]) mem_weight[k] = inv[k];
  }
  const Eigen::MatrixXd y2 = basis.y.array().square();
  diag.b = y2.transpose() * inv;
  const Eigen::VectorXd mem_part = y2.transpose() * mem_weight;
  diag.alpha = diag.a - (mu1 * mu1) * diag.b;
  diag.frac_bmem.resize(p);
  diag.frac_flagged.assign(p, 0);
  for (Eigen::Index i = 0; i < p; ++i) {
    if (diag.b[i] > 0.0) {
      diag.frac_bmem[i] = std::clamp(mem_part[i] / diag.b[i], 0.0, 1.0);
    } else {
      diag.frac_bmem[i] = 0.0;
      diag.frac_flagged[i] = 1;
    }
  }
  return diag;
}

inline ModeDiagnostics mode_diagnostics(const EigSystem& eig_u, const RandomFeatures& features, double mu1,
                                        double ridge, double lambda_th) {
  return mode_diagnostics(make_mode_basis(eig_u, features), mu1, ridge, lambda_th);
}

// Share of positive response mass carried by Mem modes; empty when no mode
// has a positive response.
inline std::optional<double> share_mem_plus(const ModeDiagnostics& diag) {
  double mem = 0.0;
  double all = 0.0;
  for (int i = 0; i < diag.size(); ++i) {
    const double pos = std::max(diag.alpha[i], 0.0);
    all += pos;
    if (diag.is_mem[i]) mem += pos;
  }
  if (!(all > 0.0)) return std::nullopt;
  return mem / all;
}

inline std::optional<double> share_mem_plus(const std::vector<double>& alpha, const std::vector<char>& is_mem) {
  ModeDiagnostics d;
  d.alpha = Eigen::Map<const Eigen::VectorXd>(alpha.data(), static_cast<Eigen::Index>(alpha.size()));
  d.lambda_U = Eigen::VectorXd::Zero(d.alpha.size());
  d.is_mem = is_mem;
  return share_mem_plus(d);
}

// Fraction of Gen modes with a positive response; empty when Gen is empty.
inline std::optional<double> frac_gen_alpha_pos(const ModeDiagnostics& diag) {
  int gen = 0;
  int pos = 0;
  for (int i = 0; i < diag.size(); ++i) {
    if (diag.is_mem[i]) continue;
    ++gen;
    if (diag.alpha[i] > 0.0) ++pos;
  }
  if (gen == 0) return std::nullopt;
  return static_cast<double>(pos) / gen;
}

inline double median_over(const Eigen::VectorXd& values, const std::vector<char>& is_mem, bool mem) {
  std::vector<double> xs;
  for (Eigen::Index i = 0; i < values.size(); ++i)
    if (static_cast<bool>(is_mem[i]) == mem) xs.push_back(values[i]);
  return median(std::move(xs));
}

struct RidgeSweepReport {
  std::vector<double> grid;
  std::vector<double> median_frac_gen;
  double tau = 0.0;
  std::optional<double> gamma_star;
};

inline RidgeSweepReport ridge_sweep(const ModeBasis& basis, double mu1, const std::vector<double>& grid, double tau,
                                    double lambda_th) {
  if (grid.empty()) throw DomainError("spectral-diagnostics", "ridge grid is empty");
  for (std::size_t i = 0; i < grid.size(); ++i) {
    if (!(grid[i] >= 0.0) || !std::isfinite(grid[i]))
      throw DomainError("spectral-diagnostics", "ridge grid values must be finite and >= 0");
    if (i > 0 && !(grid[i] > grid[i - 1]))
      throw DomainError("spectral-diagnostics", "ridge grid must be strictly ascending");
  }
  if (partition_mem_gen(basis.lambdas, lambda_th).gen.empty())
    throw PartitionError("spectral-diagnostics", "Gen set is empty at lambda_th = " + std::to_string(lambda_th));

  RidgeSweepReport rep;
  rep.grid = grid;
  rep.tau = tau;
  for (double g : grid) {
    const auto diag = mode_diagnostics(basis, mu1, g, lambda_th);
    rep.median_frac_gen.push_back(median_over(diag.frac_bmem, diag.is_mem, false));
  }
  for (std::size_t i = 1; i < rep.median_frac_gen.size(); ++i)
    if (rep.median_frac_gen[i] > rep.median_frac_gen[i - 1] * (1.0 + 1e-12) + 1e-300)
      throw NumericalError("spectral-diagnostics", "median Gen leakage increased along the ridge grid");
  for (std::size_t i = 0; i < grid.size(); ++i) {
    if (rep.median_frac_gen[i] <= tau) {
      rep.gamma_star = grid[i];
      break;
    }
  }
  return rep;
}

}  // namespace rfcd
