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

// Experiment runner behind the `rfcd` executable. Each subcommand writes
// its CSV/JSON outputs plus a manifest.json into the output directory.

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include <CLI11.hpp>
#include <json.hpp>

#include "rfcd/cd_operators.hpp"
#include "rfcd/config.hpp"
#include "rfcd/errors.hpp"
#include "rfcd/features.hpp"
#include "rfcd/flow.hpp"
#include "rfcd/io.hpp"
#include "rfcd/linalg.hpp"
#include "rfcd/oracle.hpp"
#include "rfcd/parallel.hpp"
#include "rfcd/spectral.hpp"
#include "rfcd/teacher.hpp"
#include "rfcd/version.hpp"

namespace rfcd {

using Json = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Configuration documents

inline Json config_to_json(const ExperimentConfig& c) {
  Json j;
  j["d"] = c.d;
  j["psi_p"] = c.psi_p;
  j["psi_n"] = c.psi_n;
  j["t_prime"] = c.t_prime;
  j["dt_step"] = c.dt_step;
  j["activation"] = std::string(to_string(c.activation));
  if (c.sigma_spec.is_isotropic()) {
    j["sigma_spec"] = c.sigma_spec.scale();
  } else {
    j["sigma_spec"] = std::vector<double>(c.sigma_spec.diag().data(),
                                          c.sigma_spec.diag().data() + c.sigma_spec.diag().size());
  }
  j["ridge_gamma"] = c.ridge_gamma;
  j["lambda_th"] = c.lambda_th;
  j["mc_constants"] = c.mc_constants;
  j["mc_flow"] = c.mc_flow;
  j["atom_eps"] = c.atom_eps;
  j["beta_convention"] = std::string(to_string(c.beta_convention));
  j["seed"] = c.seed;
  return j;
}

// Applies the keys of `doc` on top of `base`. Unknown keys are rejected.
inline ExperimentConfig config_from_json(const Json& doc, ExperimentConfig base = {}) {
  if (!doc.is_object()) throw DomainError("cli-runner", "config document must be a JSON object");
  const auto number = [](const Json& v, const std::string& key) {
    if (!v.is_number()) throw DomainError("cli-runner", "config key '" + key + "' must be a number");
    return v.get<double>();
  };
  const auto integer = [](const Json& v, const std::string& key) {
    if (!v.is_number_integer()) throw DomainError("cli-runner", "config key '" + key + "' must be an integer");
    return v.get<std::int64_t>();
  };
  const auto text = [](const Json& v, const std::string& key) {
    if (!v.is_string()) throw DomainError("cli-runner", "config key '" + key + "' must be a string");
    return v.get<std::string>();
  };
  for (const auto& [key, v] : doc.items()) {
    if (key == "d") base.d = static_cast<int>(integer(v, key));
    else if (key == "psi_p") base.psi_p = number(v, key);
    else if (key == "psi_n") base.psi_n = number(v, key);
    else if (key == "t_prime") base.t_prime = number(v, key);
    else if (key == "dt_step") base.dt_step = number(v, key);
    else if (key == "activation") base.activation = parse_activation(text(v, key));
    else if (key == "sigma_spec") {
      if (v.is_number()) {
        base.sigma_spec = SigmaSpec::isotropic(v.get<double>());
      } else if (v.is_array()) {
        Eigen::VectorXd diag(static_cast<Eigen::Index>(v.size()));
        for (std::size_t i = 0; i < v.size(); ++i) diag[static_cast<Eigen::Index>(i)] = number(v[i], key);
        base.sigma_spec = SigmaSpec::diagonal(std::move(diag));
      } else {
        throw DomainError("cli-runner", "config key 'sigma_spec' must be a number or an array");
      }
    } else if (key == "ridge_gamma") base.ridge_gamma = number(v, key);
    else if (key == "lambda_th") base.lambda_th = number(v, key);
    else if (key == "mc_constants") base.mc_constants = integer(v, key);
    else if (key == "mc_flow") base.mc_flow = integer(v, key);
    else if (key == "atom_eps") base.atom_eps = number(v, key);
    else if (key == "beta_convention") base.beta_convention = parse_beta_convention(text(v, key));
    else if (key == "seed") base.seed = static_cast<std::uint64_t>(integer(v, key));
    else throw DomainError("cli-runner", "unknown config key '" + key + "'");
  }
  return base;
}

inline ExperimentConfig load_config_file(const std::filesystem::path& path, ExperimentConfig base = {}) {
  std::ifstream in(path);
  if (!in) throw DomainError("cli-runner", "cannot read config file " + path.string());
  Json doc;
  try {
    doc = Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw DomainError("cli-runner", std::string("config file is not valid JSON: ") + e.what());
  }
  return config_from_json(doc, base);
}

// ---------------------------------------------------------------------------
// Lazily built experiment state

class Pipeline {
 public:
  Pipeline(ExperimentConfig config, RunOptions options) : config_(std::move(config)), options_(options) {
    config_.validate();
  }

  const ExperimentConfig& config() const noexcept { return config_; }
  const RunOptions& options() const noexcept { return options_; }

  const TeacherConstants& constants() {
    if (!constants_) constants_ = estimate_teacher_constants(config_, options_);
    return *constants_;
  }

  const RandomFeatures& features() {
    if (!features_) features_ = make_random_features(config_);
    return *features_;
  }

  const TeacherCurvature& curvature() {
    if (!curvature_) curvature_.emplace(build_teacher_curvature(features(), constants(), config_));
    return *curvature_;
  }

  const TeacherScoreMap& score() {
    if (!score_) score_.emplace(make_teacher_score(features(), curvature(), config_));
    return *score_;
  }

  const FlowConstants& flow() {
    if (!flow_) flow_ = estimate_flow_constants(score(), config_, options_);
    return *flow_;
  }

  const CdCoefficients& coefficients() {
    if (!coeffs_) {
      const auto base = cd_coefficients(flow(), config_.activation, config_);
      const TraceEstimate trace = features().p() > kHutchinsonThreshold
                                      ? trace_uinv_s(curvature(), features(), config_.seed)
                                      : trace_uinv_s(score());
      coeffs_ = with_beta(base, trace, config_);
    }
    return *coeffs_;
  }

  const ModeBasis& basis() {
    if (!basis_) basis_ = make_mode_basis(curvature().eigensystem(), features());
    return *basis_;
  }

  // Theorem-fidelity operators use ridge 0 inside A.
  const CdOperators& operators(double ridge = 0.0) {
    if (!ops_ || ops_->ridge_used != ridge) {
      ops_ = assemble_U_cd(features(), build_A_core(features(), curvature(), constants().mu1, ridge), coefficients(),
                           config_);
      ucd_eig_.reset();
    }
    return *ops_;
  }

  const EigSystem& ucd_eigensystem(double ridge = 0.0) {
    const auto& ops = operators(ridge);
    if (!ucd_eig_) ucd_eig_ = structured_eigensystem(features(), ops);
    return *ucd_eig_;
  }

 private:
  ExperimentConfig config_;
  RunOptions options_;
  std::optional<TeacherConstants> constants_;
  std::optional<RandomFeatures> features_;
  std::optional<TeacherCurvature> curvature_;
  std::optional<TeacherScoreMap> score_;
  std::optional<FlowConstants> flow_;
  std::optional<CdCoefficients> coeffs_;
  std::optional<ModeBasis> basis_;
  std::optional<CdOperators> ops_;
  std::optional<EigSystem> ucd_eig_;
};

// ---------------------------------------------------------------------------
// Report fragments

inline Json optional_json(const std::optional<double>& v) {
  return v ? Json(*v) : Json(nullptr);
}

inline Json constants_json(const TeacherConstants& c) {
  Json j;
  j["a_t"] = c.a_t;
  j["b_t"] = c.b_t;
  j["v_t"] = c.v_t;
  j["v_t2"] = c.v_t2;
  j["s_t2"] = c.s_t2;
  j["mu1"] = c.mu1;
  j["stderr"] = {{"a_t", c.se_a_t}, {"b_t", c.se_b_t}, {"v_t2", c.se_v_t2}, {"s_t2", c.se_s_t2}, {"mu1", c.se_mu1}};
  j["gamma_t"] = c.forward.gamma_t;
  j["delta_t"] = c.forward.delta_var;
  j["b_mu1_gap"] = c.b_mu1_gap();
  j["b_mu1_stderr"] = c.b_mu1_stderr();
  j["feature_second_moment"] = c.feature_second_moment;
  j["samples"] = c.samples;
  j["warnings"] = c.warnings;
  return j;
}

inline Json flow_json(const FlowConstants& f) {
  Json j;
  j["eta"] = f.eta;
  j["upsilon"] = f.upsilon;
  j["gamma"] = f.gamma_flow;
  j["kappa2"] = f.kappa2;
  j["stderr"] = {{"eta", f.se_eta}, {"upsilon", f.se_upsilon}, {"kappa2", f.se_kappa2}};
  j["samples"] = f.samples;
  return j;
}

inline Json coefficients_json(const CdCoefficients& c, int d) {
  Json j;
  j["a1"] = c.a1;
  j["a0"] = c.a0;
  j["beta"] = c.beta();
  j["beta_convention"] = std::string(to_string(c.shift.convention));
  j["beta_theorem"] = c.shift.theorem;
  j["beta_pf_drift"] = c.shift.pf_drift;
  j["trace_uinv_s_over_d"] = c.shift.trace.value / d;
  j["trace_stochastic"] = c.shift.trace.stochastic;
  if (c.shift.trace.stochastic) {
    j["trace_probes"] = c.shift.trace.probes;
    j["trace_stderr_over_d"] = c.shift.trace.std_error / d;
  }
  return j;
}

inline Json atoms_json(const SpectrumReport& rep) {
  Json atoms = Json::array();
  for (const auto& a : rep.atoms) atoms.push_back({{"value", a.value}, {"multiplicity", a.multiplicity}});
  Json j;
  j["total"] = rep.total;
  j["discarded_below_atom_eps"] = rep.discarded;
  j["negative"] = rep.negative;
  j["min_eigenvalue"] = rep.min_eigenvalue;
  j["binned"] = rep.binned;
  j["atoms"] = atoms;
  return j;
}

// ---------------------------------------------------------------------------
// Run context shared by the subcommands

struct RunContext {
  ExperimentConfig config;
  RunOptions options;
  std::filesystem::path out_dir = ".";
  std::string command;
  std::vector<std::string> outputs;
  Json results = Json::object();
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();

  void write(const std::string& name, const std::string& content) {
    write_file_atomic(out_dir / name, content);
    outputs.push_back(name);
  }

  void write_json(const std::string& name, const Json& doc) { write(name, doc.dump(2) + "\n"); }

  void finish() {
    Json m;
    m["tool"] = "rfcd";
    m["version"] = kVersion;
    m["command"] = command;
    m["config"] = config_to_json(config);
    m["seed"] = config.seed;
    m["threads"] = options.threads;
    m["strict"] = options.strict;
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    char stamp[32];
    std::strftime(stamp, sizeof stamp, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
    m["finished_at"] = stamp;
    m["wall_seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    m["eigensolver_fallbacks"] = eigensolver_fallbacks().load();
    auto files = outputs;
    files.push_back("manifest.json");
    m["outputs"] = files;
    m["results"] = results;
    write_file_atomic(out_dir / "manifest.json", m.dump(2) + "\n");
  }
};

inline void record_warnings(RunContext& ctx, const std::vector<std::string>& warnings) {
  for (const auto& w : warnings) std::cerr << "warning: " << w << "\n";
  if (!warnings.empty()) ctx.results["warnings"] = warnings;
}

// ---------------------------------------------------------------------------
// Subcommands

inline void cmd_constants(RunContext& ctx) {
  Pipeline run(ctx.config, ctx.options);
  const auto& k = run.constants();
  record_warnings(ctx, k.warnings);
  Json doc;
  doc["teacher"] = constants_json(k);
  doc["flow"] = flow_json(run.flow());
  doc["coefficients"] = coefficients_json(run.coefficients(), ctx.config.d);
  doc["estimation_warning"] = !k.warnings.empty();
  ctx.write_json("constants.json", doc);
  ctx.results["constants"] = doc;
}

struct SpectrumOptions {
  std::string target = "Ucd";
  int bins = 0;
  std::string solver = "structured";
  double ucd_ridge = 0.0;
};

inline void cmd_spectrum(RunContext& ctx, const SpectrumOptions& opt) {
  Pipeline run(ctx.config, ctx.options);
  Eigen::VectorXd lambdas;
  Json extra;
  if (opt.target == "U") {
    lambdas = run.curvature().eigensystem().lambdas;
    const auto part = partition_mem_gen(lambdas, ctx.config.lambda_th);
    extra["lambda_th"] = ctx.config.lambda_th;
    extra["below_lambda_th"] = part.mem.size();
    extra["at_or_above_lambda_th"] = part.gen.size();
  } else if (opt.target == "Ucd") {
    if (opt.solver == "structured") {
      lambdas = run.ucd_eigensystem(opt.ucd_ridge).lambdas;
    } else if (opt.solver == "dense") {
      lambdas = eigenvalues(run.operators(opt.ucd_ridge).U_cd);
    } else {
      throw DomainError("cli-runner", "--solver must be 'structured' or 'dense'");
    }
    const auto& c = run.coefficients();
    extra["solver"] = opt.solver;
    extra["ucd_ridge"] = opt.ucd_ridge;
    extra["beta"] = c.beta();
    extra["beta_convention"] = std::string(to_string(c.shift.convention));
    extra["p_minus_d"] = run.features().p() - ctx.config.d;
  } else {
    throw DomainError("cli-runner", "--target must be 'U' or 'Ucd'");
  }
  const SpectrumReport rep = spectral_density(lambdas, opt.bins, ctx.config.atom_eps);
  CsvTable csv({"bin_left", "bin_right", "density"});
  for (std::size_t b = 0; b < rep.densities.size(); ++b)
    csv.row().cell(rep.edges[b]).cell(rep.edges[b + 1]).cell(rep.densities[b]);
  ctx.write("spectrum_" + opt.target + ".csv", csv.str());
  Json atoms = atoms_json(rep);
  atoms["target"] = opt.target;
  for (const auto& [k, v] : extra.items()) atoms[k] = v;
  ctx.write_json("atoms.json", atoms);
  ctx.results["spectrum"] = atoms;
}

struct ModesOptions {
  std::optional<double> mu1;
};

inline Json modes_summary(const ModeDiagnostics& diag) {
  const auto share = share_mem_plus(diag);
  const auto frac = frac_gen_alpha_pos(diag);
  int mem = 0;
  for (char m : diag.is_mem) mem += m ? 1 : 0;
  Json j;
  j["ridge"] = diag.ridge;
  j["mu1"] = diag.mu1;
  j["lambda_th"] = diag.lambda_th;
  j["mem_modes"] = mem;
  j["gen_modes"] = diag.size() - mem;
  j["share_mem_plus"] = optional_json(share);
  j["share_mem_plus_status"] = share ? "defined" : "undefined";
  j["frac_gen_alpha_pos"] = optional_json(frac);
  j["median_a_mem"] = mem > 0 ? Json(median_over(diag.a, diag.is_mem, true)) : Json(nullptr);
  j["median_a_gen"] = diag.size() > mem ? Json(median_over(diag.a, diag.is_mem, false)) : Json(nullptr);
  j["median_fracBmem_gen"] =
      diag.size() > mem ? Json(median_over(diag.frac_bmem, diag.is_mem, false)) : Json(nullptr);
  int flagged = 0;
  for (char f : diag.frac_flagged) flagged += f ? 1 : 0;
  j["fracBmem_zero_denominator"] = flagged;
  return j;
}

inline void check_gen_nonempty(const ModeBasis& basis, double lambda_th) {
  if (partition_mem_gen(basis.lambdas, lambda_th).gen.empty())
    throw PartitionError("spectral-diagnostics",
                         "no eigenvalue of U reaches lambda_th = " + format_double(lambda_th) + "; Gen is empty");
}

inline void cmd_modes(RunContext& ctx, const ModesOptions& opt) {
  Pipeline run(ctx.config, ctx.options);
  const auto& basis = run.basis();
  check_gen_nonempty(basis, ctx.config.lambda_th);
  const double mu1 = opt.mu1.value_or(run.constants().mu1);
  const auto diag = mode_diagnostics(basis, mu1, ctx.config.ridge_gamma, ctx.config.lambda_th);
  CsvTable csv({"mode_index", "lambda_U", "a_i", "b_i", "alpha_i", "label", "fracBmem"});
  for (int i = 0; i < diag.size(); ++i)
    csv.row()
        .cell(i)
        .cell(diag.lambda_U[i])
        .cell(diag.a[i])
        .cell(diag.b[i])
        .cell(diag.alpha[i])
        .cell(diag.is_mem[i] ? "Mem" : "Gen")
        .cell(diag.frac_bmem[i]);
  ctx.write("modes.csv", csv.str());
  Json summary = modes_summary(diag);
  summary["mu1_overridden"] = opt.mu1.has_value();
  ctx.write_json("summary.json", summary);
  ctx.results["modes"] = summary;
}

struct RidgeSweepOptions {
  std::vector<double> grid{0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0};
  double tau = 0.1;
};

inline void cmd_ridge_sweep(RunContext& ctx, const RidgeSweepOptions& opt) {
  for (std::size_t i = 1; i < opt.grid.size(); ++i)
    if (!(opt.grid[i] > opt.grid[i - 1])) throw DomainError("cli-runner", "--grid must be strictly ascending");
  Pipeline run(ctx.config, ctx.options);
  const auto rep = ridge_sweep(run.basis(), run.constants().mu1, opt.grid, opt.tau, ctx.config.lambda_th);
  CsvTable csv({"gamma", "median_fracBmem_gen"});
  for (std::size_t i = 0; i < rep.grid.size(); ++i) csv.row().cell(rep.grid[i]).cell(rep.median_frac_gen[i]);
  ctx.write("ridge_sweep.csv", csv.str());
  Json summary;
  summary["tau"] = rep.tau;
  summary["gamma_star"] = optional_json(rep.gamma_star);
  summary["grid"] = rep.grid;
  summary["median_fracBmem_gen"] = rep.median_frac_gen;
  ctx.write_json("summary.json", summary);
  ctx.results["ridge_sweep"] = summary;
}

struct PsiSweepOptions {
  std::vector<double> psi_n{16.0, 8.0, 4.0};
};

inline void cmd_psi_sweep(RunContext& ctx, const PsiSweepOptions& opt) {
  if (opt.psi_n.empty()) throw DomainError("cli-runner", "--psi-n list is empty");
  for (double v : opt.psi_n) {
    ExperimentConfig c = ctx.config;
    c.psi_n = v;
    c.validate();
  }
  CsvTable csv({"psi_n", "frac_gen_alpha_pos", "share_mem_plus"});
  Json rows = Json::array();
  for (double v : opt.psi_n) {
    ExperimentConfig c = ctx.config;
    c.psi_n = v;
    Pipeline run(c, ctx.options);
    const auto& basis = run.basis();
    check_gen_nonempty(basis, c.lambda_th);
    const auto diag = mode_diagnostics(basis, run.constants().mu1, c.ridge_gamma, c.lambda_th);
    const auto frac = frac_gen_alpha_pos(diag);
    const auto share = share_mem_plus(diag);
    csv.row().cell(v).cell(frac ? format_double(*frac) : "nan").cell(share ? format_double(*share) : "nan");
    rows.push_back({{"psi_n", v}, {"frac_gen_alpha_pos", optional_json(frac)}, {"share_mem_plus", optional_json(share)}});
  }
  ctx.write("psi_sweep.csv", csv.str());
  ctx.results["psi_sweep"] = rows;
}

struct DynamicsOptions {
  std::vector<double> taus{0.0, 1e4, 1e5, 1e6, 1e7};
  std::string init = "teacher";
  double ucd_ridge = 0.0;
  std::optional<std::string> dump;
};

inline void cmd_dynamics(RunContext& ctx, const DynamicsOptions& opt) {
  Pipeline run(ctx.config, ctx.options);
  const auto& ops = run.operators(opt.ucd_ridge);
  const auto& eig = run.ucd_eigensystem(opt.ucd_ridge);
  Eigen::MatrixXd b0;
  if (opt.init == "teacher") {
    b0 = run.score().top_layer();
  } else if (opt.init == "random") {
    b0.resize(ctx.config.d, run.features().p());
    RandomStream(ctx.config.seed, StreamPurpose::kStudentInit).fill_normal(b0);
  } else {
    throw DomainError("cli-runner", "--init must be 'teacher' or 'random'");
  }
  const double beta = ops.coeffs_used.beta();
  std::vector<char> in_atom(eig.size());
  for (Eigen::Index i = 0; i < eig.size(); ++i)
    in_atom[i] = std::abs(eig.lambdas[i] - beta) <= kAtomRelativeSpread * std::abs(beta);

  const auto start = initial_state(b0, eig);
  CsvTable csv({"tau", "loss_direct", "loss_spectral", "frobenius_energy", "atom_energy"});
  for (double tau : opt.taus) {
    const auto s = student_gradient_flow(start, ops, eig, tau);
    double atom = 0.0;
    for (Eigen::Index i = 0; i < eig.size(); ++i)
      if (in_atom[i]) atom += s.mode_energies[i];
    csv.row()
        .cell(tau)
        .cell(quadratic_loss(s.B, ops.U_cd))
        .cell(spectral_loss(s, eig))
        .cell(s.B.squaredNorm())
        .cell(atom);
  }
  ctx.write("dynamics.csv", csv.str());
  if (opt.dump) {
    write_binary_matrix(ctx.out_dir / *opt.dump, ops.U_cd);
    ctx.outputs.push_back(*opt.dump);
  }
  ctx.results["dynamics"] = {{"init", opt.init}, {"ucd_ridge", opt.ucd_ridge}, {"beta", beta}};
}

struct ValidateOptions {
  int reps = 2000;
  std::int64_t decomp_samples = 100000;
  int decomp_p = 0;  // 0: the config's p
  int top_k = 5;
  bool allow_large = false;
  std::optional<std::string> dump;
};

// Small-scale defaults for `validate`, applied before config files and flags.
inline ExperimentConfig validate_defaults() {
  ExperimentConfig c;
  c.d = 24;
  c.psi_p = 8;
  c.psi_n = 4;
  return c;
}

inline void cmd_validate(RunContext& ctx, const ValidateOptions& opt) {
  Pipeline run(ctx.config, ctx.options);
  const auto& features = run.features();
  const auto& coeffs = run.coefficients();
  const auto& ops = run.operators(0.0);
  const auto emp = empirical_U_cd(run.curvature().x_train(), run.score(), ctx.config, opt.reps, ctx.options,
                                  opt.allow_large);
  const auto spectra = compare_spectra(ops, emp.U_cd, opt.top_k, ctx.config.d);

  RandomStream rng(ctx.config.seed, StreamPurpose::kOracleData);
  const auto inc = sample_increment(run.curvature().x_train().col(0), run.score(), ctx.config, rng);
  const int decomp_p = opt.decomp_p > 0 ? opt.decomp_p : std::min(features.p(), kDecompositionCap);
  const auto decomp = validate_decomposition(inc.x_t, inc.delta_x, decomp_p, ctx.config.activation,
                                             opt.decomp_samples, ctx.config.seed, ctx.options, opt.allow_large);

  const auto& k = run.constants();
  CsvTable csv({"quantity", "closed_form", "empirical", "relative_gap"});
  for (const auto& q : spectra.quantities)
    csv.row().cell(q.name).cell(q.closed_form).cell(q.empirical).cell(
        q.closed_form != 0.0 ? std::abs(q.empirical - q.closed_form) / std::abs(q.closed_form) : 0.0);
  const auto& cmp = *spectra.spectrum;
  for (std::size_t i = 0; i < cmp.top_gaps.size(); ++i)
    csv.row().cell("top" + std::to_string(i + 1)).cell(cmp.top_closed[i]).cell(cmp.top_empirical[i]).cell(cmp.top_gaps[i]);
  const double step_pred = ctx.config.dt_step * ctx.config.dt_step * coeffs.kappa2;
  csv.row().cell("step_norm2").cell(step_pred).cell(emp.step_norm2.value).cell(
      step_pred != 0.0 ? std::abs(emp.step_norm2.value - step_pred) / step_pred : 0.0);
  ctx.write("validate.csv", csv.str());

  Json doc;
  Json errs = Json::object();
  for (const auto& [name, v] : spectra.errors) errs[name] = v;
  for (const auto& [name, v] : decomp.report.errors) errs[name] = v;
  doc["errors"] = errs;
  doc["spectrum"] = {{"trace_closed", cmp.trace_closed},
                     {"trace_empirical", cmp.trace_empirical},
                     {"top_closed", cmp.top_closed},
                     {"top_empirical", cmp.top_empirical},
                     {"bottom_cluster_mean", cmp.bottom_mean},
                     {"bottom_cluster_size", cmp.bottom_count},
                     {"beta_theorem", cmp.beta_theorem},
                     {"beta_pf_drift", cmp.beta_pf_drift},
                     {"closer_convention", std::string(to_string(cmp.closer))},
                     {"selected_convention", std::string(to_string(ctx.config.beta_convention))}};
  doc["decomposition"] = {{"p", decomp_p},
                          {"samples", opt.decomp_samples},
                          {"relative_error", decomp.relative_error},
                          {"noise_floor", decomp.noise_floor},
                          {"a1", decomp.coefficients.a1},
                          {"a0", decomp.coefficients.a0}};
  doc["step_norm2"] = {{"empirical", emp.step_norm2.value},
                       {"stderr", emp.step_norm2.std_error},
                       {"dt2_kappa2", step_pred}};
  doc["b_mu1_identity"] = {{"gap", k.b_mu1_gap()}, {"stderr", k.b_mu1_stderr()}};
  doc["reps_per_point"] = opt.reps;
  ctx.write_json("oracle.json", doc);
  if (opt.dump) {
    write_binary_matrix(ctx.out_dir / *opt.dump, emp.U_cd);
    ctx.outputs.push_back(*opt.dump);
  }
  ctx.results["validate"] = doc;
}

// ---------------------------------------------------------------------------
// Entry point

struct SharedFlags {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out = ".";
  bool strict = false;
  std::optional<std::string> beta_convention;
  std::optional<double> ridge;
  std::optional<int> threads;
  std::optional<int> d;
  std::optional<double> psi_p;
  std::optional<double> psi_n;
  std::optional<double> t_prime;
  std::optional<double> dt_step;
  std::optional<std::string> activation;
  std::optional<double> sigma_scale;
  std::optional<double> lambda_th;
  std::optional<std::int64_t> mc_constants;
  std::optional<std::int64_t> mc_flow;
  std::optional<double> atom_eps;
  std::optional<double> memory_cap_mb;
};

inline void add_shared_flags(CLI::App& sub, SharedFlags& f, bool scalar_psi_n = true) {
  sub.add_option("--config", f.config_path, "JSON config file");
  sub.add_option("--seed", f.seed, "Master seed");
  sub.add_option("--out", f.out, "Output directory")->capture_default_str();
  sub.add_flag("--strict", f.strict, "Turn estimation warnings into errors");
  sub.add_option("--beta-convention", f.beta_convention, "theorem or pf-drift");
  sub.add_option("--ridge", f.ridge, "Diagnostic ridge gamma");
  sub.add_option("--threads", f.threads, "Worker threads (default: RFCD_THREADS or 1)");
  sub.add_option("--d", f.d, "Input dimension");
  sub.add_option("--psi-p", f.psi_p, "p / d");
  if (scalar_psi_n) sub.add_option("--psi-n", f.psi_n, "n / d");
  sub.add_option("--t-prime", f.t_prime, "Diffusion time t'");
  sub.add_option("--dt-step", f.dt_step, "Euler step");
  sub.add_option("--activation", f.activation, "tanh, erf or identity");
  sub.add_option("--sigma-scale", f.sigma_scale, "Isotropic data covariance scale");
  sub.add_option("--lambda-th", f.lambda_th, "Mem/Gen threshold on U eigenvalues");
  sub.add_option("--mc-constants", f.mc_constants, "Samples for teacher constants");
  sub.add_option("--mc-flow", f.mc_flow, "Samples for flow constants");
  sub.add_option("--atom-eps", f.atom_eps, "Eigenvalues below this are discarded");
  sub.add_option("--memory-cap-mb", f.memory_cap_mb, "Cap on dense allocations");
}

inline RunContext make_context(const SharedFlags& f, ExperimentConfig base, const std::string& command) {
  RunContext ctx;
  ctx.command = command;
  ExperimentConfig c = f.config_path.empty() ? base : load_config_file(f.config_path, base);
  if (f.seed) c.seed = *f.seed;
  if (f.beta_convention) c.beta_convention = parse_beta_convention(*f.beta_convention);
  if (f.ridge) c.ridge_gamma = *f.ridge;
  if (f.d) c.d = *f.d;
  if (f.psi_p) c.psi_p = *f.psi_p;
  if (f.psi_n) c.psi_n = *f.psi_n;
  if (f.t_prime) c.t_prime = *f.t_prime;
  if (f.dt_step) c.dt_step = *f.dt_step;
  if (f.activation) c.activation = parse_activation(*f.activation);
  if (f.sigma_scale) c.sigma_spec = SigmaSpec::isotropic(*f.sigma_scale);
  if (f.lambda_th) c.lambda_th = *f.lambda_th;
  if (f.mc_constants) c.mc_constants = *f.mc_constants;
  if (f.mc_flow) c.mc_flow = *f.mc_flow;
  if (f.atom_eps) c.atom_eps = *f.atom_eps;
  c.validate();
  if (f.memory_cap_mb) {
    if (!(*f.memory_cap_mb > 0.0)) throw DomainError("cli-runner", "--memory-cap-mb must be positive");
    memory_cap_bytes() = static_cast<std::size_t>(*f.memory_cap_mb * 1024.0 * 1024.0);
  }
  ctx.config = c;
  ctx.options.threads = f.threads ? *f.threads : threads_from_env();
  if (ctx.options.threads < 1) throw DomainError("cli-runner", "--threads must be >= 1");
  ctx.options.strict = f.strict;
  ctx.out_dir = f.out;
  std::error_code ec;
  std::filesystem::create_directories(ctx.out_dir, ec);
  if (ec) throw ResourceError("cli-runner", "cannot create output directory " + ctx.out_dir.string());
  return ctx;
}

// Some OpenBLAS builds pick a GEMM kernel for the detected core that returns
// wrong products on large matrices. The core type is read once when the
// library loads, so the only remedy from inside the process is to re-exec
// with a conservative kernel selected.
inline void ensure_reliable_blas(char** argv) {
  if (lapack_selftest()) return;
  if (std::getenv("RFCD_REEXEC") == nullptr && std::getenv("OPENBLAS_CORETYPE") == nullptr) {
    setenv("OPENBLAS_CORETYPE", "Haswell", 1);
    setenv("RFCD_REEXEC", "1", 1);
    execv("/proc/self/exe", argv);
  }
  std::cerr << "warning: LAPACK self-test failed; eigensolves fall back to Eigen and will be slow\n";
}

inline int report_error(const std::string& what, ExitCode code) {
  std::cerr << "error: " << what << "\n";
  return static_cast<int>(code);
}

inline int run_cli(int argc, const char* const* argv) {
  CLI::App app{"Random-feature consistency distillation curvature toolkit", "rfcd"};
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1);

  SharedFlags flags;
  SpectrumOptions spectrum;
  ModesOptions modes;
  std::optional<double> mu1;
  RidgeSweepOptions sweep;
  PsiSweepOptions psi;
  DynamicsOptions dyn;
  std::optional<std::string> dyn_dump;
  ValidateOptions val;
  std::optional<std::string> val_dump;

  auto* c_constants = app.add_subcommand("constants", "Teacher, flow and distillation constants");
  auto* c_spectrum = app.add_subcommand("spectrum", "Spectral density and atoms of U or U_cd");
  auto* c_modes = app.add_subcommand("modes", "Per-mode visibility, resolvent and response");
  auto* c_sweep = app.add_subcommand("ridge-sweep", "Median Gen leakage along a ridge grid");
  auto* c_psi = app.add_subcommand("psi-sweep", "Mode statistics across sample ratios");
  auto* c_dyn = app.add_subcommand("dynamics", "Closed-form student gradient flow");
  auto* c_val = app.add_subcommand("validate", "Monte Carlo checks of the closed forms");
  for (auto* sub : {c_constants, c_spectrum, c_modes, c_sweep, c_dyn, c_val}) add_shared_flags(*sub, flags);
  // psi-sweep takes --psi-n as its list of sweep values.
  add_shared_flags(*c_psi, flags, false);

  c_spectrum->add_option("--target", spectrum.target, "U or Ucd")->capture_default_str();
  c_spectrum->add_option("--bins", spectrum.bins, "Histogram bins (0: Freedman-Diaconis)")->capture_default_str();
  c_spectrum->add_option("--solver", spectrum.solver, "structured or dense (U_cd only)")->capture_default_str();
  c_spectrum->add_option("--ucd-ridge", spectrum.ucd_ridge, "Ridge inside A for U_cd")->capture_default_str();
  c_modes->add_option("--mu1", mu1, "Override mu1 in the response");
  c_sweep->add_option("--grid", sweep.grid, "Ascending ridge grid")->delimiter(',');
  c_sweep->add_option("--tau", sweep.tau, "Leakage tolerance")->capture_default_str();
  c_psi->add_option("--psi-n", psi.psi_n, "List of n / d values")->delimiter(',');
  c_dyn->add_option("--tau", dyn.taus, "Flow times")->delimiter(',');
  c_dyn->add_option("--init", dyn.init, "teacher or random")->capture_default_str();
  c_dyn->add_option("--ucd-ridge", dyn.ucd_ridge, "Ridge inside A")->capture_default_str();
  c_dyn->add_option("--dump", dyn_dump, "Write U_cd in the binary matrix layout");
  c_val->add_option("--reps", val.reps, "Forward draws per training point")->capture_default_str();
  c_val->add_option("--decomp-samples", val.decomp_samples, "Row samples for the decomposition check")
      ->capture_default_str();
  c_val->add_option("--decomp-p", val.decomp_p, "Rows for the decomposition check (0: min(p, 256))");
  c_val->add_option("--top-k", val.top_k, "Eigenvalues compared")->capture_default_str();
  c_val->add_flag("--allow-large", val.allow_large, "Lift the oracle size caps");
  c_val->add_option("--dump", val_dump, "Write the empirical U_cd in the binary matrix layout");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return static_cast<int>(ExitCode::kValidation);
  }

  try {
    const std::string name = app.get_subcommands().front()->get_name();
    const ExperimentConfig base = name == "validate" ? validate_defaults() : ExperimentConfig{};
    RunContext ctx = make_context(flags, base, name);
    if (name == "constants") cmd_constants(ctx);
    else if (name == "spectrum") cmd_spectrum(ctx, spectrum);
    else if (name == "modes") {
      modes.mu1 = mu1;
      cmd_modes(ctx, modes);
    } else if (name == "ridge-sweep") cmd_ridge_sweep(ctx, sweep);
    else if (name == "psi-sweep") cmd_psi_sweep(ctx, psi);
    else if (name == "dynamics") {
      dyn.dump = dyn_dump;
      cmd_dynamics(ctx, dyn);
    } else if (name == "validate") {
      val.dump = val_dump;
      cmd_validate(ctx, val);
    }
    ctx.finish();
    return static_cast<int>(ExitCode::kSuccess);
  } catch (const Error& e) {
    return report_error(e.what(), e.exit_code());
  } catch (const std::bad_alloc&) {
    return report_error("cli-runner: out of memory", ExitCode::kResource);
  } catch (const std::exception& e) {
    return report_error(std::string("cli-runner: ") + e.what(), ExitCode::kNumerical);
  }
}

}  // namespace rfcd
