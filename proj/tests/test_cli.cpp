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


#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "rfcd/cli.hpp"

namespace rfcd {
namespace {

namespace fs = std::filesystem;

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Json read_json(const fs::path& path) { return Json::parse(slurp(path)); }

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    saved_cap_ = memory_cap_bytes().load();
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    root_ = fs::temp_directory_path() / ("rfcd_cli_" + std::to_string(::getpid())) / info->name();
    fs::remove_all(root_);
    fs::create_directories(root_);
  }

  void TearDown() override {
    memory_cap_bytes() = saved_cap_;
    fs::remove_all(root_);
  }

  // Runs a subcommand on a small problem with output in root_/out.
  int run(std::vector<std::string> args, const std::string& out = "out") {
    std::vector<std::string> full{"rfcd"};
    full.insert(full.end(), args.begin(), args.end());
    if (args.empty() || args.front() != "--version") {
      for (const char* flag : {"--d", "16", "--psi-p", "4", "--mc-constants", "4000", "--mc-flow", "4000"})
        full.emplace_back(flag);
      full.emplace_back("--out");
      full.emplace_back((root_ / out).string());
    }
    std::vector<const char*> argv;
    for (const auto& a : full) argv.push_back(a.c_str());
    return run_cli(static_cast<int>(argv.size()), argv.data());
  }

  fs::path root_;
  std::size_t saved_cap_ = 0;
};

TEST(ConfigJson, RoundTripsEveryKey) {
  ExperimentConfig c;
  c.d = 33;
  c.psi_p = 3.5;
  c.activation = ActivationKind::kErf;
  c.sigma_spec = SigmaSpec::diagonal(Eigen::VectorXd::LinSpaced(33, 0.5, 2.0));
  c.beta_convention = BetaConvention::kPfDrift;
  c.seed = 99;
  const ExperimentConfig back = config_from_json(config_to_json(c));
  EXPECT_EQ(config_to_json(back).dump(), config_to_json(c).dump());
}

TEST(ConfigJson, RejectsUnknownAndMistypedKeys) {
  EXPECT_THROW(config_from_json(Json{{"dee", 3}}), DomainError);
  EXPECT_THROW(config_from_json(Json{{"d", 2.5}}), DomainError);
  EXPECT_THROW(config_from_json(Json{{"sigma_spec", "wide"}}), DomainError);
  EXPECT_THROW(config_from_json(Json::array()), DomainError);
}

TEST(Io, FormatDoubleRoundTrips) {
  for (double v : {0.1, -1.0 / 3.0, 1e-300, 6.02214076e23, 0.0}) EXPECT_EQ(std::stod(format_double(v)), v);
  EXPECT_EQ(format_double(0.5), "0.5");
}

TEST(Io, CsvRowsMustMatchHeader) {
  CsvTable csv({"a", "b"});
  csv.row().cell(1).cell("x");
  EXPECT_EQ(csv.str(), "a,b\n1,x\n");
  csv.row().cell(2);
  EXPECT_THROW(csv.str(), DomainError);
}

TEST(Io, BinaryMatrixRoundTrip) {
  Eigen::MatrixXd m(3, 2);
  m << 1, -2, 3.5, 1e-310, -0.0, 7;
  const std::string bytes = encode_binary_matrix(m);
  EXPECT_EQ(bytes.size(), 4u + 4u + 16u + 6u * 8u);
  EXPECT_EQ(bytes.substr(0, 4), "RFCD");
  EXPECT_EQ((decode_binary_matrix(bytes) - m).norm(), 0.0);
  EXPECT_THROW(decode_binary_matrix(bytes.substr(0, bytes.size() - 1)), DomainError);
  EXPECT_THROW(decode_binary_matrix("XXXX" + bytes.substr(4)), DomainError);
}

TEST_F(Cli, ConfigFileIsAppliedAndUnknownKeyExitsWithTwo) {
  const auto cfg = root_ / "cfg.json";
  std::ofstream(cfg) << R"({"activation": "identity", "seed": 5})";
  ASSERT_EQ(run({"constants", "--config", cfg.string()}), 0);
  const Json manifest = read_json(root_ / "out" / "manifest.json");
  EXPECT_EQ(manifest["config"]["activation"], "identity");
  EXPECT_EQ(manifest["seed"], 5);

  std::ofstream(cfg) << R"({"activaton": "identity"})";
  EXPECT_EQ(run({"constants", "--config", cfg.string()}), 2);
}

TEST_F(Cli, IdentityActivationGivesExactCoefficients) {
  ASSERT_EQ(run({"constants", "--activation", "identity"}), 0);
  const Json doc = read_json(root_ / "out" / "constants.json");
  EXPECT_EQ(doc["coefficients"]["a1"].get<double>(), -1.0);
  EXPECT_EQ(doc["coefficients"]["a0"].get<double>(), 0.0);
  EXPECT_EQ(doc["coefficients"]["beta"].get<double>(), 0.0);
}

TEST_F(Cli, TinyBudgetWarnsButSucceeds) {
  std::vector<std::string> args{"constants"};
  ASSERT_EQ(run(args), 0);
  // A later flag wins, so this overrides the fixture's budget.
  std::vector<std::string> tiny{"constants", "--out", (root_ / "tiny").string()};
  std::vector<const char*> argv{"rfcd"};
  for (const auto& a : tiny) argv.push_back(a.c_str());
  for (const char* f : {"--d", "16", "--psi-p", "4", "--mc-flow", "4000", "--mc-constants", "10"}) argv.push_back(f);
  ASSERT_EQ(run_cli(static_cast<int>(argv.size()), argv.data()), 0);
  const Json doc = read_json(root_ / "tiny" / "constants.json");
  EXPECT_TRUE(doc["estimation_warning"].get<bool>());
  EXPECT_FALSE(doc["teacher"]["warnings"].empty());
  EXPECT_FALSE(read_json(root_ / "tiny" / "manifest.json")["results"]["warnings"].empty());
}

TEST_F(Cli, ValidationFailuresExitWithTwo) {
  EXPECT_EQ(run({"ridge-sweep", "--grid", "1,0.5,2"}), 2);
  EXPECT_EQ(run({"modes", "--lambda-th", "1e12"}), 2);
  EXPECT_EQ(run({"constants", "--psi-n", "0.01"}), 2);
  EXPECT_EQ(run({"constants", "--activation", "relu"}), 2);
  EXPECT_EQ(run({"constants", "--no-such-flag"}), 2);
  EXPECT_EQ(run({"spectrum", "--target", "V"}), 2);
}

TEST_F(Cli, MemoryCapExitsWithFour) {
  EXPECT_EQ(run({"spectrum", "--memory-cap-mb", "0.01"}), 4);
}

TEST_F(Cli, ZeroMu1ResponseMatchesVisibility) {
  ASSERT_EQ(run({"modes", "--mu1", "0"}), 0);
  const std::string csv = slurp(root_ / "out" / "modes.csv");
  std::istringstream lines(csv);
  std::string line;
  std::getline(lines, line);
  int rows = 0;
  while (std::getline(lines, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) cells.push_back(cell);
    ASSERT_EQ(cells.size(), 7u);
    EXPECT_EQ(cells[2], cells[4]);
    EXPECT_GE(std::stod(cells[2]), 0.0);
    ++rows;
  }
  EXPECT_EQ(rows, 64);
  EXPECT_TRUE(read_json(root_ / "out" / "summary.json")["mu1_overridden"].get<bool>());
}

TEST_F(Cli, FullToleranceStopsAtFirstGridPoint) {
  ASSERT_EQ(run({"ridge-sweep", "--tau", "1", "--grid", "0,1,2"}), 0);
  const Json summary = read_json(root_ / "out" / "summary.json");
  EXPECT_EQ(summary["gamma_star"].get<double>(), 0.0);
  EXPECT_EQ(summary["median_fracBmem_gen"].size(), 3u);
}

TEST_F(Cli, SingleSampleRatioGivesOneRow) {
  ASSERT_EQ(run({"psi-sweep", "--psi-n", "2"}), 0);
  const std::string csv = slurp(root_ / "out" / "psi_sweep.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 2);
  EXPECT_EQ(csv.rfind("psi_n,frac_gen_alpha_pos,share_mem_plus\n2,", 0), 0u);
}

TEST_F(Cli, ZeroStepCollapsesUcdToOneAtom) {
  ASSERT_EQ(run({"spectrum", "--dt-step", "0", "--atom-eps", "0"}), 0);
  const Json atoms = read_json(root_ / "out" / "atoms.json");
  ASSERT_EQ(atoms["atoms"].size(), 1u);
  EXPECT_EQ(atoms["atoms"][0]["value"].get<double>(), 0.0);
  EXPECT_EQ(atoms["atoms"][0]["multiplicity"].get<int>(), 64);
}

TEST_F(Cli, OutputsAreIndependentOfThreadCount) {
  for (const std::string cmd : {"modes", "dynamics", "ridge-sweep"}) {
    ASSERT_EQ(run({cmd, "--threads", "1"}, cmd + "_1"), 0) << cmd;
    ASSERT_EQ(run({cmd, "--threads", "8"}, cmd + "_8"), 0) << cmd;
  }
  EXPECT_EQ(slurp(root_ / "modes_1" / "modes.csv"), slurp(root_ / "modes_8" / "modes.csv"));
  EXPECT_EQ(slurp(root_ / "dynamics_1" / "dynamics.csv"), slurp(root_ / "dynamics_8" / "dynamics.csv"));
  EXPECT_EQ(slurp(root_ / "ridge-sweep_1" / "ridge_sweep.csv"), slurp(root_ / "ridge-sweep_8" / "ridge_sweep.csv"));
  EXPECT_FALSE(slurp(root_ / "modes_1" / "modes.csv").empty());
}

TEST_F(Cli, DynamicsDumpMatchesLoss) {
  ASSERT_EQ(run({"dynamics", "--tau", "0,10", "--dump", "ucd.bin"}), 0);
  const Eigen::MatrixXd u = read_binary_matrix(root_ / "out" / "ucd.bin");
  EXPECT_EQ(u.rows(), 64);
  EXPECT_LE(asymmetry(u), 1e-15);
  const Json manifest = read_json(root_ / "out" / "manifest.json");
  const auto outputs = manifest["outputs"].get<std::vector<std::string>>();
  EXPECT_NE(std::find(outputs.begin(), outputs.end(), "ucd.bin"), outputs.end());
  EXPECT_EQ(manifest["command"], "dynamics");
}

}  // namespace
}  // namespace rfcd
