#include <gtest/gtest.h>
#include <sys/wait.h>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

namespace fs = std::filesystem;

namespace {

const std::string kRoot = LMED_SOURCE_DIR;
const std::string kCli = LMED_CLI;

struct CliRun {
  int code = -1;
  std::string out, err;
  nlohmann::json json() const { return nlohmann::json::parse(out); }
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

CliRun lmed(const std::string& args) {
  const fs::path dir = fs::temp_directory_path() / ("lmed_cli_" + std::to_string(::getpid()));
  fs::create_directories(dir);
  const std::string cmd = "cd '" + kRoot + "' && '" + kCli + "' " + args + " >'" + (dir / "out").string() + "' 2>'" +
                          (dir / "err").string() + "'";
  const int status = std::system(cmd.c_str());
  CliRun r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(dir / "out");
  r.err = slurp(dir / "err");
  return r;
}

const std::string kFixture = "--data data/fixtures/tau1_n200.csv --schema data/fixtures/tau1_n200.schema.json";

}  // namespace

TEST(Cli, EstimateFixture) {
  const CliRun r = lmed("estimate " + kFixture + " --a-prime 1 --a-star 0 --seed 4");
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = r.json();
  EXPECT_TRUE(j["theta"].is_number());
  EXPECT_GT(j["se"].get<double>(), 0.0);
  EXPECT_EQ(j["n"], 200);
  EXPECT_EQ(j["diagnostics"]["folds"], 5);
  EXPECT_EQ(j["diagnostics"]["seed"], 4);
}

TEST(Cli, OneFoldHasSameShape) {
  const CliRun a = lmed("estimate " + kFixture + " --a-prime 1 --a-star 0 --folds 1");
  const CliRun b = lmed("estimate " + kFixture + " --a-prime 1 --a-star 0 --folds 5");
  ASSERT_EQ(a.code, 0) << a.err;
  ASSERT_EQ(b.code, 0) << b.err;
  std::vector<std::string> ka, kb;
  for (const auto& [k, v] : a.json().items()) ka.push_back(k);
  for (const auto& [k, v] : b.json().items()) kb.push_back(k);
  EXPECT_EQ(ka, kb);
  EXPECT_EQ(a.json()["diagnostics"]["folds"], 1);
}

TEST(Cli, EstimateContrasts) {
  const CliRun r = lmed("estimate " + kFixture + " --a-prime 1 --a-star 0 --contrasts");
  ASSERT_EQ(r.code, 0) << r.err;
  const auto c = r.json()["contrasts"];
  ASSERT_EQ(c.size(), 3u);
  EXPECT_NEAR(c[0]["estimate"].get<double>() + c[1]["estimate"].get<double>(), c[2]["estimate"].get<double>(), 1e-12);
}

TEST(Cli, NonMonotoneInputExitsTwoAndNamesRow) {
  const CliRun r = lmed(
      "estimate --data data/fixtures/tau1_nonmonotone.csv --schema data/fixtures/tau1_n200.schema.json "
      "--a-prime 1 --a-star 0");
  EXPECT_EQ(r.code, 2);
  EXPECT_TRUE(r.out.empty());
  const auto e = nlohmann::json::parse(r.err);
  EXPECT_EQ(e["error"]["code"], 2);
  EXPECT_NE(e["error"].dump().find("row 5"), std::string::npos) << r.err;
}

TEST(Cli, BadArgumentsExitTwo) {
  EXPECT_EQ(lmed("estimate " + kFixture + " --a-prime 1,1 --a-star 0").code, 2);
  EXPECT_EQ(lmed("estimate " + kFixture + " --a-prime 1 --a-star 0 --folds 0").code, 2);
  EXPECT_EQ(lmed("estimate --data missing.csv --schema missing.json --a-prime 1 --a-star 0").code, 2);
  EXPECT_EQ(lmed("frobnicate").code, 2);
  EXPECT_EQ(lmed("oracle --spec data/specs/tau1_binary.json --a-prime 1 --a-star 0 --bogus 3").code, 2);
}

TEST(Cli, SimulateSmallStudy) {
  const std::string args =
      "simulate --spec data/specs/tau1_binary.json --a-prime 1 --a-star 0 --n 100 --reps 2 --seed 5 "
      "--scenarios all-correct,Q-misspecified,g-misspecified,both-misspecified";
  const auto start = std::chrono::steady_clock::now();
  const CliRun a = lmed(args);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  ASSERT_EQ(a.code, 0) << a.err;
  EXPECT_LT(secs, 60.0);
  const auto j = a.json();
  ASSERT_EQ(j["scenarios"].size(), 4u);
  for (const auto& s : j["scenarios"]) {
    EXPECT_EQ(s["results"].size(), 1u);
    EXPECT_EQ(s["results"][0]["n"], 100);
  }
  EXPECT_EQ(lmed(args).out, a.out);
  EXPECT_EQ(lmed(args + " --threads 2").out, a.out);
}

TEST(Cli, SimulateWritesSampleAndReplicationCsv) {
  const fs::path dir = fs::temp_directory_path() / ("lmed_cli_files_" + std::to_string(::getpid()));
  fs::create_directories(dir);
  const CliRun s = lmed("simulate --spec data/specs/tau1_binary.json --n 50 --seed 2 --sample-csv " +
                     (dir / "d.csv").string() + " --sample-schema " + (dir / "d.json").string());
  ASSERT_EQ(s.code, 0) << s.err;
  const CliRun e = lmed("estimate --data " + (dir / "d.csv").string() + " --schema " + (dir / "d.json").string() +
                     " --a-prime 1 --a-star 0 --folds 2");
  EXPECT_EQ(e.code, 0) << e.err;
  const CliRun m = lmed("simulate --spec data/specs/tau1_binary.json --a-prime 1 --a-star 0 --n 60 --reps 3 --csv " +
                     (dir / "reps.csv").string());
  ASSERT_EQ(m.code, 0) << m.err;
  std::istringstream lines(slurp(dir / "reps.csv"));
  std::string line;
  int count = 0;
  while (std::getline(lines, line)) ++count;
  EXPECT_EQ(count, 4);
  fs::remove_all(dir);
}

TEST(Cli, OracleReport) {
  const CliRun r = lmed("oracle --spec data/specs/tau2_binary.json --a-prime 1,1 --a-star 0,0");
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = r.json();
  EXPECT_LE(j["cross_route_residual"].get<double>(), 1e-10);
  EXPECT_LE(j["sequential_regression"]["max_phi_residual"].get<double>(), 1e-10);
  EXPECT_NEAR(j["lambda_sum"].get<double>(), 1.0, 1e-12);
  EXPECT_TRUE(j["assumptions"]["ok"].get<bool>());
  for (const auto& c : j["von_mises"]["checks"]) EXPECT_LE(c["max_residual"].get<double>(), 1e-10);
}

TEST(Cli, OracleListsPositivityViolation) {
  const CliRun r = lmed("oracle --spec data/specs/positivity_violation.json --a-prime 1 --a-star 0");
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = r.json();
  EXPECT_FALSE(j["assumptions"]["ok"].get<bool>());
  ASSERT_FALSE(j["assumptions"]["a2_treatment"].empty());
  EXPECT_NE(j["assumptions"]["a2_treatment"][0].get<std::string>().find("A2(i)"), std::string::npos);
}

TEST(Cli, OracleDegenerateMediator) {
  const CliRun r = lmed("oracle --spec data/specs/degenerate_mediator.json --a-prime 1 --a-star 0");
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = r.json();
  ASSERT_EQ(j["paths"].size(), 1u);
  EXPECT_DOUBLE_EQ(j["paths"][0]["lambda"].get<double>(), 1.0);
}

TEST(Cli, OracleStateGuardExitsFour) {
  const fs::path p = fs::temp_directory_path() / ("lmed_big_" + std::to_string(::getpid()) + ".json");
  nlohmann::json j;
  j["tau"] = 6;
  for (int t = 1; t <= 6; ++t)
    for (const char* k : {"L", "A", "Z", "M"}) j["nodes"][k + std::to_string(t)] = {{"support", {0, 1}}, {"probs", {0.5, 0.5}}};
  j["nodes"]["Y"] = {{"support", {0, 1}}, {"probs", {0.5, 0.5}}};
  std::ofstream(p) << j.dump();
  const CliRun r = lmed("oracle --spec " + p.string() + " --a-prime 1,1,1,1,1,1 --a-star 0,0,0,0,0,0");
  EXPECT_EQ(r.code, 4);
  EXPECT_EQ(nlohmann::json::parse(r.err)["error"]["code"], 4);
  fs::remove(p);
}

TEST(Cli, ConfigFileAndFlagPrecedence) {
  const CliRun base = lmed("estimate --config data/fixtures/estimate_config.json");
  ASSERT_EQ(base.code, 0) << base.err;
  EXPECT_EQ(base.json()["diagnostics"]["folds"], 5);
  EXPECT_EQ(base.json()["diagnostics"]["seed"], 11);
  const CliRun over = lmed("estimate --config data/fixtures/estimate_config.json --folds 2");
  ASSERT_EQ(over.code, 0) << over.err;
  EXPECT_EQ(over.json()["diagnostics"]["folds"], 2);
  EXPECT_EQ(over.json()["diagnostics"]["seed"], 11);
}

TEST(Cli, HelpListsFlagsWithDefaults) {
  const CliRun est = lmed("estimate --help");
  EXPECT_EQ(est.code, 0);
  for (const char* f : {"--data", "--schema", "--a-prime", "--a-star", "--folds", "--seed", "--alpha", "--g-floor",
                        "--learners", "--contrasts", "--config", "--out"})
    EXPECT_NE(est.out.find(f), std::string::npos) << f;
  const CliRun sim = lmed("simulate --help");
  for (const char* f : {"--spec", "--n", "--reps", "--scenarios", "--threads", "--csv"})
    EXPECT_NE(sim.out.find(f), std::string::npos) << f;
  EXPECT_NE(lmed("oracle --help").out.find("--epsilon"), std::string::npos);
}

TEST(Cli, OutputFileMatchesStdout) {
  const fs::path p = fs::temp_directory_path() / ("lmed_out_" + std::to_string(::getpid()) + ".json");
  const std::string args = "oracle --spec data/specs/tau1_binary.json --a-prime 1 --a-star 0";
  const CliRun a = lmed(args);
  ASSERT_EQ(lmed(args + " --out " + p.string()).code, 0);
  EXPECT_EQ(slurp(p), a.out);
  fs::remove(p);
}
