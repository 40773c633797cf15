#include <gtest/gtest.h>

#include <cmath>
#include <map>

#include "lmed/oracle.hpp"
#include "lmed/simulate.hpp"

using namespace lmed;

namespace {

const std::string kSpecs = std::string(LMED_SOURCE_DIR) + "/data/specs/";

InterventionPair ones_zeros(int tau) {
  return {std::vector<double>(static_cast<std::size_t>(tau), 1.0), std::vector<double>(static_cast<std::size_t>(tau), 0.0)};
}

// Weighted frequency of each observed value per column.
std::map<std::string, std::map<double, double>> frequencies(const LongitudinalDataset& d) {
  std::map<std::string, std::map<double, double>> out;
  double total = 0.0;
  for (std::size_t i = 0; i < d.rows(); ++i) total += d.weight(i);
  for (const auto& name : d.schema().columns_in_order())
    for (std::size_t i = 0; i < d.rows(); ++i) {
      const double v = d.column(name)[i];
      if (!std::isnan(v)) out[name][v] += d.weight(i) / total;
    }
  return out;
}

McReplication rep(std::size_t n, double theta, double se, bool failed = false) {
  McReplication r;
  r.n = n;
  r.theta = theta;
  r.se = se;
  r.ci_lo = theta - 1.96 * se;
  r.ci_hi = theta + 1.96 * se;
  r.failed = failed;
  return r;
}

}  // namespace

TEST(Sample, EmptyAndDeterministic) {
  const auto spec = read_spec(kSpecs + "tau2_binary.json");
  EXPECT_EQ(sample(spec, 0, 1).rows(), 0u);
  const auto a = sample(spec, 300, 4), b = sample(spec, 300, 4), c = sample(spec, 300, 5);
  bool differs = false;
  for (const auto& name : a.schema().columns_in_order()) {
    EXPECT_EQ(a.column(name), b.column(name));
    differs = differs || a.column(name) != c.column(name);
  }
  EXPECT_TRUE(differs);
}

TEST(Sample, DegenerateTablesRepeatOneRow) {
  const auto spec = spec_from_json(nlohmann::json::parse(R"({"tau": 1, "nodes": {
    "L1": {"support": [0, 1], "probs": [0, 1]},
    "A1": {"support": [0, 1], "parents": ["L1"], "table": {"0": [1, 0], "1": [0, 1]}},
    "M1": {"support": [3, 4], "parents": ["A1"], "table": {"0": [1, 0], "1": [1, 0]}},
    "Y": {"support": [0, 1], "parents": ["M1"], "table": {"3": [0, 1], "4": [1, 0]}}}})"));
  const auto d = sample(spec, 50, 9);
  for (std::size_t i = 0; i < d.rows(); ++i) {
    EXPECT_EQ(d.column("L1")[i], 1.0);
    EXPECT_EQ(d.column("A1")[i], 1.0);
    EXPECT_EQ(d.column("M1")[i], 3.0);
    EXPECT_EQ(d.column("Y")[i], 1.0);
  }
}

TEST(Sample, MarginalsMatchEnumeration) {
  for (const char* name : {"tau2_binary.json", "tau2_censored.json"}) {
    const auto spec = read_spec(kSpecs + name);
    const std::size_t n = 1000000;
    const auto truth = frequencies(enumerate_dataset(Oracle(spec)));
    const auto got = frequencies(sample(spec, n, 77));
    const double tol = 4.0 / std::sqrt(static_cast<double>(n));
    for (const auto& [col, values] : truth)
      for (const auto& [v, p] : values) {
        const auto it = got.at(col).find(v);
        EXPECT_NEAR(it == got.at(col).end() ? 0.0 : it->second, p, tol) << name << " " << col << "=" << v;
      }
  }
}

TEST(Summarize, Arithmetic) {
  const std::vector<McReplication> reps{rep(100, 0.4, 0.1), rep(100, 0.6, 0.1), rep(100, 0.0, 0.0, true),
                                        rep(200, 0.9, 0.2)};
  const McCell c = summarize(100, reps, 0.5);
  EXPECT_EQ(c.failures, 1);
  EXPECT_NEAR(c.bias, 0.0, 1e-15);
  EXPECT_NEAR(c.mc_sd, std::sqrt(0.02), 1e-15);
  EXPECT_NEAR(c.mc_se, std::sqrt(0.02) / std::sqrt(2.0), 1e-15);
  EXPECT_NEAR(c.mean_se, 0.1, 1e-15);
  EXPECT_NEAR(c.n_mean_var, 1.0, 1e-12);
  EXPECT_DOUBLE_EQ(c.coverage, 1.0);
  EXPECT_NEAR(c.rmse, 0.1, 1e-15);
  const McCell d = summarize(200, reps, 0.5);
  EXPECT_DOUBLE_EQ(d.coverage, 0.0);
  EXPECT_EQ(summarize(300, reps, 0.5).failures, 0);
}

TEST(Scenarios, LearnerMapping) {
  const LearnerConfig base;
  const auto q = scenario_learners(Scenario::q_misspecified, base);
  EXPECT_EQ(q[Family::QL].size(), 1u);
  EXPECT_EQ(q[Family::QL][0].kind, LearnerSpec::constant().kind);
  EXPECT_EQ(q[Family::treatment].size(), base[Family::treatment].size());
  const auto ga = scenario_learners(Scenario::ga_misspecified, base);
  EXPECT_EQ(ga[Family::treatment][0].kind, LearnerSpec::constant().kind);
  EXPECT_EQ(ga[Family::mediator].size(), base[Family::mediator].size());
  const auto both = scenario_learners(Scenario::both_misspecified, base);
  EXPECT_EQ(both[Family::mediator][0].kind, LearnerSpec::constant().kind);
  EXPECT_EQ(both[Family::QM][0].kind, LearnerSpec::constant().kind);
  for (const char* s : {"all-correct", "Q-misspecified", "g-misspecified", "gA-misspecified", "gM-misspecified",
                        "both-misspecified"})
    EXPECT_STREQ(to_string(scenario_from_string(s)), s);
  EXPECT_THROW(scenario_from_string("nope"), ValidationError);
}

TEST(MonteCarlo, ReproducibleAcrossThreadCounts) {
  McConfig cfg;
  cfg.spec = read_spec(kSpecs + "tau1_binary.json");
  cfg.pair = ones_zeros(1);
  cfg.n_ladder = {120, 240};
  cfg.reps = 6;
  cfg.seed = 31;
  cfg.scenarios = {Scenario::all_correct, Scenario::both_misspecified};
  const auto a = to_json(run_mc(cfg));
  cfg.threads = 3;
  const auto b = to_json(run_mc(cfg));
  EXPECT_EQ(a.dump(), b.dump());
  EXPECT_EQ(a["scenarios"].size(), 2u);
  EXPECT_EQ(a["scenarios"][0]["results"].size(), 2u);
  EXPECT_EQ(a["scenarios"][0]["rmse_ratios"].size(), 1u);
  cfg.seed = 32;
  EXPECT_NE(to_json(run_mc(cfg)).dump(), a.dump());
}

TEST(MonteCarlo, RejectsBadConfig) {
  McConfig cfg;
  cfg.spec = read_spec(kSpecs + "tau1_binary.json");
  cfg.pair = ones_zeros(1);
  cfg.reps = 0;
  EXPECT_THROW(run_mc(cfg), ValidationError);
  cfg.reps = 2;
  cfg.n_ladder = {3};
  EXPECT_THROW(run_mc(cfg), ValidationError);
}
