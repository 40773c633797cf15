#include <gtest/gtest.h>

#include <cmath>

#include "lmed/eif.hpp"
#include "lmed/oracle.hpp"
#include "lmed/simulate.hpp"
#include "reference_d.hpp"

using namespace lmed;

namespace {

const std::string kRoot = LMED_SOURCE_DIR;

InterventionPair ones_zeros(int tau) {
  return {std::vector<double>(static_cast<std::size_t>(tau), 1.0), std::vector<double>(static_cast<std::size_t>(tau), 0.0)};
}

LearnerConfig saturated() { return LearnerConfig::uniform(LearnerSpec::stratum_mean()); }

double mean_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  std::size_t c = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (std::isfinite(a[i]) && std::isfinite(b[i])) {
      s += std::abs(a[i] - b[i]);
      ++c;
    }
  return c ? s / static_cast<double>(c) : 0.0;
}

}  // namespace

TEST(DEvaluators, MatchTermByTermSums) {
  for (std::uint64_t seed = 0; seed < 2000; ++seed) {
    const auto r = lmed::testing::random_tables(seed);
    const auto c = lmed::testing::compare_d(lmed::testing::library_d(r), lmed::testing::reference_d(r));
    ASSERT_LE(c.max_abs, 1e-12) << "seed " << seed;
  }
}

TEST(DEvaluators, ZeroRatioIgnoresTarget) {
  EXPECT_EQ(d_step(0.0, std::numeric_limits<double>::quiet_NaN(), 0.3), 0.3);
  EXPECT_DOUBLE_EQ(d_step(2.0, 1.0, 0.25), 1.75);
}

TEST(DEvaluators, PathRecursionMatchesPooled) {
  const auto r = lmed::testing::random_tables(77, 2, 1);
  const auto ref = lmed::testing::reference_d(r);
  const auto& ms = r.ms;
  for (std::size_t code = 0; code < ms.path_count(); ++code) {
    PathNuisance e;
    e.y = r.y[0];
    std::size_t c = code;
    for (int t = 1; t <= r.tau; ++t) {
      const auto k = static_cast<std::size_t>(t - 1);
      e.GA_prime.push_back(r.Gp[k][0]);
      e.GA_star.push_back(r.Gs[k][0]);
      e.GM.push_back(r.GM[k][c]);
      e.QL.push_back(r.QL[k][c]);
      e.QZ.push_back(r.QZ[k][c]);
      e.QM.push_back(r.QM[k][c]);
      e.mediator_match.push_back(r.match[k][c]);
      c = ms.tail(c, t);
    }
    const PathD d = path_recursions(e);
    EXPECT_NEAR(d.DZ[0], ref.DZ[0][code], 1e-12);
    EXPECT_NEAR(d.DM[0], ref.DM[0][code], 1e-12);
    EXPECT_NEAR(d.DL[0], ref.DL[0][code], 1e-12);
  }
}

// Weighted enumeration of the full law: one-step estimate with the true
// nuisances is theta, and its variance is Var[S].
TEST(Estimator, ExactNuisancesOnEnumeratedLaw) {
  for (const char* name : {"tau2_binary.json", "tau2_censored.json", "tau1_no_z.json"}) {
    const auto spec = read_spec(kRoot + "/data/specs/" + name);
    const Oracle o(spec);
    const auto pair = ones_zeros(spec.tau);
    const auto d = enumerate_dataset(o);
    ExactNuisance exact(o, pair);
    const auto rep = estimate_with(d, pair, make_folds(d.rows(), 1, 0), exact, 1e-9, 0.05);
    const auto eif = efficiency_bound(o, pair);
    EXPECT_NEAR(rep.theta, true_theta_identification(o, pair).theta, 1e-12) << name;
    EXPECT_NEAR(rep.se * rep.se, eif.variance, 1e-10) << name;
  }
}

TEST(Estimator, SaturatedLearnersOnEnumeratedLaw) {
  for (const char* name : {"tau2_binary.json", "tau2_censored.json"}) {
    const auto spec = read_spec(kRoot + "/data/specs/" + name);
    const Oracle o(spec);
    const auto pair = ones_zeros(spec.tau);
    const auto d = enumerate_dataset(o);
    EstimatorConfig ec;
    ec.folds = 1;
    ec.g_floor = 1e-9;
    ec.learners = saturated();
    const auto rep = estimate(d, pair, ec);
    EXPECT_NEAR(rep.theta, true_theta_identification(o, pair).theta, 1e-10) << name;
    EXPECT_NEAR(rep.se * rep.se, efficiency_bound(o, pair).variance, 1e-8) << name;
    EXPECT_EQ(rep.truncated, 0u);
  }
}

TEST(Estimator, VarianceOfSMatchesSampledEif) {
  // n * se^2 with true nuisances is the sample variance of S(X, eta).
  const auto spec = read_spec(kRoot + "/data/specs/tau1_binary.json");
  const Oracle o(spec);
  const auto pair = ones_zeros(1);
  const auto d = sample(spec, 200000, 5);
  ExactNuisance exact(o, pair);
  const auto rep = estimate_with(d, pair, make_folds(d.rows(), 1, 0), exact, 1e-9, 0.05);
  const double var_s = efficiency_bound(o, pair).variance;
  const double theta = true_theta_identification(o, pair).theta;
  EXPECT_NEAR(200000.0 * rep.se * rep.se / var_s, 1.0, 0.03);
  EXPECT_LE(std::abs(rep.theta - theta), 4 * rep.se);
}

// Saturated fits converge to the true nuisances; the largest t = 2 strata
// hold about twenty rows at n = 5000, so the check is on the rate.
TEST(Estimator, FittedNuisancesApproachTruth) {
  const auto spec = read_spec(kRoot + "/data/specs/tau2_binary.json");
  const Oracle o(spec);
  const auto pair = ones_zeros(2);
  auto errors = [&](std::size_t n) {
    const auto d = sample(spec, n, 21);
    const auto folds = make_folds(d.rows(), 5, 21);
    EstimationTrace fit, truth;
    LearnerNuisance learners(saturated(), 21);
    ExactNuisance exact(o, pair);
    estimate_with(d, pair, folds, learners, 0.01, 0.05, &fit);
    estimate_with(d, pair, folds, exact, 0.01, 0.05, &truth);
    std::vector<double> e;
    for (int t = 1; t <= 2; ++t) {
      const auto& a = fit.tables[t];
      const auto& b = truth.tables[t];
      for (auto m : {&TimeNuisance::gA_prime, &TimeNuisance::gA_star, &TimeNuisance::QL, &TimeNuisance::QZ,
                     &TimeNuisance::QM})
        e.push_back(mean_abs_diff(a.*m, b.*m));
    }
    return e;
  };
  const auto small = errors(5000), large = errors(80000);
  for (std::size_t k = 0; k < small.size(); ++k) {
    EXPECT_LT(large[k], 0.03) << k;
    EXPECT_GT(small[k] / large[k], 2.0) << k;
  }
}

TEST(Estimator, FixtureRunsWithOneAndFiveFolds) {
  const auto schema = read_schema(kRoot + "/data/fixtures/tau1_n200.schema.json");
  const auto d = read_csv(kRoot + "/data/fixtures/tau1_n200.csv", schema);
  for (int v : {1, 5}) {
    EstimatorConfig ec;
    ec.folds = v;
    ec.seed = 3;
    const auto rep = estimate(d, ones_zeros(1), ec);
    EXPECT_TRUE(std::isfinite(rep.theta));
    EXPECT_GT(rep.se, 0.0);
    EXPECT_LT(rep.ci_lo, rep.theta);
    EXPECT_GT(rep.ci_hi, rep.theta);
    EXPECT_EQ(rep.folds, v);
    EXPECT_EQ(rep.paths.size(), 2u);
  }
}

TEST(Estimator, DeterministicGivenSeed) {
  const auto spec = read_spec(kRoot + "/data/specs/tau2_binary.json");
  const auto d = sample(spec, 800, 4);
  EstimatorConfig ec;
  ec.seed = 12;
  const auto a = estimate(d, ones_zeros(2), ec);
  const auto b = estimate(d, ones_zeros(2), ec);
  EXPECT_EQ(a.theta, b.theta);
  EXPECT_EQ(a.se, b.se);
  ec.seed = 13;
  EXPECT_NE(estimate(d, ones_zeros(2), ec).fold_of, a.fold_of);
}

TEST(Estimator, ContrastsDecompose) {
  const auto spec = read_spec(kRoot + "/data/specs/tau2_binary.json");
  const Oracle o(spec);
  const auto d = sample(spec, 1500, 9);
  EstimatorConfig ec;
  ec.seed = 2;
  const auto runs = estimate_contrasts(d, ones_zeros(2), ec);
  ASSERT_EQ(runs.contrasts.size(), 3u);
  EXPECT_NEAR(runs.contrasts[0].estimate + runs.contrasts[1].estimate, runs.contrasts[2].estimate, 1e-12);
  EXPECT_EQ(runs.contrasts[0].name, "direct");
  for (const auto& c : runs.contrasts) EXPECT_GT(c.se, 0.0);
  EXPECT_NEAR(runs.contrasts[0].estimate, runs.cross.theta - runs.untreated.theta, 1e-15);
  // Mismatched folds cannot be differenced.
  EstimateReport other = runs.treated;
  other.fold_of[0] = (other.fold_of[0] + 1) % 5;
  EXPECT_THROW(contrast("x", runs.cross, other, {}, 1500, 0.05), ValidationError);
}

TEST(Estimator, FloorCountsTruncatedWeights) {
  // A1 = 1 has probability 0.005 when L1 = 1.
  const auto spec = spec_from_json(nlohmann::json::parse(R"({"tau": 1, "nodes": {
    "L1": {"support": [0, 1], "probs": [0.5, 0.5]},
    "A1": {"support": [0, 1], "parents": ["L1"], "table": {"0": [0.5, 0.5], "1": [0.995, 0.005]}},
    "M1": {"support": [0, 1], "parents": ["A1"], "table": {"0": [0.6, 0.4], "1": [0.3, 0.7]}},
    "Y": {"support": [0, 1], "parents": ["M1", "L1"], "table": {"0,0": [0.7, 0.3], "0,1": [0.5, 0.5], "1,0": [0.4, 0.6], "1,1": [0.2, 0.8]}}}})"));
  const auto d = sample(spec, 4000, 1);
  EstimatorConfig ec;
  ec.learners = saturated();
  const auto rep = estimate(d, ones_zeros(1), ec);
  EXPECT_GT(rep.truncated, 0u);
  EXPECT_TRUE(std::isfinite(rep.theta));
}

TEST(Estimator, RejectsBadRequests) {
  const auto spec = read_spec(kRoot + "/data/specs/tau2_censored.json");
  const auto d = sample(spec, 200, 1);
  EstimatorConfig ec;
  EXPECT_THROW(estimate(d, ones_zeros(1), ec), ValidationError);
  EXPECT_THROW(estimate(d, {{2, 1}, {0, 0}}, ec), ValidationError);
  ec.alpha = 1.5;
  EXPECT_THROW(estimate(d, ones_zeros(2), ec), ValidationError);
  ec = {};
  ec.folds = 500;
  EXPECT_THROW(estimate(d, ones_zeros(2), ec), ValidationError);
}

TEST(Estimator, CensoredSampleIsConsistent) {
  const auto spec = read_spec(kRoot + "/data/specs/tau2_censored.json");
  const Oracle o(spec);
  const auto pair = ones_zeros(2);
  const auto d = sample(spec, 20000, 8);
  EstimatorConfig ec;
  ec.seed = 8;
  ec.learners = saturated();
  const auto rep = estimate(d, pair, ec);
  EXPECT_LE(std::abs(rep.theta - true_theta_identification(o, pair).theta), 4 * rep.se);
}

TEST(Estimator, ReportJsonShape) {
  const auto schema = read_schema(kRoot + "/data/fixtures/tau1_n200.schema.json");
  const auto d = read_csv(kRoot + "/data/fixtures/tau1_n200.csv", schema);
  EstimatorConfig ec;
  const auto j = to_json(estimate(d, ones_zeros(1), ec));
  for (const char* key : {"theta", "se", "ci", "alpha", "n", "paths", "contrasts", "diagnostics"})
    EXPECT_TRUE(j.contains(key)) << key;
  EXPECT_EQ(j["ci"].size(), 2u);
}
