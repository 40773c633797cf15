#pragma once

// Ancestral sampling from a structural model and Monte Carlo studies of the
// estimator (bias, standard errors, coverage, RMSE over a sample-size ladder)
// under correct and misspecified nuisance learners.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"
#include "lmed/eif.hpp"
#include "lmed/error.hpp"
#include "lmed/oracle.hpp"
#include "lmed/parallel.hpp"
#include "lmed/rng.hpp"
#include "lmed/schema.hpp"

namespace lmed {

// n draws in node order; values after loss to follow-up are masked, Y is
// always generated.
inline LongitudinalDataset sample(const NpsemSpec& spec, std::size_t n, std::uint64_t seed) {
  spec.check();
  const int K = spec.node_count();
  Rng rng(seed);
  std::vector<std::vector<double>> cols(static_cast<std::size_t>(K), std::vector<double>(n));
  std::vector<std::size_t> idx(static_cast<std::size_t>(K));
  std::vector<double> row_probs;
  for (std::size_t i = 0; i < n; ++i) {
    for (int k = 0; k < K; ++k) {
      const auto& node = spec.node(k);
      const std::size_t cfg = spec.parent_config(k, idx);
      const auto first = node.table.begin() + static_cast<std::ptrdiff_t>(cfg * node.cardinality());
      row_probs.assign(first, first + static_cast<std::ptrdiff_t>(node.cardinality()));
      idx[static_cast<std::size_t>(k)] = node.cardinality() == 1 ? 0 : rng.categorical(row_probs);
    }
    const int c = state_censor_time(spec, idx);
    for (int k = 0; k < K; ++k) {
      const auto& node = spec.node(k);
      cols[static_cast<std::size_t>(k)][i] =
          node_observed(node.kind, node.t, c) ? node.support[idx[static_cast<std::size_t>(k)]] : kMissing;
    }
  }
  LongitudinalDataset d(spec_schema(spec));
  for (int k = 0; k < K; ++k)
    if (spec.node(k).present) d.add_column(spec.node(k).name, std::move(cols[static_cast<std::size_t>(k)]));
  return validated_or_throw(d);
}

enum class Scenario { all_correct, q_misspecified, g_misspecified, ga_misspecified, gm_misspecified, both_misspecified };

inline const char* to_string(Scenario s) {
  switch (s) {
    case Scenario::all_correct: return "all-correct";
    case Scenario::q_misspecified: return "Q-misspecified";
    case Scenario::g_misspecified: return "g-misspecified";
    case Scenario::ga_misspecified: return "gA-misspecified";
    case Scenario::gm_misspecified: return "gM-misspecified";
    case Scenario::both_misspecified: return "both-misspecified";
  }
  return "?";
}

inline Scenario scenario_from_string(const std::string& s) {
  for (Scenario c : {Scenario::all_correct, Scenario::q_misspecified, Scenario::g_misspecified,
                     Scenario::ga_misspecified, Scenario::gm_misspecified, Scenario::both_misspecified})
    if (s == to_string(c)) return c;
  throw ValidationError("unknown scenario '" + s + "'");
}

// Misspecified families get the intercept-only learner.
inline LearnerConfig scenario_learners(Scenario s, LearnerConfig base) {
  const std::vector<LearnerSpec> wrong{LearnerSpec::constant()};
  const bool q = s == Scenario::q_misspecified || s == Scenario::both_misspecified;
  const bool ga = s == Scenario::g_misspecified || s == Scenario::ga_misspecified || s == Scenario::both_misspecified;
  const bool gm = s == Scenario::g_misspecified || s == Scenario::gm_misspecified || s == Scenario::both_misspecified;
  if (q) base[Family::QL] = base[Family::QZ] = base[Family::QM] = wrong;
  if (ga) base[Family::treatment] = wrong;
  if (gm) base[Family::mediator] = wrong;
  return base;
}

struct McConfig {
  NpsemSpec spec;
  InterventionPair pair;
  std::vector<std::size_t> n_ladder{500};
  int reps = 100;
  std::uint64_t seed = 1;
  EstimatorConfig estimator;
  std::vector<Scenario> scenarios{Scenario::all_correct};
  unsigned threads = 1;

  void check() const {
    if (reps < 1) throw ValidationError("replication count must be >= 1");
    if (n_ladder.empty()) throw ValidationError("at least one sample size is required");
    for (auto n : n_ladder)
      if (n < static_cast<std::size_t>(estimator.folds)) throw ValidationError("sample size smaller than the fold count");
    if (scenarios.empty()) throw ValidationError("at least one scenario is required");
    estimator.check();
  }
};

struct McReplication {
  std::size_t n = 0;
  int rep = 0;
  bool failed = false;
  std::string error;
  double theta = 0.0, se = 0.0, ci_lo = 0.0, ci_hi = 0.0;
  std::size_t truncated = 0;
};

struct McCell {
  std::size_t n = 0;
  double bias = 0.0;
  double mc_sd = 0.0;     // sd of theta-hat over replications
  double mc_se = 0.0;     // mc_sd / sqrt(R): Monte Carlo error of the mean
  double mean_se = 0.0;   // mean estimated standard error
  double n_mean_var = 0.0;  // n * mean(se^2), comparable to Var[S]
  double coverage = 0.0;
  double rmse = 0.0;
  int failures = 0;
};

struct McScenarioReport {
  Scenario scenario = Scenario::all_correct;
  std::vector<McCell> cells;  // one per n in the ladder
  std::vector<McReplication> replications;
};

struct McReport {
  double theta_true = 0.0;
  double var_s = 0.0;  // efficiency bound Var[S]
  int reps = 0;
  std::uint64_t seed = 0;
  std::vector<McScenarioReport> scenarios;
};

inline McCell summarize(std::size_t n, const std::vector<McReplication>& reps, double truth) {
  McCell c;
  c.n = n;
  std::vector<const McReplication*> ok;
  for (const auto& r : reps) {
    if (r.n != n) continue;
    if (r.failed) {
      ++c.failures;
      continue;
    }
    ok.push_back(&r);
  }
  if (ok.empty()) return c;
  const double R = static_cast<double>(ok.size());
  double mean = 0.0, se = 0.0, var = 0.0, covered = 0.0, sq = 0.0;
  for (const auto* r : ok) {
    mean += r->theta;
    se += r->se;
    var += r->se * r->se;
    covered += (r->ci_lo <= truth && truth <= r->ci_hi) ? 1.0 : 0.0;
    sq += (r->theta - truth) * (r->theta - truth);
  }
  mean /= R;
  double ss = 0.0;
  for (const auto* r : ok) ss += (r->theta - mean) * (r->theta - mean);
  c.bias = mean - truth;
  c.mc_sd = ok.size() > 1 ? std::sqrt(ss / (R - 1.0)) : 0.0;
  c.mc_se = c.mc_sd / std::sqrt(R);
  c.mean_se = se / R;
  c.n_mean_var = static_cast<double>(n) * var / R;
  c.coverage = covered / R;
  c.rmse = std::sqrt(sq / R);
  return c;
}

// Replication r at sample size n draws its data from stream (seed, n, r), so
// every scenario sees the same datasets.
inline McReport run_mc(const McConfig& cfg) {
  cfg.check();
  const Oracle oracle(cfg.spec);
  McReport report;
  report.theta_true = true_theta_identification(oracle, cfg.pair).theta;
  report.var_s = efficiency_bound(oracle, cfg.pair).variance;
  report.reps = cfg.reps;
  report.seed = cfg.seed;
  for (Scenario sc : cfg.scenarios) {
    McScenarioReport sr;
    sr.scenario = sc;
    EstimatorConfig ec = cfg.estimator;
    ec.learners = scenario_learners(sc, cfg.estimator.learners);
    const std::size_t per_n = static_cast<std::size_t>(cfg.reps);
    sr.replications.resize(per_n * cfg.n_ladder.size());
    parallel_for(sr.replications.size(), cfg.threads, [&](std::size_t job) {
      const std::size_t n = cfg.n_ladder[job / per_n];
      const int r = static_cast<int>(job % per_n);
      McReplication& out = sr.replications[job];
      out.n = n;
      out.rep = r;
      const std::uint64_t rep_seed = splitmix64(cfg.seed ^ splitmix64(n)) + static_cast<std::uint64_t>(r);
      try {
        const LongitudinalDataset d = sample(cfg.spec, n, rep_seed);
        EstimatorConfig local = ec;
        local.seed = rep_seed;
        const EstimateReport e = estimate(d, cfg.pair, local);
        out.theta = e.theta;
        out.se = e.se;
        out.ci_lo = e.ci_lo;
        out.ci_hi = e.ci_hi;
        out.truncated = e.truncated;
      } catch (const std::exception& ex) {
        out.failed = true;
        out.error = ex.what();
      }
    });
    for (auto n : cfg.n_ladder) sr.cells.push_back(summarize(n, sr.replications, report.theta_true));
    report.scenarios.push_back(std::move(sr));
  }
  return report;
}

inline nlohmann::ordered_json to_json(const McReport& r) {
  nlohmann::ordered_json j;
  j["theta_true"] = r.theta_true;
  j["var_s"] = r.var_s;
  j["reps"] = r.reps;
  j["seed"] = r.seed;
  auto& scs = j["scenarios"] = nlohmann::ordered_json::array();
  for (const auto& s : r.scenarios) {
    nlohmann::ordered_json sj;
    sj["name"] = to_string(s.scenario);
    auto& cells = sj["results"] = nlohmann::ordered_json::array();
    for (const auto& c : s.cells)
      cells.push_back({{"n", c.n},
                       {"bias", c.bias},
                       {"mc_sd", c.mc_sd},
                       {"mc_se", c.mc_se},
                       {"mean_se", c.mean_se},
                       {"n_mean_var", c.n_mean_var},
                       {"coverage", c.coverage},
                       {"rmse", c.rmse},
                       {"failures", c.failures}});
    auto& ratios = sj["rmse_ratios"] = nlohmann::ordered_json::array();
    for (std::size_t k = 1; k < s.cells.size(); ++k)
      ratios.push_back({{"n_small", s.cells[k - 1].n},
                        {"n_large", s.cells[k].n},
                        {"ratio", s.cells[k].rmse > 0 ? s.cells[k - 1].rmse / s.cells[k].rmse : 0.0}});
    scs.push_back(sj);
  }
  return j;
}

inline void write_replications_csv(std::ostream& out, const McReport& r) {
  out << "scenario,n,rep,theta,se,ci_lo,ci_hi,covered,failed\n";
  out.precision(17);
  for (const auto& s : r.scenarios)
    for (const auto& rep : s.replications) {
      const bool covered = !rep.failed && rep.ci_lo <= r.theta_true && r.theta_true <= rep.ci_hi;
      out << to_string(s.scenario) << ',' << rep.n << ',' << rep.rep << ',' << rep.theta << ',' << rep.se << ','
          << rep.ci_lo << ',' << rep.ci_hi << ',' << (covered ? 1 : 0) << ',' << (rep.failed ? 1 : 0) << '\n';
    }
}

}  // namespace lmed
