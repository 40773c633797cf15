#pragma once

// Influence-function recursions, path aggregation and the end-to-end
// cross-fitted estimator of theta = sum_m phi(m) lambda(m), with Wald
// intervals and direct/indirect contrasts.

#include <boost/math/distributions/normal.hpp>

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "lmed/error.hpp"
#include "lmed/learners.hpp"
#include "lmed/nuisance.hpp"
#include "lmed/pooled.hpp"
#include "lmed/schema.hpp"

namespace lmed {

// ratio * (target - q) + q, with a zero ratio contributing nothing (the
// target may be undefined on such rows).
inline double d_step(double ratio, double target, double q) { return ratio == 0.0 ? q : ratio * (target - q) + q; }

// D_{L,t} = G_{M,t} (D_{Z,t+1} - Q_{L,t}) + Q_{L,t}; dz_next indexed by parent rows.
inline std::vector<double> compute_DL(const PooledDataset& p, std::span<const double> GM, std::span<const double> QL,
                                      std::span<const double> dz_next) {
  std::vector<double> out(p.size());
  for (std::size_t r = 0; r < p.size(); ++r) out[r] = d_step(GM[r], dz_next[p.parent(r)], QL[r]);
  return out;
}

// D_{Z,t} = G'_{A,t} (D_{L,t} - Q_{Z,t}) + Q_{Z,t}; GA_prime indexed by source rows.
inline std::vector<double> compute_DZ(const PooledDataset& p, std::span<const double> GA_prime,
                                      std::span<const double> QZ, std::span<const double> dl) {
  std::vector<double> out(p.size());
  for (std::size_t r = 0; r < p.size(); ++r) out[r] = d_step(GA_prime[p.source(r)], dl[r], QZ[r]);
  return out;
}

// D_{M,t} = G*_{A,t} (1{M_t = m_t} D_{M,t+1} - Q_{M,t}) + Q_{M,t}.
inline std::vector<double> compute_DM(const PooledDataset& p, std::span<const double> GA_star,
                                      std::span<const double> QM, std::span<const double> mediator_match,
                                      std::span<const double> dm_next) {
  std::vector<double> out(p.size());
  for (std::size_t r = 0; r < p.size(); ++r) {
    const double ratio = GA_star[p.source(r)];
    const double target = mediator_match[r] != 0.0 ? dm_next[p.parent(r)] : 0.0;
    out[r] = d_step(ratio, target, QM[r]);
  }
  return out;
}

// Nuisance values along one observation and one mediator path, for the
// row-level recursions (index s-1 holds time s).
struct PathNuisance {
  std::vector<double> GA_prime, GA_star, GM, QL, QZ, QM, mediator_match;
  double y = 0.0;
};

struct PathD {
  std::vector<double> DL, DZ, DM;  // index t-1
};

inline PathD path_recursions(const PathNuisance& e) {
  const int tau = static_cast<int>(e.QL.size());
  PathD d{std::vector<double>(static_cast<std::size_t>(tau)), std::vector<double>(static_cast<std::size_t>(tau)),
          std::vector<double>(static_cast<std::size_t>(tau))};
  double dz_next = e.y, dm_next = 1.0;
  for (int t = tau; t >= 1; --t) {
    const auto k = static_cast<std::size_t>(t - 1);
    d.DL[k] = d_step(e.GM[k], dz_next, e.QL[k]);
    d.DZ[k] = d_step(e.GA_prime[k], d.DL[k], e.QZ[k]);
    d.DM[k] = d_step(e.GA_star[k], e.mediator_match[k] != 0.0 ? dm_next : 0.0, e.QM[k]);
    dz_next = d.DZ[k];
    dm_next = d.DM[k];
  }
  return d;
}

// ---------------------------------------------------------------------------
// Configuration and report

struct EstimatorConfig {
  int folds = 5;
  std::uint64_t seed = 0;
  double g_floor = 0.01;
  double alpha = 0.05;
  LearnerConfig learners;

  void check() const {
    if (folds < 1) throw ValidationError("folds must be >= 1");
    if (!(alpha > 0.0 && alpha < 1.0)) throw ValidationError("alpha must lie in (0, 1)");
    if (!(g_floor > 0.0 && g_floor <= 1.0)) throw ValidationError("g-floor must lie in (0, 1]");
  }
};

struct PathEstimate {
  std::vector<double> m;
  double phi = 0.0, lambda = 0.0;
};

struct ContrastEstimate {
  std::string name;
  double estimate = 0.0, se = 0.0, ci_lo = 0.0, ci_hi = 0.0;
};

struct EstimateReport {
  double theta = 0.0;
  double se = 0.0;  // sqrt(Var_n(S) / n)
  double ci_lo = 0.0, ci_hi = 0.0;
  double alpha = 0.05;
  std::size_t n = 0;
  std::vector<PathEstimate> paths;
  std::vector<double> eif;  // per observation
  std::vector<ContrastEstimate> contrasts;
  // Diagnostics.
  std::size_t truncated = 0;
  std::size_t fallbacks = 0;
  std::size_t unseen_strata = 0;
  std::vector<std::string> warnings;
  int folds = 1;
  std::uint64_t seed = 0;
  std::vector<int> fold_of;
};

inline double normal_quantile(double p) { return boost::math::quantile(boost::math::normal(), p); }

inline double z_value(double alpha) { return normal_quantile(1.0 - alpha / 2.0); }

// Weighted mean and (1/n) variance; empty weights mean unit weights.
inline std::pair<double, double> weighted_moments(std::span<const double> x, std::span<const double> w) {
  double sw = 0.0, sx = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double wi = w.empty() ? 1.0 : w[i];
    sw += wi;
    sx += wi * x[i];
  }
  if (sw <= 0) return {0.0, 0.0};
  const double mean = sx / sw;
  double ss = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double wi = w.empty() ? 1.0 : w[i];
    ss += wi * (x[i] - mean) * (x[i] - mean);
  }
  return {mean, ss / sw};
}

// Effective sample size for standard errors: the row count, or the total
// weight for weighted (enumeration) datasets.
inline double effective_n(const LongitudinalDataset& d) {
  if (d.weights().empty()) return static_cast<double>(d.rows());
  double s = 0.0;
  for (double w : d.weights()) s += w;
  return s;
}

// Per-fold path means of D_{Z,1} and D_{M,1}, averaged over folds.
inline std::vector<PathEstimate> estimate_paths(const PooledDataset& p1, std::span<const double> dz1,
                                                std::span<const double> dm1, std::span<const double> weights) {
  const std::size_t paths = p1.suffix_count();
  int folds = 0;
  for (int f : p1.source_folds()) folds = std::max(folds, f + 1);
  std::vector<double> sw(static_cast<std::size_t>(folds) * paths, 0.0), sz(sw.size(), 0.0), sm(sw.size(), 0.0);
  for (std::size_t r = 0; r < p1.size(); ++r) {
    const std::size_t k = static_cast<std::size_t>(p1.fold(r)) * paths + p1.suffix(r);
    const double w = weights.empty() ? 1.0 : weights[p1.source(r)];
    sw[k] += w;
    sz[k] += w * dz1[r];
    sm[k] += w * dm1[r];
  }
  std::vector<PathEstimate> out(paths);
  for (std::size_t m = 0; m < paths; ++m) {
    out[m].m = p1.supports().values(m, 1);
    int used = 0;
    for (int v = 0; v < folds; ++v) {
      const std::size_t k = static_cast<std::size_t>(v) * paths + m;
      if (sw[k] <= 0) continue;
      out[m].phi += sz[k] / sw[k];
      out[m].lambda += sm[k] / sw[k];
      ++used;
    }
    if (used > 0) {
      out[m].phi /= used;
      out[m].lambda /= used;
    }
  }
  return out;
}

// theta, the per-observation EIF and its Wald interval.
inline void estimate_theta(const PooledDataset& p1, std::span<const double> dz1, std::span<const double> dm1,
                           const LongitudinalDataset& d, double alpha, EstimateReport& report) {
  report.theta = 0.0;
  for (const auto& path : report.paths) report.theta += path.phi * path.lambda;
  report.eif.assign(p1.sources(), 0.0);
  for (std::size_t r = 0; r < p1.size(); ++r) {
    const auto& path = report.paths[p1.suffix(r)];
    report.eif[p1.source(r)] += (dz1[r] - path.phi) * path.lambda + (dm1[r] - path.lambda) * path.phi;
  }
  for (double s : report.eif)
    if (!std::isfinite(s)) throw NumericError("non-finite influence function value");
  const auto [mean, var] = weighted_moments(report.eif, d.weights());
  (void)mean;
  const double n_eff = effective_n(d);
  report.se = n_eff > 0 ? std::sqrt(var / n_eff) : 0.0;
  report.alpha = alpha;
  const double z = z_value(alpha);
  report.ci_lo = report.theta - z * report.se;
  report.ci_hi = report.theta + z * report.se;
}

// Intermediate quantities of one run, exposed for tests.
struct EstimationTrace {
  std::vector<PooledDataset> pooled;  // pooled[t-1] = D_t^+
  NuisanceTables tables;
  std::vector<std::vector<double>> DL, DZ, DM;  // [t-1], on D_t^+
};

// Runs the backward pass over t = tau..1 with nuisances from `source`.
inline EstimateReport estimate_with(const LongitudinalDataset& data, const InterventionPair& pair,
                                    const FoldPartition& folds, NuisanceSource& source, double g_floor, double alpha,
                                    EstimationTrace* trace = nullptr) {
  const LongitudinalDataset d = data.validated() ? data : validated_or_throw(data);
  const NodeSchema& s = d.schema();
  pair.check(s);
  if (folds.fold_of.size() != d.rows()) throw ValidationError("fold partition does not match the dataset size");
  if (d.rows() == 0) throw ValidationError("empty dataset");
  const int tau = s.tau;

  std::vector<std::vector<double>> supports;
  for (int t = 1; t <= tau; ++t) supports.push_back(mediator_support(d, t));
  const MediatorSupports ms(std::move(supports));

  NuisanceTables tables;
  tables.g_floor = g_floor;
  tables.at.resize(static_cast<std::size_t>(tau));
  const auto& y = d.column(s.Y);
  tables.y_min = *std::min_element(y.begin(), y.end());
  tables.y_max = *std::max_element(y.begin(), y.end());

  CrossFitDiagnostics diag;
  for (int t = 1; t <= tau; ++t) fit_propensities(t, source, d, folds, pair, ms, tables, &diag);

  PooledDataset parent = PooledDataset::base(d.rows(), ms, folds.fold_of);
  std::vector<double> dz_next(y.begin(), y.end());
  std::vector<double> dm_next(d.rows(), 1.0);
  std::vector<PooledDataset> pooled_chain;
  std::vector<std::vector<double>> DL(static_cast<std::size_t>(tau)), DZ(DL.size()), DM(DL.size());
  const auto& mcols = s.M;
  for (int t = tau; t >= 1; --t) {
    PooledDataset p = expand_pooled(parent, t);
    TimeNuisance& tn = tables[t];
    tn.GM = mediator_ratios(t, d, p, tables);
    tn.QL = regress_QL(t, source, d, p, dz_next, pair, tables, &diag);
    auto dl = compute_DL(p, tn.GM, tn.QL, dz_next);
    tn.QZ = regress_QZ(t, source, d, p, dl, pair, tables, &diag);
    auto dz = compute_DZ(p, tn.GA_prime, tn.QZ, dl);
    tn.QM = regress_QM(t, source, d, p, dm_next, pair, &diag);
    std::vector<double> match(p.size(), 0.0);
    const auto& mcol = d.column(mcols[t - 1]);
    for (std::size_t r = 0; r < p.size(); ++r) {
      const std::size_t i = p.source(r);
      match[r] = d.node_available(i, NodeKind::M, t) && mcol[i] == p.mediator_value(r) ? 1.0 : 0.0;
    }
    auto dm = compute_DM(p, tn.GA_star, tn.QM, match, dm_next);
    const auto k = static_cast<std::size_t>(t - 1);
    DL[k] = std::move(dl);
    DZ[k] = dz;
    DM[k] = dm;
    dz_next = std::move(dz);
    dm_next = std::move(dm);
    if (trace) pooled_chain.insert(pooled_chain.begin(), p);
    parent = std::move(p);
  }

  EstimateReport report;
  report.n = d.rows();
  report.paths = estimate_paths(parent, dz_next, dm_next, d.weights());
  estimate_theta(parent, dz_next, dm_next, d, alpha, report);
  report.truncated = tables.truncated;
  report.fallbacks = diag.fallbacks;
  report.unseen_strata = diag.unseen_strata;
  report.warnings = diag.warnings;
  report.folds = folds.folds;
  report.seed = folds.seed;
  report.fold_of = folds.fold_of;
  if (trace) {
    trace->pooled = std::move(pooled_chain);
    trace->tables = std::move(tables);
    trace->DL = std::move(DL);
    trace->DZ = std::move(DZ);
    trace->DM = std::move(DM);
  }
  return report;
}

// Algorithm entry point with learner-based nuisances and seeded folds.
inline EstimateReport estimate(const LongitudinalDataset& data, const InterventionPair& pair,
                               const EstimatorConfig& config, EstimationTrace* trace = nullptr) {
  config.check();
  const FoldPartition folds = make_folds(data.rows(), config.folds, config.seed);
  LearnerNuisance source(config.learners, config.seed);
  return estimate_with(data, pair, folds, source, config.g_floor, config.alpha, trace);
}

// theta(first) - theta(second), with the standard error from the per-
// observation EIF differences. Both runs must share a fold partition.
inline ContrastEstimate contrast(const std::string& name, const EstimateReport& first, const EstimateReport& second,
                                 std::span<const double> weights, double n_eff, double alpha) {
  if (first.fold_of != second.fold_of || first.folds != second.folds)
    throw ValidationError("contrast '" + name + "': runs use different fold partitions");
  std::vector<double> diff(first.eif.size());
  for (std::size_t i = 0; i < diff.size(); ++i) diff[i] = first.eif[i] - second.eif[i];
  const auto [mean, var] = weighted_moments(diff, weights);
  (void)mean;
  ContrastEstimate c;
  c.name = name;
  c.estimate = first.theta - second.theta;
  c.se = n_eff > 0 ? std::sqrt(var / n_eff) : 0.0;
  const double z = z_value(alpha);
  c.ci_lo = c.estimate - z * c.se;
  c.ci_hi = c.estimate + z * c.se;
  return c;
}

struct ContrastRuns {
  EstimateReport cross;       // theta(a', a*)
  EstimateReport treated;     // theta(a', a')
  EstimateReport untreated;   // theta(a*, a*)
  std::vector<ContrastEstimate> contrasts;  // direct, indirect, total
};

// direct = theta(a',a*) - theta(a*,a*); indirect = theta(a',a') - theta(a',a*);
// total = direct + indirect. The three runs share folds and learners.
inline ContrastRuns estimate_contrasts(const LongitudinalDataset& data, const InterventionPair& pair,
                                       const EstimatorConfig& config) {
  config.check();
  const LongitudinalDataset d = data.validated() ? data : validated_or_throw(data);
  const FoldPartition folds = make_folds(d.rows(), config.folds, config.seed);
  auto run = [&](const InterventionPair& p) {
    LearnerNuisance source(config.learners, config.seed);
    return estimate_with(d, p, folds, source, config.g_floor, config.alpha);
  };
  ContrastRuns out;
  out.cross = run(pair);
  out.treated = run({pair.a_prime, pair.a_prime});
  out.untreated = run({pair.a_star, pair.a_star});
  const double n_eff = effective_n(d);
  out.contrasts.push_back(contrast("direct", out.cross, out.untreated, d.weights(), n_eff, config.alpha));
  out.contrasts.push_back(contrast("indirect", out.treated, out.cross, d.weights(), n_eff, config.alpha));
  out.contrasts.push_back(contrast("total", out.treated, out.untreated, d.weights(), n_eff, config.alpha));
  out.cross.contrasts = out.contrasts;
  return out;
}

inline nlohmann::ordered_json to_json(const EstimateReport& r) {
  nlohmann::ordered_json j;
  j["theta"] = r.theta;
  j["se"] = r.se;
  j["ci"] = {r.ci_lo, r.ci_hi};
  j["alpha"] = r.alpha;
  j["n"] = r.n;
  auto& paths = j["paths"] = nlohmann::ordered_json::array();
  for (const auto& p : r.paths) paths.push_back({{"m", p.m}, {"phi", p.phi}, {"lambda", p.lambda}});
  auto& contrasts = j["contrasts"] = nlohmann::ordered_json::array();
  for (const auto& c : r.contrasts)
    contrasts.push_back({{"name", c.name}, {"estimate", c.estimate}, {"se", c.se}, {"ci", {c.ci_lo, c.ci_hi}}});
  j["diagnostics"] = {{"truncated_weights", r.truncated},
                      {"folds", r.folds},
                      {"seed", r.seed},
                      {"fallbacks", r.fallbacks},
                      {"unseen_strata", r.unseen_strata},
                      {"warnings", r.warnings}};
  return j;
}

}  // namespace lmed
