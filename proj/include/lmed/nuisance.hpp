#pragma once

// Nuisance estimation on pooled datasets: treatment and mediator
// propensities with their ratio variables, and the three sequential
// regression families Q_L, Q_Z, Q_M.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "lmed/error.hpp"
#include "lmed/learners.hpp"
#include "lmed/pooled.hpp"
#include "lmed/schema.hpp"

namespace lmed {

inline constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

struct InterventionPair {
  std::vector<double> a_prime;
  std::vector<double> a_star;

  void check(const NodeSchema& s) const {
    if (static_cast<int>(a_prime.size()) != s.tau || static_cast<int>(a_star.size()) != s.tau)
      throw ValidationError("intervention regimes need one value per time point (tau=" + std::to_string(s.tau) + ")");
    for (int t = 0; t < s.tau; ++t)
      if (s.is_censored_level(a_prime[t]) || s.is_censored_level(a_star[t]))
        throw ValidationError("intervention selects a censored treatment level at t=" + std::to_string(t + 1));
  }
};

enum class Family { treatment, mediator, QL, QZ, QM };

inline const char* to_string(Family f) {
  switch (f) {
    case Family::treatment: return "treatment";
    case Family::mediator: return "mediator";
    case Family::QL: return "QL";
    case Family::QZ: return "QZ";
    case Family::QM: return "QM";
  }
  return "?";
}

inline Family family_from_string(const std::string& s) {
  for (Family f : {Family::treatment, Family::mediator, Family::QL, Family::QZ, Family::QM})
    if (s == to_string(f)) return f;
  throw ValidationError("unknown nuisance family '" + s + "'");
}

// Design matrix of `columns` read from the source observations.
inline Design source_design(const LongitudinalDataset& d, const std::vector<std::string>& columns) {
  Design out;
  out.x.resize(static_cast<Eigen::Index>(d.rows()), static_cast<Eigen::Index>(columns.size()));
  for (std::size_t c = 0; c < columns.size(); ++c) {
    const auto& col = d.column(columns[c]);
    for (std::size_t i = 0; i < d.rows(); ++i) out.x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = col[i];
    out.categorical.push_back(d.schema().is_categorical(columns[c]));
  }
  return out;
}

// Design over pooled rows: suffix values (m_t..m_tau) followed by the history
// columns of each row's source observation.
inline Design pooled_design(const LongitudinalDataset& d, const PooledDataset& p, const std::vector<std::string>& history) {
  const int t = p.t();
  const int tau = p.supports().tau();
  const std::size_t suffix_cols = static_cast<std::size_t>(tau - t + 1);
  Design out;
  out.x.resize(static_cast<Eigen::Index>(p.size()), static_cast<Eigen::Index>(suffix_cols + history.size()));
  for (std::size_t r = 0; r < p.size(); ++r) {
    const std::size_t suf = p.suffix(r);
    for (int k = t; k <= tau; ++k)
      out.x(static_cast<Eigen::Index>(r), k - t) = p.supports().value_at(suf, t, k);
  }
  for (std::size_t c = 0; c < history.size(); ++c) {
    const auto& col = d.column(history[c]);
    const auto cc = static_cast<Eigen::Index>(suffix_cols + c);
    for (std::size_t r = 0; r < p.size(); ++r) out.x(static_cast<Eigen::Index>(r), cc) = col[p.source(r)];
  }
  out.categorical.assign(suffix_cols, true);
  for (const auto& h : history) out.categorical.push_back(d.schema().is_categorical(h));
  return out;
}

// ---------------------------------------------------------------------------
// Nuisance sources

struct PropensityTask {
  Family family = Family::treatment;  // treatment or mediator
  int t = 1;
  const LongitudinalDataset* data = nullptr;
  const FoldPartition* folds = nullptr;
  std::vector<double> levels;         // sorted label set
  const Design* design = nullptr;     // H_{A,t} or H_{M,t} on source rows
  std::span<const double> labels;     // observed A_t or M_t
  std::span<const char> available;    // history observed
};

struct RegressionTask {
  Family family = Family::QL;
  int t = 1;
  const LongitudinalDataset* data = nullptr;
  const PooledDataset* pooled = nullptr;
  const Design* design = nullptr;     // (ubar m_t, history) on pooled rows
  std::span<const double> outcome;    // pseudo-outcome per pooled row (NaN = none)
  std::span<const char> train_filter;
  std::span<const char> available;
  const InterventionPair* pair = nullptr;
};

// Supplies fitted (or exact) nuisance values to the estimator.
class NuisanceSource {
 public:
  virtual ~NuisanceSource() = default;
  // rows x levels class probabilities, out-of-fold for each source row.
  virtual Eigen::MatrixXd propensity(const PropensityTask& task, CrossFitDiagnostics* diag) = 0;
  // Out-of-fold predictions for every available pooled row (NaN elsewhere).
  virtual std::vector<double> regression(const RegressionTask& task, CrossFitDiagnostics* diag) = 0;
};

// Learner candidates per family; a single candidate skips selection.
struct LearnerConfig {
  // Default library per family: main-effects logistic and the saturated
  // stratum mean, picked by inner cross-validation.
  std::array<std::vector<LearnerSpec>, 5> candidates{default_library(), default_library(), default_library(),
                                                      default_library(), default_library()};

  static std::vector<LearnerSpec> default_library() {
    return {LearnerSpec::logistic_ridge(0.0), LearnerSpec::stratum_mean()};
  }

  std::vector<LearnerSpec>& operator[](Family f) { return candidates[static_cast<std::size_t>(f)]; }
  const std::vector<LearnerSpec>& operator[](Family f) const { return candidates[static_cast<std::size_t>(f)]; }

  static LearnerConfig uniform(const LearnerSpec& s) {
    LearnerConfig c;
    for (auto& v : c.candidates) v = {s};
    return c;
  }
};

inline nlohmann::json to_json(const LearnerConfig& c) {
  nlohmann::json j = nlohmann::json::object();
  for (Family f : {Family::treatment, Family::mediator, Family::QL, Family::QZ, Family::QM}) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& s : c[f]) arr.push_back(to_json(s));
    j[to_string(f)] = arr;
  }
  return j;
}

// Accepts {"treatment": spec-or-list, ...}; unnamed families keep defaults.
inline LearnerConfig learner_config_from_json(const nlohmann::json& j, LearnerConfig base = {}) {
  for (const auto& [name, value] : j.items()) {
    std::vector<LearnerSpec> specs;
    if (value.is_array()) {
      for (const auto& v : value) specs.push_back(learner_from_json(v));
    } else {
      specs.push_back(learner_from_json(value));
    }
    if (specs.empty()) throw ValidationError("no learner given for family '" + name + "'");
    base[family_from_string(name)] = std::move(specs);
  }
  return base;
}

class LearnerNuisance final : public NuisanceSource {
 public:
  explicit LearnerNuisance(LearnerConfig config, std::uint64_t seed = 0) : config_(std::move(config)), seed_(seed) {}

  Eigen::MatrixXd propensity(const PropensityTask& task, CrossFitDiagnostics* diag) override {
    const auto& d = *task.data;
    CrossFitProblem pb;
    pb.design = task.design;
    pb.outcome = task.labels;
    pb.weights = d.weights();
    pb.fold = task.folds->fold_of;
    pb.folds = task.folds->folds;
    pb.available = task.available;
    pb.seed = seed_ ^ splitmix64(static_cast<std::uint64_t>(task.t) * 8 + static_cast<std::uint64_t>(task.family));
    pb.label = std::string(to_string(task.family)) + "," + std::to_string(task.t);
    return cross_fit_classes(config_[task.family], pb, task.levels, diag);
  }

  std::vector<double> regression(const RegressionTask& task, CrossFitDiagnostics* diag) override {
    const auto& p = *task.pooled;
    std::vector<int> fold(p.size());
    std::vector<double> w;
    const auto& src_w = task.data->weights();
    if (!src_w.empty()) w.resize(p.size());
    for (std::size_t r = 0; r < p.size(); ++r) {
      fold[r] = p.fold(r);
      if (!w.empty()) w[r] = src_w[p.source(r)];
    }
    CrossFitProblem pb;
    pb.design = task.design;
    pb.outcome = task.outcome;
    pb.weights = w;
    pb.fold = fold;
    pb.folds = static_cast<int>(1 + *std::max_element(p.source_folds().begin(), p.source_folds().end()));
    pb.available = task.available;
    pb.train_filter = task.train_filter;
    pb.seed = seed_ ^ splitmix64(static_cast<std::uint64_t>(task.t) * 8 + static_cast<std::uint64_t>(task.family));
    pb.label = std::string(to_string(task.family)) + "," + std::to_string(task.t);
    return cross_fit_mean(config_[task.family], pb, diag);
  }

  const LearnerConfig& config() const { return config_; }

 private:
  LearnerConfig config_;
  std::uint64_t seed_;
};

// ---------------------------------------------------------------------------
// Tables

struct TimeNuisance {
  // Source-level (n rows).
  std::vector<double> gA_prime, gA_star;  // g_{A,t}(a'_t | H), g_{A,t}(a*_t | H)
  std::vector<double> GA_prime, GA_star;  // ratio variables
  Eigen::MatrixXd gM;                     // n x J_t, g_{M,t}(m | H_{M,t})
  // Pooled-level (|D_t^+| rows).
  std::vector<double> GM;                 // 1{M_t = m_t} / g_{M,t}(m_t | H)
  std::vector<double> QL, QZ, QM;
};

struct NuisanceTables {
  double g_floor = 0.01;
  std::size_t truncated = 0;
  std::vector<TimeNuisance> at;  // at[t-1]
  double y_min = 0.0, y_max = 0.0;

  TimeNuisance& operator[](int t) { return at.at(static_cast<std::size_t>(t - 1)); }
  const TimeNuisance& operator[](int t) const { return at.at(static_cast<std::size_t>(t - 1)); }
};

namespace detail {

inline std::vector<double> observed_levels(const LongitudinalDataset& d, const std::string& column, NodeKind kind, int t) {
  std::vector<double> out;
  const auto& col = d.column(column);
  for (std::size_t i = 0; i < d.rows(); ++i)
    if (d.node_available(i, kind, t) && !is_missing(col[i])) out.push_back(col[i]);
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

inline double level_probability(const Eigen::MatrixXd& probs, std::size_t row, std::span<const double> levels, double v) {
  const auto k = label_index(levels, v);
  if (k == levels.size()) return 0.0;
  return probs(static_cast<Eigen::Index>(row), static_cast<Eigen::Index>(k));
}

}  // namespace detail

// Fits g_{A,t} and g_{M,t} on the unexpanded observations (out-of-fold) and
// forms the treatment ratio variables G'_{A,t}, G*_{A,t}.
inline void fit_propensities(int t, NuisanceSource& source, const LongitudinalDataset& d, const FoldPartition& folds,
                             const InterventionPair& pair, const MediatorSupports& supports, NuisanceTables& tables,
                             CrossFitDiagnostics* diag) {
  const NodeSchema& s = d.schema();
  const std::size_t n = d.rows();
  TimeNuisance& tn = tables[t];

  // Treatment.
  {
    const Design x = source_design(d, history_columns(s, NodeKind::A, t).columns);
    std::vector<char> avail(n);
    for (std::size_t i = 0; i < n; ++i) avail[i] = d.history_available(i, NodeKind::A, t);
    std::vector<double> levels = detail::observed_levels(d, s.A[t - 1], NodeKind::A, t);
    PropensityTask task{Family::treatment, t, &d, &folds, levels, &x, d.column(s.A[t - 1]), avail};
    const Eigen::MatrixXd probs = source.propensity(task, diag);
    const auto& a = d.column(s.A[t - 1]);
    tn.gA_prime.assign(n, kNaN);
    tn.gA_star.assign(n, kNaN);
    tn.GA_prime.assign(n, 0.0);
    tn.GA_star.assign(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      if (!avail[i]) continue;
      tn.gA_prime[i] = detail::level_probability(probs, i, levels, pair.a_prime[t - 1]);
      tn.gA_star[i] = detail::level_probability(probs, i, levels, pair.a_star[t - 1]);
      if (a[i] == pair.a_prime[t - 1]) {
        if (tn.gA_prime[i] < tables.g_floor) ++tables.truncated;
        tn.GA_prime[i] = 1.0 / std::max(tn.gA_prime[i], tables.g_floor);
      }
      if (a[i] == pair.a_star[t - 1]) {
        if (tn.gA_star[i] < tables.g_floor && pair.a_star[t - 1] != pair.a_prime[t - 1]) ++tables.truncated;
        tn.GA_star[i] = 1.0 / std::max(tn.gA_star[i], tables.g_floor);
      }
    }
  }

  // Mediator.
  {
    const Design x = source_design(d, history_columns(s, NodeKind::M, t).columns);
    std::vector<char> avail(n);
    for (std::size_t i = 0; i < n; ++i) avail[i] = d.history_available(i, NodeKind::M, t);
    const auto& levels = supports.at(t);
    PropensityTask task{Family::mediator, t, &d, &folds, levels, &x, d.column(s.M[t - 1]), avail};
    tn.gM = source.propensity(task, diag);
    const auto& m = d.column(s.M[t - 1]);
    for (std::size_t i = 0; i < n; ++i) {
      if (!avail[i]) continue;
      if (detail::level_probability(tn.gM, i, levels, m[i]) < tables.g_floor) ++tables.truncated;
    }
  }
}

// G_{M,t} on pooled rows, indexed by the row's pooled m_t.
inline std::vector<double> mediator_ratios(int t, const LongitudinalDataset& d, const PooledDataset& p,
                                           const NuisanceTables& tables) {
  const auto& m = d.column(d.schema().M[t - 1]);
  const TimeNuisance& tn = tables[t];
  std::vector<double> out(p.size(), 0.0);
  for (std::size_t r = 0; r < p.size(); ++r) {
    const std::size_t i = p.source(r);
    if (!d.node_available(i, NodeKind::M, t) || m[i] != p.mediator_value(r)) continue;
    const double g = tn.gM(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(p.mediator_index(r)));
    out[r] = 1.0 / std::max(g, tables.g_floor);
  }
  return out;
}

namespace detail {

inline std::vector<double> run_regression(Family family, int t, NuisanceSource& source, const LongitudinalDataset& d,
                                          const PooledDataset& p, NodeKind history, std::vector<double> outcome,
                                          std::vector<char> filter, const InterventionPair& pair,
                                          CrossFitDiagnostics* diag) {
  const Design x = pooled_design(d, p, history_columns(d.schema(), history, t).columns);
  std::vector<char> avail(p.size());
  for (std::size_t r = 0; r < p.size(); ++r) avail[r] = d.history_available(p.source(r), history, t);
  RegressionTask task{family, t, &d, &p, &x, outcome, filter, avail, &pair};
  return source.regression(task, diag);
}

inline void clip_column(std::vector<double>& v, double lo, double hi) {
  for (auto& x : v)
    if (!std::isnan(x)) x = std::clamp(x, lo, hi);
}

}  // namespace detail

// Q_{L,t}: regress D_{Z,t+1} (parent rows) on (ubar m_t, H_{M,t}) among rows
// whose observed M_t equals the pooled m_t. `dz_next` is indexed by rows of
// D_{t+1}^+.
inline std::vector<double> regress_QL(int t, NuisanceSource& source, const LongitudinalDataset& d,
                                      const PooledDataset& p, std::span<const double> dz_next,
                                      const InterventionPair& pair, const NuisanceTables& tables,
                                      CrossFitDiagnostics* diag) {
  const auto& m = d.column(d.schema().M[t - 1]);
  std::vector<double> y(p.size(), kNaN);
  std::vector<char> filter(p.size(), 0);
  for (std::size_t r = 0; r < p.size(); ++r) {
    const std::size_t i = p.source(r);
    if (!d.node_available(i, NodeKind::M, t)) continue;
    y[r] = dz_next[p.parent(r)];
    filter[r] = m[i] == p.mediator_value(r);
  }
  auto q = detail::run_regression(Family::QL, t, source, d, p, NodeKind::M, std::move(y), std::move(filter), pair, diag);
  detail::clip_column(q, tables.y_min, tables.y_max);
  return q;
}

// Q_{Z,t}: regress D_{L,t} on (ubar m_t, H_{A,t}) among rows with A_t = a'_t.
inline std::vector<double> regress_QZ(int t, NuisanceSource& source, const LongitudinalDataset& d,
                                      const PooledDataset& p, std::span<const double> dl,
                                      const InterventionPair& pair, const NuisanceTables& tables,
                                      CrossFitDiagnostics* diag) {
  const auto& a = d.column(d.schema().A[t - 1]);
  std::vector<double> y(p.size(), kNaN);
  std::vector<char> filter(p.size(), 0);
  for (std::size_t r = 0; r < p.size(); ++r) {
    const std::size_t i = p.source(r);
    if (!d.node_available(i, NodeKind::A, t)) continue;
    filter[r] = a[i] == pair.a_prime[t - 1];
    if (filter[r]) y[r] = dl[r];
  }
  auto q = detail::run_regression(Family::QZ, t, source, d, p, NodeKind::A, std::move(y), std::move(filter), pair, diag);
  detail::clip_column(q, tables.y_min, tables.y_max);
  return q;
}

// Q_{M,t}: regress 1{M_t = m_t} D_{M,t+1} on (ubar m_t, H_{A,t}) among rows
// with A_t = a*_t. `dm_next` is indexed by rows of D_{t+1}^+.
inline std::vector<double> regress_QM(int t, NuisanceSource& source, const LongitudinalDataset& d,
                                      const PooledDataset& p, std::span<const double> dm_next,
                                      const InterventionPair& pair, CrossFitDiagnostics* diag) {
  const auto& a = d.column(d.schema().A[t - 1]);
  const auto& m = d.column(d.schema().M[t - 1]);
  std::vector<double> y(p.size(), kNaN);
  std::vector<char> filter(p.size(), 0);
  for (std::size_t r = 0; r < p.size(); ++r) {
    const std::size_t i = p.source(r);
    if (!d.node_available(i, NodeKind::A, t)) continue;
    filter[r] = a[i] == pair.a_star[t - 1];
    if (!filter[r] || !d.node_available(i, NodeKind::M, t)) continue;
    y[r] = m[i] == p.mediator_value(r) ? dm_next[p.parent(r)] : 0.0;
  }
  auto q = detail::run_regression(Family::QM, t, source, d, p, NodeKind::A, std::move(y), std::move(filter), pair, diag);
  detail::clip_column(q, 0.0, 1.0);
  return q;
}

}  // namespace lmed
