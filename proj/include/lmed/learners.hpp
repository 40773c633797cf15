#pragma once

// Regression learners, fold partitions and the generic cross-fitting
// procedure (fit on out-of-fold rows, predict on in-fold rows).

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "lmed/error.hpp"
#include "lmed/rng.hpp"

namespace lmed {

enum class LearnerKind { constant, stratum_mean, linear_ridge, logistic_ridge };
enum class PredictionType { mean, probability };

inline constexpr double kProbabilityClip = 1e-6;
inline constexpr int kMaxSolverIterations = 200;
inline constexpr double kSolverTolerance = 1e-8;

struct LearnerSpec {
  LearnerKind kind = LearnerKind::stratum_mean;
  double ridge = 0.0;      // penalty for linear/logistic ridge (intercept unpenalized)
  double smoothing = 0.0;  // Laplace pseudo-count for stratum means

  static LearnerSpec constant() { return {LearnerKind::constant, 0.0, 0.0}; }
  static LearnerSpec stratum_mean(double smoothing = 0.0) { return {LearnerKind::stratum_mean, 0.0, smoothing}; }
  static LearnerSpec linear_ridge(double ridge) { return {LearnerKind::linear_ridge, ridge, 0.0}; }
  static LearnerSpec logistic_ridge(double ridge) { return {LearnerKind::logistic_ridge, ridge, 0.0}; }
};

inline std::string to_string(LearnerKind k) {
  switch (k) {
    case LearnerKind::constant: return "constant";
    case LearnerKind::stratum_mean: return "stratum-mean";
    case LearnerKind::linear_ridge: return "linear-ridge";
    case LearnerKind::logistic_ridge: return "logistic-ridge";
  }
  return "?";
}

inline LearnerKind learner_kind_from_string(const std::string& s) {
  if (s == "constant") return LearnerKind::constant;
  if (s == "stratum-mean") return LearnerKind::stratum_mean;
  if (s == "linear-ridge") return LearnerKind::linear_ridge;
  if (s == "logistic-ridge") return LearnerKind::logistic_ridge;
  throw ValidationError("unknown learner kind '" + s + "'");
}

inline nlohmann::json to_json(const LearnerSpec& s) {
  return {{"kind", to_string(s.kind)}, {"ridge", s.ridge}, {"smoothing", s.smoothing}};
}

inline LearnerSpec learner_from_json(const nlohmann::json& j) {
  LearnerSpec s;
  if (j.is_string()) {
    s.kind = learner_kind_from_string(j.get<std::string>());
    return s;
  }
  s.kind = learner_kind_from_string(j.at("kind").get<std::string>());
  s.ridge = j.value("ridge", 0.0);
  s.smoothing = j.value("smoothing", 0.0);
  if (s.ridge < 0.0 || s.smoothing < 0.0) throw ValidationError("learner hyperparameters must be >= 0");
  return s;
}

// Predictor matrix plus a categorical flag per column.
struct Design {
  Eigen::MatrixXd x;
  std::vector<bool> categorical;

  std::size_t rows() const { return static_cast<std::size_t>(x.rows()); }
  std::size_t cols() const { return static_cast<std::size_t>(x.cols()); }
};

// ---------------------------------------------------------------------------
// Folds

struct FoldPartition {
  int folds = 1;
  std::uint64_t seed = 0;
  std::vector<int> fold_of;  // per source observation, in [0, folds)

  std::size_t size_of(int v) const {
    return static_cast<std::size_t>(std::count(fold_of.begin(), fold_of.end(), v));
  }
};

// Seeded random partition into V folds whose sizes differ by at most one.
inline FoldPartition make_folds(std::size_t n, int folds, std::uint64_t seed) {
  if (folds < 1) throw ValidationError("number of folds must be >= 1");
  if (n > 0 && static_cast<std::size_t>(folds) > n) throw ValidationError("more folds than observations");
  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;
  Rng rng = Rng::stream(seed, 0xf01d);
  rng.shuffle(perm);
  FoldPartition p{folds, seed, std::vector<int>(n, 0)};
  for (std::size_t k = 0; k < n; ++k) p.fold_of[perm[k]] = static_cast<int>(k % static_cast<std::size_t>(folds));
  return p;
}

// ---------------------------------------------------------------------------
// Encoders

namespace detail {

inline double weight_at(std::span<const double> w, std::size_t i) { return w.empty() ? 1.0 : w[i]; }

// Exact joint key of the raw predictor values, learned from training rows.
class StratumIndex {
 public:
  StratumIndex(const Design& d, std::span<const std::size_t> rows) {
    const std::size_t p = d.cols();
    levels_.resize(p);
    for (std::size_t c = 0; c < p; ++c) {
      auto& lv = levels_[c];
      lv.reserve(rows.size());
      for (auto r : rows) lv.push_back(d.x(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)));
      std::sort(lv.begin(), lv.end());
      lv.erase(std::unique(lv.begin(), lv.end()), lv.end());
    }
    double space = 1.0;
    for (const auto& lv : levels_) space *= static_cast<double>(std::max<std::size_t>(lv.size(), 1));
    packed_ = space < 9.0e18;
  }

  // Stratum key for a row, or nullopt if some value was never seen in training.
  std::optional<std::uint64_t> packed_key(const Design& d, std::size_t row) const {
    std::uint64_t key = 0;
    for (std::size_t c = 0; c < levels_.size(); ++c) {
      auto idx = level_of(c, d.x(static_cast<Eigen::Index>(row), static_cast<Eigen::Index>(c)));
      if (!idx) return std::nullopt;
      key = key * levels_[c].size() + *idx;
    }
    return key;
  }

  std::optional<std::vector<std::uint32_t>> wide_key(const Design& d, std::size_t row) const {
    std::vector<std::uint32_t> key(levels_.size());
    for (std::size_t c = 0; c < levels_.size(); ++c) {
      auto idx = level_of(c, d.x(static_cast<Eigen::Index>(row), static_cast<Eigen::Index>(c)));
      if (!idx) return std::nullopt;
      key[c] = static_cast<std::uint32_t>(*idx);
    }
    return key;
  }

  bool packed() const { return packed_; }

 private:
  std::optional<std::size_t> level_of(std::size_t c, double v) const {
    const auto& lv = levels_[c];
    auto it = std::lower_bound(lv.begin(), lv.end(), v);
    if (it == lv.end() || *it != v) return std::nullopt;
    return static_cast<std::size_t>(it - lv.begin());
  }

  std::vector<std::vector<double>> levels_;
  bool packed_ = true;
};

// Maps stratum keys to dense ids.
class StratumTable {
 public:
  StratumTable(const Design& d, std::span<const std::size_t> rows) : index_(d, rows) {}

  std::optional<std::size_t> find(const Design& d, std::size_t row) const {
    if (index_.packed()) {
      auto k = index_.packed_key(d, row);
      if (!k) return std::nullopt;
      auto it = packed_ids_.find(*k);
      if (it == packed_ids_.end()) return std::nullopt;
      return it->second;
    }
    auto k = index_.wide_key(d, row);
    if (!k) return std::nullopt;
    auto it = wide_ids_.find(*k);
    if (it == wide_ids_.end()) return std::nullopt;
    return it->second;
  }

  std::size_t insert(const Design& d, std::size_t row) {
    if (index_.packed()) {
      auto k = *index_.packed_key(d, row);
      auto [it, fresh] = packed_ids_.emplace(k, count_);
      if (fresh) ++count_;
      return it->second;
    }
    auto k = *index_.wide_key(d, row);
    auto [it, fresh] = wide_ids_.emplace(std::move(k), count_);
    if (fresh) ++count_;
    return it->second;
  }

  std::size_t size() const { return count_; }

 private:
  StratumIndex index_;
  std::unordered_map<std::uint64_t, std::size_t> packed_ids_;
  std::map<std::vector<std::uint32_t>, std::size_t> wide_ids_;
  std::size_t count_ = 0;
};

// Intercept + drop-first dummies for categorical columns + raw numeric columns.
class OneHotEncoder {
 public:
  OneHotEncoder(const Design& d, std::span<const std::size_t> rows) {
    const std::size_t p = d.cols();
    levels_.resize(p);
    width_ = 1;
    for (std::size_t c = 0; c < p; ++c) {
      if (d.categorical[c]) {
        auto& lv = levels_[c];
        for (auto r : rows) lv.push_back(d.x(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)));
        std::sort(lv.begin(), lv.end());
        lv.erase(std::unique(lv.begin(), lv.end()), lv.end());
        width_ += lv.empty() ? 0 : lv.size() - 1;
      } else {
        width_ += 1;
      }
    }
    categorical_ = d.categorical;
  }

  std::size_t width() const { return width_; }

  void encode(const Design& d, std::size_t row, Eigen::Ref<Eigen::VectorXd> out) const {
    out.setZero();
    out[0] = 1.0;
    Eigen::Index k = 1;
    for (std::size_t c = 0; c < levels_.size(); ++c) {
      const double v = d.x(static_cast<Eigen::Index>(row), static_cast<Eigen::Index>(c));
      if (categorical_[c]) {
        const auto& lv = levels_[c];
        if (lv.empty()) continue;
        auto it = std::lower_bound(lv.begin(), lv.end(), v);
        if (it != lv.end() && *it == v && it != lv.begin()) out[k + (it - lv.begin()) - 1] = 1.0;
        k += static_cast<Eigen::Index>(lv.size()) - 1;
      } else {
        out[k++] = v;
      }
    }
  }

  Eigen::MatrixXd matrix(const Design& d, std::span<const std::size_t> rows) const {
    Eigen::MatrixXd m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(width_));
    Eigen::VectorXd buf(static_cast<Eigen::Index>(width_));
    for (std::size_t i = 0; i < rows.size(); ++i) {
      encode(d, rows[i], buf);
      m.row(static_cast<Eigen::Index>(i)) = buf.transpose();
    }
    return m;
  }

 private:
  std::vector<std::vector<double>> levels_;
  std::vector<bool> categorical_;
  std::size_t width_ = 1;
};

inline double sigmoid(double eta) {
  if (eta >= 0) return 1.0 / (1.0 + std::exp(-eta));
  const double e = std::exp(eta);
  return e / (1.0 + e);
}

// log(1 + exp(eta)) without overflow.
inline double softplus(double eta) { return eta > 0 ? eta + std::log1p(std::exp(-eta)) : std::log1p(std::exp(eta)); }

}  // namespace detail

// ---------------------------------------------------------------------------
// Fitted models

class MeanModel {
 public:
  virtual ~MeanModel() = default;
  virtual double predict(const Design& d, std::size_t row) const = 0;
  // Rows whose stratum was never seen in training (stratum-mean only).
  virtual bool unseen(const Design&, std::size_t) const { return false; }
};

// Class probabilities over a fixed, sorted label set.
class ClassModel {
 public:
  virtual ~ClassModel() = default;
  virtual void predict(const Design& d, std::size_t row, std::span<double> out) const = 0;
  virtual bool unseen(const Design&, std::size_t) const { return false; }
};

namespace detail {

class ConstantMean final : public MeanModel {
 public:
  explicit ConstantMean(double v) : value_(v) {}
  double predict(const Design&, std::size_t) const override { return value_; }

 private:
  double value_;
};

class StratumMean final : public MeanModel {
 public:
  StratumMean(const Design& d, std::span<const std::size_t> rows, std::span<const double> y,
              std::span<const double> w, double smoothing)
      : table_(d, rows) {
    double sw = 0.0, swy = 0.0;
    std::vector<double> acc_w, acc_wy;
    for (auto r : rows) {
      const std::size_t id = table_.insert(d, r);
      if (id >= acc_w.size()) {
        acc_w.resize(id + 1, 0.0);
        acc_wy.resize(id + 1, 0.0);
      }
      const double wr = weight_at(w, r);
      acc_w[id] += wr;
      acc_wy[id] += wr * y[r];
      sw += wr;
      swy += wr * y[r];
    }
    global_ = sw > 0 ? swy / sw : 0.0;
    means_.resize(acc_w.size());
    for (std::size_t k = 0; k < acc_w.size(); ++k) {
      const double denom = acc_w[k] + smoothing;
      means_[k] = denom > 0 ? (acc_wy[k] + smoothing * global_) / denom : global_;
    }
  }

  double predict(const Design& d, std::size_t row) const override {
    auto id = table_.find(d, row);
    return id ? means_[*id] : global_;
  }
  bool unseen(const Design& d, std::size_t row) const override { return !table_.find(d, row); }

 private:
  StratumTable table_;
  std::vector<double> means_;
  double global_ = 0.0;
};

class LinearRidge final : public MeanModel {
 public:
  LinearRidge(const Design& d, std::span<const std::size_t> rows, std::span<const double> y,
              std::span<const double> w, double ridge)
      : enc_(d, rows) {
    const Eigen::MatrixXd X = enc_.matrix(d, rows);
    const auto n = static_cast<Eigen::Index>(rows.size());
    Eigen::VectorXd wv(n), yv(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      wv[i] = weight_at(w, rows[static_cast<std::size_t>(i)]);
      yv[i] = y[rows[static_cast<std::size_t>(i)]];
    }
    Eigen::MatrixXd A = X.transpose() * wv.asDiagonal() * X;
    for (Eigen::Index k = 1; k < A.rows(); ++k) A(k, k) += ridge;
    const Eigen::VectorXd b = X.transpose() * (wv.array() * yv.array()).matrix();
    if (ridge > 0) {
      Eigen::LDLT<Eigen::MatrixXd> ldlt(A);
      beta_ = ldlt.solve(b);
    }
    if (ridge <= 0 || !beta_.allFinite()) beta_ = A.completeOrthogonalDecomposition().solve(b);
    if (!beta_.allFinite()) throw NumericError("linear-ridge: non-finite coefficients");
  }

  double predict(const Design& d, std::size_t row) const override {
    Eigen::VectorXd f(static_cast<Eigen::Index>(enc_.width()));
    enc_.encode(d, row, f);
    return f.dot(beta_);
  }

  const Eigen::VectorXd& coefficients() const { return beta_; }
  const OneHotEncoder& encoder() const { return enc_; }

 private:
  OneHotEncoder enc_;
  Eigen::VectorXd beta_;
};

struct LogisticFit {
  Eigen::VectorXd beta;
  int iterations = 0;
  double gradient_norm = 0.0;
};

// Penalized binomial likelihood by damped Newton steps; y may be fractional
// in [0, 1] (quasi-binomial). Stops when the weight-normalized gradient
// max-norm is <= kSolverTolerance or after kMaxSolverIterations.
inline LogisticFit fit_logistic(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, const Eigen::VectorXd& w,
                                double ridge) {
  const Eigen::Index p = X.cols();
  const double sw = std::max(w.sum(), std::numeric_limits<double>::min());
  Eigen::VectorXd pen = Eigen::VectorXd::Constant(p, ridge);
  pen[0] = 0.0;
  auto objective = [&](const Eigen::VectorXd& b) {
    const Eigen::VectorXd eta = X * b;
    double f = 0.0;
    for (Eigen::Index i = 0; i < eta.size(); ++i)
      f += w[i] * (softplus(eta[i]) - y[i] * eta[i]);
    return f + 0.5 * (pen.array() * b.array().square()).sum();
  };
  LogisticFit fit;
  fit.beta = Eigen::VectorXd::Zero(p);
  const double ybar = std::clamp((w.array() * y.array()).sum() / sw, 1e-6, 1 - 1e-6);
  fit.beta[0] = std::log(ybar / (1 - ybar));
  double f = objective(fit.beta);
  for (int it = 0; it < kMaxSolverIterations; ++it) {
    const Eigen::VectorXd eta = X * fit.beta;
    Eigen::VectorXd mu(eta.size()), curv(eta.size());
    for (Eigen::Index i = 0; i < eta.size(); ++i) {
      mu[i] = sigmoid(eta[i]);
      curv[i] = w[i] * mu[i] * (1 - mu[i]);
    }
    const Eigen::VectorXd grad =
        X.transpose() * (w.array() * (mu - y).array()).matrix() + (pen.array() * fit.beta.array()).matrix();
    fit.gradient_norm = grad.cwiseAbs().maxCoeff() / sw;
    fit.iterations = it;
    if (fit.gradient_norm <= kSolverTolerance) break;
    Eigen::MatrixXd H = X.transpose() * curv.asDiagonal() * X;
    H.diagonal() += pen;
    H.diagonal().array() += 1e-12 * sw;
    Eigen::VectorXd step = H.ldlt().solve(grad);
    if (!step.allFinite()) step = H.completeOrthogonalDecomposition().solve(grad);
    double scale = 1.0;
    bool moved = false;
    for (int half = 0; half < 40; ++half, scale *= 0.5) {
      const Eigen::VectorXd cand = fit.beta - scale * step;
      const double fc = objective(cand);
      if (fc <= f) {
        fit.beta = cand;
        f = fc;
        moved = true;
        break;
      }
    }
    if (!moved) break;
  }
  if (!fit.beta.allFinite()) throw NumericError("logistic-ridge: non-finite coefficients");
  return fit;
}

// Quasi-binomial regression of an outcome rescaled to [0, 1] by its training range.
class LogisticMean final : public MeanModel {
 public:
  LogisticMean(const Design& d, std::span<const std::size_t> rows, std::span<const double> y,
               std::span<const double> w, double ridge)
      : enc_(d, rows) {
    lo_ = std::numeric_limits<double>::infinity();
    hi_ = -lo_;
    for (auto r : rows) {
      lo_ = std::min(lo_, y[r]);
      hi_ = std::max(hi_, y[r]);
    }
    const auto n = static_cast<Eigen::Index>(rows.size());
    Eigen::VectorXd yv(n), wv(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto r = rows[static_cast<std::size_t>(i)];
      yv[i] = hi_ > lo_ ? (y[r] - lo_) / (hi_ - lo_) : 0.5;
      wv[i] = weight_at(w, r);
    }
    beta_ = fit_logistic(enc_.matrix(d, rows), yv, wv, ridge).beta;
  }

  double predict(const Design& d, std::size_t row) const override {
    if (!(hi_ > lo_)) return lo_;
    Eigen::VectorXd f(static_cast<Eigen::Index>(enc_.width()));
    enc_.encode(d, row, f);
    return lo_ + (hi_ - lo_) * sigmoid(f.dot(beta_));
  }

 private:
  OneHotEncoder enc_;
  Eigen::VectorXd beta_;
  double lo_ = 0.0, hi_ = 0.0;
};

inline std::size_t label_index(std::span<const double> levels, double v) {
  auto it = std::lower_bound(levels.begin(), levels.end(), v);
  if (it == levels.end() || *it != v) return levels.size();
  return static_cast<std::size_t>(it - levels.begin());
}

class ConstantClasses final : public ClassModel {
 public:
  explicit ConstantClasses(std::vector<double> p) : p_(std::move(p)) {}
  void predict(const Design&, std::size_t, std::span<double> out) const override {
    std::copy(p_.begin(), p_.end(), out.begin());
  }

 private:
  std::vector<double> p_;
};

inline std::vector<double> class_frequencies(std::span<const std::size_t> rows, std::span<const double> labels,
                                             std::span<const double> w, std::span<const double> levels,
                                             double smoothing) {
  std::vector<double> counts(levels.size(), 0.0);
  double total = 0.0;
  for (auto r : rows) {
    const auto k = label_index(levels, labels[r]);
    if (k == levels.size()) continue;
    counts[k] += weight_at(w, r);
    total += weight_at(w, r);
  }
  const double denom = total + smoothing * static_cast<double>(levels.size());
  for (auto& c : counts) c = denom > 0 ? (c + smoothing) / denom : 1.0 / static_cast<double>(levels.size());
  return counts;
}

class StratumClasses final : public ClassModel {
 public:
  StratumClasses(const Design& d, std::span<const std::size_t> rows, std::span<const double> labels,
                 std::span<const double> w, std::span<const double> levels, double smoothing)
      : table_(d, rows), k_(levels.size()) {
    global_ = class_frequencies(rows, labels, w, levels, smoothing);
    std::vector<double> counts;
    for (auto r : rows) {
      const std::size_t id = table_.insert(d, r);
      if ((id + 1) * k_ > counts.size()) counts.resize((id + 1) * k_, 0.0);
      const auto k = label_index(levels, labels[r]);
      if (k < k_) counts[id * k_ + k] += weight_at(w, r);
    }
    probs_.resize(counts.size());
    for (std::size_t s = 0; s * k_ < counts.size(); ++s) {
      double total = 0.0;
      for (std::size_t k = 0; k < k_; ++k) total += counts[s * k_ + k];
      const double denom = total + smoothing * static_cast<double>(k_);
      for (std::size_t k = 0; k < k_; ++k)
        probs_[s * k_ + k] = denom > 0 ? (counts[s * k_ + k] + smoothing) / denom : global_[k];
    }
  }

  void predict(const Design& d, std::size_t row, std::span<double> out) const override {
    auto id = table_.find(d, row);
    if (!id) {
      std::copy(global_.begin(), global_.end(), out.begin());
      return;
    }
    std::copy_n(probs_.begin() + static_cast<std::ptrdiff_t>(*id * k_), k_, out.begin());
  }
  bool unseen(const Design& d, std::size_t row) const override { return !table_.find(d, row); }

 private:
  StratumTable table_;
  std::size_t k_;
  std::vector<double> probs_;
  std::vector<double> global_;
};

// Binary: one logistic model. K > 2: one-vs-rest models renormalized to sum to one.
class LogisticClasses final : public ClassModel {
 public:
  LogisticClasses(const Design& d, std::span<const std::size_t> rows, std::span<const double> labels,
                  std::span<const double> w, std::span<const double> levels, double ridge)
      : enc_(d, rows), k_(levels.size()) {
    const Eigen::MatrixXd X = enc_.matrix(d, rows);
    const auto n = static_cast<Eigen::Index>(rows.size());
    Eigen::VectorXd wv(n);
    for (Eigen::Index i = 0; i < n; ++i) wv[i] = weight_at(w, rows[static_cast<std::size_t>(i)]);
    const std::size_t models = k_ == 2 ? 1 : k_;
    for (std::size_t m = 0; m < models; ++m) {
      const std::size_t target = k_ == 2 ? 1 : m;
      Eigen::VectorXd yv(n);
      for (Eigen::Index i = 0; i < n; ++i)
        yv[i] = label_index(levels, labels[rows[static_cast<std::size_t>(i)]]) == target ? 1.0 : 0.0;
      betas_.push_back(fit_logistic(X, yv, wv, ridge).beta);
    }
  }

  void predict(const Design& d, std::size_t row, std::span<double> out) const override {
    Eigen::VectorXd f(static_cast<Eigen::Index>(enc_.width()));
    enc_.encode(d, row, f);
    if (k_ == 1) {
      out[0] = 1.0;
      return;
    }
    if (k_ == 2) {
      out[1] = sigmoid(f.dot(betas_[0]));
      out[0] = 1.0 - out[1];
      return;
    }
    double total = 0.0;
    for (std::size_t m = 0; m < k_; ++m) total += (out[m] = sigmoid(f.dot(betas_[m])));
    for (std::size_t m = 0; m < k_; ++m) out[m] /= total;
  }

 private:
  OneHotEncoder enc_;
  std::size_t k_;
  std::vector<Eigen::VectorXd> betas_;
};

}  // namespace detail

// ---------------------------------------------------------------------------
// fit / predict

inline void require_training_rows(const Design& d, std::span<const std::size_t> rows, std::span<const double> y) {
  if (rows.empty()) throw ValidationError("learner: empty training subset");
  for (auto r : rows) {
    if (!std::isfinite(y[r])) throw NumericError("learner: non-finite outcome in training rows");
    for (Eigen::Index c = 0; c < d.x.cols(); ++c)
      if (!std::isfinite(d.x(static_cast<Eigen::Index>(r), c)))
        throw NumericError("learner: non-finite predictor in training rows");
  }
}

// Fits a mean regression of y on the design over `rows`.
inline std::unique_ptr<MeanModel> fit_mean(const LearnerSpec& spec, const Design& d, std::span<const std::size_t> rows,
                                           std::span<const double> y, std::span<const double> w = {}) {
  require_training_rows(d, rows, y);
  switch (spec.kind) {
    case LearnerKind::constant: {
      double sw = 0.0, swy = 0.0;
      for (auto r : rows) {
        sw += detail::weight_at(w, r);
        swy += detail::weight_at(w, r) * y[r];
      }
      return std::make_unique<detail::ConstantMean>(sw > 0 ? swy / sw : 0.0);
    }
    case LearnerKind::stratum_mean:
      return std::make_unique<detail::StratumMean>(d, rows, y, w, spec.smoothing);
    case LearnerKind::linear_ridge:
      return std::make_unique<detail::LinearRidge>(d, rows, y, w, spec.ridge);
    case LearnerKind::logistic_ridge:
      return std::make_unique<detail::LogisticMean>(d, rows, y, w, spec.ridge);
  }
  throw ValidationError("unknown learner");
}

// Fits class probabilities of `labels` over the sorted label set `levels`.
inline std::unique_ptr<ClassModel> fit_classes(const LearnerSpec& spec, const Design& d,
                                               std::span<const std::size_t> rows, std::span<const double> labels,
                                               std::span<const double> levels, std::span<const double> w = {}) {
  require_training_rows(d, rows, labels);
  if (levels.empty()) throw ValidationError("learner: empty label set");
  switch (spec.kind) {
    case LearnerKind::constant:
      return std::make_unique<detail::ConstantClasses>(
          detail::class_frequencies(rows, labels, w, levels, spec.smoothing));
    case LearnerKind::stratum_mean:
      return std::make_unique<detail::StratumClasses>(d, rows, labels, w, levels, spec.smoothing);
    case LearnerKind::linear_ridge:
      throw ValidationError("linear-ridge cannot produce class probabilities");
    case LearnerKind::logistic_ridge:
      return std::make_unique<detail::LogisticClasses>(d, rows, labels, w, levels, spec.ridge);
  }
  throw ValidationError("unknown learner");
}

// Renormalized class probabilities clipped to [kProbabilityClip, 1 - kProbabilityClip].
inline void predict_proba(const ClassModel& m, const Design& d, std::size_t row, std::span<double> out) {
  m.predict(d, row, out);
  double total = 0.0;
  for (double p : out) total += std::max(p, 0.0);
  for (auto& p : out) {
    p = total > 0 ? std::max(p, 0.0) / total : 1.0 / static_cast<double>(out.size());
    if (out.size() > 1) p = std::clamp(p, kProbabilityClip, 1.0 - kProbabilityClip);
  }
}

// ---------------------------------------------------------------------------
// Cross-fitting

struct CrossFitDiagnostics {
  std::size_t fallbacks = 0;      // folds whose filtered training subset was empty
  std::size_t unseen_strata = 0;  // predictions from an unseen stratum
  std::vector<std::string> warnings;

  void merge(const CrossFitDiagnostics& o) {
    fallbacks += o.fallbacks;
    unseen_strata += o.unseen_strata;
    warnings.insert(warnings.end(), o.warnings.begin(), o.warnings.end());
  }
};

// Inputs of one cross-fitted regression over a row set (pooled or not).
struct CrossFitProblem {
  const Design* design = nullptr;
  std::span<const double> outcome;     // numeric outcome, or labels for class fits
  std::span<const double> weights;     // empty = unit weights
  std::span<const int> fold;           // fold label per row
  int folds = 1;
  std::span<const char> available;     // predictors defined for the row
  std::span<const char> train_filter;  // row satisfies the subset condition (empty = all)
  std::uint64_t seed = 0;
  std::string label;                   // used in warnings
};

template <typename Model>
std::unique_ptr<Model> fit_any(const LearnerSpec& spec, const Design& d, std::span<const std::size_t> rows,
                               std::span<const double> y, std::span<const double> w, std::span<const double> levels);

template <>
inline std::unique_ptr<MeanModel> fit_any<MeanModel>(const LearnerSpec& spec, const Design& d,
                                                     std::span<const std::size_t> rows, std::span<const double> y,
                                                     std::span<const double> w, std::span<const double>) {
  return fit_mean(spec, d, rows, y, w);
}

template <>
inline std::unique_ptr<ClassModel> fit_any<ClassModel>(const LearnerSpec& spec, const Design& d,
                                                       std::span<const std::size_t> rows, std::span<const double> y,
                                                       std::span<const double> w, std::span<const double> levels) {
  return fit_classes(spec, d, rows, y, levels, w);
}

// Index of the candidate with the smallest V-fold cross-validated loss
// (weighted squared error for mean fits, negative log-likelihood for class
// fits). Ties keep the earlier candidate.
inline std::size_t select_learner(const std::vector<LearnerSpec>& candidates, PredictionType type, const Design& d,
                                  std::span<const std::size_t> rows, std::span<const double> y,
                                  std::span<const double> w, std::span<const double> levels, std::uint64_t seed,
                                  int folds = 5) {
  if (candidates.empty()) throw ValidationError("select_learner: no candidates");
  if (candidates.size() == 1) return 0;
  const int v_count = static_cast<int>(std::min<std::size_t>(static_cast<std::size_t>(folds), rows.size()));
  if (v_count < 2) return 0;
  const FoldPartition part = make_folds(rows.size(), v_count, seed);
  std::vector<double> loss(candidates.size(), 0.0);
  std::vector<double> probs(levels.size());
  for (int v = 0; v < v_count; ++v) {
    std::vector<std::size_t> train, test;
    for (std::size_t i = 0; i < rows.size(); ++i) (part.fold_of[i] == v ? test : train).push_back(rows[i]);
    if (train.empty() || test.empty()) continue;
    for (std::size_t c = 0; c < candidates.size(); ++c) {
      if (type == PredictionType::mean) {
        auto m = fit_mean(candidates[c], d, train, y, w);
        for (auto r : test) {
          const double e = y[r] - m->predict(d, r);
          loss[c] += detail::weight_at(w, r) * e * e;
        }
      } else {
        auto m = fit_classes(candidates[c], d, train, y, levels, w);
        for (auto r : test) {
          predict_proba(*m, d, r, probs);
          const auto k = detail::label_index(levels, y[r]);
          if (k < levels.size()) loss[c] -= detail::weight_at(w, r) * std::log(probs[k]);
        }
      }
    }
  }
  std::size_t best = 0;
  for (std::size_t c = 1; c < candidates.size(); ++c)
    if (loss[c] < loss[best]) best = c;
  return best;
}

namespace detail {

template <typename Model, typename Emit>
void cross_fit_impl(const std::vector<LearnerSpec>& candidates, PredictionType type, const CrossFitProblem& pb,
                    std::span<const double> levels, CrossFitDiagnostics* diag, Emit&& emit) {
  const Design& d = *pb.design;
  const std::size_t n = d.rows();
  auto is_available = [&](std::size_t r) { return pb.available.empty() || pb.available[r]; };
  auto passes = [&](std::size_t r) { return pb.train_filter.empty() || pb.train_filter[r]; };
  for (int v = 0; v < pb.folds; ++v) {
    std::vector<std::size_t> train, predict;
    for (std::size_t r = 0; r < n; ++r) {
      if (!is_available(r)) continue;
      const bool in_fold = pb.folds == 1 || pb.fold[r] == v;
      const bool trains = pb.folds == 1 || pb.fold[r] != v;
      if (in_fold) predict.push_back(r);
      if (trains && passes(r) && std::isfinite(pb.outcome[r])) train.push_back(r);
    }
    if (predict.empty()) continue;
    if (!train.empty()) {
      const std::size_t pick =
          select_learner(candidates, type, d, train, pb.outcome, pb.weights, levels, pb.seed + static_cast<unsigned>(v));
      auto model = fit_any<Model>(candidates[pick], d, train, pb.outcome, pb.weights, levels);
      for (auto r : predict) {
        if (model->unseen(d, r) && diag) ++diag->unseen_strata;
        emit(*model, d, r, r);
      }
      continue;
    }
    // Empty filtered subset: train on every out-of-fold row with the filter
    // indicator as an extra predictor, then predict with the indicator on.
    std::vector<std::size_t> fallback;
    for (std::size_t r = 0; r < n; ++r) {
      const bool trains = pb.folds == 1 || pb.fold[r] != v;
      if (trains && is_available(r) && std::isfinite(pb.outcome[r])) fallback.push_back(r);
    }
    if (fallback.empty()) throw ValidationError("cross_fit(" + pb.label + "): empty training subset in fold " +
                                                std::to_string(v));
    Design aug;
    aug.x.resize(d.x.rows(), d.x.cols() + 1);
    aug.x.leftCols(d.x.cols()) = d.x;
    for (std::size_t r = 0; r < n; ++r)
      aug.x(static_cast<Eigen::Index>(r), d.x.cols()) = passes(r) ? 1.0 : 0.0;
    aug.categorical = d.categorical;
    aug.categorical.push_back(true);
    Design query = aug;
    query.x.col(d.x.cols()).setOnes();
    const std::size_t pick = select_learner(candidates, type, aug, fallback, pb.outcome, pb.weights, levels,
                                            pb.seed + static_cast<unsigned>(v));
    auto model = fit_any<Model>(candidates[pick], aug, fallback, pb.outcome, pb.weights, levels);
    if (diag) {
      ++diag->fallbacks;
      diag->warnings.push_back("cross_fit(" + pb.label + "): empty filtered training subset in fold " +
                               std::to_string(v) + "; used unfiltered fallback");
    }
    for (auto r : predict) emit(*model, query, r, r);
  }
}

}  // namespace detail

// Out-of-fold mean predictions for every available row (NaN elsewhere).
// With one fold the model is fit on all rows and predicts all rows.
inline std::vector<double> cross_fit_mean(const std::vector<LearnerSpec>& candidates, const CrossFitProblem& pb,
                                          CrossFitDiagnostics* diag = nullptr) {
  std::vector<double> out(pb.design->rows(), std::numeric_limits<double>::quiet_NaN());
  detail::cross_fit_impl<MeanModel>(candidates, PredictionType::mean, pb, {}, diag,
                                    [&](const MeanModel& m, const Design& d, std::size_t qrow, std::size_t r) {
                                      out[r] = m.predict(d, qrow);
                                    });
  return out;
}

// Out-of-fold class probabilities (rows x levels); NaN rows where unavailable.
inline Eigen::MatrixXd cross_fit_classes(const std::vector<LearnerSpec>& candidates, const CrossFitProblem& pb,
                                         std::span<const double> levels, CrossFitDiagnostics* diag = nullptr) {
  Eigen::MatrixXd out = Eigen::MatrixXd::Constant(static_cast<Eigen::Index>(pb.design->rows()),
                                                  static_cast<Eigen::Index>(levels.size()), std::numeric_limits<double>::quiet_NaN());
  std::vector<double> buf(levels.size());
  detail::cross_fit_impl<ClassModel>(candidates, PredictionType::probability, pb, levels, diag,
                                     [&](const ClassModel& m, const Design& d, std::size_t qrow, std::size_t r) {
                                       predict_proba(m, d, qrow, buf);
                                       for (std::size_t k = 0; k < buf.size(); ++k)
                                         out(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(k)) = buf[k];
                                     });
  return out;
}

}  // namespace lmed
