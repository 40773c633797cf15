#pragma once

// Mediator paths and the pooled (observation x mediator-suffix) datasets.

#include <cstddef>
#include <stdexcept>
#include <vector>

#include "lmed/error.hpp"

namespace lmed {

// Per-time mediator supports M_1..M_tau (sorted values), with the integer
// coding of suffixes (m_t, ..., m_tau) shared by every module: the code of a
// suffix at t is code(t+1) * J_t + j_t, where j_t indexes m_t in M_t.
class MediatorSupports {
 public:
  MediatorSupports() = default;
  explicit MediatorSupports(std::vector<std::vector<double>> supports) : supports_(std::move(supports)) {
    for (const auto& s : supports_)
      if (s.empty()) throw ValidationError("empty mediator support");
  }

  int tau() const { return static_cast<int>(supports_.size()); }
  const std::vector<double>& at(int t) const { return supports_.at(static_cast<std::size_t>(t - 1)); }
  std::size_t cardinality(int t) const { return at(t).size(); }

  // Number of suffixes (m_t, ..., m_tau); 1 for t = tau + 1.
  std::size_t suffix_count(int t) const {
    std::size_t n = 1;
    for (int k = t; k <= tau(); ++k) n *= cardinality(k);
    return n;
  }

  std::size_t path_count() const { return suffix_count(1); }

  // Index of m_t inside the suffix coded `code` at time `from`.
  std::size_t index_at(std::size_t code, int from, int t) const {
    for (int k = from; k < t; ++k) code /= cardinality(k);
    return code % cardinality(t);
  }

  double value_at(std::size_t code, int from, int t) const { return at(t)[index_at(code, from, t)]; }

  // Drop m_from from a suffix code.
  std::size_t tail(std::size_t code, int from) const { return code / cardinality(from); }

  std::size_t encode(const std::vector<std::size_t>& indices, int from) const {
    std::size_t code = 0;
    for (int k = tau(); k >= from; --k) code = code * cardinality(k) + indices.at(static_cast<std::size_t>(k - from));
    return code;
  }

  std::vector<double> values(std::size_t code, int from) const {
    std::vector<double> out;
    for (int k = from; k <= tau(); ++k) out.push_back(value_at(code, from, k));
    return out;
  }

 private:
  std::vector<std::vector<double>> supports_;
};

// A full mediator path m̄ = (m_1, ..., m_tau).
struct MediatorPath {
  std::vector<double> values;
};

// D_t^+: each row is a duple (source observation, suffix (m_t..m_tau)). Rows
// are laid out source-major, so row = source * suffix_count + suffix_code and
// the parent row in D_{t+1}^+ is row / J_t. Fold labels belong to sources.
class PooledDataset {
 public:
  // D_{tau+1}^+: the unexpanded observations.
  static PooledDataset base(std::size_t sources, MediatorSupports supports, std::vector<int> fold_of_source) {
    if (fold_of_source.size() != sources) throw std::invalid_argument("fold labels must cover every source");
    PooledDataset p;
    p.sources_ = sources;
    p.supports_ = std::move(supports);
    p.t_ = p.supports_.tau() + 1;
    p.suffixes_ = 1;
    p.folds_ = std::move(fold_of_source);
    return p;
  }

  int t() const { return t_; }
  std::size_t sources() const { return sources_; }
  std::size_t suffix_count() const { return suffixes_; }
  std::size_t size() const { return sources_ * suffixes_; }
  const MediatorSupports& supports() const { return supports_; }

  std::size_t source(std::size_t row) const { return row / suffixes_; }
  std::size_t suffix(std::size_t row) const { return row % suffixes_; }
  std::size_t row(std::size_t source, std::size_t suffix) const { return source * suffixes_ + suffix; }
  std::size_t parent(std::size_t row) const { return row / supports_.cardinality(t_); }
  int fold(std::size_t row) const { return folds_[source(row)]; }
  const std::vector<int>& source_folds() const { return folds_; }

  // Index / value of the row's own pooled mediator m_t.
  std::size_t mediator_index(std::size_t row) const { return suffix(row) % supports_.cardinality(t_); }
  double mediator_value(std::size_t row) const { return supports_.at(t_)[mediator_index(row)]; }
  // Value of m_k (k >= t) in the row's suffix.
  double suffix_value(std::size_t row, int k) const { return supports_.value_at(suffix(row), t_, k); }

 private:
  friend PooledDataset expand_pooled(const PooledDataset& parent, int t);
  int t_ = 1;
  std::size_t sources_ = 0;
  std::size_t suffixes_ = 1;
  MediatorSupports supports_;
  std::vector<int> folds_;
};

// D_t^+ = D_{t+1}^+ x M_t: every parent row is repeated once per m_t with m_t
// prepended to its suffix; fold labels follow the source observation.
inline PooledDataset expand_pooled(const PooledDataset& parent, int t) {
  if (t != parent.t() - 1 || t < 1) throw std::invalid_argument("expand_pooled: expected t = parent.t - 1");
  if (parent.supports().cardinality(t) == 0) throw ValidationError("expand_pooled: empty mediator support");
  PooledDataset child = parent;
  child.t_ = t;
  child.suffixes_ = parent.suffixes_ * parent.supports().cardinality(t);
  return child;
}

}  // namespace lmed
