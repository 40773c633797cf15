#pragma once

// Longitudinal data model: node schema, history extraction, validation and
// CSV + JSON-sidecar input.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "lmed/error.hpp"

namespace lmed {

inline constexpr double kMissing = std::numeric_limits<double>::quiet_NaN();

inline bool is_missing(double v) { return std::isnan(v); }

enum class NodeKind { L, A, Z, M, Y };

inline const char* to_string(NodeKind k) {
  switch (k) {
    case NodeKind::L: return "L";
    case NodeKind::A: return "A";
    case NodeKind::Z: return "Z";
    case NodeKind::M: return "M";
    case NodeKind::Y: return "Y";
  }
  return "?";
}

inline NodeKind node_kind_from_string(const std::string& s) {
  if (s == "L") return NodeKind::L;
  if (s == "A") return NodeKind::A;
  if (s == "Z") return NodeKind::Z;
  if (s == "M") return NodeKind::M;
  if (s == "Y") return NodeKind::Y;
  throw ValidationError("unknown node kind '" + s + "'");
}

// Which columns hold each node. Time points are 1-based throughout.
struct NodeSchema {
  int tau = 1;
  std::vector<std::vector<std::string>> L;  // L[t-1], may be empty
  std::vector<std::string> A;               // A[t-1], one categorical column
  std::vector<std::vector<std::string>> Z;  // Z[t-1], may be empty
  std::vector<std::string> M;               // M[t-1], one categorical column
  std::string Y;
  // L/Z columns treated as continuous; all others are categorical.
  std::set<std::string> numeric;
  // Declared mediator supports; an empty entry means "use observed values".
  std::vector<std::vector<double>> mediator_support;
  // Treatment codes that mean "lost to follow-up after this node".
  std::vector<double> censored_levels;

  static NodeSchema with_tau(int tau) {
    NodeSchema s;
    s.tau = tau;
    s.L.resize(static_cast<std::size_t>(tau));
    s.A.resize(static_cast<std::size_t>(tau));
    s.Z.resize(static_cast<std::size_t>(tau));
    s.M.resize(static_cast<std::size_t>(tau));
    s.mediator_support.resize(static_cast<std::size_t>(tau));
    return s;
  }

  bool censoring() const { return !censored_levels.empty(); }

  bool is_censored_level(double a) const {
    return std::find(censored_levels.begin(), censored_levels.end(), a) != censored_levels.end();
  }

  bool is_categorical(const std::string& column) const { return numeric.count(column) == 0; }

  void check() const {
    if (tau < 1) throw ValidationError("schema: tau must be >= 1");
    const auto n = static_cast<std::size_t>(tau);
    if (L.size() != n || A.size() != n || Z.size() != n || M.size() != n || mediator_support.size() != n)
      throw ValidationError("schema: per-time column lists must have tau entries");
    for (int t = 1; t <= tau; ++t) {
      if (A[t - 1].empty()) throw ValidationError("schema: missing treatment column A" + std::to_string(t));
      if (M[t - 1].empty()) throw ValidationError("schema: missing mediator column M" + std::to_string(t));
      if (numeric.count(A[t - 1]) || numeric.count(M[t - 1]))
        throw ValidationError("schema: treatment and mediator columns must be categorical");
    }
    if (Y.empty()) throw ValidationError("schema: missing outcome column");
    std::set<std::string> seen;
    for (const auto& c : columns_in_order()) {
      if (!seen.insert(c).second) throw ValidationError("schema: column '" + c + "' mapped twice");
    }
  }

  // Columns of one node.
  std::vector<std::string> node_columns(NodeKind kind, int t) const {
    switch (kind) {
      case NodeKind::L: return L.at(static_cast<std::size_t>(t - 1));
      case NodeKind::A: return {A.at(static_cast<std::size_t>(t - 1))};
      case NodeKind::Z: return Z.at(static_cast<std::size_t>(t - 1));
      case NodeKind::M: return {M.at(static_cast<std::size_t>(t - 1))};
      case NodeKind::Y: return {Y};
    }
    return {};
  }

  // Time-ordered node sequence L1, A1, Z1, M1, ..., M_tau, Y.
  std::vector<std::pair<NodeKind, int>> node_order() const {
    std::vector<std::pair<NodeKind, int>> out;
    for (int t = 1; t <= tau; ++t) {
      out.emplace_back(NodeKind::L, t);
      out.emplace_back(NodeKind::A, t);
      out.emplace_back(NodeKind::Z, t);
      out.emplace_back(NodeKind::M, t);
    }
    out.emplace_back(NodeKind::Y, tau + 1);
    return out;
  }

  std::vector<std::string> columns_in_order() const {
    std::vector<std::string> out;
    for (auto [k, t] : node_order())
      for (auto& c : node_columns(k, t)) out.push_back(c);
    return out;
  }
};

// Ordered column set of H_{A,t}, H_{Z,t}, H_{M,t} or H_{L,t}.
struct History {
  NodeKind kind = NodeKind::A;
  int t = 1;
  std::vector<std::string> columns;
};

namespace detail {

inline void append(std::vector<std::string>& out, const std::vector<std::string>& cols) {
  out.insert(out.end(), cols.begin(), cols.end());
}

// (L̄_t, M̄_{t-1}, Z̄_{t-1}, Ā_{t-1}), each block in time order.
inline std::vector<std::string> treatment_history(const NodeSchema& s, int t) {
  std::vector<std::string> out;
  for (int k = 1; k <= t; ++k) append(out, s.L[k - 1]);
  for (int k = 1; k < t; ++k) out.push_back(s.M[k - 1]);
  for (int k = 1; k < t; ++k) append(out, s.Z[k - 1]);
  for (int k = 1; k < t; ++k) out.push_back(s.A[k - 1]);
  return out;
}

}  // namespace detail

// H_{A,t} = (L̄_t, M̄_{t-1}, Z̄_{t-1}, Ā_{t-1}); H_{Z,t} = (A_t, H_{A,t});
// H_{M,t} = (Z_t, H_{Z,t}); H_{L,t} = (M_{t-1}, H_{M,t-1}). The column order
// is the definition unrolled left to right. Kind L accepts t = tau + 1, the
// history of the outcome.
inline History history_columns(const NodeSchema& s, NodeKind kind, int t) {
  const int upper = kind == NodeKind::L ? s.tau + 1 : s.tau;
  if (kind == NodeKind::Y || t < 1 || t > upper)
    throw std::out_of_range("history_columns: t=" + std::to_string(t) + " out of range for kind " +
                            to_string(kind));
  History h{kind, t, {}};
  switch (kind) {
    case NodeKind::A:
      h.columns = detail::treatment_history(s, t);
      break;
    case NodeKind::Z:
      h.columns.push_back(s.A[t - 1]);
      detail::append(h.columns, detail::treatment_history(s, t));
      break;
    case NodeKind::M:
      detail::append(h.columns, s.Z[t - 1]);
      h.columns.push_back(s.A[t - 1]);
      detail::append(h.columns, detail::treatment_history(s, t));
      break;
    case NodeKind::L:
      if (t > 1) {
        h.columns.push_back(s.M[t - 2]);
        detail::append(h.columns, history_columns(s, NodeKind::M, t - 1).columns);
      }
      break;
    case NodeKind::Y:
      break;
  }
  return h;
}

struct ValidationIssue {
  std::size_t row = 0;
  std::string message;
};

// Column store; NaN marks missing cells. Rows may carry probability weights
// (enumeration mode); sampled data uses unit weights.
class LongitudinalDataset {
 public:
  LongitudinalDataset() = default;
  explicit LongitudinalDataset(NodeSchema schema) : schema_(std::move(schema)) {}

  const NodeSchema& schema() const { return schema_; }
  std::size_t rows() const { return rows_; }

  void add_column(const std::string& name, std::vector<double> values) {
    if (index_.empty() && columns_.empty()) rows_ = values.size();
    if (values.size() != rows_) throw ValidationError("column '" + name + "' has wrong length");
    if (index_.count(name)) throw ValidationError("duplicate column '" + name + "'");
    index_[name] = columns_.size();
    names_.push_back(name);
    columns_.push_back(std::move(values));
    validated_ = false;
  }

  bool has_column(const std::string& name) const { return index_.count(name) > 0; }

  const std::vector<double>& column(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ValidationError("dataset has no column '" + name + "'");
    return columns_[it->second];
  }

  const std::vector<std::string>& column_names() const { return names_; }

  void set_weights(std::vector<double> w) {
    if (w.size() != rows_) throw ValidationError("weights have wrong length");
    weights_ = std::move(w);
  }
  // Empty means unit weights.
  const std::vector<double>& weights() const { return weights_; }
  double weight(std::size_t i) const { return weights_.empty() ? 1.0 : weights_[i]; }

  bool validated() const { return validated_; }

  // First time point whose treatment code is a censored level; tau + 1 if the
  // row is never censored. Available after validation.
  int censor_time(std::size_t row) const { return censor_time_.at(row); }

  // Whether the node value is defined (not after loss to follow-up). Y always is.
  bool node_available(std::size_t row, NodeKind kind, int t) const {
    const int c = censor_time(row);
    switch (kind) {
      case NodeKind::L: return t <= c;
      case NodeKind::A: return t <= c;
      case NodeKind::Z:
      case NodeKind::M: return t < c;
      case NodeKind::Y: return true;
    }
    return false;
  }

  // All history nodes of H_{kind,t} available for this row.
  bool history_available(std::size_t row, NodeKind kind, int t) const {
    const int c = censor_time(row);
    switch (kind) {
      case NodeKind::A: return t <= c;      // through L_t
      case NodeKind::Z: return t <= c;      // through A_t
      case NodeKind::M: return t < c;       // through Z_t
      case NodeKind::L: return t - 1 < c;   // through M_{t-1}
      case NodeKind::Y: return true;
    }
    return false;
  }

 private:
  friend struct DatasetValidator;
  NodeSchema schema_;
  std::size_t rows_ = 0;
  std::vector<std::string> names_;
  std::vector<std::vector<double>> columns_;
  std::map<std::string, std::size_t> index_;
  std::vector<double> weights_;
  std::vector<int> censor_time_;
  bool validated_ = false;
};

struct ValidationResult {
  std::vector<ValidationIssue> errors;
  LongitudinalDataset dataset;  // meaningful only when ok()
  bool ok() const { return errors.empty(); }
};

struct DatasetValidator {
  static ValidationResult run(const LongitudinalDataset& input) {
    ValidationResult out;
    const NodeSchema& s = input.schema();
    try {
      s.check();
    } catch (const ValidationError& e) {
      out.errors.push_back({0, e.what()});
      return out;
    }
    for (const auto& c : s.columns_in_order()) {
      if (!input.has_column(c)) out.errors.push_back({0, "missing column '" + c + "'"});
    }
    if (!out.errors.empty()) return out;
    for (double w : input.weights()) {
      if (!(w >= 0.0) || !std::isfinite(w)) {
        out.errors.push_back({0, "weights must be finite and non-negative"});
        return out;
      }
    }

    const auto order = s.node_order();
    const std::size_t n = input.rows();
    std::vector<int> censor(n, s.tau + 1);
    for (std::size_t i = 0; i < n; ++i) {
      if (is_missing(input.column(s.Y)[i])) {
        out.errors.push_back({i, "missing Y at row " + std::to_string(i)});
      } else if (!std::isfinite(input.column(s.Y)[i])) {
        out.errors.push_back({i, "non-finite Y at row " + std::to_string(i)});
      }
      for (int t = 1; t <= s.tau; ++t) {
        const double a = input.column(s.A[t - 1])[i];
        if (!is_missing(a) && s.is_censored_level(a)) {
          censor[i] = t;
          break;
        }
      }
      // Scan nodes before Y: once a node is missing, every later node must be.
      std::size_t first_missing = order.size();
      bool monotone = true;
      for (std::size_t k = 0; k + 1 < order.size(); ++k) {
        auto [kind, t] = order[k];
        bool any_missing = false, all_missing = true;
        for (const auto& c : s.node_columns(kind, t)) {
          const bool m = is_missing(input.column(c)[i]);
          any_missing = any_missing || m;
          all_missing = all_missing && m;
        }
        if (kind == NodeKind::L || kind == NodeKind::Z) {
          if (s.node_columns(kind, t).empty()) continue;  // empty node carries no information
        }
        if (first_missing == order.size()) {
          if (any_missing) first_missing = k;
        } else if (!all_missing) {
          monotone = false;
        }
      }
      if (!monotone) {
        out.errors.push_back({i, "non-monotone missingness at row " + std::to_string(i)});
        continue;
      }
      if (first_missing != order.size()) {
        auto [kind, t] = order[first_missing];
        const bool allowed = (kind == NodeKind::Z || kind == NodeKind::M) ? t >= censor[i]
                                                                          : t > censor[i];
        if (!allowed) {
          out.errors.push_back({i, "missing value in uncensored row " + std::to_string(i) + " at node " +
                                       to_string(kind) + std::to_string(t)});
          continue;
        }
      }
      for (int t = 1; t <= s.tau; ++t) {
        const double m = input.column(s.M[t - 1])[i];
        if (is_missing(m) || t >= censor[i]) continue;
        const auto& declared = s.mediator_support[t - 1];
        if (!declared.empty() && std::find(declared.begin(), declared.end(), m) == declared.end()) {
          std::ostringstream msg;
          msg << "unsupported mediator value " << m << " for M" << t << " at row " << i;
          out.errors.push_back({i, msg.str()});
        }
      }
      for (const auto& c : s.columns_in_order()) {
        const double v = input.column(c)[i];
        if (!is_missing(v) && !std::isfinite(v))
          out.errors.push_back({i, "non-finite value in column '" + c + "' at row " + std::to_string(i)});
      }
    }
    if (out.ok()) {
      out.dataset = input;
      out.dataset.censor_time_ = std::move(censor);
      out.dataset.validated_ = true;
    }
    return out;
  }
};

// Checks monotone missingness, mediator supports and outcome presence.
inline ValidationResult validate(const LongitudinalDataset& dataset) { return DatasetValidator::run(dataset); }

// Validates or throws a ValidationError listing every issue.
inline LongitudinalDataset validated_or_throw(const LongitudinalDataset& dataset) {
  auto res = validate(dataset);
  if (!res.ok()) {
    std::string msg = "dataset validation failed:";
    for (const auto& e : res.errors) msg += "\n  " + e.message;
    throw ValidationError(msg);
  }
  return std::move(res.dataset);
}

// Sorted mediator support M_t. A declared support takes precedence over the
// values observed among rows still under follow-up at t.
inline std::vector<double> mediator_support(const LongitudinalDataset& d, int t) {
  const NodeSchema& s = d.schema();
  if (t < 1 || t > s.tau) throw std::out_of_range("mediator_support: t out of range");
  std::vector<double> out = s.mediator_support[t - 1];
  if (out.empty()) {
    const auto& col = d.column(s.M[t - 1]);
    std::set<double> seen;
    for (std::size_t i = 0; i < d.rows(); ++i) {
      if (d.validated() && !d.node_available(i, NodeKind::M, t)) continue;
      if (!is_missing(col[i])) seen.insert(col[i]);
    }
    out.assign(seen.begin(), seen.end());
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  if (out.empty()) throw ValidationError("empty mediator support at t=" + std::to_string(t));
  return out;
}

// ---------------------------------------------------------------------------
// I/O: CSV with a JSON sidecar mapping columns to (node kind, t).

inline NodeSchema schema_from_json(const nlohmann::ordered_json& j) {
  if (!j.contains("tau") || !j.contains("columns")) throw ValidationError("schema: needs 'tau' and 'columns'");
  const int tau = j.at("tau").get<int>();
  if (tau < 1) throw ValidationError("schema: tau must be >= 1");
  NodeSchema s = NodeSchema::with_tau(tau);
  for (const auto& [name, spec] : j.at("columns").items()) {
    const NodeKind kind = node_kind_from_string(spec.at("node").get<std::string>());
    if (kind == NodeKind::Y) {
      if (!s.Y.empty()) throw ValidationError("schema: more than one outcome column");
      s.Y = name;
      continue;
    }
    const int t = spec.at("t").get<int>();
    if (t < 1 || t > tau) throw ValidationError("schema: column '" + name + "' has t out of range");
    const auto k = static_cast<std::size_t>(t - 1);
    switch (kind) {
      case NodeKind::L: s.L[k].push_back(name); break;
      case NodeKind::Z: s.Z[k].push_back(name); break;
      case NodeKind::A:
        if (!s.A[k].empty()) throw ValidationError("schema: A" + std::to_string(t) + " mapped twice");
        s.A[k] = name;
        break;
      case NodeKind::M:
        if (!s.M[k].empty()) throw ValidationError("schema: M" + std::to_string(t) + " mapped twice");
        s.M[k] = name;
        break;
      case NodeKind::Y: break;
    }
    if (spec.contains("type")) {
      const auto type = spec.at("type").get<std::string>();
      if (type == "numeric") s.numeric.insert(name);
      else if (type != "categorical") throw ValidationError("schema: unknown column type '" + type + "'");
    }
  }
  if (j.contains("mediator_support")) {
    for (const auto& [key, vals] : j.at("mediator_support").items()) {
      const int t = std::stoi(key);
      if (t < 1 || t > tau) throw ValidationError("schema: mediator_support key out of range");
      s.mediator_support[static_cast<std::size_t>(t - 1)] = vals.get<std::vector<double>>();
    }
  }
  if (j.contains("censored_levels")) s.censored_levels = j.at("censored_levels").get<std::vector<double>>();
  s.check();
  return s;
}

inline nlohmann::ordered_json schema_to_json(const NodeSchema& s) {
  nlohmann::ordered_json cols = nlohmann::ordered_json::object();
  for (auto [kind, t] : s.node_order()) {
    for (const auto& c : s.node_columns(kind, t)) {
      nlohmann::ordered_json e;
      e["node"] = to_string(kind);
      if (kind != NodeKind::Y) e["t"] = t;
      if (s.numeric.count(c)) e["type"] = "numeric";
      cols[c] = e;
    }
  }
  nlohmann::ordered_json j;
  j["tau"] = s.tau;
  j["columns"] = cols;
  nlohmann::ordered_json sup = nlohmann::ordered_json::object();
  for (int t = 1; t <= s.tau; ++t)
    if (!s.mediator_support[t - 1].empty()) sup[std::to_string(t)] = s.mediator_support[t - 1];
  if (!sup.empty()) j["mediator_support"] = sup;
  if (s.censoring()) j["censored_levels"] = s.censored_levels;
  return j;
}

inline NodeSchema read_schema(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open schema file '" + path + "'");
  nlohmann::ordered_json j;
  try {
    j = nlohmann::ordered_json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("schema file '" + path + "': " + e.what());
  }
  try {
    return schema_from_json(j);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("schema file '" + path + "': " + e.what());
  }
}

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r' && ch != '"') {
      cur.push_back(ch);
    }
  }
  out.push_back(cur);
  return out;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t");
  return s.substr(b, e - b + 1);
}

}  // namespace detail

// Reads the schema's columns from a CSV file; empty cells and NA are missing.
inline LongitudinalDataset read_csv(std::istream& in, const NodeSchema& schema) {
  std::string line;
  if (!std::getline(in, line)) throw ValidationError("CSV input is empty");
  auto header = detail::split_csv_line(line);
  for (auto& h : header) h = detail::trim(h);
  std::vector<std::vector<double>> cols(header.size());
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (detail::trim(line).empty()) continue;
    auto cells = detail::split_csv_line(line);
    if (cells.size() != header.size())
      throw ValidationError("CSV line " + std::to_string(lineno) + ": expected " + std::to_string(header.size()) +
                            " fields, got " + std::to_string(cells.size()));
    for (std::size_t c = 0; c < cells.size(); ++c) {
      const std::string cell = detail::trim(cells[c]);
      if (cell.empty() || cell == "NA" || cell == "NaN" || cell == "nan") {
        cols[c].push_back(kMissing);
        continue;
      }
      try {
        std::size_t used = 0;
        const double v = std::stod(cell, &used);
        if (used != cell.size()) throw std::invalid_argument(cell);
        cols[c].push_back(v);
      } catch (const std::exception&) {
        throw ValidationError("CSV line " + std::to_string(lineno) + ": cannot parse '" + cell + "' in column '" +
                              header[c] + "'");
      }
    }
  }
  LongitudinalDataset d(schema);
  std::set<std::string> wanted;
  for (const auto& c : schema.columns_in_order()) wanted.insert(c);
  for (std::size_t c = 0; c < header.size(); ++c) {
    if (wanted.count(header[c])) d.add_column(header[c], std::move(cols[c]));
  }
  for (const auto& c : schema.columns_in_order())
    if (!d.has_column(c)) throw ValidationError("CSV is missing schema column '" + c + "'");
  return d;
}

inline LongitudinalDataset read_csv(const std::string& path, const NodeSchema& schema) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open data file '" + path + "'");
  return read_csv(in, schema);
}

inline void write_csv(std::ostream& out, const LongitudinalDataset& d) {
  const auto cols = d.schema().columns_in_order();
  for (std::size_t c = 0; c < cols.size(); ++c) out << (c ? "," : "") << cols[c];
  out << '\n';
  out.precision(17);
  for (std::size_t i = 0; i < d.rows(); ++i) {
    for (std::size_t c = 0; c < cols.size(); ++c) {
      const double v = d.column(cols[c])[i];
      if (c) out << ',';
      if (!is_missing(v)) out << v;
    }
    out << '\n';
  }
}

}  // namespace lmed
