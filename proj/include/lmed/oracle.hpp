#pragma once

// Exact computations on discrete structural models given as conditional
// probability tables: theta by identification and by counterfactual
// enumeration, the sequential regressions, the efficient influence function
// and its variance, first-order remainder identities, positivity checks, and
// an exact nuisance source for the estimator.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "lmed/eif.hpp"
#include "lmed/error.hpp"
#include "lmed/nuisance.hpp"
#include "lmed/pooled.hpp"
#include "lmed/rng.hpp"
#include "lmed/schema.hpp"

namespace lmed {

inline constexpr double kStateGuard = 1e7;

// Node positions: L_t = 4(t-1), A_t = +1, Z_t = +2, M_t = +3; Y = L_{tau+1} = 4 tau.
inline int pos_L(int t) { return 4 * (t - 1); }
inline int pos_A(int t) { return 4 * (t - 1) + 1; }
inline int pos_Z(int t) { return 4 * (t - 1) + 2; }
inline int pos_M(int t) { return 4 * (t - 1) + 3; }

inline std::string node_name(NodeKind kind, int t) {
  if (kind == NodeKind::Y) return "Y";
  return std::string(to_string(kind)) + std::to_string(t);
}

struct NodeCpt {
  std::string name;
  NodeKind kind = NodeKind::L;
  int t = 1;
  bool present = true;              // false for omitted L/Z nodes (support {0})
  std::vector<double> support;      // sorted, strictly increasing
  std::vector<int> parents;         // earlier node positions
  std::vector<double> table;        // [parent configuration * |support| + value]

  std::size_t cardinality() const { return support.size(); }

  std::optional<std::size_t> index_of(double v) const {
    auto it = std::lower_bound(support.begin(), support.end(), v);
    if (it == support.end() || *it != v) return std::nullopt;
    return static_cast<std::size_t>(it - support.begin());
  }
};

struct NpsemSpec {
  int tau = 1;
  std::vector<NodeCpt> nodes;  // 4 tau + 1, in node order
  std::vector<double> censored_levels;

  int node_count() const { return static_cast<int>(nodes.size()); }
  const NodeCpt& node(int pos) const { return nodes.at(static_cast<std::size_t>(pos)); }

  int position_of(const std::string& name) const {
    for (int k = 0; k < node_count(); ++k)
      if (nodes[static_cast<std::size_t>(k)].name == name) return k;
    throw ValidationError("unknown node '" + name + "'");
  }

  bool is_censored_level(double a) const {
    return std::find(censored_levels.begin(), censored_levels.end(), a) != censored_levels.end();
  }

  double state_space() const {
    double s = 1.0;
    for (const auto& n : nodes) s *= static_cast<double>(n.cardinality());
    return s;
  }

  MediatorSupports mediator_supports() const {
    std::vector<std::vector<double>> s;
    for (int t = 1; t <= tau; ++t) s.push_back(node(pos_M(t)).support);
    return MediatorSupports(std::move(s));
  }

  // Parent configuration code for node k given support indices of all nodes.
  std::size_t parent_config(int k, const std::vector<std::size_t>& idx) const {
    std::size_t c = 0;
    for (int p : node(k).parents) c = c * node(p).cardinality() + idx[static_cast<std::size_t>(p)];
    return c;
  }

  double cpt(int k, std::size_t config, std::size_t v) const {
    return node(k).table[config * node(k).cardinality() + v];
  }

  void check() const {
    if (tau < 1) throw ValidationError("tau must be >= 1");
    if (node_count() != 4 * tau + 1) throw ValidationError("spec must define 4*tau+1 nodes");
    for (int k = 0; k < node_count(); ++k) {
      const auto& n = node(k);
      if (n.support.empty()) throw ValidationError(n.name + ": empty support");
      for (std::size_t i = 1; i < n.support.size(); ++i)
        if (!(n.support[i - 1] < n.support[i])) throw ValidationError(n.name + ": support must be strictly increasing");
      std::size_t configs = 1;
      for (int p : n.parents) {
        if (p < 0 || p >= k) throw ValidationError(n.name + ": parents must precede the node");
        configs *= node(p).cardinality();
      }
      if (n.table.size() != configs * n.cardinality()) throw ValidationError(n.name + ": table has wrong size");
      for (std::size_t c = 0; c < configs; ++c) {
        double s = 0.0;
        for (std::size_t v = 0; v < n.cardinality(); ++v) {
          const double p = n.table[c * n.cardinality() + v];
          if (!(p >= 0.0 && p <= 1.0)) throw ValidationError(n.name + ": probabilities must lie in [0, 1]");
          s += p;
        }
        if (std::abs(s - 1.0) > 1e-12)
          throw ValidationError(n.name + ": table row " + std::to_string(c) + " sums to " + std::to_string(s));
      }
    }
    for (double c : censored_levels)
      for (int t = 1; t <= tau; ++t)
        if (!node(pos_A(t)).index_of(c)) throw ValidationError("censored level not in the support of A" + std::to_string(t));
  }
};

// ---------------------------------------------------------------------------
// Spec JSON
//
// {"tau": 2, "censored_levels": [...],
//  "nodes": {"L1": {"support": [0,1], "probs": [0.5, 0.5]},
//            "A1": {"support": [0,1], "logistic": {"intercept": -0.3, "coef": {"L1": 0.8}}},
//            "M1": {"support": [0,1], "parents": ["A1"], "table": {"0": [0.7,0.3], "1": [0.4,0.6]}}, ...}}
// L_t and Z_t may be omitted (degenerate at 0). Table keys are comma-joined
// parent values.

namespace detail {

inline std::vector<double> parse_key(const std::string& key) {
  std::vector<double> out;
  if (key.empty()) return out;
  std::stringstream ss(key);
  std::string part;
  while (std::getline(ss, part, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(part, &used));
      if (trim(part.substr(used)).size() != 0) throw std::invalid_argument(part);
    } catch (const std::exception&) {
      throw ValidationError("bad table key '" + key + "'");
    }
  }
  return out;
}

inline void enumerate_configs(const NpsemSpec& s, const std::vector<int>& parents,
                              const std::function<void(std::size_t, const std::vector<double>&)>& f) {
  std::size_t configs = 1;
  for (int p : parents) configs *= s.node(p).cardinality();
  std::vector<double> vals(parents.size());
  for (std::size_t c = 0; c < configs; ++c) {
    std::size_t rem = c;
    for (std::size_t j = parents.size(); j-- > 0;) {
      const auto& sup = s.node(parents[j]).support;
      vals[j] = sup[rem % sup.size()];
      rem /= sup.size();
    }
    f(c, vals);
  }
}

}  // namespace detail

inline NpsemSpec spec_from_json(const nlohmann::json& j) {
  NpsemSpec s;
  s.tau = j.at("tau").get<int>();
  if (s.tau < 1) throw ValidationError("tau must be >= 1");
  if (j.contains("censored_levels")) s.censored_levels = j.at("censored_levels").get<std::vector<double>>();
  const auto& nodes = j.at("nodes");
  for (const auto& [name, _] : nodes.items()) {
    bool known = name == "Y";
    for (int t = 1; t <= s.tau && !known; ++t)
      for (NodeKind k : {NodeKind::L, NodeKind::A, NodeKind::Z, NodeKind::M})
        if (name == node_name(k, t)) known = true;
    if (!known) throw ValidationError("unknown node '" + name + "' for tau=" + std::to_string(s.tau));
  }
  for (int t = 1; t <= s.tau + 1; ++t) {
    for (NodeKind kind : {NodeKind::L, NodeKind::A, NodeKind::Z, NodeKind::M}) {
      if (t == s.tau + 1 && kind != NodeKind::L) break;
      NodeCpt n;
      n.kind = t == s.tau + 1 ? NodeKind::Y : kind;
      n.t = t;
      n.name = node_name(n.kind, t);
      if (!nodes.contains(n.name)) {
        if (kind == NodeKind::A || kind == NodeKind::M || n.kind == NodeKind::Y)
          throw ValidationError("spec is missing required node " + n.name);
        n.present = false;
        n.support = {0.0};
        n.table = {1.0};
        s.nodes.push_back(std::move(n));
        continue;
      }
      const auto& nj = nodes.at(n.name);
      n.support = nj.at("support").get<std::vector<double>>();
      const int k = static_cast<int>(s.nodes.size());
      auto position = [&](const std::string& pname) {
        for (int q = 0; q < k; ++q)
          if (s.nodes[static_cast<std::size_t>(q)].name == pname) return q;
        throw ValidationError(n.name + ": parent '" + pname + "' is not an earlier node");
      };
      if (nj.contains("logistic")) {
        if (n.support.size() != 2) throw ValidationError(n.name + ": logistic nodes need a binary support");
        const auto& lj = nj.at("logistic");
        const double intercept = lj.value("intercept", 0.0);
        std::vector<double> coef;
        if (lj.contains("coef"))
          for (const auto& [pname, c] : lj.at("coef").items()) {
            n.parents.push_back(position(pname));
            coef.push_back(c.get<double>());
          }
        s.nodes.push_back(n);
        NodeCpt& ref = s.nodes.back();
        detail::enumerate_configs(s, ref.parents, [&](std::size_t, const std::vector<double>& vals) {
          double eta = intercept;
          for (std::size_t q = 0; q < vals.size(); ++q) eta += coef[q] * vals[q];
          const double p1 = detail::sigmoid(eta);
          ref.table.push_back(1.0 - p1);
          ref.table.push_back(p1);
        });
        continue;
      }
      if (nj.contains("parents"))
        for (const auto& pname : nj.at("parents")) n.parents.push_back(position(pname.get<std::string>()));
      s.nodes.push_back(n);
      NodeCpt& ref = s.nodes.back();
      if (nj.contains("probs")) {
        if (!ref.parents.empty()) throw ValidationError(n.name + ": 'probs' is only allowed without parents");
        ref.table = nj.at("probs").get<std::vector<double>>();
      } else {
        const auto& tj = nj.at("table");
        std::map<std::vector<double>, std::vector<double>> rows;
        for (const auto& [key, probs] : tj.items()) rows[detail::parse_key(key)] = probs.get<std::vector<double>>();
        detail::enumerate_configs(s, ref.parents, [&](std::size_t, const std::vector<double>& vals) {
          auto it = rows.find(vals);
          if (it == rows.end()) {
            std::string key;
            for (std::size_t q = 0; q < vals.size(); ++q) key += (q ? "," : "") + nlohmann::json(vals[q]).dump();
            throw ValidationError(n.name + ": table has no row for parent values '" + key + "'");
          }
          if (it->second.size() != ref.support.size()) throw ValidationError(n.name + ": table row has wrong length");
          ref.table.insert(ref.table.end(), it->second.begin(), it->second.end());
        });
        std::size_t configs = 1;
        for (int p : ref.parents) configs *= s.node(p).cardinality();
        if (rows.size() != configs) throw ValidationError(n.name + ": table has rows for unknown parent values");
      }
    }
  }
  s.check();
  return s;
}

inline nlohmann::ordered_json spec_to_json(const NpsemSpec& s) {
  nlohmann::ordered_json j;
  j["tau"] = s.tau;
  if (!s.censored_levels.empty()) j["censored_levels"] = s.censored_levels;
  auto& nodes = j["nodes"] = nlohmann::ordered_json::object();
  for (int k = 0; k < s.node_count(); ++k) {
    const auto& n = s.node(k);
    if (!n.present) continue;
    nlohmann::ordered_json nj;
    nj["support"] = n.support;
    std::vector<std::string> parents;
    for (int p : n.parents) parents.push_back(s.node(p).name);
    nj["parents"] = parents;
    auto& table = nj["table"] = nlohmann::ordered_json::object();
    detail::enumerate_configs(s, n.parents, [&](std::size_t c, const std::vector<double>& vals) {
      std::string key;
      for (std::size_t q = 0; q < vals.size(); ++q) key += (q ? "," : "") + nlohmann::json(vals[q]).dump();
      table[key] = std::vector<double>(n.table.begin() + static_cast<std::ptrdiff_t>(c * n.cardinality()),
                                       n.table.begin() + static_cast<std::ptrdiff_t>((c + 1) * n.cardinality()));
    });
    nodes[n.name] = nj;
  }
  return j;
}

inline NpsemSpec read_spec(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open spec file '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("spec file '" + path + "': " + e.what());
  }
  try {
    return spec_from_json(j);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("spec file '" + path + "': " + e.what());
  }
}

// Random binary spec: every node depends on all earlier nodes with table
// entries drawn in [lo, 1 - lo], so positivity holds.
inline NpsemSpec random_binary_spec(int tau, std::uint64_t seed, bool with_z = true, double lo = 0.1) {
  Rng rng(seed);
  NpsemSpec s;
  s.tau = tau;
  for (int t = 1; t <= tau + 1; ++t) {
    for (NodeKind kind : {NodeKind::L, NodeKind::A, NodeKind::Z, NodeKind::M}) {
      if (t == tau + 1 && kind != NodeKind::L) break;
      NodeCpt n;
      n.kind = t == tau + 1 ? NodeKind::Y : kind;
      n.t = t;
      n.name = node_name(n.kind, t);
      const int k = static_cast<int>(s.nodes.size());
      if (kind == NodeKind::Z && !with_z) {
        n.present = false;
        n.support = {0.0};
        n.table = {1.0};
      } else {
        n.support = {0.0, 1.0};
        std::size_t configs = 1;
        for (int q = 0; q < k; ++q)
          if (s.nodes[static_cast<std::size_t>(q)].present) {
            n.parents.push_back(q);
            configs *= 2;
          }
        for (std::size_t c = 0; c < configs; ++c) {
          const double p1 = lo + (1.0 - 2.0 * lo) * rng.uniform();
          n.table.push_back(1.0 - p1);
          n.table.push_back(p1);
        }
      }
      s.nodes.push_back(std::move(n));
    }
  }
  s.check();
  return s;
}

// ---------------------------------------------------------------------------
// Joint law

// Prefix marginals of the joint law over mixed-radix state codes (node 0 most
// significant). The extensions of a prefix form a contiguous code block.
class Oracle {
 public:
  explicit Oracle(NpsemSpec spec) : spec_(std::move(spec)) {
    spec_.check();
    if (spec_.state_space() > kStateGuard)
      throw ResourceError("state space of " + std::to_string(spec_.state_space()) + " exceeds the guard of 1e7");
    const int K = spec_.node_count();
    count_.resize(static_cast<std::size_t>(K));
    marg_.resize(static_cast<std::size_t>(K));
    std::size_t prev = 1;
    std::vector<double> prev_marg{1.0};
    for (int k = 0; k < K; ++k) {
      const std::size_t S = spec_.node(k).cardinality();
      count_[static_cast<std::size_t>(k)] = prev * S;
      std::vector<double> m(prev * S, 0.0);
      std::vector<std::size_t> idx(static_cast<std::size_t>(K), 0);
      for (std::size_t c = 0; c < prev; ++c) {
        if (prev_marg[c] == 0.0) continue;
        decode(c, k - 1, idx);
        const std::size_t cfg = spec_.parent_config(k, idx);
        for (std::size_t v = 0; v < S; ++v) m[c * S + v] = prev_marg[c] * spec_.cpt(k, cfg, v);
      }
      marg_[static_cast<std::size_t>(k)] = m;
      prev_marg = std::move(m);
      prev *= S;
    }
  }

  const NpsemSpec& spec() const { return spec_; }
  int tau() const { return spec_.tau; }
  std::size_t states() const { return count_.back(); }
  std::size_t prefixes(int pos) const { return pos < 0 ? 1 : count_[static_cast<std::size_t>(pos)]; }
  std::size_t cardinality(int pos) const { return spec_.node(pos).cardinality(); }

  // P(nodes 0..pos = prefix).
  double marginal(int pos, std::size_t prefix) const {
    return pos < 0 ? 1.0 : marg_[static_cast<std::size_t>(pos)][prefix];
  }
  double probability(std::size_t state) const { return marg_.back()[state]; }

  // P(node pos = v | nodes 0..pos-1 = prefix) under the observed law; NaN on a
  // null conditioning event.
  double conditional(int pos, std::size_t prefix, std::size_t v) const {
    const double den = marginal(pos - 1, prefix);
    if (den <= 0.0) return std::numeric_limits<double>::quiet_NaN();
    return marginal(pos, prefix * cardinality(pos) + v) / den;
  }

  // Prefix through `pos` of a full state code.
  std::size_t prefix_of(std::size_t state, int pos) const { return state / tail_size(pos); }
  std::size_t tail_size(int pos) const { return states() / prefixes(pos); }
  std::size_t digit(std::size_t state, int pos) const { return prefix_of(state, pos) % cardinality(pos); }

  // Support indices of nodes 0..pos from a prefix code through pos.
  void decode(std::size_t prefix, int pos, std::vector<std::size_t>& idx) const {
    for (int j = pos; j >= 0; --j) {
      const std::size_t S = cardinality(j);
      idx[static_cast<std::size_t>(j)] = prefix % S;
      prefix /= S;
    }
  }

 private:
  NpsemSpec spec_;
  std::vector<std::size_t> count_;
  std::vector<std::vector<double>> marg_;
};

struct RegimeIndices {
  std::vector<std::size_t> a_prime, a_star;  // support indices per t (index t-1)
};

inline RegimeIndices regime_indices(const NpsemSpec& s, const InterventionPair& pair) {
  if (static_cast<int>(pair.a_prime.size()) != s.tau || static_cast<int>(pair.a_star.size()) != s.tau)
    throw ValidationError("intervention regimes need one value per time point");
  RegimeIndices r;
  for (int t = 1; t <= s.tau; ++t) {
    const auto& a = s.node(pos_A(t));
    auto ip = a.index_of(pair.a_prime[static_cast<std::size_t>(t - 1)]);
    auto is = a.index_of(pair.a_star[static_cast<std::size_t>(t - 1)]);
    if (!ip || !is) throw ValidationError("intervention value outside the support of A" + std::to_string(t));
    if (s.is_censored_level(a.support[*ip]) || s.is_censored_level(a.support[*is]))
      throw ValidationError("intervention selects a censored level of A" + std::to_string(t));
    r.a_prime.push_back(*ip);
    r.a_star.push_back(*is);
  }
  return r;
}

struct ThetaResult {
  double theta = 0.0;
  std::vector<double> phi, lambda;  // per mediator path code
  std::vector<std::string> issues;  // null conditioning events met on the way
};

namespace detail {

// Sum over L/Z (and Y) values with observed-law conditionals; A fixed to the
// regime, M fixed to the path (optionally weighted by its conditional).
inline void gformula_walk(const Oracle& o, int pos, int last, std::size_t prefix, double weight,
                          const std::vector<std::size_t>& a, const std::vector<std::size_t>& m, bool weight_m,
                          double& acc, bool& null_event) {
  if (weight == 0.0) return;
  if (pos > last) {
    acc += weight * (last == o.spec().node_count() - 1 ? o.spec().nodes.back().support[prefix % o.cardinality(last)]
                                                       : 1.0);
    return;
  }
  const NodeKind kind = o.spec().node(pos).kind;
  const int t = pos / 4 + 1;
  const std::size_t S = o.cardinality(pos);
  if (o.marginal(pos - 1, prefix) <= 0.0) {
    null_event = true;
    return;
  }
  if (kind == NodeKind::A) {
    gformula_walk(o, pos + 1, last, prefix * S + a[static_cast<std::size_t>(t - 1)], weight, a, m, weight_m, acc,
                  null_event);
    return;
  }
  if (kind == NodeKind::M) {
    const std::size_t v = m[static_cast<std::size_t>(t - 1)];
    const double w = weight_m ? weight * o.conditional(pos, prefix, v) : weight;
    gformula_walk(o, pos + 1, last, prefix * S + v, w, a, m, weight_m, acc, null_event);
    return;
  }
  for (std::size_t v = 0; v < S; ++v)
    gformula_walk(o, pos + 1, last, prefix * S + v, weight * o.conditional(pos, prefix, v), a, m, weight_m, acc,
                  null_event);
}

// Forward enumeration of the intervened structural system.
inline void structural_walk(const NpsemSpec& s, int pos, int last, std::vector<std::size_t>& idx, double weight,
                            const std::vector<std::size_t>& a, const std::vector<std::size_t>* m_fixed,
                            const MediatorSupports& ms, std::vector<double>& acc) {
  if (weight == 0.0) return;
  if (pos > last) {
    if (m_fixed) {
      acc[0] += weight * s.nodes.back().support[idx[static_cast<std::size_t>(last)]];
    } else {
      std::vector<std::size_t> mi;
      for (int t = 1; t <= s.tau; ++t) mi.push_back(idx[static_cast<std::size_t>(pos_M(t))]);
      acc[ms.encode(mi, 1)] += weight;
    }
    return;
  }
  const auto& n = s.node(pos);
  const std::size_t cfg = s.parent_config(pos, idx);
  if (n.kind == NodeKind::A) {
    idx[static_cast<std::size_t>(pos)] = a[static_cast<std::size_t>(n.t - 1)];
    structural_walk(s, pos + 1, last, idx, weight, a, m_fixed, ms, acc);
    return;
  }
  if (n.kind == NodeKind::M && m_fixed) {
    idx[static_cast<std::size_t>(pos)] = (*m_fixed)[static_cast<std::size_t>(n.t - 1)];
    structural_walk(s, pos + 1, last, idx, weight, a, m_fixed, ms, acc);
    return;
  }
  for (std::size_t v = 0; v < n.cardinality(); ++v) {
    idx[static_cast<std::size_t>(pos)] = v;
    structural_walk(s, pos + 1, last, idx, weight * s.cpt(pos, cfg, v), a, m_fixed, ms, acc);
  }
}

inline std::vector<std::size_t> path_indices(const MediatorSupports& ms, std::size_t code) {
  std::vector<std::size_t> out;
  for (int t = 1; t <= ms.tau(); ++t) out.push_back(ms.index_at(code, 1, t));
  return out;
}

}  // namespace detail

// phi(m) = sum over (l, z) of y * prod p(l_{t+1} | h'_L) p(z_t | h'_Z) p(l_1) and
// lambda(m) = sum over (l, z) of prod p(m_t | h*_M) p(z_t | h*_Z) p(l_t | h*_L),
// with conditionals of the observed law.
inline ThetaResult true_theta_identification(const Oracle& o, const InterventionPair& pair) {
  const NpsemSpec& s = o.spec();
  const RegimeIndices r = regime_indices(s, pair);
  const MediatorSupports ms = s.mediator_supports();
  ThetaResult out;
  bool null_event = false;
  for (std::size_t code = 0; code < ms.path_count(); ++code) {
    const auto m = detail::path_indices(ms, code);
    double phi = 0.0, lambda = 0.0;
    detail::gformula_walk(o, 0, s.node_count() - 1, 0, 1.0, r.a_prime, m, false, phi, null_event);
    detail::gformula_walk(o, 0, pos_M(s.tau), 0, 1.0, r.a_star, m, true, lambda, null_event);
    out.phi.push_back(phi);
    out.lambda.push_back(lambda);
    out.theta += phi * lambda;
  }
  if (null_event) out.issues.push_back("identification formula met a null conditioning event (positivity)");
  return out;
}

// theta = sum_m E[Y(a', m)] P(M(a*) = m) by enumerating the intervened
// structural equations directly.
inline ThetaResult true_theta_counterfactual(const NpsemSpec& s, const InterventionPair& pair) {
  s.check();
  if (s.state_space() > kStateGuard) throw ResourceError("state space exceeds the guard of 1e7");
  const RegimeIndices r = regime_indices(s, pair);
  const MediatorSupports ms = s.mediator_supports();
  std::vector<std::size_t> idx(static_cast<std::size_t>(s.node_count()), 0);
  ThetaResult out;
  out.lambda.assign(ms.path_count(), 0.0);
  detail::structural_walk(s, 0, pos_M(s.tau), idx, 1.0, r.a_star, nullptr, ms, out.lambda);
  for (std::size_t code = 0; code < ms.path_count(); ++code) {
    const auto m = detail::path_indices(ms, code);
    std::vector<double> acc(1, 0.0);
    detail::structural_walk(s, 0, s.node_count() - 1, idx, 1.0, r.a_prime, &m, ms, acc);
    out.phi.push_back(acc[0]);
    out.theta += acc[0] * out.lambda[code];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Sequential regressions

struct SequentialTables {
  InterventionPair pair;
  MediatorSupports supports;
  // Index [t-1]; QL[t] over (prefix through Z_t, suffix at t), QZ/QM over
  // (prefix through L_t, suffix at t): entry = prefix * suffix_count(t) + suffix.
  std::vector<std::vector<double>> QL, QZ, QM;
  std::vector<double> QL0, QM0;  // per path code
  std::size_t null_events = 0;   // entries left undefined (NaN)

  double ql(int t, std::size_t prefix, std::size_t suffix) const {
    return QL[static_cast<std::size_t>(t - 1)][prefix * supports.suffix_count(t) + suffix];
  }
  double qz(int t, std::size_t prefix, std::size_t suffix) const {
    return QZ[static_cast<std::size_t>(t - 1)][prefix * supports.suffix_count(t) + suffix];
  }
  double qm(int t, std::size_t prefix, std::size_t suffix) const {
    return QM[static_cast<std::size_t>(t - 1)][prefix * supports.suffix_count(t) + suffix];
  }
};

// Backward recursion with Q_{Z,tau+1} = Y and Q_{M,tau+1} = 1:
//   Q_{L,t} = E[Q_{Z,t+1} | M_t = m_t, H_{M,t}]
//   Q_{Z,t} = E[Q_{L,t} | A_t = a'_t, H_{A,t}]
//   Q_{M,t} = E[1{M_t = m_t} Q_{M,t+1} | A_t = a*_t, H_{A,t}]
// and Q_{L,0} = E[Q_{Z,1}], Q_{M,0} = E[Q_{M,1}].
inline SequentialTables sequential_regression_oracle(const Oracle& o, const InterventionPair& pair) {
  const NpsemSpec& s = o.spec();
  const int tau = s.tau;
  const RegimeIndices r = regime_indices(s, pair);
  SequentialTables q;
  q.pair = pair;
  q.supports = s.mediator_supports();
  const auto& ms = q.supports;
  q.QL.resize(static_cast<std::size_t>(tau));
  q.QZ.resize(static_cast<std::size_t>(tau));
  q.QM.resize(static_cast<std::size_t>(tau));
  const double nan = std::numeric_limits<double>::quiet_NaN();
  const auto& ysup = s.nodes.back().support;
  for (int t = tau; t >= 1; --t) {
    const std::size_t suf = ms.suffix_count(t);
    const std::size_t J = ms.cardinality(t);
    const std::size_t SA = o.cardinality(pos_A(t)), SZ = o.cardinality(pos_Z(t)), SM = o.cardinality(pos_M(t));
    const std::size_t SL = o.cardinality(pos_L(t + 1));
    const std::size_t suf_next = t < tau ? ms.suffix_count(t + 1) : 1;
    auto& QL = q.QL[static_cast<std::size_t>(t - 1)];
    auto& QZ = q.QZ[static_cast<std::size_t>(t - 1)];
    auto& QM = q.QM[static_cast<std::size_t>(t - 1)];
    const auto* QZn = t < tau ? &q.QZ[static_cast<std::size_t>(t)] : nullptr;
    const auto* QMn = t < tau ? &q.QM[static_cast<std::size_t>(t)] : nullptr;

    const std::size_t nZ = o.prefixes(pos_Z(t));
    QL.assign(nZ * suf, nan);
    for (std::size_t h = 0; h < nZ; ++h) {
      for (std::size_t sc = 0; sc < suf; ++sc) {
        const std::size_t j = sc % J, tail = sc / J;
        const std::size_t mc = h * SM + j;
        const double den = o.marginal(pos_M(t), mc);
        if (den <= 0.0) {
          ++q.null_events;
          continue;
        }
        double acc = 0.0;
        for (std::size_t l = 0; l < SL; ++l) {
          const double w = o.marginal(pos_L(t + 1), mc * SL + l);
          if (w == 0.0) continue;
          acc += w * (t == tau ? ysup[l] : (*QZn)[(mc * SL + l) * suf_next + tail]);
        }
        QL[h * suf + sc] = acc / den;
      }
    }

    const std::size_t nA = o.prefixes(pos_L(t));
    QZ.assign(nA * suf, nan);
    QM.assign(nA * suf, nan);
    for (std::size_t h = 0; h < nA; ++h) {
      const std::size_t ap = h * SA + r.a_prime[static_cast<std::size_t>(t - 1)];
      const std::size_t as = h * SA + r.a_star[static_cast<std::size_t>(t - 1)];
      const double den_p = o.marginal(pos_A(t), ap);
      const double den_s = o.marginal(pos_A(t), as);
      for (std::size_t sc = 0; sc < suf; ++sc) {
        const std::size_t j = sc % J, tail = sc / J;
        if (den_p > 0.0) {
          double acc = 0.0;
          for (std::size_t z = 0; z < SZ; ++z) {
            const double w = o.marginal(pos_Z(t), ap * SZ + z);
            if (w != 0.0) acc += w * QL[(ap * SZ + z) * suf + sc];
          }
          QZ[h * suf + sc] = acc / den_p;
        } else {
          ++q.null_events;
        }
        if (den_s > 0.0) {
          double acc = 0.0;
          for (std::size_t z = 0; z < SZ; ++z) {
            const std::size_t mc = (as * SZ + z) * SM + j;
            if (t == tau) {
              acc += o.marginal(pos_M(t), mc);
              continue;
            }
            for (std::size_t l = 0; l < SL; ++l) {
              const double w = o.marginal(pos_L(t + 1), mc * SL + l);
              if (w != 0.0) acc += w * (*QMn)[(mc * SL + l) * suf_next + tail];
            }
          }
          QM[h * suf + sc] = acc / den_s;
        } else {
          ++q.null_events;
        }
      }
    }
  }
  const std::size_t paths = ms.path_count();
  q.QL0.assign(paths, 0.0);
  q.QM0.assign(paths, 0.0);
  for (std::size_t l = 0; l < o.cardinality(0); ++l) {
    const double w = o.marginal(0, l);
    if (w == 0.0) continue;
    for (std::size_t code = 0; code < paths; ++code) {
      q.QL0[code] += w * q.qz(1, l, code);
      q.QM0[code] += w * q.qm(1, l, code);
    }
  }
  return q;
}

// ---------------------------------------------------------------------------
// Nuisance views over full states

// Tilts of the exact nuisances: propensities g(v|h) exp(eps d) renormalized,
// Q_L and Q_Z shifted by eps d, Q_M moved to Q + eps d Q (1 - Q). The
// directions d in [-1, 1] are drawn once per table entry from `seed`, so
// scaling eps scales the perturbation along a fixed direction.
struct PerturbedNuisance {
  double epsilon = 0.0;
  std::uint64_t seed = 0;
  bool propensities = true;
  bool regressions = true;
};

class NuisanceView {
 public:
  NuisanceView(const Oracle& o, const SequentialTables& q, const PerturbedNuisance* p = nullptr)
      : o_(o), q_(q), r_(regime_indices(o.spec(), q.pair)) {
    if (!p || p->epsilon == 0.0) return;
    if (std::abs(p->epsilon) > 1.0) throw ValidationError("perturbation magnitude must be <= 1");
    eps_ = p->epsilon;
    Rng rng(p->seed);
    const int tau = o.tau();
    auto draw = [&](std::size_t n) {
      std::vector<double> d(n);
      for (auto& x : d) x = 2.0 * rng.uniform() - 1.0;
      return d;
    };
    for (int t = 1; t <= tau; ++t) {
      const std::size_t nA = o.prefixes(pos_A(t)), nM = o.prefixes(pos_M(t));
      dA_.push_back(p->propensities ? draw(nA) : std::vector<double>(nA, 0.0));
      dM_.push_back(p->propensities ? draw(nM) : std::vector<double>(nM, 0.0));
      const auto k = static_cast<std::size_t>(t - 1);
      dQL_.push_back(p->regressions ? draw(q.QL[k].size()) : std::vector<double>(q.QL[k].size(), 0.0));
      dQZ_.push_back(p->regressions ? draw(q.QZ[k].size()) : std::vector<double>(q.QZ[k].size(), 0.0));
      dQM_.push_back(p->regressions ? draw(q.QM[k].size()) : std::vector<double>(q.QM[k].size(), 0.0));
    }
  }

  // g_{A,t}(v | h) with h a prefix through L_t.
  double gA(int t, std::size_t h, std::size_t v) const { return tilted(pos_A(t), h, v, dA_, t); }
  // g_{M,t}(v | h) with h a prefix through Z_t.
  double gM(int t, std::size_t h, std::size_t v) const { return tilted(pos_M(t), h, v, dM_, t); }

  double QL(int t, std::size_t h, std::size_t suf) const {
    const std::size_t e = h * q_.supports.suffix_count(t) + suf;
    const double v = q_.QL[static_cast<std::size_t>(t - 1)][e];
    return eps_ == 0.0 ? v : v + eps_ * dQL_[static_cast<std::size_t>(t - 1)][e];
  }
  double QZ(int t, std::size_t h, std::size_t suf) const {
    const std::size_t e = h * q_.supports.suffix_count(t) + suf;
    const double v = q_.QZ[static_cast<std::size_t>(t - 1)][e];
    return eps_ == 0.0 ? v : v + eps_ * dQZ_[static_cast<std::size_t>(t - 1)][e];
  }
  double QM(int t, std::size_t h, std::size_t suf) const {
    const std::size_t e = h * q_.supports.suffix_count(t) + suf;
    const double v = q_.QM[static_cast<std::size_t>(t - 1)][e];
    return eps_ == 0.0 ? v : v + eps_ * dQM_[static_cast<std::size_t>(t - 1)][e] * v * (1.0 - v);
  }

  // Nuisance values along full state x and the mediator path `code`.
  PathNuisance at(std::size_t x, std::size_t code) const {
    const int tau = o_.tau();
    const auto& ms = q_.supports;
    PathNuisance e;
    for (int t = 1; t <= tau; ++t) {
      const std::size_t hA = o_.prefix_of(x, pos_L(t));
      const std::size_t hM = o_.prefix_of(x, pos_Z(t));
      const std::size_t a = o_.digit(x, pos_A(t));
      const std::size_t m_obs = o_.digit(x, pos_M(t));
      const std::size_t j = ms.index_at(code, 1, t);
      std::size_t suf = code;
      for (int k = 1; k < t; ++k) suf /= ms.cardinality(k);
      const auto k = static_cast<std::size_t>(t - 1);
      e.GA_prime.push_back(a == r_.a_prime[k] ? 1.0 / gA(t, hA, a) : 0.0);
      e.GA_star.push_back(a == r_.a_star[k] ? 1.0 / gA(t, hA, a) : 0.0);
      e.GM.push_back(m_obs == j ? 1.0 / gM(t, hM, j) : 0.0);
      e.QL.push_back(QL(t, hM, suf));
      e.QZ.push_back(QZ(t, hA, suf));
      e.QM.push_back(QM(t, hA, suf));
      e.mediator_match.push_back(m_obs == j ? 1.0 : 0.0);
    }
    e.y = o_.spec().nodes.back().support[o_.digit(x, o_.spec().node_count() - 1)];
    return e;
  }

  const Oracle& oracle() const { return o_; }
  const SequentialTables& tables() const { return q_; }
  const RegimeIndices& regimes() const { return r_; }

 private:
  double tilted(int pos, std::size_t h, std::size_t v, const std::vector<std::vector<double>>& d, int t) const {
    if (eps_ == 0.0) return o_.conditional(pos, h, v);
    const std::size_t S = o_.cardinality(pos);
    const auto& dd = d[static_cast<std::size_t>(t - 1)];
    double total = 0.0, target = 0.0;
    for (std::size_t u = 0; u < S; ++u) {
      const double w = o_.conditional(pos, h, u) * std::exp(eps_ * dd[h * S + u]);
      total += w;
      if (u == v) target = w;
    }
    return target / total;
  }

  const Oracle& o_;
  const SequentialTables& q_;
  RegimeIndices r_;
  double eps_ = 0.0;
  std::vector<std::vector<double>> dA_, dM_, dQL_, dQZ_, dQM_;
};

// ---------------------------------------------------------------------------
// Efficient influence function

struct EifTable {
  std::vector<double> prob;  // per full state
  std::vector<double> s;     // S(x, eta); 0 on null states
  double mean = 0.0;
  double variance = 0.0;
};

// S(x) = sum_m [(D_{Z,1} - phi) lambda + (D_{M,1} - lambda) phi] at the true
// nuisances; returns E[S] and Var[S], the efficiency bound.
inline EifTable efficiency_bound(const Oracle& o, const InterventionPair& pair) {
  const SequentialTables q = sequential_regression_oracle(o, pair);
  const ThetaResult th = true_theta_identification(o, pair);
  const NuisanceView view(o, q);
  EifTable out;
  out.prob.resize(o.states());
  out.s.assign(o.states(), 0.0);
  for (std::size_t x = 0; x < o.states(); ++x) {
    out.prob[x] = o.probability(x);
    if (out.prob[x] == 0.0) continue;
    double s = 0.0;
    for (std::size_t code = 0; code < q.supports.path_count(); ++code) {
      const PathD d = path_recursions(view.at(x, code));
      s += (d.DZ[0] - th.phi[code]) * th.lambda[code] + (d.DM[0] - th.lambda[code]) * th.phi[code];
    }
    out.s[x] = s;
    out.mean += out.prob[x] * s;
  }
  for (std::size_t x = 0; x < o.states(); ++x)
    if (out.prob[x] > 0.0) out.variance += out.prob[x] * (out.s[x] - out.mean) * (out.s[x] - out.mean);
  return out;
}

// ---------------------------------------------------------------------------
// First-order expansions of Q_L, Q_Z, Q_M

struct VonMisesResult {
  NodeKind kind = NodeKind::Z;  // L, Z or M
  int t = 1;
  double max_residual = 0.0;          // |Q - E[D(eta~)] - R| with the corrected remainder
  double max_residual_literal = 0.0;  // same with the remainder as printed
  double remainder_l1 = 0.0;          // sum over strata and suffixes of |R|
  std::size_t strata = 0;
};

namespace detail {

// Remainder terms at full state x for suffix-based path `code` (entries
// before t unused). Returns {corrected, literal}.
struct RemainderTerms {
  double corrected = 0.0, literal = 0.0;
};

inline double product(const std::vector<double>& v, int from, int to) {  // 1-based inclusive
  double p = 1.0;
  for (int r = from; r <= to; ++r) p *= v[static_cast<std::size_t>(r - 1)];
  return p;
}

}  // namespace detail

// Checks, for every t, suffix and positive-probability conditioning stratum,
//   Q_{L,t} = E[D_{Z,t+1}(eta~) | M_t = m_t, H_{M,t}] + R_{L,t}
//   Q_{Z,t} = E[D_{L,t}(eta~) | A_t = a'_t, H_{A,t}] + R_{Z,t}
//   Q_{M,t} = E[1{M_t = m_t} D_{M,t+1}(eta~) | A_t = a*_t, H_{A,t}] + R_{M,t}.
// The corrected R_{M,t} carries the mediator indicators prod_{k=t}^{s-1}
// 1{M_k = m_k}; the literal variants drop them (R_M) or condition on
// A_t..A_tau = a' (second sum of R_Z).
inline std::vector<VonMisesResult> von_mises_check(const Oracle& o, const InterventionPair& pair,
                                                   const PerturbedNuisance& perturbation) {
  const SequentialTables q = sequential_regression_oracle(o, pair);
  const NuisanceView truth(o, q);
  const NuisanceView tilt(o, q, &perturbation);
  const int tau = o.tau();
  const auto& ms = q.supports;
  const RegimeIndices& reg = truth.regimes();
  std::vector<VonMisesResult> out;

  for (int t = 1; t <= tau; ++t) {
    const std::size_t suf = ms.suffix_count(t);
    std::size_t lead = 1;
    for (int k = 1; k < t; ++k) lead *= ms.cardinality(k);
    VonMisesResult rl{NodeKind::L, t}, rz{NodeKind::Z, t}, rm{NodeKind::M, t};

    for (std::size_t sc = 0; sc < suf; ++sc) {
      const std::size_t code = sc * lead;  // m_1..m_{t-1} at index 0; unused
      const std::size_t j = ms.index_at(code, 1, t);

      // Q_{Z,t} and Q_{M,t}: strata are prefixes through L_t.
      for (std::size_t h = 0; h < o.prefixes(pos_L(t)); ++h) {
        for (int which = 0; which < 2; ++which) {
          const bool z_kind = which == 0;
          const std::size_t a = z_kind ? reg.a_prime[static_cast<std::size_t>(t - 1)]
                                       : reg.a_star[static_cast<std::size_t>(t - 1)];
          const std::size_t block = h * o.cardinality(pos_A(t)) + a;
          const double den = o.marginal(pos_A(t), block);
          if (den <= 0.0) continue;
          const std::size_t width = o.tail_size(pos_A(t));
          double e_d = 0.0, r_c = 0.0, r_lit = 0.0, lit_num = 0.0, lit_den = 0.0;
          for (std::size_t x = block * width; x < (block + 1) * width; ++x) {
            const double p = o.probability(x);
            if (p == 0.0) continue;
            const PathNuisance et = tilt.at(x, code);
            const PathNuisance e0 = truth.at(x, code);
            const PathD d = path_recursions(et);
            const auto k0 = static_cast<std::size_t>(t - 1);
            if (z_kind) {
              e_d += p * d.DL[k0];
              // R_{Z,t}
              double first = 0.0, second = 0.0;
              for (int s = t; s <= tau; ++s) {
                const auto k = static_cast<std::size_t>(s - 1);
                first += detail::product(et.GA_prime, t + 1, s) * detail::product(et.GM, t, s - 1) *
                         (et.GM[k] - e0.GM[k]) * (et.QL[k] - e0.QL[k]);
              }
              for (int s = t + 1; s <= tau; ++s) {
                const auto k = static_cast<std::size_t>(s - 1);
                second += detail::product(et.GA_prime, t + 1, s - 1) * detail::product(et.GM, t, s - 1) *
                          (et.GA_prime[k] - e0.GA_prime[k]) * (et.QZ[k] - e0.QZ[k]);
              }
              r_c += p * (first + second);
              r_lit += p * first;
              bool all_prime = true;
              for (int s = t; s <= tau; ++s)
                all_prime = all_prime && o.digit(x, pos_A(s)) == reg.a_prime[static_cast<std::size_t>(s - 1)];
              if (all_prime) {
                lit_num += p * second;
                lit_den += p;
              }
            } else {
              e_d += p * (e0.mediator_match[k0] != 0.0 ? (t < tau ? d.DM[k0 + 1] : 1.0) : 0.0);
              double corrected = 0.0, literal = 0.0;
              for (int s = t + 1; s <= tau; ++s) {
                const auto k = static_cast<std::size_t>(s - 1);
                const double base = detail::product(et.GA_star, t + 1, s - 1) * (et.GA_star[k] - e0.GA_star[k]) *
                                    (et.QM[k] - e0.QM[k]);
                corrected += detail::product(e0.mediator_match, t, s - 1) * base;
                literal += base;
              }
              r_c += p * corrected;
              r_lit += p * literal;
            }
          }
          const std::size_t hA = h;
          const double lhs = z_kind ? truth.QZ(t, hA, sc) : truth.QM(t, hA, sc);
          const double expect = e_d / den;
          const double rem = r_c / den;
          double rem_literal = r_lit / den;
          if (z_kind) rem_literal += lit_den > 0.0 ? lit_num / lit_den : 0.0;
          VonMisesResult& res = z_kind ? rz : rm;
          res.max_residual = std::max(res.max_residual, std::abs(lhs - expect - rem));
          res.max_residual_literal = std::max(res.max_residual_literal, std::abs(lhs - expect - rem_literal));
          res.remainder_l1 += std::abs(rem);
          ++res.strata;
        }
      }

      // Q_{L,t}: strata are prefixes through Z_t, conditioning on M_t = m_t.
      for (std::size_t h = 0; h < o.prefixes(pos_Z(t)); ++h) {
        const std::size_t block = h * o.cardinality(pos_M(t)) + j;
        const double den = o.marginal(pos_M(t), block);
        if (den <= 0.0) continue;
        const std::size_t width = o.tail_size(pos_M(t));
        double e_d = 0.0, r_c = 0.0;
        for (std::size_t x = block * width; x < (block + 1) * width; ++x) {
          const double p = o.probability(x);
          if (p == 0.0) continue;
          const PathNuisance et = tilt.at(x, code);
          const PathNuisance e0 = truth.at(x, code);
          const PathD d = path_recursions(et);
          e_d += p * (t < tau ? d.DZ[static_cast<std::size_t>(t)] : et.y);
          double rem = 0.0;
          for (int s = t + 1; s <= tau; ++s) {
            const auto k = static_cast<std::size_t>(s - 1);
            rem += detail::product(et.GA_prime, t + 1, s) * detail::product(et.GM, t + 1, s - 1) *
                   (et.GM[k] - e0.GM[k]) * (et.QL[k] - e0.QL[k]);
            rem += detail::product(et.GA_prime, t + 1, s - 1) * detail::product(et.GM, t + 1, s - 1) *
                   (et.GA_prime[k] - e0.GA_prime[k]) * (et.QZ[k] - e0.QZ[k]);
          }
          r_c += p * rem;
        }
        const double lhs = truth.QL(t, h, sc);
        const double residual = std::abs(lhs - e_d / den - r_c / den);
        rl.max_residual = std::max(rl.max_residual, residual);
        rl.max_residual_literal = std::max(rl.max_residual_literal, residual);
        rl.remainder_l1 += std::abs(r_c / den);
        ++rl.strata;
      }
    }
    out.push_back(rl);
    out.push_back(rz);
    out.push_back(rm);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Positivity

struct AssumptionReport {
  bool a1_by_construction = true;  // exchangeability holds for CPT-generated models
  std::vector<std::string> a2_treatment;
  std::vector<std::string> a2_mediator;
  bool ok() const { return a2_treatment.empty() && a2_mediator.empty(); }
};

namespace detail {

inline std::string describe_prefix(const Oracle& o, std::size_t prefix, int pos) {
  std::vector<std::size_t> idx(static_cast<std::size_t>(o.spec().node_count()), 0);
  o.decode(prefix, pos, idx);
  std::string out;
  for (int k = 0; k <= pos; ++k) {
    if (!o.spec().node(k).present) continue;
    if (!out.empty()) out += ",";
    out += o.spec().node(k).name + "=" + nlohmann::json(o.spec().node(k).support[idx[static_cast<std::size_t>(k)]]).dump();
  }
  return out.empty() ? "(empty history)" : out;
}

// Prefix through `pos` reachable with A_1..A_t following the regime.
inline bool follows(const Oracle& o, std::size_t prefix, int pos, const std::vector<std::size_t>& regime) {
  std::vector<std::size_t> idx(static_cast<std::size_t>(o.spec().node_count()), 0);
  o.decode(prefix, pos, idx);
  for (int t = 1; pos_A(t) <= pos && t <= o.tau(); ++t)
    if (idx[static_cast<std::size_t>(pos_A(t))] != regime[static_cast<std::size_t>(t - 1)]) return false;
  return true;
}

}  // namespace detail

// A2(i): g_{A,t}(a_t | H) > 0 on every reachable history that follows the
// same regime so far, for a in {a', a*}. A2(ii): a mediator value with
// positive probability on some reachable a*-history must have positive
// probability on every reachable a'-history.
inline AssumptionReport check_assumptions(const Oracle& o, const InterventionPair& pair) {
  const RegimeIndices r = regime_indices(o.spec(), pair);
  AssumptionReport rep;
  for (int t = 1; t <= o.tau(); ++t) {
    for (int which = 0; which < 2; ++which) {
      const auto& reg = which == 0 ? r.a_prime : r.a_star;
      const char* label = which == 0 ? "a'" : "a*";
      for (std::size_t h = 0; h < o.prefixes(pos_L(t)); ++h) {
        if (o.marginal(pos_L(t), h) <= 0.0 || !detail::follows(o, h, pos_L(t), reg)) continue;
        if (o.conditional(pos_A(t), h, reg[static_cast<std::size_t>(t - 1)]) <= 0.0)
          rep.a2_treatment.push_back("A2(i) t=" + std::to_string(t) + " regime " + label +
                                     ": g_A = 0 at " + detail::describe_prefix(o, h, pos_L(t)));
      }
    }
    for (std::size_t m = 0; m < o.cardinality(pos_M(t)); ++m) {
      bool possible_star = false;
      for (std::size_t h = 0; h < o.prefixes(pos_Z(t)) && !possible_star; ++h)
        if (o.marginal(pos_Z(t), h) > 0.0 && detail::follows(o, h, pos_Z(t), r.a_star) &&
            o.conditional(pos_M(t), h, m) > 0.0)
          possible_star = true;
      if (!possible_star) continue;
      for (std::size_t h = 0; h < o.prefixes(pos_Z(t)); ++h) {
        if (o.marginal(pos_Z(t), h) <= 0.0 || !detail::follows(o, h, pos_Z(t), r.a_prime)) continue;
        if (o.conditional(pos_M(t), h, m) <= 0.0)
          rep.a2_mediator.push_back("A2(ii) t=" + std::to_string(t) + " m=" +
                                    nlohmann::json(o.spec().node(pos_M(t)).support[m]).dump() +
                                    ": possible under a* but g_M = 0 at " + detail::describe_prefix(o, h, pos_Z(t)));
      }
    }
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Datasets from specs

// Schema with one column per present node, named L1, A1, Z1, M1, ..., Y.
inline NodeSchema spec_schema(const NpsemSpec& s) {
  NodeSchema schema = NodeSchema::with_tau(s.tau);
  for (int t = 1; t <= s.tau; ++t) {
    if (s.node(pos_L(t)).present) schema.L[t - 1] = {node_name(NodeKind::L, t)};
    schema.A[t - 1] = node_name(NodeKind::A, t);
    if (s.node(pos_Z(t)).present) schema.Z[t - 1] = {node_name(NodeKind::Z, t)};
    schema.M[t - 1] = node_name(NodeKind::M, t);
    schema.mediator_support[t - 1] = s.node(pos_M(t)).support;
  }
  schema.Y = "Y";
  schema.censored_levels = s.censored_levels;
  return schema;
}

// Censor time of a state given support indices (tau + 1 if never censored).
inline int state_censor_time(const NpsemSpec& s, const std::vector<std::size_t>& idx) {
  for (int t = 1; t <= s.tau; ++t)
    if (s.is_censored_level(s.node(pos_A(t)).support[idx[static_cast<std::size_t>(pos_A(t))]])) return t;
  return s.tau + 1;
}

inline bool node_observed(NodeKind kind, int t, int c) {
  switch (kind) {
    case NodeKind::L:
    case NodeKind::A: return t <= c;
    case NodeKind::Z:
    case NodeKind::M: return t < c;
    case NodeKind::Y: return true;
  }
  return false;
}

// Every positive-probability state as one row weighted by its probability
// (values after loss to follow-up masked, identical masked rows merged).
inline LongitudinalDataset enumerate_dataset(const Oracle& o) {
  const NpsemSpec& s = o.spec();
  const int K = s.node_count();
  std::map<std::vector<double>, double> rows;
  std::vector<std::size_t> idx(static_cast<std::size_t>(K));
  const double nan = std::numeric_limits<double>::quiet_NaN();
  for (std::size_t x = 0; x < o.states(); ++x) {
    const double p = o.probability(x);
    if (p == 0.0) continue;
    o.decode(x, K - 1, idx);
    const int c = state_censor_time(s, idx);
    std::vector<double> vals(static_cast<std::size_t>(K));
    for (int k = 0; k < K; ++k) {
      const auto& n = s.node(k);
      vals[static_cast<std::size_t>(k)] =
          node_observed(n.kind, n.t, c) ? n.support[idx[static_cast<std::size_t>(k)]] : nan;
    }
    // NaN keys do not compare; encode masked cells with a sentinel for merging.
    std::vector<double> key = vals;
    for (auto& v : key)
      if (std::isnan(v)) v = -std::numeric_limits<double>::infinity();
    rows[key] += p;
  }
  LongitudinalDataset d(spec_schema(s));
  std::vector<std::vector<double>> cols(static_cast<std::size_t>(K));
  std::vector<double> w;
  for (const auto& [key, p] : rows) {
    for (int k = 0; k < K; ++k) {
      const double v = key[static_cast<std::size_t>(k)];
      cols[static_cast<std::size_t>(k)].push_back(std::isinf(v) && v < 0 ? nan : v);
    }
    w.push_back(p);
  }
  for (int k = 0; k < K; ++k)
    if (s.node(k).present) d.add_column(s.node(k).name, cols[static_cast<std::size_t>(k)]);
  if (rows.empty()) d = LongitudinalDataset(spec_schema(s));
  else d.set_weights(std::move(w));
  return validated_or_throw(d);
}

// Supplies the true nuisance functions of an enumerable model to the
// estimator (rows are matched to model states through their node values).
class ExactNuisance final : public NuisanceSource {
 public:
  ExactNuisance(const Oracle& o, const InterventionPair& pair)
      : o_(o), q_(sequential_regression_oracle(o, pair)), view_(o_, q_) {}

  Eigen::MatrixXd propensity(const PropensityTask& task, CrossFitDiagnostics*) override {
    const auto& d = *task.data;
    const int t = task.t;
    const int pos = task.family == Family::treatment ? pos_A(t) : pos_M(t);
    Eigen::MatrixXd out = Eigen::MatrixXd::Constant(static_cast<Eigen::Index>(d.rows()),
                                                    static_cast<Eigen::Index>(task.levels.size()), kNaN);
    for (std::size_t i = 0; i < d.rows(); ++i) {
      if (!task.available.empty() && !task.available[i]) continue;
      auto h = prefix(d, i, pos - 1);
      if (!h) continue;
      for (std::size_t k = 0; k < task.levels.size(); ++k) {
        auto v = o_.spec().node(pos).index_of(task.levels[k]);
        out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) =
            v ? o_.conditional(pos, *h, *v) : 0.0;
      }
    }
    return out;
  }

  std::vector<double> regression(const RegressionTask& task, CrossFitDiagnostics*) override {
    if (task.pair && (task.pair->a_prime != q_.pair.a_prime || task.pair->a_star != q_.pair.a_star))
      throw ValidationError("exact nuisances were built for a different intervention pair");
    const auto& d = *task.data;
    const auto& p = *task.pooled;
    const int t = task.t;
    const int pos = task.family == Family::QL ? pos_Z(t) : pos_L(t);
    std::vector<double> out(p.size(), kNaN);
    std::vector<std::optional<std::size_t>> cache(d.rows());
    std::vector<char> done(d.rows(), 0);
    for (std::size_t r = 0; r < p.size(); ++r) {
      if (!task.available.empty() && !task.available[r]) continue;
      const std::size_t i = p.source(r);
      if (!done[i]) {
        cache[i] = prefix(d, i, pos);
        done[i] = 1;
      }
      if (!cache[i]) continue;
      std::size_t suf = 0;
      {
        std::vector<std::size_t> indices;
        bool ok = true;
        for (int k = t; k <= o_.tau(); ++k) {
          auto v = o_.spec().node(pos_M(k)).index_of(p.suffix_value(r, k));
          if (!v) ok = false;
          indices.push_back(v.value_or(0));
        }
        if (!ok) continue;
        suf = q_.supports.encode(indices, t);
      }
      switch (task.family) {
        case Family::QL: out[r] = view_.QL(t, *cache[i], suf); break;
        case Family::QZ: out[r] = view_.QZ(t, *cache[i], suf); break;
        case Family::QM: out[r] = view_.QM(t, *cache[i], suf); break;
        default: throw ValidationError("exact nuisance: not a regression family");
      }
    }
    return out;
  }

  const SequentialTables& tables() const { return q_; }

 private:
  // Prefix code through `pos` of row i, or nullopt if a value is missing or
  // outside the model's support.
  std::optional<std::size_t> prefix(const LongitudinalDataset& d, std::size_t i, int pos) const {
    std::size_t code = 0;
    for (int k = 0; k <= pos; ++k) {
      const auto& n = o_.spec().node(k);
      std::size_t v = 0;
      if (n.present) {
        const double x = d.column(n.name)[i];
        auto idx = n.index_of(x);
        if (is_missing(x) || !idx) return std::nullopt;
        v = *idx;
      }
      code = code * n.cardinality() + v;
    }
    return code;
  }

  const Oracle& o_;
  SequentialTables q_;
  NuisanceView view_;
};

}  // namespace lmed
