#pragma once

// `lmed` command-line front end: estimate, simulate, oracle. Settings resolve
// as command-line flag, then --config file, then built-in default.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <new>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "lmed/eif.hpp"
#include "lmed/error.hpp"
#include "lmed/oracle.hpp"
#include "lmed/schema.hpp"
#include "lmed/simulate.hpp"

namespace lmed::cli {

struct RunConfig {
  std::string command;
  std::string config;
  std::string data, schema, spec;
  std::string a_prime, a_star;  // comma-separated, one value per t
  int folds = 5;
  std::uint64_t seed = 1;
  double alpha = 0.05;
  double g_floor = 0.01;
  std::string learners;  // inline JSON or path to a JSON file
  bool contrasts = false;
  std::string out;       // empty: stdout
  unsigned threads = 1;
  std::string n = "500";  // comma-separated ladder
  int reps = 100;
  std::string scenarios = "all-correct";
  std::string csv;
  std::string sample_csv, sample_schema;  // draw one dataset instead of a study
  double epsilon = 1e-3;
};

namespace detail {

inline std::vector<std::string> split(const std::string& s, char sep = ',') {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, sep)) {
    item = lmed::detail::trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

inline double parse_number(const std::string& s, const std::string& what) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size() || !std::isfinite(v)) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ValidationError(what + ": '" + s + "' is not a number");
  }
}

inline std::vector<double> parse_regime(const std::string& s, const std::string& flag) {
  if (s.empty()) throw ValidationError(flag + " is required");
  std::vector<double> out;
  for (const auto& item : split(s)) out.push_back(parse_number(item, flag));
  return out;
}

inline std::vector<std::size_t> parse_ladder(const std::string& s) {
  std::vector<std::size_t> out;
  for (const auto& item : split(s)) {
    const double v = parse_number(item, "--n");
    if (v < 0 || v != std::floor(v)) throw ValidationError("--n: '" + item + "' is not a sample size");
    out.push_back(static_cast<std::size_t>(v));
  }
  if (out.empty()) throw ValidationError("--n: empty sample-size ladder");
  return out;
}

inline nlohmann::json read_json_file(const std::string& path, const std::string& what) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open " + what + " '" + path + "'");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(what + " '" + path + "': " + e.what());
  }
}

// Config values may be strings, numbers or arrays (joined with commas).
inline std::string config_string(const nlohmann::json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_array()) {
    std::string out;
    for (const auto& x : v) {
      if (!out.empty()) out += ",";
      out += config_string(x);
    }
    return out;
  }
  if (v.is_object()) return v.dump();
  if (v.is_number_integer()) return std::to_string(v.get<long long>());
  if (v.is_number()) {
    std::ostringstream s;
    s.precision(17);
    s << v.get<double>();
    return s.str();
  }
  if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
  throw ValidationError("unsupported config value " + v.dump());
}

inline LearnerConfig parse_learners(const std::string& s) {
  if (s.empty()) return {};
  const nlohmann::json j = s.front() == '{' ? nlohmann::json::parse(s) : read_json_file(s, "learner file");
  if (!j.is_object()) throw ValidationError("learners must be a JSON object keyed by family");
  return learner_config_from_json(j);
}

inline void write_output(const std::string& path, const std::string& text) {
  if (path.empty()) {
    std::cout << text << '\n';
    return;
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write '" + path + "'");
  out << text << '\n';
}

inline std::string dump(const nlohmann::ordered_json& j) { return j.dump(2); }

}  // namespace detail

inline EstimatorConfig estimator_config(const RunConfig& rc) {
  EstimatorConfig ec;
  ec.folds = rc.folds;
  ec.seed = rc.seed;
  ec.alpha = rc.alpha;
  ec.g_floor = rc.g_floor;
  ec.learners = detail::parse_learners(rc.learners);
  ec.check();
  return ec;
}

inline InterventionPair intervention(const RunConfig& rc) {
  return {detail::parse_regime(rc.a_prime, "--a-prime"), detail::parse_regime(rc.a_star, "--a-star")};
}

inline nlohmann::ordered_json cmd_estimate(const RunConfig& rc) {
  if (rc.data.empty() || rc.schema.empty()) throw ValidationError("estimate needs --data and --schema");
  const EstimatorConfig ec = estimator_config(rc);
  const InterventionPair pair = intervention(rc);
  const NodeSchema schema = read_schema(rc.schema);
  const LongitudinalDataset d = validated_or_throw(read_csv(rc.data, schema));
  pair.check(d.schema());
  EstimateReport report = rc.contrasts ? estimate_contrasts(d, pair, ec).cross : estimate(d, pair, ec);
  if (!std::isfinite(report.theta) || !std::isfinite(report.se)) throw NumericError("non-finite estimate");
  auto j = to_json(report);
  j["a_prime"] = pair.a_prime;
  j["a_star"] = pair.a_star;
  return j;
}

inline McConfig mc_config(const RunConfig& rc) {
  if (rc.spec.empty()) throw ValidationError("simulate needs --spec");
  McConfig mc;
  mc.spec = read_spec(rc.spec);
  mc.pair = intervention(rc);
  mc.n_ladder = detail::parse_ladder(rc.n);
  mc.reps = rc.reps;
  mc.seed = rc.seed;
  mc.estimator = estimator_config(rc);
  mc.scenarios.clear();
  for (const auto& s : detail::split(rc.scenarios)) mc.scenarios.push_back(scenario_from_string(s));
  mc.threads = rc.threads;
  mc.pair.check(spec_schema(mc.spec));
  return mc;
}

// Writes one draw of size n (first ladder entry) and its schema.
inline nlohmann::ordered_json cmd_sample(const RunConfig& rc) {
  if (rc.spec.empty()) throw ValidationError("simulate needs --spec");
  const NpsemSpec spec = read_spec(rc.spec);
  const std::size_t n = detail::parse_ladder(rc.n).front();
  const LongitudinalDataset d = sample(spec, n, rc.seed);
  std::ostringstream csv;
  write_csv(csv, d);
  detail::write_output(rc.sample_csv, csv.str().substr(0, csv.str().size() - 1));
  if (!rc.sample_schema.empty()) detail::write_output(rc.sample_schema, schema_to_json(d.schema()).dump(2));
  nlohmann::ordered_json j;
  j["spec"] = rc.spec;
  j["n"] = n;
  j["seed"] = rc.seed;
  j["csv"] = rc.sample_csv;
  j["schema"] = rc.sample_schema;
  return j;
}

inline nlohmann::ordered_json cmd_simulate(const RunConfig& rc) {
  if (!rc.sample_csv.empty()) return cmd_sample(rc);
  const McConfig mc = mc_config(rc);
  const McReport report = run_mc(mc);
  if (!rc.csv.empty()) {
    std::ofstream out(rc.csv, std::ios::binary);
    if (!out) throw ValidationError("cannot write '" + rc.csv + "'");
    write_replications_csv(out, report);
  }
  auto j = to_json(report);
  j["a_prime"] = mc.pair.a_prime;
  j["a_star"] = mc.pair.a_star;
  j["folds"] = mc.estimator.folds;
  return j;
}

inline nlohmann::ordered_json cmd_oracle(const RunConfig& rc) {
  if (rc.spec.empty()) throw ValidationError("oracle needs --spec");
  const NpsemSpec spec = read_spec(rc.spec);
  const InterventionPair pair = intervention(rc);
  pair.check(spec_schema(spec));
  if (!(rc.epsilon > 0.0)) throw ValidationError("--epsilon must be positive");
  const Oracle o(spec);
  const ThetaResult id = true_theta_identification(o, pair);
  const ThetaResult cf = true_theta_counterfactual(spec, pair);
  const SequentialTables q = sequential_regression_oracle(o, pair);
  const EifTable eif = efficiency_bound(o, pair);
  const AssumptionReport as = check_assumptions(o, pair);
  const MediatorSupports& ms = q.supports;

  nlohmann::ordered_json j;
  j["tau"] = spec.tau;
  j["state_space"] = spec.state_space();
  j["a_prime"] = pair.a_prime;
  j["a_star"] = pair.a_star;
  j["theta"] = id.theta;
  j["theta_counterfactual"] = cf.theta;
  j["cross_route_residual"] = std::abs(id.theta - cf.theta);
  double phi_res = 0.0, lambda_res = 0.0, lambda_sum = 0.0, theta_seq = 0.0;
  auto& paths = j["paths"] = nlohmann::ordered_json::array();
  for (std::size_t code = 0; code < ms.path_count(); ++code) {
    phi_res = std::max(phi_res, std::abs(q.QL0[code] - id.phi[code]));
    lambda_res = std::max(lambda_res, std::abs(q.QM0[code] - id.lambda[code]));
    lambda_sum += id.lambda[code];
    theta_seq += q.QL0[code] * q.QM0[code];
    paths.push_back({{"m", ms.values(code, 1)},
                     {"phi", id.phi[code]},
                     {"lambda", id.lambda[code]},
                     {"QL0", q.QL0[code]},
                     {"QM0", q.QM0[code]}});
  }
  j["lambda_sum"] = lambda_sum;
  j["sequential_regression"] = {{"theta", theta_seq},
                                {"max_phi_residual", phi_res},
                                {"max_lambda_residual", lambda_res},
                                {"null_events", q.null_events}};
  j["eif"] = {{"mean", eif.mean}, {"variance", eif.variance}};
  j["assumptions"] = {{"ok", as.ok()},
                      {"a1_by_construction", as.a1_by_construction},
                      {"a2_treatment", as.a2_treatment},
                      {"a2_mediator", as.a2_mediator}};
  j["issues"] = id.issues;

  PerturbedNuisance small{rc.epsilon, rc.seed};
  PerturbedNuisance twice{2.0 * rc.epsilon, rc.seed};
  const auto vm1 = von_mises_check(o, pair, small);
  const auto vm2 = von_mises_check(o, pair, twice);
  auto& vm = j["von_mises"] = {{"epsilon", rc.epsilon}, {"seed", rc.seed}};
  auto& rows = vm["checks"] = nlohmann::ordered_json::array();
  for (std::size_t k = 0; k < vm1.size(); ++k)
    rows.push_back({{"kind", to_string(vm1[k].kind)},
                    {"t", vm1[k].t},
                    {"max_residual", vm1[k].max_residual},
                    {"max_residual_literal", vm1[k].max_residual_literal},
                    {"remainder_l1", vm1[k].remainder_l1},
                    {"remainder_ratio", vm1[k].remainder_l1 > 0 ? vm2[k].remainder_l1 / vm1[k].remainder_l1 : 0.0},
                    {"strata", vm1[k].strata}});
  return j;
}

// Option registry: each flag binds a RunConfig field and the config-file key
// that can supply it when the flag is absent.
class Parser {
 public:
  Parser() : app_("Interventional mediation effects for longitudinal data", "lmed") {
    app_.require_subcommand(1);
    app_.set_version_flag("--version", "lmed 0.1.0");
    auto* est = app_.add_subcommand("estimate", "Cross-fitted estimate of theta(a', a*) from a CSV dataset");
    auto* sim = app_.add_subcommand("simulate", "Monte Carlo study on a structural model spec");
    auto* orc = app_.add_subcommand("oracle", "Exact quantities of a structural model spec by enumeration");
    for (auto* s : {est, sim, orc}) {
      s->get_formatter()->column_width(36);
      add(s, "--config", rc_.config, "JSON config file; flags override its keys", false);
      add(s, "--a-prime", rc_.a_prime, "Regime a', comma-separated per time point");
      add(s, "--a-star", rc_.a_star, "Regime a*, comma-separated per time point");
      add(s, "--seed", rc_.seed, "Random seed");
      add(s, "--out", rc_.out, "Output JSON path (stdout when empty)");
    }
    for (auto* s : {est, sim}) {
      add(s, "--folds", rc_.folds, "Cross-fitting folds V");
      add(s, "--alpha", rc_.alpha, "CI level is 1 - alpha");
      add(s, "--g-floor", rc_.g_floor, "Lower bound on propensities in weights");
      add(s, "--learners", rc_.learners, "Learner candidates per family (inline JSON or file)");
    }
    for (auto* s : {sim, orc}) add(s, "--spec", rc_.spec, "Structural model spec (JSON)");
    add(est, "--data", rc_.data, "Dataset CSV");
    add(est, "--schema", rc_.schema, "Node schema JSON");
    add(est, "--contrasts", rc_.contrasts, "Also estimate direct, indirect and total effects");
    add(sim, "--n", rc_.n, "Sample-size ladder, comma-separated");
    add(sim, "--reps", rc_.reps, "Replications per sample size");
    add(sim, "--scenarios", rc_.scenarios,
        "Comma-separated: all-correct, Q-misspecified, g-misspecified, gA-misspecified, gM-misspecified, "
        "both-misspecified");
    add(sim, "--threads", rc_.threads, "Worker threads");
    add(sim, "--csv", rc_.csv, "Optional per-replication CSV path");
    add(sim, "--sample-csv", rc_.sample_csv, "Write one dataset of size n to this CSV instead of running a study");
    add(sim, "--sample-schema", rc_.sample_schema, "Schema JSON path for --sample-csv");
    add(orc, "--epsilon", rc_.epsilon, "Perturbation size for the von Mises check");
  }

  CLI::App& app() { return app_; }

  // Parses flags, then fills unset fields from --config. Throws CLI11 errors
  // for bad flags and ValidationError for bad config files.
  RunConfig parse(int argc, const char* const* argv) {
    app_.parse(argc, argv);
    for (auto* s : app_.get_subcommands()) rc_.command = s->get_name();
    if (!rc_.config.empty()) apply_config(detail::read_json_file(rc_.config, "config file"));
    return rc_;
  }

 private:
  struct Binding {
    std::vector<std::pair<CLI::App*, CLI::Option*>> options;
    std::function<void(const std::string&)> assign;
  };

  template <typename T>
  void add(CLI::App* sub, const std::string& flag, T& field, const std::string& help, bool from_config = true) {
    CLI::Option* opt = nullptr;
    if constexpr (std::is_same_v<T, bool>) {
      opt = sub->add_flag(flag, field, help)->default_str("false");
    } else {
      opt = sub->add_option(flag, field, help)->capture_default_str();
      if (opt->get_default_str().empty()) opt->default_str("none");
    }
    if (!from_config) return;
    std::string key = flag.substr(2);
    auto& b = bindings_[key];
    b.options.emplace_back(sub, opt);
    if (!b.assign) b.assign = [&field, key](const std::string& value) {
      if constexpr (std::is_same_v<T, std::string>) {
        field = value;
      } else if constexpr (std::is_same_v<T, bool>) {
        if (value != "true" && value != "false") throw ValidationError("config key '" + key + "' must be a boolean");
        field = value == "true";
      } else {
        const double v = detail::parse_number(value, "config key '" + key + "'");
        if constexpr (std::is_integral_v<T>) {
          if (v != std::floor(v) || (std::is_unsigned_v<T> && v < 0))
            throw ValidationError("config key '" + key + "' must be a non-negative integer");
        }
        field = static_cast<T>(v);
      }
    };
  }

  void apply_config(const nlohmann::json& j) {
    if (!j.is_object()) throw ValidationError("config file must hold a JSON object");
    for (const auto& [raw, value] : j.items()) {
      std::string key = raw;
      std::replace(key.begin(), key.end(), '_', '-');
      if (key == "command") continue;
      auto it = bindings_.find(key);
      if (it == bindings_.end()) throw ValidationError("unknown config key '" + raw + "'");
      bool given = false, known = false;
      for (auto [sub, opt] : it->second.options) {
        if (sub != app_.get_subcommands().front()) continue;
        known = true;
        given = given || opt->count() > 0;
      }
      if (!known) throw ValidationError("config key '" + raw + "' does not apply to '" + rc_.command + "'");
      if (!given) it->second.assign(detail::config_string(value));
    }
  }

  CLI::App app_;
  RunConfig rc_;
  std::map<std::string, Binding> bindings_;
};

inline void report_error(std::ostream& err, ExitCode code, const std::string& message) {
  nlohmann::ordered_json j;
  const char* kind = code == ExitCode::validation ? "validation"
                     : code == ExitCode::numeric  ? "numeric"
                     : code == ExitCode::resource ? "resource"
                                                  : "internal";
  std::vector<std::string> lines;
  std::istringstream in(message);
  for (std::string line; std::getline(in, line);) {
    line = lmed::detail::trim(line);
    if (!line.empty()) lines.push_back(line);
  }
  j["error"] = {{"code", static_cast<int>(code)}, {"kind", kind}, {"messages", lines}};
  err << j.dump() << '\n';
}

inline int run(int argc, const char* const* argv, std::ostream& err = std::cerr) {
  Parser parser;
  try {
    const RunConfig rc = parser.parse(argc, argv);
    nlohmann::ordered_json j;
    if (rc.command == "estimate") j = cmd_estimate(rc);
    else if (rc.command == "simulate") j = cmd_simulate(rc);
    else j = cmd_oracle(rc);
    detail::write_output(rc.out, detail::dump(j));
    return 0;
  } catch (const CLI::Success& e) {
    return parser.app().exit(e);
  } catch (const CLI::ParseError& e) {
    parser.app().exit(e);
    return static_cast<int>(ExitCode::validation);
  } catch (const Error& e) {
    report_error(err, e.code(), e.what());
    return static_cast<int>(e.code());
  } catch (const nlohmann::json::exception& e) {
    report_error(err, ExitCode::validation, e.what());
    return static_cast<int>(ExitCode::validation);
  } catch (const std::bad_alloc&) {
    report_error(err, ExitCode::resource, "out of memory");
    return static_cast<int>(ExitCode::resource);
  } catch (const std::exception& e) {
    report_error(err, ExitCode::numeric, e.what());
    return static_cast<int>(ExitCode::numeric);
  }
}

}  // namespace lmed::cli
