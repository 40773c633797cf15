// Acceptance checks 1-9. Prints one PASS/FAIL line per criterion and exits
// nonzero if any fails. Optional arguments pick a subset, e.g. `acceptance 3 8`.

#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <thread>

#include "../reference_d.hpp"
#include "lmed/lmed.hpp"

using namespace lmed;
namespace fs = std::filesystem;

namespace {

const std::string kRoot = LMED_SOURCE_DIR;
const std::string kCli = LMED_CLI;

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", x);
  return buf;
}

InterventionPair ones_zeros(int tau) {
  return {std::vector<double>(static_cast<std::size_t>(tau), 1.0), std::vector<double>(static_cast<std::size_t>(tau), 0.0)};
}

unsigned worker_threads() { return std::max(1u, std::thread::hardware_concurrency()); }

// Twenty-four random binary models, half with tau = 1 and half with tau = 2,
// alternating with and without Z.
std::vector<NpsemSpec> random_specs() {
  std::vector<NpsemSpec> out;
  for (std::uint64_t s = 1; s <= 24; ++s) out.push_back(random_binary_spec(1 + static_cast<int>(s % 2), 9000 + s, s % 4 < 2));
  return out;
}

Outcome criterion1() {
  const auto t0 = Clock::now();
  double worst = 0.0;
  int count = 0;
  for (const auto& spec : random_specs()) {
    const auto pair = ones_zeros(spec.tau);
    const double a = true_theta_identification(Oracle(spec), pair).theta;
    const double b = true_theta_counterfactual(spec, pair).theta;
    worst = std::max(worst, std::abs(a - b));
    ++count;
  }
  const double secs = seconds_since(t0);
  return {worst <= 1e-10 && count >= 20 && secs <= 60.0,
          std::to_string(count) + " specs, max |theta_id - theta_cf| = " + fmt(worst) + ", " + fmt(secs) + "s"};
}

Outcome criterion2() {
  std::vector<NpsemSpec> specs = random_specs();
  for (const char* f : {"tau1_binary.json", "tau2_binary.json", "tau2_no_z.json", "tau2_censored.json"})
    specs.push_back(read_spec(kRoot + "/data/specs/" + f));
  double phi = 0.0, lambda = 0.0, sum = 0.0;
  for (const auto& spec : specs) {
    const Oracle o(spec);
    const auto pair = ones_zeros(spec.tau);
    const auto th = true_theta_identification(o, pair);
    const auto q = sequential_regression_oracle(o, pair);
    double s = 0.0;
    for (std::size_t m = 0; m < th.phi.size(); ++m) {
      phi = std::max(phi, std::abs(q.QL0[m] - th.phi[m]));
      lambda = std::max(lambda, std::abs(q.QM0[m] - th.lambda[m]));
      s += th.lambda[m];
    }
    sum = std::max(sum, std::abs(s - 1.0));
  }
  return {phi <= 1e-10 && lambda <= 1e-10 && sum <= 1e-12,
          std::to_string(specs.size()) + " specs, max |Q_L0 - phi| = " + fmt(phi) + ", max |Q_M0 - lambda| = " +
              fmt(lambda) + ", max |sum lambda - 1| = " + fmt(sum)};
}

Outcome criterion3() {
  const auto t0 = Clock::now();
  std::vector<NpsemSpec> specs{read_spec(kRoot + "/data/specs/tau2_binary.json"),
                               read_spec(kRoot + "/data/specs/tau1_binary.json")};
  for (std::uint64_t s = 1; s <= 6; ++s) specs.push_back(random_binary_spec(1 + static_cast<int>(s % 2), 7000 + s, s % 3 != 0));
  double residual = 0.0, lo = 1e300, hi = 0.0;
  std::set<std::string> kinds;
  for (const auto& spec : specs) {
    const Oracle o(spec);
    const auto pair = ones_zeros(spec.tau);
    for (std::uint64_t seed = 1; seed <= 3; ++seed) {
      const auto r1 = von_mises_check(o, pair, {1e-3, seed});
      const auto r2 = von_mises_check(o, pair, {2e-3, seed});
      for (std::size_t k = 0; k < r1.size(); ++k) {
        residual = std::max({residual, r1[k].max_residual, r2[k].max_residual});
        kinds.insert(to_string(r1[k].kind));
        if (r1[k].remainder_l1 > 1e-14) {
          const double ratio = r2[k].remainder_l1 / r1[k].remainder_l1;
          lo = std::min(lo, ratio);
          hi = std::max(hi, ratio);
        }
      }
    }
  }
  const double secs = seconds_since(t0);
  return {residual <= 1e-10 && lo >= 3.5 && hi <= 4.5 && kinds.size() == 3 && secs <= 120.0,
          std::to_string(specs.size()) + " specs x 3 perturbations, max residual = " + fmt(residual) +
              ", remainder ratio (2eps/eps) in [" + fmt(lo) + ", " + fmt(hi) + "], " + fmt(secs) + "s"};
}

Outcome criterion4() {
  const auto t0 = Clock::now();
  McConfig cfg;
  cfg.spec = read_spec(kRoot + "/data/specs/tau2_binary.json");
  cfg.pair = ones_zeros(2);
  cfg.n_ladder = {5000};
  cfg.reps = 200;
  cfg.seed = 404;
  cfg.threads = worker_threads();
  const double mean_s = std::abs(efficiency_bound(Oracle(cfg.spec), cfg.pair).mean);
  const McReport r = run_mc(cfg);
  const McCell& c = r.scenarios[0].cells[0];
  const double ratio = c.n_mean_var / r.var_s;
  const double secs = seconds_since(t0);
  return {mean_s <= 1e-10 && std::abs(ratio - 1.0) <= 0.10 && c.failures == 0 && secs <= 900.0,
          "|E[S]| = " + fmt(mean_s) + ", n*mean(se^2) = " + fmt(c.n_mean_var) + ", Var[S] = " + fmt(r.var_s) +
              ", ratio = " + fmt(ratio) + ", " + fmt(secs) + "s"};
}

Outcome criterion5() {
  McConfig cfg;
  cfg.spec = read_spec(kRoot + "/data/specs/tau1_binary.json");
  cfg.pair = ones_zeros(1);
  cfg.n_ladder = {500, 2000};
  cfg.reps = 300;
  cfg.seed = 505;
  cfg.estimator.learners = LearnerConfig::uniform(LearnerSpec::stratum_mean());
  cfg.threads = worker_threads();
  const McReport r = run_mc(cfg);
  const auto& cells = r.scenarios[0].cells;
  const double ratio = cells[0].rmse / cells[1].rmse;
  return {ratio >= 1.6 && ratio <= 2.4,
          "RMSE(500) = " + fmt(cells[0].rmse) + ", RMSE(2000) = " + fmt(cells[1].rmse) + ", ratio = " + fmt(ratio)};
}

Outcome criterion6() {
  McConfig cfg;
  cfg.spec = read_spec(kRoot + "/data/specs/tau2_binary.json");
  cfg.pair = ones_zeros(2);
  cfg.n_ladder = {2000};
  cfg.reps = 500;
  cfg.seed = 606;
  cfg.threads = worker_threads();
  const McReport r = run_mc(cfg);
  const McCell& c = r.scenarios[0].cells[0];
  return {c.coverage >= 0.90 && c.coverage <= 0.98 && c.failures == 0,
          "coverage = " + fmt(c.coverage) + " over " + std::to_string(cfg.reps) + " replications"};
}

Outcome criterion7() {
  McConfig cfg;
  cfg.spec = read_spec(kRoot + "/data/specs/tau2_binary.json");
  cfg.pair = ones_zeros(2);
  cfg.n_ladder = {5000};
  cfg.reps = 200;
  cfg.seed = 707;
  // Saturated everywhere; propensity cells get one pseudo-count per level so
  // empty cells do not produce zero probabilities.
  cfg.estimator.learners = LearnerConfig::uniform(LearnerSpec::stratum_mean());
  cfg.estimator.learners[Family::treatment] = {LearnerSpec::stratum_mean(1.0)};
  cfg.estimator.learners[Family::mediator] = {LearnerSpec::stratum_mean(1.0)};
  cfg.scenarios = {Scenario::ga_misspecified, Scenario::gm_misspecified, Scenario::q_misspecified,
                   Scenario::both_misspecified};
  cfg.threads = worker_threads();
  const McReport r = run_mc(cfg);
  bool pass = true;
  std::string detail;
  for (const auto& s : r.scenarios) {
    const McCell& c = s.cells[0];
    const double z = c.mc_se > 0 ? std::abs(c.bias) / c.mc_se : 0.0;
    const bool both = s.scenario == Scenario::both_misspecified;
    pass = pass && c.failures == 0 && (both ? z > 3.0 : z <= 2.0);
    if (!detail.empty()) detail += ", ";
    detail += std::string(to_string(s.scenario)) + " |bias|/MC-SE = " + fmt(z);
  }
  return {pass, detail};
}

Outcome criterion8() {
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 10000; ++seed) {
    const auto r = lmed::testing::random_tables(seed + 1000000);
    worst = std::max(worst, lmed::testing::compare_d(lmed::testing::library_d(r), lmed::testing::reference_d(r)).max_abs);
  }
  return {worst <= 1e-12, "10000 random tables, max |recursive - explicit| = " + fmt(worst)};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

// Runs the CLI from the source root; returns exit code and stdout.
std::pair<int, std::string> run_cli(const std::string& args, const fs::path& out) {
  const std::string cmd = "cd '" + kRoot + "' && '" + kCli + "' " + args + " >'" + out.string() + "' 2>/dev/null";
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(out)};
}

Outcome criterion9() {
  const fs::path dir = fs::temp_directory_path() / ("lmed_acceptance_" + std::to_string(::getpid()));
  fs::create_directories(dir);
  const std::vector<std::string> commands{
      "estimate --data data/fixtures/tau1_n200.csv --schema data/fixtures/tau1_n200.schema.json --a-prime 1 "
      "--a-star 0 --seed 9 --contrasts",
      "simulate --spec data/specs/tau1_binary.json --a-prime 1 --a-star 0 --n 100,200 --reps 3 --seed 9 "
      "--scenarios all-correct,both-misspecified --threads 2",
      "oracle --spec data/specs/tau2_binary.json --a-prime 1,1 --a-star 0,0 --seed 9"};
  bool pass = true;
  std::string detail;
  for (const auto& c : commands) {
    const auto a = run_cli(c, dir / "a.json");
    const auto b = run_cli(c, dir / "b.json");
    const bool same = a.first == 0 && b.first == 0 && !a.second.empty() && a.second == b.second;
    pass = pass && same;
    if (!detail.empty()) detail += ", ";
    detail += c.substr(0, c.find(' ')) + (same ? " identical" : " differs");
  }
  fs::remove_all(dir);
  return {pass, detail};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::function<Outcome()>> checks{criterion1, criterion2, criterion3, criterion4, criterion5,
                                                     criterion6, criterion7, criterion8, criterion9};
  std::set<int> pick;
  for (int i = 1; i < argc; ++i) pick.insert(std::atoi(argv[i]));
  bool all = true;
  for (std::size_t k = 0; k < checks.size(); ++k) {
    const int id = static_cast<int>(k) + 1;
    if (!pick.empty() && !pick.count(id)) continue;
    Outcome o;
    try {
      o = checks[k]();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    all = all && o.pass;
    std::cout << "criterion " << id << ": " << (o.pass ? "PASS" : "FAIL") << "  " << o.detail << std::endl;
  }
  return all ? 0 : 1;
}
