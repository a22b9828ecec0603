// End-to-end acceptance run. Prints one PASS/FAIL line per criterion and exits
// non-zero if any fails. Trained models and runs are cached under --out, so a
// rerun only re-evaluates what changed.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "safegen/ensemble.hpp"
#include "safegen/harness.hpp"
#include "safegen/neural.hpp"
#include "safegen/rng.hpp"

namespace fs = std::filesystem;
using namespace safegen;
using namespace safegen::harness;

namespace {

// Tolerances and budgets.
constexpr double kGradRelTol = 1e-4;
constexpr int kGradNets = 100;
constexpr int kGradCoordsPerNet = 200;
constexpr double kAucTol = 1e-9;
constexpr int kAucSets = 200;
constexpr double kMaxSeconds = 60.0;
constexpr int kMinSeedsWithCatastrophe = 8;
constexpr double kAucFloor = 0.55;
constexpr double kRandomAucLow = 0.45;
constexpr double kRandomAucHigh = 0.55;
constexpr std::int64_t kMaxPpoSteps = 500000;

const std::vector<std::uint64_t> kGridSeeds{0, 1, 2, 3, 4, 5, 6, 7, 8};
const std::vector<std::size_t> kGridTrain{10, 100};
const std::vector<std::uint64_t> kLavaSeeds{0, 1, 2, 3, 4};
const std::vector<std::size_t> kLavaTrain{10, 25};

dqn::DqnConfig grid_dqn() {
  dqn::DqnConfig d;
  d.hidden = {64, 64, 128};
  d.episodes = 60000;
  d.convergence_check_every = 250;
  d.stop_when_converged = true;
  d.log_every = 1000;
  return d;
}

blocker::BlockerConfig grid_blocker() {
  blocker::BlockerConfig b;
  b.hidden = {32, 64, 64};
  b.iterations = 3000;
  return b;
}

ExperimentConfig grid_config(EnvKind env, Method method, std::size_t n_train) {
  ExperimentConfig c;
  c.name = "acceptance";
  c.env_kind = env;
  c.method = method;
  c.n_train = n_train;
  c.n_test = 1000;
  c.seeds = kGridSeeds;
  c.ensemble_size = 9;
  c.dqn = grid_dqn();
  c.blocker = grid_blocker();
  return c;
}

ppo::PpoConfig lava_ppo() {
  ppo::PpoConfig p;
  p.hidden = {64, 64};
  p.total_steps = 500000;
  p.learning_rate = 5e-4;
  p.log_every = 100;
  return p;
}

ExperimentConfig lava_config(Method method, std::size_t n_train, bool risk) {
  ExperimentConfig c;
  c.name = "acceptance";
  c.env_kind = EnvKind::LavaRun;
  c.method = method;
  c.n_train = n_train;
  c.n_test = 1000;
  c.seeds = kLavaSeeds;
  c.ensemble_size = 5;
  c.ppo = lava_ppo();
  c.convergence_threshold = 0.0;  // reported, not gated
  c.risk.enabled = risk;
  c.risk.bootstrap = 20;
  return c;
}

// --- reporting -------------------------------------------------------------

struct Outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void report(const std::string& id, const std::string& name, const Outcome& o) {
  std::printf("[%s] %s %s: %s\n", o.pass ? "PASS" : "FAIL", id.c_str(), name.c_str(), o.detail.c_str());
  std::fflush(stdout);
  if (!o.pass) ++failures;
}

std::string fmt(double v, int precision = 4) {
  std::ostringstream s;
  s.setf(std::ios::fixed);
  s.precision(precision);
  s << v;
  return s.str();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

class Runs {
 public:
  explicit Runs(fs::path out) : out_(std::move(out)) {}

  const EvalSummary& get(const ExperimentConfig& c) {
    const auto key = config_hash(c);
    auto it = cache_.find(key);
    if (it != cache_.end()) return it->second;
    const auto t0 = std::chrono::steady_clock::now();
    const bool cached = fs::exists(run_directory(c, out_) / "summary.json");
    auto summary = run_experiment(c, out_);
    std::fprintf(stderr, "  run %s/%s n=%zu%s: %s (%.0fs)\n", std::string(to_string(c.env_kind)).c_str(),
                 std::string(to_string(c.method)).c_str(), c.n_train, c.oracle_blocker ? " oracle" : "",
                 cached ? "cached" : "done", seconds_since(t0));
    return cache_.emplace(key, std::move(summary)).first->second;
  }

 private:
  fs::path out_;
  std::map<std::string, EvalSummary> cache_;
};

// --- gradients -------------------------------------------------------------

Outcome check_gradients() {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(derive_seed(7, 0x9d));
  double worst = 0.0;
  std::string worst_shape;
  for (int n = 0; n < kGradNets; ++n) {
    std::vector<int> hidden;
    if (n == 0) {
      hidden = {256, 256, 512};
    } else if (n == 1) {
      hidden = {128, 256, 256};
    } else {
      const int depth = 1 + static_cast<int>(rng.uniform_int(3));
      for (int l = 0; l < depth; ++l) hidden.push_back(1 + static_cast<int>(rng.uniform_int(32)));
    }
    const int in = n < 2 ? 147 : 1 + static_cast<int>(rng.uniform_int(20));
    const int out = 1 + static_cast<int>(rng.uniform_int(6));
    const int batch = 1 + static_cast<int>(rng.uniform_int(4));
    const auto params = nn::make_mlp(in, hidden, out, rng.next());
    nn::Matrix x(in, batch), w(out, batch);
    for (Eigen::Index i = 0; i < x.size(); ++i) x(i) = rng.uniform(-1.0, 1.0);
    for (Eigen::Index i = 0; i < w.size(); ++i) w(i) = rng.uniform(-1.0, 1.0);

    nn::ForwardCache cache;
    nn::mlp_forward(params, x, nn::DropoutMode::off(), &cache);
    const auto grad = nn::mlp_backward(params, cache, w);
    const auto objective = [&](const nn::NetworkParameters& p) { return nn::mlp_forward(p, x).cwiseProduct(w).sum(); };

    // Coordinates sampled across every layer's weights and biases.
    std::vector<double> analytic, numeric;
    auto probe = params;
    for (int k = 0; k < kGradCoordsPerNet; ++k) {
      const std::size_t l = rng.uniform_int(params.layers.size());
      const bool bias = rng.bernoulli(0.3);
      double* data = bias ? probe.layers[l].biases.data() : probe.layers[l].weights.data();
      const auto size = bias ? probe.layers[l].biases.size() : probe.layers[l].weights.size();
      const auto i = static_cast<Eigen::Index>(rng.uniform_int(static_cast<std::uint64_t>(size)));
      const double saved = data[i];
      const double h = 1e-6 * std::max(1.0, std::abs(saved));
      data[i] = saved + h;
      const double up = objective(probe);
      data[i] = saved - h;
      const double down = objective(probe);
      data[i] = saved;
      numeric.push_back((up - down) / (2.0 * h));
      analytic.push_back(bias ? grad.layers[l].biases(i) : grad.layers[l].weights(i));
    }
    double diff = 0.0, norm_a = 0.0, norm_n = 0.0;
    for (std::size_t k = 0; k < analytic.size(); ++k) {
      diff += (analytic[k] - numeric[k]) * (analytic[k] - numeric[k]);
      norm_a += analytic[k] * analytic[k];
      norm_n += numeric[k] * numeric[k];
    }
    const double rel = std::sqrt(diff) / std::max(1e-12, std::max(std::sqrt(norm_a), std::sqrt(norm_n)));
    if (rel > worst) {
      worst = rel;
      worst_shape.clear();
      for (int h : hidden) worst_shape += (worst_shape.empty() ? "" : ",") + std::to_string(h);
    }
  }
  const double secs = seconds_since(t0);
  return {worst < kGradRelTol && secs < kMaxSeconds,
          std::to_string(kGradNets) + " nets, max relative error " + fmt(worst, 10) + " (hidden [" + worst_shape +
              "]), tolerance " + fmt(kGradRelTol, 6) + ", " + fmt(secs, 1) + "s"};
}

// --- AUC -------------------------------------------------------------------

double mann_whitney(const std::vector<double>& s, const std::vector<char>& y) {
  double wins = 0.0, pairs = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (!y[i]) continue;
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (y[j]) continue;
      pairs += 1.0;
      wins += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
    }
  }
  return wins / pairs;
}

Outcome check_auc() {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(derive_seed(11, 0xa0c));
  double worst = 0.0;
  for (int trial = 0; trial < kAucSets; ++trial) {
    const std::size_t n = 2 + rng.uniform_int(999);
    const double levels = 1.0 + static_cast<double>(rng.uniform_int(50));  // few levels force ties
    std::vector<double> scores(n);
    std::vector<char> labels(n);
    for (std::size_t i = 0; i < n; ++i) {
      scores[i] = std::floor(rng.uniform(0.0, levels));
      labels[i] = rng.bernoulli(0.1 + 0.8 * rng.uniform(0.0, 1.0)) ? 1 : 0;
    }
    labels[0] = 1;
    labels[1] = 0;
    std::unique_ptr<bool[]> flags(new bool[n]);
    for (std::size_t i = 0; i < n; ++i) flags[i] = labels[i] != 0;
    const auto curve = ens::roc_curve(scores, std::span<const bool>(flags.get(), n));
    worst = std::max(worst, std::abs(curve.auc - mann_whitney(scores, labels)));
  }
  const double secs = seconds_since(t0);
  return {worst < kAucTol && secs < kMaxSeconds, std::to_string(kAucSets) + " sets, max |AUC - Mann-Whitney| " +
                                                     fmt(worst, 12) + ", " + fmt(secs, 1) + "s"};
}

// --- gridworld -------------------------------------------------------------

Outcome check_dqn_generalization_gap(Runs& runs) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto& s = runs.get(grid_config(EnvKind::GridFull, Method::DQN, 100));
  int solved_all = 0, with_catastrophe = 0;
  std::string rates;
  for (const auto& seed : s.per_seed) {
    solved_all += seed.train_solve_rate == 1.0;
    with_catastrophe += seed.pct_catastrophe > 0.0;
    rates += (rates.empty() ? "" : " ") + fmt(seed.pct_catastrophe, 1);
  }
  const int n = static_cast<int>(s.per_seed.size());
  return {solved_all == n && with_catastrophe >= kMinSeedsWithCatastrophe,
          "train solved 100% in " + std::to_string(solved_all) + "/" + std::to_string(n) + " seeds; test catastrophe > 0 in " +
              std::to_string(with_catastrophe) + "/" + std::to_string(n) + " (per-seed %: " + rates + "); " +
              fmt(seconds_since(t0), 0) + "s this run"};
}

Outcome check_ensemble_and_blocker(Runs& runs) {
  bool pass = true;
  std::string detail;
  for (auto n : kGridTrain) {
    const double dqn = runs.get(grid_config(EnvKind::GridFull, Method::DQN, n)).pct_catastrophe;
    const double ens = runs.get(grid_config(EnvKind::GridFull, Method::EnsDQN, n)).pct_catastrophe;
    const double block = runs.get(grid_config(EnvKind::GridFull, Method::BlockDQN, n)).pct_catastrophe;
    pass = pass && ens <= dqn && block <= dqn;
    detail += (detail.empty() ? "" : "; ") + std::string("n=") + std::to_string(n) + " DQN " + fmt(dqn, 2) +
              "% Ens " + fmt(ens, 2) + "% Block " + fmt(block, 2) + "%";
  }
  return {pass, detail};
}

Outcome check_oracle_blocker(Runs& runs) {
  bool pass = true;
  std::string detail;
  for (auto method : {Method::BlockDQN, Method::BlockEnsDQN}) {
    for (auto n : kGridTrain) {
      auto c = grid_config(EnvKind::GridFull, method, n);
      c.oracle_blocker = true;
      const auto& s = runs.get(c);
      double worst = 0.0;
      for (const auto& seed : s.per_seed) worst = std::max(worst, seed.pct_catastrophe);
      pass = pass && worst == 0.0;
      detail += (detail.empty() ? "" : "; ") + std::string(to_string(method)) + " n=" + std::to_string(n) +
                " max " + fmt(worst, 2) + "%";
    }
  }
  return {pass, detail};
}

Outcome check_full_vs_reveal(Runs& runs) {
  bool pass = true;
  std::string detail;
  for (auto n : kGridTrain) {
    const double full = runs.get(grid_config(EnvKind::GridFull, Method::DQN, n)).pct_solved;
    const double reveal = runs.get(grid_config(EnvKind::GridReveal, Method::DQN, n)).pct_solved;
    pass = pass && full >= reveal;
    detail += (detail.empty() ? "" : "; ") + std::string("n=") + std::to_string(n) + " Full " + fmt(full, 2) +
              "% Reveal " + fmt(reveal, 2) + "%";
  }
  return {pass, detail};
}

// --- LavaRun ---------------------------------------------------------------

Outcome check_lavarun_comparison(Runs& runs) {
  bool produced = lava_ppo().total_steps <= kMaxPpoSteps;
  std::string detail;
  for (auto n : kLavaTrain) {
    const auto& ppo = runs.get(lava_config(Method::PPO, n, false));
    const auto& ens = runs.get(lava_config(Method::EnsMeanPPO, n, true));
    produced = produced && ppo.per_seed.size() == kLavaSeeds.size() && ens.per_seed.size() == kLavaSeeds.size() &&
               std::isfinite(ppo.pct_catastrophe) && std::isfinite(ens.pct_catastrophe);
    double train = 1.0;
    for (const auto& s : ppo.per_seed) train = std::min(train, s.train_solve_rate);
    detail += (detail.empty() ? "" : "; ") + std::string("n=") + std::to_string(n) + " PPO " +
              fmt(ppo.pct_catastrophe, 2) + "% EnsMean " + fmt(ens.pct_catastrophe, 2) + "% |diff| " +
              fmt(std::abs(ens.pct_catastrophe - ppo.pct_catastrophe), 2) + " (min PPO train solve " + fmt(train, 2) +
              ")";
  }
  return {produced, detail + "; " + std::to_string(lava_ppo().total_steps) + " steps per agent"};
}

double auc_at(const EvalSummary& s, const std::string& variant, int dt) {
  const auto v = s.auc_mean.find(variant);
  if (v == s.auc_mean.end()) return std::nan("");
  const auto d = v->second.find(dt);
  return d == v->second.end() ? std::nan("") : d->second;
}

Outcome check_uncertainty_helps(Runs& runs) {
  const auto& s = runs.get(lava_config(Method::EnsMeanPPO, kLavaTrain.front(), true));
  const double with_std = auc_at(s, "mean+std", 1);
  const double mean_only = auc_at(s, "mean-only", 1);
  const double random = auc_at(s, "random", 1);
  const bool pass = with_std > mean_only && mean_only > kAucFloor && with_std > kAucFloor && random >= kRandomAucLow &&
                    random <= kRandomAucHigh;
  return {pass, "n=" + std::to_string(kLavaTrain.front()) + " dt=1 AUC mean+std " + fmt(with_std) + " mean-only " +
                    fmt(mean_only) + " random " + fmt(random)};
}

Outcome check_short_horizon(Runs& runs) {
  const auto& s = runs.get(lava_config(Method::EnsMeanPPO, kLavaTrain.front(), true));
  const double dt1 = auc_at(s, "mean+std", 1);
  const double dt10 = auc_at(s, "mean+std", 10);
  return {dt1 >= dt10, "mean+std AUC dt=1 " + fmt(dt1) + " dt=10 " + fmt(dt10)};
}

// --- determinism -----------------------------------------------------------

std::map<std::string, std::string> snapshot(const fs::path& root) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) files[fs::relative(e.path(), root).string()] = read_file(e.path());
  }
  return files;
}

Outcome check_determinism(const fs::path& scratch) {
  auto grid = grid_config(EnvKind::GridFull, Method::BlockEnsDQN, 5);
  grid.seeds = {0, 1};
  grid.ensemble_size = 2;
  grid.n_test = 100;
  grid.dqn.episodes = 400;
  grid.dqn.hidden = {16, 16, 32};
  grid.blocker.iterations = 200;
  grid.convergence_threshold = 0.0;
  auto lava = lava_config(Method::MCDropPPO, 3, true);
  lava.seeds = {0};
  lava.n_test = 20;
  lava.ppo.total_steps = 4096;
  lava.ppo.hidden = {16};
  lava.ppo.dropout_start = 0.1;
  lava.mc_passes = 4;
  lava.risk.bootstrap = 4;

  std::vector<std::map<std::string, std::string>> trees;
  for (const char* name : {"a", "b"}) {
    const fs::path dir = scratch / name;
    fs::remove_all(dir);
    run_experiment(grid, dir);
    run_experiment(lava, dir);
    trees.push_back(snapshot(dir));
  }
  std::size_t differing = 0;
  for (const auto& [path, bytes] : trees[0]) {
    const auto it = trees[1].find(path);
    differing += it == trees[1].end() || it->second != bytes;
  }
  differing += trees[1].size() > trees[0].size() ? trees[1].size() - trees[0].size() : 0;
  return {differing == 0 && !trees[0].empty(), std::to_string(trees[0].size()) + " files compared across two fresh runs, " +
                                                   std::to_string(differing) + " differ"};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::string out = "acceptance_runs";
  std::vector<std::string> only;
  app.add_option("--out", out, "Cache and run directory");
  app.add_option("--only", only, "Run only these criteria (C1 .. C10)");
  CLI11_PARSE(app, argc, argv);

  const std::set<std::string> selected(only.begin(), only.end());
  const auto want = [&](const std::string& id) { return selected.empty() || selected.count(id) > 0; };
  Runs runs(fs::path(out) / "runs");

  struct Criterion {
    std::string id, name;
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> criteria{
      {"C1", "backprop matches central differences", check_gradients},
      {"C2", "ROC AUC equals Mann-Whitney", check_auc},
      {"C3", "DQN solves 100 train layouts yet fails on test", [&] { return check_dqn_generalization_gap(runs); }},
      {"C4", "ensemble and blocker reduce test catastrophes", [&] { return check_ensemble_and_blocker(runs); }},
      {"C5", "oracle blocker has zero test catastrophes", [&] { return check_oracle_blocker(runs); }},
      {"C6", "Full observation solves at least as often as Reveal", [&] { return check_full_vs_reveal(runs); }},
      {"C7", "LavaRun EnsMean vs PPO catastrophe comparison", [&] { return check_lavarun_comparison(runs); }},
      {"C8", "value spread improves catastrophe prediction", [&] { return check_uncertainty_helps(runs); }},
      {"C9", "prediction is sharper one step ahead than ten", [&] { return check_short_horizon(runs); }},
      {"C10", "artifacts are byte-identical on rerun", [&] { return check_determinism(fs::path(out) / "determinism"); }},
  };
  for (const auto& c : criteria) {
    if (!want(c.id)) continue;
    try {
      report(c.id, c.name, c.run());
    } catch (const std::exception& e) {
      report(c.id, c.name, {false, std::string("error: ") + e.what()});
    }
  }
  return failures == 0 ? 0 : 1;
}
