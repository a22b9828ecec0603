#include <csignal>
#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include <pthread.h>

#include "CLI11.hpp"
#include "json.hpp"
#include "safegen/harness.hpp"
#include "safegen/session.hpp"

namespace fs = std::filesystem;
using namespace safegen;
using namespace safegen::harness;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

void add_common(CLI::App* cmd, Common& c, bool out_required = true) {
  cmd->add_option("--config", c.config, "TOML config file")->check(CLI::ExistingFile);
  cmd->add_option("--seed", c.seed, "Seed override");
  auto* out = cmd->add_option("--out", c.out, "Output directory");
  if (out_required) out->required();
}

ExperimentConfig experiment(const Common& c) {
  ExperimentConfig config = c.config.empty() ? ExperimentConfig{} : load_config(c.config);
  validate(config);
  return config;
}

std::uint64_t model_seed(const Common& c, const ExperimentConfig& config) {
  return c.seed ? *c.seed : config.seeds.front();
}

EnvironmentSet env_set(const ExperimentConfig& config) {
  return split_environments(config.env_kind, config.n_train, config.n_test, config.split_seed);
}

void print(const nlohmann::json& j) { std::cout << j.dump(2) << "\n"; }

nlohmann::json plot_report(const PlotEmission& e) {
  nlohmann::json files = nlohmann::json::array();
  for (const auto& f : e.files) files.push_back(f.string());
  return {{"files", files}, {"missing", e.missing}};
}

int cmd_split(const Common& c) {
  auto config = experiment(c);
  if (c.seed) config.split_seed = *c.seed;
  const auto set = env_set(config);
  fs::create_directories(c.out);
  write_file_atomic(fs::path(c.out) / "env_set.json", to_json(set).dump(2) + "\n");
  print({{"env", to_string(set.kind)}, {"split_seed", set.split_seed}, {"train", set.train.size()},
         {"test", set.test.size()}, {"path", (fs::path(c.out) / "env_set.json").string()}});
  return 0;
}

int cmd_train_dqn(const Common& c, const std::string& blocker_jsonl) {
  const auto config = experiment(c);
  if (!is_dqn_family(config.method)) throw std::invalid_argument("train-dqn: method must be a DQN variant");
  ModelCache cache(c.out);
  const auto a = cache.dqn(env_set(config), model_seed(c, config), effective_dqn(config));
  if (!blocker_jsonl.empty()) {
    blocker::BlockerDataset::read_binary(a.dir / "blocker_data.bin").write_jsonl(blocker_jsonl);
  }
  auto report = a.meta;
  report["dir"] = a.dir.string();
  print(report);
  return 0;
}

int cmd_train_blocker(const Common& c, const std::string& data) {
  const auto config = experiment(c);
  const auto seed = model_seed(c, config);
  if (data.empty()) {
    ModelCache cache(c.out);
    cache.blocker(env_set(config), seed, effective_dqn(config), config.blocker);
    print({{"key", ModelCache::blocker_key(env_set(config), seed, effective_dqn(config), config.blocker)},
           {"root", c.out}});
    return 0;
  }
  const fs::path path(data);
  const int actions = make_environment(env_set(config).train.front())->action_count();
  const auto dataset = path.extension() == ".bin" ? blocker::BlockerDataset::read_binary(path)
                                                  : blocker::BlockerDataset::read_jsonl(path, actions);
  const auto result = blocker::train_blocker(dataset, seed, config.blocker);
  fs::create_directories(c.out);
  blocker::save_blocker(fs::path(c.out) / "model.bin", result.model);
  const nlohmann::json meta = {{"kind", "blocker"},
                               {"seed", seed},
                               {"positives", dataset.positives()},
                               {"negatives", dataset.negatives()},
                               {"final_loss", result.loss.empty() ? 0.0 : result.loss.back()},
                               {"config", blocker::to_json(config.blocker)}};
  write_file_atomic(fs::path(c.out) / "meta.json", meta.dump(2) + "\n");
  print(meta);
  return 0;
}

int cmd_train_ppo(const Common& c) {
  const auto config = experiment(c);
  if (is_dqn_family(config.method)) throw std::invalid_argument("train-ppo: method must be a PPO variant");
  ModelCache cache(c.out);
  const auto a = cache.ppo(env_set(config), model_seed(c, config), effective_ppo(config));
  auto report = a.meta;
  report["dir"] = a.dir.string();
  print(report);
  return 0;
}

int cmd_eval(const Common& c) {
  auto config = experiment(c);
  if (c.seed) config.seeds = {*c.seed};
  const auto summary = run_experiment(config, c.out);
  auto report = to_json(summary);
  report["dir"] = run_directory(config, c.out).string();
  print(report);
  return 0;
}

int cmd_roc(const Common& c, const std::string& points, std::optional<int> bootstrap) {
  const auto config = experiment(c);
  const auto auc = roc_from_points_csv(points, c.out, bootstrap.value_or(config.risk.bootstrap),
                                       c.seed.value_or(config.risk.bootstrap_seed));
  print(auc);
  return 0;
}

std::vector<PlotKind> plot_kinds(const std::string& kind) {
  if (kind == "all") return {PlotKind::CatastropheVsEnvs, PlotKind::SolvedVsEnvs, PlotKind::ROC};
  for (auto k : {PlotKind::CatastropheVsEnvs, PlotKind::SolvedVsEnvs, PlotKind::ROC}) {
    if (to_string(k) == kind) return {k};
  }
  throw std::invalid_argument("unknown plot kind: " + kind);
}

int cmd_sweep(const Common& c) {
  if (c.config.empty()) throw std::invalid_argument("sweep: --config is required");
  auto sweep = load_sweep(c.config);
  if (c.seed) sweep.base.seeds = {*c.seed};
  const auto cells = expand(sweep);
  std::cerr << "sweep: " << cells.size() << " cells\n";
  const auto results = run_sweep(sweep, c.out);
  nlohmann::json report = nlohmann::json::array();
  for (std::size_t i = 0; i < cells.size(); ++i) {
    report.push_back({{"name", cells[i].name},
                      {"hash", results[i].config_hash},
                      {"pct_solved", results[i].pct_solved},
                      {"pct_catastrophe", results[i].pct_catastrophe},
                      {"flagged_seeds", results[i].flagged_seeds}});
  }
  for (auto k : plot_kinds("all")) emit_plot_data(c.out, k, cells);
  print(report);
  return 0;
}

int cmd_emit_plots(const Common& c, const std::string& kind) {
  std::vector<ExperimentConfig> expected;
  if (!c.config.empty()) {
    auto sweep = load_sweep(c.config);
    if (c.seed) sweep.base.seeds = {*c.seed};
    expected = expand(sweep);
  }
  nlohmann::json report = nlohmann::json::object();
  for (auto k : plot_kinds(kind)) report[std::string(to_string(k))] = plot_report(emit_plot_data(c.out, k, expected));
  print(report);
  return 0;
}

struct ServeOptions {
  std::string bind = "127.0.0.1:8080";
  std::string assets = "console/dist";
  std::string threshold;
  std::string variant = "mean+std";
  int tick_ms = 100;
};

std::pair<std::string, unsigned short> split_bind(const std::string& bind) {
  const auto colon = bind.rfind(':');
  if (colon == std::string::npos) throw std::invalid_argument("--bind expects host:port");
  const int port = std::stoi(bind.substr(colon + 1));
  if (port < 0 || port > 65535) throw std::invalid_argument("--bind port out of range");
  return {bind.substr(0, colon), static_cast<unsigned short>(port)};
}

int cmd_serve(const Common& c, const ServeOptions& s) {
  const auto config = experiment(c);
  if (config.env_kind != EnvKind::LavaRun) throw std::invalid_argument("serve: config must use LavaRun");
  const auto set = env_set(config);
  ModelCache cache(c.out);
  auto bundle = build_agent(config, set, model_seed(c, config), cache);
  if (!risk_stats(bundle.agent)) throw std::invalid_argument("serve: method has no ensemble or dropout statistics");

  session::ServerOptions options;
  std::tie(options.address, options.port) = split_bind(s.bind);
  options.assets = s.assets;
  options.log_dir = fs::path(c.out) / "sessions";
  options.defaults.variant = s.variant;
  options.defaults.tick_ms = s.tick_ms;
  if (!s.threshold.empty()) {
    const bool infinite = s.threshold == "inf" || s.threshold == "-inf";
    options.defaults.threshold =
        session::threshold_from_json(infinite ? nlohmann::json(s.threshold) : nlohmann::json(std::stod(s.threshold)));
  }
  for (const auto& e : set.test) options.defaults.layout_seeds.push_back(e.layout_seed);

  // Block the signals before the server threads start so only sigwait sees them.
  sigset_t signals;
  sigemptyset(&signals);
  sigaddset(&signals, SIGINT);
  sigaddset(&signals, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &signals, nullptr);

  session::Server server(std::make_shared<const Agent>(std::move(bundle.agent)), options);
  server.start();
  std::cerr << "serving on http://" << options.address << ":" << server.port() << " (ws at /ws), logs in "
            << options.log_dir.string() << "\n";
  int received = 0;
  sigwait(&signals, &received);
  server.stop();
  const auto results = server.results();
  std::cerr << "stopped after " << results.size() << " sessions\n";
  return 0;
}

int cmd_replay(const Common& c, const std::string& log) {
  const auto config = experiment(c);
  ModelCache cache(c.out);
  const auto bundle = build_agent(config, env_set(config), model_seed(c, config), cache);
  const auto r = session::replay_session(bundle.agent, log);
  print({{"outcome", r.outcome}, {"length", r.length}, {"return", r.ret}, {"matches_log", r.matches_log}});
  return r.matches_log ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Safe generalization experiments: training, evaluation, risk ROC, sweeps and supervised sessions"};
  app.require_subcommand(1);

  Common common;
  std::string blocker_jsonl, data, points, kind = "all", log;
  std::optional<int> bootstrap;
  ServeOptions serve;

  auto* split = app.add_subcommand("split", "Write the train/test layout split");
  add_common(split, common);
  auto* train_dqn = app.add_subcommand("train-dqn", "Train one DQN into the model cache under --out");
  add_common(train_dqn, common);
  train_dqn->add_option("--blocker-data", blocker_jsonl, "Also export the recorded blocker dataset as JSONL");
  auto* train_blocker = app.add_subcommand("train-blocker", "Train a catastrophe classifier");
  add_common(train_blocker, common);
  train_blocker->add_option("--data", data, "Dataset (.jsonl or .bin); default trains from the cached DQN run")
      ->check(CLI::ExistingFile);
  auto* train_ppo = app.add_subcommand("train-ppo", "Train one PPO agent into the model cache under --out");
  add_common(train_ppo, common);
  auto* eval = app.add_subcommand("eval", "Train if needed and evaluate one experiment");
  add_common(eval, common);
  auto* roc = app.add_subcommand("roc", "Bootstrap ROC curves from a risk_points.csv");
  add_common(roc, common);
  roc->add_option("--points", points, "risk_points.csv from an eval run")->required()->check(CLI::ExistingFile);
  roc->add_option("--bootstrap", bootstrap, "Bootstrap resamples")->check(CLI::PositiveNumber);
  auto* sweep = app.add_subcommand("sweep", "Run every cell of a sweep and emit plot data");
  add_common(sweep, common);
  auto* emit = app.add_subcommand("emit-plots", "Write plot CSVs from completed runs");
  add_common(emit, common);
  emit->add_option("--kind", kind, "catastrophe_vs_envs, solved_vs_envs, roc or all");
  auto* serve_cmd = app.add_subcommand("serve", "Serve supervised LavaRun sessions over WebSocket");
  add_common(serve_cmd, common);
  serve_cmd->add_option("--bind", serve.bind, "host:port");
  serve_cmd->add_option("--assets", serve.assets, "Static console bundle");
  serve_cmd->add_option("--threshold", serve.threshold, "Default U threshold (number, inf or -inf)");
  serve_cmd->add_option("--variant", serve.variant, "Default risk score: mean-only, mean+std or std-only");
  serve_cmd->add_option("--tick-ms", serve.tick_ms, "Pause between autonomous steps")->check(CLI::NonNegativeNumber);
  auto* replay = app.add_subcommand("replay", "Re-run a logged session and compare with the log");
  add_common(replay, common);
  replay->add_option("--log", log, "Session log (<id>.jsonl)")->required()->check(CLI::ExistingFile);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*split) return cmd_split(common);
    if (*train_dqn) return cmd_train_dqn(common, blocker_jsonl);
    if (*train_blocker) return cmd_train_blocker(common, data);
    if (*train_ppo) return cmd_train_ppo(common);
    if (*eval) return cmd_eval(common);
    if (*roc) return cmd_roc(common, points, bootstrap);
    if (*sweep) return cmd_sweep(common);
    if (*emit) return cmd_emit_plots(common, kind);
    if (*serve_cmd) return cmd_serve(common, serve);
    if (*replay) return cmd_replay(common, log);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
