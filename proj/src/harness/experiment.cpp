#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "safegen/harness.hpp"
#include "safegen/rng.hpp"

namespace safegen::harness {
namespace {

namespace fs = std::filesystem;

constexpr std::uint64_t kEvalTag = 0xe7a1;
constexpr std::uint64_t kRiskTag = 0x5c0e;
constexpr std::uint64_t kRandomTag = 0x4a7d;
constexpr std::uint64_t kBlockerTag = 0xb10c;
constexpr std::uint64_t kPpoSolveTag = 0x501e;
constexpr std::uint64_t kBootstrapTag = 0xb005;

std::string train_fingerprint(const EnvironmentSet& set) {
  nlohmann::json doc = {{"kind", to_string(set.kind)}, {"train", nlohmann::json::array()}};
  for (const auto& c : set.train) doc["train"].push_back(c.layout_seed);
  return doc.dump();
}

std::string key_of(std::string_view prefix, const std::string& body) {
  return std::string(prefix) + "-" + fnv1a_hex(std::string(kCodeVersion) + "\n" + body);
}

// Trains into a scratch directory and renames it into place, so a directory
// that exists is always complete.
template <typename Fill>
void publish(const fs::path& dir, Fill&& fill) {
  fs::path tmp = dir;
  tmp += ".partial";
  fs::remove_all(tmp);
  fs::create_directories(tmp);
  fill(tmp);
  fs::remove_all(dir);
  fs::rename(tmp, dir);
}

double ppo_train_solve_rate(const ppo::PolicyValueNet& net, std::span<const EnvironmentConfig> train,
                            std::uint64_t seed) {
  std::size_t solved = 0;
  for (std::size_t i = 0; i < train.size(); ++i) {
    Rng rng(derive_seed(derive_seed(seed, kPpoSolveTag), i));
    const Policy sampled = [&](const Environment&, std::span<const double> obs) {
      return Decision::act(ppo::sample_action(net, obs, rng));
    };
    const auto record = run_episode(train[i], sampled, {}, EpisodeOptions{.keep_transitions = false});
    solved += record.outcome.kind == OutcomeKind::Solved;
  }
  return train.empty() ? 0.0 : static_cast<double>(solved) / static_cast<double>(train.size());
}

int member_count(const ExperimentConfig& c) { return uses_ensemble(c.method) ? c.ensemble_size : 1; }

std::vector<double> mean_q(const std::vector<nn::NetworkParameters>& members, std::span<const double> obs) {
  nn::Vector sum = nn::mlp_forward(members[0], obs);
  for (std::size_t k = 1; k < members.size(); ++k) sum += nn::mlp_forward(members[k], obs);
  sum /= static_cast<double>(members.size());
  return {sum.data(), sum.data() + sum.size()};
}

std::vector<double> mc_mean_logits(const ppo::PolicyValueNet& net, std::span<const double> obs, int passes,
                                   std::uint64_t seed) {
  nn::Matrix x(static_cast<Eigen::Index>(obs.size()), passes);
  for (int k = 0; k < passes; ++k) x.col(k) = Eigen::Map<const nn::Vector>(obs.data(), x.rows());
  const auto out = net.forward(x, nn::DropoutMode::sampled_with(seed));
  const nn::Vector mean = out.logits.rowwise().mean();
  return {mean.data(), mean.data() + mean.size()};
}

std::string csv_double(double v) {
  std::ostringstream s;
  s << std::setprecision(17) << v;
  return s.str();
}

struct SeedResult {
  SeedSummary summary;
  std::vector<EpisodeLine> episodes;
  std::vector<ens::RiskEpisode> risk;
  std::vector<ens::RiskEpisode> random_risk;
  std::vector<fs::path> checkpoints;
};

// Runs `body(i)` for i in [0, n) on up to `workers` threads. Results must be
// written to per-index slots so the output does not depend on scheduling.
template <typename Body>
void parallel_for(std::size_t n, int workers, Body&& body) {
  if (workers <= 1 || n < 2) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (int w = 0; w < std::min<int>(workers, static_cast<int>(n)); ++w) {
    pool.emplace_back([&] {
      for (std::size_t i; (i = next.fetch_add(1)) < n;) {
        try {
          body(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

SeedResult evaluate_seed(const ExperimentConfig& config, const EnvironmentSet& set, std::uint64_t seed,
                         const AgentBundle& bundle) {
  SeedResult r;
  const auto stats = config.risk.enabled ? risk_stats(bundle.agent) : std::nullopt;
  const std::size_t n = set.test.size();
  r.episodes.resize(n);
  if (stats) r.risk.resize(n);

  parallel_for(n, config.workers, [&](std::size_t i) {
    const std::uint64_t episode_seed = derive_seed(derive_seed(seed, kEvalTag), i);
    const Policy base = make_policy(bundle.agent, episode_seed);
    ens::RiskEpisode risk;
    Policy policy = base;
    if (stats) {
      policy = [&, episode_seed](const Environment& env, std::span<const double> obs) {
        const auto s = (*stats)(obs, derive_seed(derive_seed(episode_seed, kRiskTag),
                                                 static_cast<std::uint64_t>(env.steps_elapsed())));
        risk.mu.push_back(s.mu);
        risk.sigma.push_back(s.sigma);
        return base(env, obs);
      };
    }
    const auto record = run_episode(set.test[i], policy, {}, EpisodeOptions{.keep_transitions = false});
    r.episodes[i] = {i, set.test[i].layout_seed, record.outcome};
    if (stats) {
      // A blocker stop consults the stats without taking a step.
      risk.mu.resize(static_cast<std::size_t>(record.outcome.length));
      risk.sigma.resize(static_cast<std::size_t>(record.outcome.length));
      risk.episode = static_cast<std::int64_t>(i);
      risk.catastrophe = record.outcome.kind == OutcomeKind::Catastrophe;
      r.risk[i] = std::move(risk);
    }
  });

  if (stats && config.risk.random_baseline) {
    // Uniform random actions; member values drawn i.i.d. from N(0, 1).
    const int members = std::max(2, config.ensemble_size);
    r.random_risk.resize(n);
    parallel_for(n, config.workers, [&](std::size_t i) {
      Rng rng(derive_seed(derive_seed(seed, kRandomTag), i));
      ens::RiskEpisode risk;
      const Policy random = [&](const Environment& env, std::span<const double>) {
        std::vector<double> values(static_cast<std::size_t>(members));
        for (auto& v : values) v = rng.normal();
        const auto s = ens::stats_from_values(std::move(values));
        risk.mu.push_back(s.mu);
        risk.sigma.push_back(s.sigma);
        return Decision::act(static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(env.action_count()))));
      };
      const auto record = run_episode(set.test[i], random, {}, EpisodeOptions{.keep_transitions = false});
      risk.episode = static_cast<std::int64_t>(i);
      risk.catastrophe = record.outcome.kind == OutcomeKind::Catastrophe;
      r.random_risk[i] = std::move(risk);
    });
  }

  std::vector<OutcomeKind> outcomes;
  for (const auto& e : r.episodes) outcomes.push_back(e.outcome.kind);
  r.summary = summarize_outcomes(seed, outcomes);
  r.summary.train_solve_rate = bundle.train_solve_rate;
  r.summary.flagged = bundle.train_solve_rate < config.convergence_threshold;
  r.checkpoints = bundle.checkpoints;
  return r;
}

// Bootstrap ROC for one (variant, dt); nullopt when the rollout has no
// catastrophes or no safe steps.
std::optional<ens::BootstrapRoc> risk_roc(const std::vector<ens::RiskEpisode>& episodes,
                                          const ens::ScoreVariant& variant, int dt, int b, std::uint64_t seed) {
  std::vector<ens::EpisodeScores> scored;
  bool pos = false, neg = false;
  for (const auto& ep : episodes) {
    scored.push_back(ens::score_episode(ep, variant, dt));
    for (bool l : scored.back().labels) (l ? pos : neg) = true;
  }
  if (!pos || !neg) return std::nullopt;
  return ens::bootstrap_roc(scored, b, seed);
}

void write_risk_outputs(const fs::path& dir, const ExperimentConfig& config, std::uint64_t seed,
                        const std::vector<ens::RiskEpisode>& episodes, const std::string& label,
                        std::map<std::string, std::map<int, std::vector<double>>>& aucs) {
  std::vector<ens::ScoreVariant> variants;
  for (const auto& name : config.risk.variants) variants.push_back(ens::variant_by_name(name));
  const std::string prefix = label.empty() ? "" : label + "_";
  ens::write_risk_points_csv(dir / (prefix + "risk_points.csv"), episodes, variants);

  nlohmann::json auc = nlohmann::json::object();
  for (std::size_t v = 0; v < variants.size(); ++v) {
    for (int dt : config.risk.dts) {
      const std::uint64_t bseed =
          derive_seed(derive_seed(derive_seed(config.risk.bootstrap_seed, kBootstrapTag), seed), v * 1000 + dt);
      const auto roc = risk_roc(episodes, variants[v], dt, config.risk.bootstrap, bseed);
      const std::string key = variants[v].name + "/dt" + std::to_string(dt);
      if (!roc) {
        auc[key] = nullptr;
        continue;
      }
      ens::write_roc_csv(dir / (prefix + "roc_" + variants[v].name + "_dt" + std::to_string(dt) + ".csv"), *roc);
      auc[key] = ens::auc_json(*roc);
      // The random baseline is one row per dt, taken from the first variant.
      const std::string agg = label.empty() ? variants[v].name : label;
      if (label.empty() || v == 0) aucs[agg][dt].push_back(roc->auc_mean);
    }
  }
  write_file_atomic(dir / (prefix + "auc.json"), auc.dump(2) + "\n");
}

std::string metrics_csv(const std::vector<SeedSummary>& rows) {
  std::string out = "seed,pct_solved,pct_catastrophe,pct_timeout,pct_blocked,train_solve_rate,flagged\n";
  for (const auto& r : rows) {
    out += std::to_string(r.seed) + "," + csv_double(r.pct_solved) + "," + csv_double(r.pct_catastrophe) + "," +
           csv_double(r.pct_timeout) + "," + csv_double(r.pct_blocked) + "," + csv_double(r.train_solve_rate) + "," +
           (r.flagged ? "1" : "0") + "\n";
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Model cache.

ModelCache::ModelCache(fs::path root) : root_(std::move(root)) {}

dqn::DqnConfig effective_dqn(const ExperimentConfig& c) {
  dqn::DqnConfig d = c.dqn;
  d.dropout = c.method == Method::DropDQN ? c.drop_probability : 0.0;
  return d;
}

ppo::PpoConfig effective_ppo(const ExperimentConfig& c) {
  ppo::PpoConfig p = c.ppo;
  if (c.method != Method::DropPPO && c.method != Method::MCDropPPO) p.dropout_start = 0.0;
  return p;
}

std::mutex& ModelCache::key_mutex(const std::string& key) {
  static std::mutex map_mutex;
  static std::map<std::string, std::unique_ptr<std::mutex>> mutexes;
  std::lock_guard lock(map_mutex);
  auto& slot = mutexes[fs::absolute(root_ / key).lexically_normal().string()];
  if (!slot) slot = std::make_unique<std::mutex>();
  return *slot;
}

std::string ModelCache::dqn_key(const EnvironmentSet& set, std::uint64_t seed, const dqn::DqnConfig& config) {
  return key_of("dqn", train_fingerprint(set) + "\n" + std::to_string(seed) + "\n" + dqn::to_json(config).dump());
}

std::string ModelCache::blocker_key(const EnvironmentSet& set, std::uint64_t seed, const dqn::DqnConfig& dqn_config,
                                    const blocker::BlockerConfig& config) {
  return key_of("blocker", dqn_key(set, seed, dqn_config) + "\n" + blocker::to_json(config).dump());
}

std::string ModelCache::ppo_key(const EnvironmentSet& set, std::uint64_t seed, const ppo::PpoConfig& config) {
  return key_of("ppo", train_fingerprint(set) + "\n" + std::to_string(seed) + "\n" + ppo::to_json(config).dump());
}

DqnArtifacts ModelCache::dqn(const EnvironmentSet& set, std::uint64_t seed, const dqn::DqnConfig& config) {
  const auto key = dqn_key(set, seed, config);
  const fs::path dir = root_ / "models" / key;
  std::lock_guard lock(key_mutex(key));
  if (!fs::exists(dir / "meta.json")) {
    publish(dir, [&](const fs::path& tmp) {
      const auto probe = make_environment(set.train.front());
      blocker::BlockerDataset data(probe->action_count());
      const std::vector<StepObserver> observers{data.recorder()};
      const auto result = dqn::train_dqn(set.train, seed, config, observers);
      const nlohmann::json meta = {{"kind", "dqn"},
                                   {"seed", seed},
                                   {"env", to_string(set.kind)},
                                   {"n_train", set.train.size()},
                                   {"train_solve_rate", result.train_solve_rate},
                                   {"episodes_run", result.episodes_run},
                                   {"env_steps", result.env_steps},
                                   {"updates", result.updates},
                                   {"blocker_positives", data.positives()},
                                   {"blocker_negatives", data.negatives()}};
      nn::save_checkpoint(tmp / "model.bin", result.params, {{"config", dqn::to_json(config)}, {"seed", seed}});
      dqn::write_log_jsonl(tmp / "train_log.jsonl", result.log);
      data.write_binary(tmp / "blocker_data.bin");
      write_file_atomic(tmp / "meta.json", meta.dump(2) + "\n");
    });
  }
  DqnArtifacts a;
  a.params = nn::load_checkpoint(dir / "model.bin").params;
  a.meta = nlohmann::json::parse(read_file(dir / "meta.json"));
  a.dir = dir;
  return a;
}

blocker::BlockerModel ModelCache::blocker(const EnvironmentSet& set, std::uint64_t seed,
                                          const dqn::DqnConfig& dqn_config, const blocker::BlockerConfig& config) {
  const auto source = dqn(set, seed, dqn_config);
  const auto key = blocker_key(set, seed, dqn_config, config);
  const fs::path dir = root_ / "models" / key;
  std::lock_guard lock(key_mutex(key));
  if (!fs::exists(dir / "meta.json")) {
    publish(dir, [&](const fs::path& tmp) {
      const auto data = blocker::BlockerDataset::read_binary(source.dir / "blocker_data.bin");
      const auto result = blocker::train_blocker(data, derive_seed(seed, kBlockerTag), config);
      blocker::save_blocker(tmp / "model.bin", result.model);
      const double tail = result.loss.empty() ? 0.0 : result.loss.back();
      const nlohmann::json meta = {{"kind", "blocker"},        {"seed", seed},
                                   {"source", source.dir.filename().string()},
                                   {"examples", data.size()},   {"positives", data.positives()},
                                   {"final_loss", tail}};
      write_file_atomic(tmp / "meta.json", meta.dump(2) + "\n");
    });
  }
  return blocker::load_blocker(dir / "model.bin");
}

PpoArtifacts ModelCache::ppo(const EnvironmentSet& set, std::uint64_t seed, const ppo::PpoConfig& config) {
  const auto key = ppo_key(set, seed, config);
  const fs::path dir = root_ / "models" / key;
  std::lock_guard lock(key_mutex(key));
  if (!fs::exists(dir / "meta.json")) {
    publish(dir, [&](const fs::path& tmp) {
      const auto result = ppo::train_ppo(set.train, seed, config);
      const nlohmann::json meta = {{"kind", "ppo"},
                                   {"seed", seed},
                                   {"env", to_string(set.kind)},
                                   {"n_train", set.train.size()},
                                   {"train_solve_rate", ppo_train_solve_rate(result.net, set.train, seed)},
                                   {"episodes", result.episodes}};
      ppo::save_policy_value_net(tmp / "model.bin", result.net, {{"config", ppo::to_json(config)}, {"seed", seed}});
      ppo::write_log_jsonl(tmp / "train_log.jsonl", result.log);
      write_file_atomic(tmp / "meta.json", meta.dump(2) + "\n");
    });
  }
  PpoArtifacts a;
  a.net = ppo::load_policy_value_net(dir / "model.bin");
  a.meta = nlohmann::json::parse(read_file(dir / "meta.json"));
  a.dir = dir;
  return a;
}

// ---------------------------------------------------------------------------
// Agents.

ens::Ensemble Agent::ensemble() const {
  ens::Ensemble e;
  e.action_count = action_count;
  if (q_members.size() > 1) {
    e.kind = ens::MemberKind::QNetwork;
    e.members = q_members;
  } else if (pv_members.size() > 1) {
    e.kind = ens::MemberKind::PolicyValue;
    for (const auto& m : pv_members) e.members.push_back(m.params);
  }
  return e;
}

AgentBundle build_agent(const ExperimentConfig& config, const EnvironmentSet& set, std::uint64_t seed,
                        ModelCache& cache) {
  AgentBundle b;
  b.agent.method = config.method;
  b.agent.oracle_blocker = config.oracle_blocker;
  b.agent.mc_passes = config.mc_passes;
  const int members = member_count(config);
  double min_rate = 1.0;

  if (is_dqn_family(config.method)) {
    const auto dcfg = effective_dqn(config);
    for (int k = 0; k < members; ++k) {
      auto a = cache.dqn(set, seed + static_cast<std::uint64_t>(k), dcfg);
      min_rate = std::min(min_rate, a.meta.at("train_solve_rate").get<double>());
      b.checkpoints.push_back(a.dir / "model.bin");
      b.agent.q_members.push_back(std::move(a.params));
    }
    b.agent.action_count = b.agent.q_members.front().output_size();
    const bool blocked = config.method == Method::BlockDQN || config.method == Method::BlockEnsDQN;
    if (blocked && !config.oracle_blocker) {
      b.agent.blocker_model = cache.blocker(set, seed, dcfg, config.blocker);
      b.checkpoints.push_back(cache.root() / "models" / ModelCache::blocker_key(set, seed, dcfg, config.blocker) /
                              "model.bin");
    }
  } else {
    const auto pcfg = effective_ppo(config);
    for (int k = 0; k < members; ++k) {
      auto a = cache.ppo(set, seed + static_cast<std::uint64_t>(k), pcfg);
      min_rate = std::min(min_rate, a.meta.at("train_solve_rate").get<double>());
      b.checkpoints.push_back(a.dir / "model.bin");
      b.agent.pv_members.push_back(std::move(a.net));
    }
    b.agent.action_count = b.agent.pv_members.front().action_count;
  }
  b.train_solve_rate = min_rate;
  return b;
}

std::optional<StatsFn> risk_stats(const Agent& agent) {
  if (agent.q_members.size() > 1 || agent.pv_members.size() > 1) {
    auto ensemble = std::make_shared<ens::Ensemble>(agent.ensemble());
    return StatsFn([ensemble](std::span<const double> obs, std::uint64_t) { return ens::value_stats(*ensemble, obs); });
  }
  if (agent.method == Method::MCDropPPO) {
    const auto net = std::make_shared<ppo::PolicyValueNet>(agent.pv_members.front());
    const int passes = agent.mc_passes;
    return StatsFn([net, passes](std::span<const double> obs, std::uint64_t step_seed) {
      return ens::mc_dropout_stats(net->params, obs, passes, step_seed, net->action_count);
    });
  }
  return std::nullopt;
}

Policy make_policy(const Agent& agent, std::uint64_t episode_seed) {
  auto rng = std::make_shared<Rng>(episode_seed);
  switch (agent.method) {
    case Method::DQN:
    case Method::DropDQN: {
      const auto* net = &agent.q_members.front();
      return [net](const Environment&, std::span<const double> obs) {
        return Decision::act(dqn::greedy_action(*net, obs));
      };
    }
    case Method::BlockDQN:
    case Method::BlockEnsDQN: {
      const auto* members = &agent.q_members;
      blocker::QFunction q = [members](std::span<const double> obs) { return mean_q(*members, obs); };
      if (agent.oracle_blocker) return blocker::filtered_policy(q, blocker::oracle_unsafe(), 0.5);
      const auto& model = *agent.blocker_model;
      return blocker::filtered_policy(q, blocker::model_unsafe(model), model.threshold);
    }
    case Method::EnsDQN:
    case Method::MajDQN:
    case Method::MajPPO:
    case Method::EnsMeanPPO: {
      auto ensemble = std::make_shared<ens::Ensemble>(agent.ensemble());
      if (ensemble->members.empty()) {
        // N = 1 degenerates to the single member.
        ensemble->kind = agent.q_members.empty() ? ens::MemberKind::PolicyValue : ens::MemberKind::QNetwork;
        if (agent.q_members.empty()) {
          ensemble->members.push_back(agent.pv_members.front().params);
        } else {
          ensemble->members.push_back(agent.q_members.front());
        }
      }
      const Method m = agent.method;
      return [ensemble, rng, m](const Environment&, std::span<const double> obs) {
        switch (m) {
          case Method::EnsDQN: return Decision::act(ens::ens_mean_q_action(*ensemble, obs));
          case Method::MajDQN:
            return Decision::act(ens::majority_vote_action(*ensemble, obs, ens::VoteMode::GreedyVotes, *rng));
          case Method::MajPPO:
            return Decision::act(ens::majority_vote_action(*ensemble, obs, ens::VoteMode::SampledVotes, *rng));
          default: return Decision::act(ens::logits_mean_policy(*ensemble, obs).sample(*rng));
        }
      };
    }
    case Method::PPO:
    case Method::DropPPO: {
      const auto* net = &agent.pv_members.front();
      return [net, rng](const Environment&, std::span<const double> obs) {
        return Decision::act(ppo::sample_action(*net, obs, *rng));
      };
    }
    case Method::MCDropPPO: {
      const auto* net = &agent.pv_members.front();
      const int passes = agent.mc_passes;
      return [net, rng, passes](const Environment&, std::span<const double> obs) {
        const auto logits = mc_mean_logits(*net, obs, passes, rng->next());
        return Decision::act(nn::Categorical::from_logits(logits).sample(*rng));
      };
    }
  }
  throw std::logic_error("make_policy: unhandled method");
}

// ---------------------------------------------------------------------------
// Summaries.

SeedSummary summarize_outcomes(std::uint64_t seed, std::span<const OutcomeKind> outcomes) {
  SeedSummary s;
  s.seed = seed;
  if (outcomes.empty()) return s;
  std::array<std::size_t, 4> counts{};
  for (auto k : outcomes) ++counts[static_cast<std::size_t>(k)];
  const double n = static_cast<double>(outcomes.size());
  s.pct_solved = 100.0 * static_cast<double>(counts[0]) / n;
  s.pct_catastrophe = 100.0 * static_cast<double>(counts[1]) / n;
  s.pct_timeout = 100.0 * static_cast<double>(counts[2]) / n;
  s.pct_blocked = 100.0 * static_cast<double>(counts[3]) / n;
  return s;
}

nlohmann::json to_json(const EvalSummary& s) {
  nlohmann::json per_seed = nlohmann::json::array();
  for (const auto& p : s.per_seed) {
    per_seed.push_back({{"seed", p.seed},
                        {"pct_solved", p.pct_solved},
                        {"pct_catastrophe", p.pct_catastrophe},
                        {"pct_timeout", p.pct_timeout},
                        {"pct_blocked", p.pct_blocked},
                        {"train_solve_rate", p.train_solve_rate},
                        {"flagged", p.flagged}});
  }
  nlohmann::json auc = nlohmann::json::object();
  for (const auto& [variant, by_dt] : s.auc_mean) {
    for (const auto& [dt, v] : by_dt) auc[variant][std::to_string(dt)] = v;
  }
  return {{"config_hash", s.config_hash},
          {"method", to_string(s.method)},
          {"env", to_string(s.env_kind)},
          {"n_train", s.n_train},
          {"pct_solved", s.pct_solved},
          {"pct_catastrophe", s.pct_catastrophe},
          {"pct_timeout", s.pct_timeout},
          {"pct_blocked", s.pct_blocked},
          {"per_seed", per_seed},
          {"flagged_seeds", s.flagged_seeds},
          {"auc_mean", auc}};
}

EvalSummary eval_summary_from_json(const nlohmann::json& doc) {
  EvalSummary s;
  s.config_hash = doc.at("config_hash").get<std::string>();
  s.method = method_from_string(doc.at("method").get<std::string>());
  s.env_kind = env_kind_from_string(doc.at("env").get<std::string>());
  s.n_train = doc.at("n_train").get<std::size_t>();
  s.pct_solved = doc.at("pct_solved").get<double>();
  s.pct_catastrophe = doc.at("pct_catastrophe").get<double>();
  s.pct_timeout = doc.at("pct_timeout").get<double>();
  s.pct_blocked = doc.at("pct_blocked").get<double>();
  for (const auto& p : doc.at("per_seed")) {
    SeedSummary r;
    r.seed = p.at("seed").get<std::uint64_t>();
    r.pct_solved = p.at("pct_solved").get<double>();
    r.pct_catastrophe = p.at("pct_catastrophe").get<double>();
    r.pct_timeout = p.at("pct_timeout").get<double>();
    r.pct_blocked = p.at("pct_blocked").get<double>();
    r.train_solve_rate = p.at("train_solve_rate").get<double>();
    r.flagged = p.at("flagged").get<bool>();
    s.per_seed.push_back(r);
  }
  s.flagged_seeds = doc.at("flagged_seeds").get<std::vector<std::uint64_t>>();
  for (const auto& [variant, by_dt] : doc.at("auc_mean").items()) {
    for (const auto& [dt, v] : by_dt.items()) s.auc_mean[variant][std::stoi(dt)] = v.get<double>();
  }
  return s;
}

nlohmann::json to_json(const EpisodeLine& line) {
  return {{"index", line.index},
          {"layout_seed", line.layout_seed},
          {"outcome", to_string(line.outcome.kind)},
          {"length", line.outcome.length},
          {"return", line.outcome.ret}};
}

fs::path run_directory(const ExperimentConfig& config, const fs::path& out) {
  return out / "runs" / config_hash(config);
}

EvalSummary run_experiment(const ExperimentConfig& config, const fs::path& out) {
  validate(config);
  const fs::path dir = run_directory(config, out);
  if (fs::exists(dir / "summary.json")) return eval_summary_from_json(nlohmann::json::parse(read_file(dir / "summary.json")));

  fs::remove_all(dir);
  fs::create_directories(dir);
  write_file_atomic(dir / "config.toml", to_toml(config));
  const auto set = split_environments(config.env_kind, config.n_train, config.n_test, config.split_seed);
  write_file_atomic(dir / "env_set.json", to_json(set).dump() + "\n");

  ModelCache cache(out);
  EvalSummary summary;
  summary.config_hash = config_hash(config);
  summary.method = config.method;
  summary.env_kind = config.env_kind;
  summary.n_train = config.n_train;
  std::map<std::string, std::map<int, std::vector<double>>> aucs;
  nlohmann::json checkpoints = nlohmann::json::object();

  for (std::uint64_t seed : config.seeds) {
    const auto bundle = build_agent(config, set, seed, cache);
    auto result = evaluate_seed(config, set, seed, bundle);
    const fs::path seed_dir = dir / ("seed_" + std::to_string(seed));
    fs::create_directories(seed_dir);

    std::string lines;
    for (const auto& e : result.episodes) lines += to_json(e).dump() + "\n";
    write_file_atomic(seed_dir / "episodes.jsonl", lines);
    if (!result.risk.empty()) write_risk_outputs(seed_dir, config, seed, result.risk, "", aucs);
    if (!result.random_risk.empty()) write_risk_outputs(seed_dir, config, seed, result.random_risk, "random", aucs);

    auto& list = checkpoints[std::to_string(seed)] = nlohmann::json::array();
    for (const auto& p : result.checkpoints) list.push_back(fs::relative(p, out).generic_string());

    summary.per_seed.push_back(result.summary);
    if (result.summary.flagged) summary.flagged_seeds.push_back(seed);
  }

  const double k = static_cast<double>(summary.per_seed.size());
  for (const auto& p : summary.per_seed) {
    summary.pct_solved += p.pct_solved / k;
    summary.pct_catastrophe += p.pct_catastrophe / k;
    summary.pct_timeout += p.pct_timeout / k;
    summary.pct_blocked += p.pct_blocked / k;
  }
  for (const auto& [variant, by_dt] : aucs) {
    for (const auto& [dt, values] : by_dt) {
      summary.auc_mean[variant][dt] =
          std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
    }
  }

  write_file_atomic(dir / "metrics.csv", metrics_csv(summary.per_seed));
  write_file_atomic(dir / "checkpoints.json", checkpoints.dump(2) + "\n");
  write_file_atomic(dir / "summary.json", to_json(summary).dump(2) + "\n");
  return summary;
}

}  // namespace safegen::harness
