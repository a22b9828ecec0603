#include "safegen/env.hpp"

#include <stdexcept>
#include <unordered_set>

#include "safegen/gridworld.hpp"
#include "safegen/lavarun.hpp"
#include "safegen/rng.hpp"

namespace safegen {

std::string_view to_string(EnvKind kind) {
  switch (kind) {
    case EnvKind::GridFull: return "GridFull";
    case EnvKind::GridReveal: return "GridReveal";
    case EnvKind::LavaRun: return "LavaRun";
  }
  return "?";
}

EnvKind env_kind_from_string(std::string_view name) {
  if (name == "GridFull") return EnvKind::GridFull;
  if (name == "GridReveal") return EnvKind::GridReveal;
  if (name == "LavaRun") return EnvKind::LavaRun;
  throw std::invalid_argument("unknown env_kind: " + std::string(name));
}

std::string_view to_string(OutcomeKind kind) {
  switch (kind) {
    case OutcomeKind::Solved: return "Solved";
    case OutcomeKind::Catastrophe: return "Catastrophe";
    case OutcomeKind::Timeout: return "Timeout";
    case OutcomeKind::Blocked: return "Blocked";
  }
  return "?";
}

OutcomeKind outcome_kind_from_string(std::string_view name) {
  if (name == "Solved") return OutcomeKind::Solved;
  if (name == "Catastrophe") return OutcomeKind::Catastrophe;
  if (name == "Timeout") return OutcomeKind::Timeout;
  if (name == "Blocked") return OutcomeKind::Blocked;
  throw std::invalid_argument("unknown outcome: " + std::string(name));
}

EnvironmentSet split_environments(EnvKind kind, std::size_t n_train, std::size_t n_test,
                                  std::uint64_t split_seed) {
  EnvironmentSet set;
  set.kind = kind;
  set.split_seed = split_seed;
  set.train.reserve(n_train);
  set.test.reserve(n_test);

  std::unordered_set<std::uint64_t> seen;
  std::uint64_t counter = 0;
  while (set.train.size() + set.test.size() < n_train + n_test) {
    const std::uint64_t seed = stream_value(split_seed, counter++);
    if (!seen.insert(seed).second) continue;
    auto& target = set.train.size() < n_train ? set.train : set.test;
    target.push_back(EnvironmentConfig{kind, seed});
  }
  return set;
}

nlohmann::json to_json(const EnvironmentSet& set) {
  nlohmann::json doc;
  doc["env_kind"] = std::string(to_string(set.kind));
  doc["split_seed"] = set.split_seed;
  auto seeds = [](const std::vector<EnvironmentConfig>& configs) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& c : configs) arr.push_back(c.layout_seed);
    return arr;
  };
  doc["train"] = seeds(set.train);
  doc["test"] = seeds(set.test);
  return doc;
}

EnvironmentSet environment_set_from_json(const nlohmann::json& doc) {
  EnvironmentSet set;
  set.kind = env_kind_from_string(doc.at("env_kind").get<std::string>());
  set.split_seed = doc.at("split_seed").get<std::uint64_t>();
  for (const auto& s : doc.at("train")) set.train.push_back({set.kind, s.get<std::uint64_t>()});
  for (const auto& s : doc.at("test")) set.test.push_back({set.kind, s.get<std::uint64_t>()});
  return set;
}

bool Environment::action_is_catastrophic(int action) const {
  if (terminal()) return false;
  auto copy = clone();
  return copy->step(action).catastrophe;
}

std::unique_ptr<Environment> make_environment(const EnvironmentConfig& config) {
  switch (config.kind) {
    case EnvKind::GridFull:
    case EnvKind::GridReveal:
      return std::make_unique<grid::GridWorldEnv>(config);
    case EnvKind::LavaRun:
      return std::make_unique<lava::LavaRunEnv>(config);
  }
  throw std::invalid_argument("unknown env kind");
}

OutcomeKind classify_terminal_step(const StepResult& result) {
  if (result.catastrophe) return OutcomeKind::Catastrophe;
  if (result.reward > 0.0) return OutcomeKind::Solved;
  return OutcomeKind::Timeout;
}

EpisodeRecord run_episode(Environment& env, const Policy& policy,
                          std::span<const StepObserver> observers, EpisodeOptions options) {
  EpisodeRecord record;
  record.config = env.config();
  std::vector<double> obs = env.observe();

  while (!env.terminal()) {
    const Decision decision = policy(env, obs);
    if (decision.terminate) {
      record.outcome.kind = OutcomeKind::Blocked;
      break;
    }
    const int step_index = env.steps_elapsed();
    StepResult result = env.step(decision.action);

    Transition t;
    t.observation = std::move(obs);
    t.action = decision.action;
    t.reward = result.reward;
    t.next_observation = result.observation;
    t.terminal = result.terminal;
    t.catastrophe = result.catastrophe;
    t.timeout = result.terminal && !result.catastrophe && result.reward <= 0.0 &&
                env.steps_elapsed() >= env.max_steps();
    t.step = step_index;

    record.outcome.length += 1;
    record.outcome.ret += result.reward;
    if (result.terminal) record.outcome.kind = classify_terminal_step(result);

    for (const auto& observer : observers) observer(t);

    obs = std::move(result.observation);
    if (options.keep_transitions) record.transitions.push_back(std::move(t));
  }
  return record;
}

EpisodeRecord run_episode(const EnvironmentConfig& config, const Policy& policy,
                          std::span<const StepObserver> observers, EpisodeOptions options) {
  auto env = make_environment(config);
  return run_episode(*env, policy, observers, options);
}

}  // namespace safegen
