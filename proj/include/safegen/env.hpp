#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace safegen {

enum class EnvKind { GridFull, GridReveal, LavaRun };

std::string_view to_string(EnvKind kind);
EnvKind env_kind_from_string(std::string_view name);

// One sample from the initial-state distribution. All environments of a kind
// share the same dynamics and rewards; only the layout differs.
struct EnvironmentConfig {
  EnvKind kind = EnvKind::GridFull;
  std::uint64_t layout_seed = 0;

  friend bool operator==(const EnvironmentConfig&, const EnvironmentConfig&) = default;
};

struct EnvironmentSet {
  EnvKind kind = EnvKind::GridFull;
  std::uint64_t split_seed = 0;
  std::vector<EnvironmentConfig> train;
  std::vector<EnvironmentConfig> test;
};

// Disjoint train/test sets. Layout seeds come from the counter-based stream of
// `split_seed` without replacement: the first n_train distinct values go to
// train, the next n_test to test.
EnvironmentSet split_environments(EnvKind kind, std::size_t n_train, std::size_t n_test,
                                  std::uint64_t split_seed);

nlohmann::json to_json(const EnvironmentSet& set);
EnvironmentSet environment_set_from_json(const nlohmann::json& doc);

struct StepResult {
  std::vector<double> observation;
  double reward = 0.0;
  bool terminal = false;
  bool catastrophe = false;  // implies terminal
};

enum class OutcomeKind { Solved, Catastrophe, Timeout, Blocked };

std::string_view to_string(OutcomeKind kind);
OutcomeKind outcome_kind_from_string(std::string_view name);

struct EpisodeOutcome {
  OutcomeKind kind = OutcomeKind::Timeout;
  int length = 0;
  double ret = 0.0;
};

struct Transition {
  std::vector<double> observation;
  int action = 0;
  double reward = 0.0;
  std::vector<double> next_observation;
  bool terminal = false;     // episode ended after this transition
  bool catastrophe = false;
  bool timeout = false;      // ended by the step limit, not by the state
  int step = 0;              // 0-based index within the episode
};

class Environment {
 public:
  virtual ~Environment() = default;

  virtual EnvironmentConfig config() const = 0;
  virtual int action_count() const = 0;
  virtual int observation_size() const = 0;
  virtual int max_steps() const = 0;
  virtual int steps_elapsed() const = 0;
  virtual bool terminal() const = 0;
  virtual std::vector<double> observe() const = 0;

  // Contract: must not be called once terminal() is true.
  virtual StepResult step(int action) = 0;

  virtual std::unique_ptr<Environment> clone() const = 0;

  // One-step lookahead on a copy: would `action` enter a catastrophe now?
  bool action_is_catastrophic(int action) const;
};

std::unique_ptr<Environment> make_environment(const EnvironmentConfig& config);

using EnvironmentFactory = std::function<std::unique_ptr<Environment>(const EnvironmentConfig&)>;

// A policy either picks an action or asks for the episode to be terminated
// (the blocker does this when every action is vetoed).
struct Decision {
  int action = 0;
  bool terminate = false;

  static Decision act(int a) { return Decision{a, false}; }
  static Decision stop() { return Decision{0, true}; }
};

using Policy = std::function<Decision(const Environment& env, std::span<const double> observation)>;
using StepObserver = std::function<void(const Transition&)>;

struct EpisodeRecord {
  EnvironmentConfig config;
  std::vector<Transition> transitions;
  EpisodeOutcome outcome;
};

struct EpisodeOptions {
  bool keep_transitions = true;
};

// Runs one episode to termination. Observers see every transition in order.
EpisodeRecord run_episode(Environment& env, const Policy& policy,
                          std::span<const StepObserver> observers = {},
                          EpisodeOptions options = {});

EpisodeRecord run_episode(const EnvironmentConfig& config, const Policy& policy,
                          std::span<const StepObserver> observers = {},
                          EpisodeOptions options = {});

OutcomeKind classify_terminal_step(const StepResult& result);

}  // namespace safegen
