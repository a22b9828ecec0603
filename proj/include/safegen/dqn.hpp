#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "json.hpp"
#include "safegen/env.hpp"
#include "safegen/neural.hpp"
#include "safegen/rng.hpp"

namespace safegen::dqn {

// Fixed-capacity FIFO ring of transitions.
class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity);

  void push(Transition t);
  std::size_t size() const { return items_.size(); }
  std::size_t capacity() const { return capacity_; }
  std::uint64_t total_pushed() const { return pushed_; }

  // i = 0 is the oldest retained transition.
  const Transition& at(std::size_t i) const;

  // Uniform with replacement.
  std::vector<const Transition*> sample(Rng& rng, std::size_t n) const;

 private:
  std::size_t capacity_;
  std::vector<Transition> items_;
  std::size_t head_ = 0;  // slot of the oldest item once full
  std::uint64_t pushed_ = 0;
};

struct EpsilonSchedule {
  double start = 1.0;
  double decay = 0.999;
  double floor = 0.05;

  double at(std::int64_t episode) const;
};

struct EpsilonChoice {
  int action = 0;
  bool explored = false;
};

EpsilonChoice epsilon_greedy(std::span<const double> q_values, double epsilon, Rng& rng);

// argmax over Q; ties go to the lowest action index.
int greedy_action(const nn::NetworkParameters& params, std::span<const double> observation);

// With bootstrap_timeouts, only state-terminal transitions truncate;
// otherwise a step-limit ending is a terminal too.
double td_target(const Transition& t, const nn::NetworkParameters& target_params, double discount = 1.0,
                 bool bootstrap_timeouts = true);

// One optimizer step on mean squared TD error over `batch`. Returns the loss
// before the step. The target is treated as a constant.
double dqn_update(nn::NetworkParameters& online, const nn::NetworkParameters& target,
                  std::span<const Transition* const> batch, nn::Optimizer& optimizer, double discount = 1.0,
                  nn::DropoutMode dropout = nn::DropoutMode::off(), bool bootstrap_timeouts = true);

struct DqnConfig {
  std::vector<int> hidden{256, 256, 512};
  double dropout = 0.0;
  std::int64_t episodes = 60000;
  int batch_size = 32;
  int update_every = 1;  // environment steps per gradient update
  std::size_t replay_capacity = 10000;
  double learning_rate = 1e-4;
  std::int64_t target_sync_episodes = 1000;
  EpsilonSchedule epsilon;
  // With discount 1 and no step cost every non-lava action of a solvable
  // state is worth +1, so greedy play has nothing pulling it to the goal.
  double discount = 0.9;
  bool bootstrap_timeouts = true;
  std::int64_t convergence_check_every = 0;  // episodes; 0 disables
  bool stop_when_converged = false;
  std::int64_t log_every = 1000;
};

nlohmann::json to_json(const DqnConfig& config);
DqnConfig dqn_config_from_json(const nlohmann::json& doc);

struct DqnLogEntry {
  std::int64_t episode = 0;
  double epsilon = 0.0;
  double train_return_ma = 0.0;
  double loss_ma = 0.0;
};

nlohmann::json to_json(const DqnLogEntry& entry);

struct DqnResult {
  nn::NetworkParameters params;
  std::vector<DqnLogEntry> log;
  std::int64_t episodes_run = 0;
  std::int64_t env_steps = 0;
  std::int64_t updates = 0;
  double train_solve_rate = 0.0;  // greedy, one episode per training config
};

// Fraction of configs solved by one greedy episode each.
double greedy_solve_rate(const nn::NetworkParameters& params, std::span<const EnvironmentConfig> configs);

// Deterministic in (train, seed, config). Each episode draws its environment
// uniformly from `train`; `observers` see every executed transition.
DqnResult train_dqn(std::span<const EnvironmentConfig> train, std::uint64_t seed, const DqnConfig& config,
                    std::span<const StepObserver> observers = {});

void write_log_jsonl(const std::filesystem::path& path, std::span<const DqnLogEntry> log);

}  // namespace safegen::dqn
