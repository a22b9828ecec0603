#include "safegen/dqn.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace safegen::dqn {
namespace {

constexpr std::uint64_t kInitTag = 0x1417;
constexpr std::uint64_t kLoopTag = 0x2e9a;

nn::Matrix stack_observations(std::span<const Transition* const> batch, bool next) {
  const auto rows = static_cast<Eigen::Index>((next ? batch[0]->next_observation : batch[0]->observation).size());
  nn::Matrix x(rows, static_cast<Eigen::Index>(batch.size()));
  for (std::size_t j = 0; j < batch.size(); ++j) {
    const auto& v = next ? batch[j]->next_observation : batch[j]->observation;
    x.col(static_cast<Eigen::Index>(j)) = Eigen::Map<const nn::Vector>(v.data(), rows);
  }
  return x;
}

bool bootstraps(const Transition& t, bool through_timeouts) { return !t.terminal || (through_timeouts && t.timeout); }

}  // namespace

ReplayBuffer::ReplayBuffer(std::size_t capacity) : capacity_(capacity) {
  if (capacity == 0) throw std::invalid_argument("replay capacity must be positive");
  items_.reserve(capacity);
}

void ReplayBuffer::push(Transition t) {
  ++pushed_;
  if (items_.size() < capacity_) {
    items_.push_back(std::move(t));
    return;
  }
  items_[head_] = std::move(t);
  head_ = (head_ + 1) % capacity_;
}

const Transition& ReplayBuffer::at(std::size_t i) const {
  if (i >= items_.size()) throw std::out_of_range("replay index");
  return items_[(head_ + i) % items_.size()];
}

std::vector<const Transition*> ReplayBuffer::sample(Rng& rng, std::size_t n) const {
  if (items_.empty()) throw std::logic_error("sampling an empty replay buffer");
  std::vector<const Transition*> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(&items_[rng.uniform_int(items_.size())]);
  return out;
}

double EpsilonSchedule::at(std::int64_t episode) const {
  return std::max(floor, start * std::pow(decay, static_cast<double>(episode)));
}

EpsilonChoice epsilon_greedy(std::span<const double> q_values, double epsilon, Rng& rng) {
  if (rng.bernoulli(epsilon)) {
    return {static_cast<int>(rng.uniform_int(q_values.size())), true};
  }
  return {nn::argmax(q_values), false};
}

int greedy_action(const nn::NetworkParameters& params, std::span<const double> observation) {
  const nn::Vector q = nn::mlp_forward(params, observation);
  return nn::argmax(std::span<const double>(q.data(), static_cast<std::size_t>(q.size())));
}

double td_target(const Transition& t, const nn::NetworkParameters& target_params, double discount,
                 bool bootstrap_timeouts) {
  if (!bootstraps(t, bootstrap_timeouts)) return t.reward;
  const nn::Vector q = nn::mlp_forward(target_params, t.next_observation);
  return t.reward + discount * q.maxCoeff();
}

double dqn_update(nn::NetworkParameters& online, const nn::NetworkParameters& target,
                  std::span<const Transition* const> batch, nn::Optimizer& optimizer, double discount,
                  nn::DropoutMode dropout, bool bootstrap_timeouts) {
  if (batch.empty()) return 0.0;
  const auto n = static_cast<Eigen::Index>(batch.size());

  const nn::Matrix next_q = nn::mlp_forward(target, stack_observations(batch, true));
  nn::ForwardCache cache;
  const nn::Matrix q = nn::mlp_forward(online, stack_observations(batch, false), dropout, &cache);

  nn::Matrix grad = nn::Matrix::Zero(q.rows(), n);
  double loss = 0.0;
  for (Eigen::Index j = 0; j < n; ++j) {
    const Transition& t = *batch[static_cast<std::size_t>(j)];
    const double y = bootstraps(t, bootstrap_timeouts) ? t.reward + discount * next_q.col(j).maxCoeff() : t.reward;
    const double err = q(t.action, j) - y;
    loss += err * err;
    grad(t.action, j) = 2.0 * err / static_cast<double>(n);
  }
  optimizer.step(online, nn::mlp_backward(online, cache, grad));
  return loss / static_cast<double>(n);
}

nlohmann::json to_json(const DqnConfig& c) {
  return {{"hidden", c.hidden},
          {"dropout", c.dropout},
          {"episodes", c.episodes},
          {"batch_size", c.batch_size},
          {"update_every", c.update_every},
          {"replay_capacity", c.replay_capacity},
          {"learning_rate", c.learning_rate},
          {"target_sync_episodes", c.target_sync_episodes},
          {"epsilon_start", c.epsilon.start},
          {"epsilon_decay", c.epsilon.decay},
          {"epsilon_floor", c.epsilon.floor},
          {"discount", c.discount},
          {"bootstrap_timeouts", c.bootstrap_timeouts},
          {"convergence_check_every", c.convergence_check_every},
          {"stop_when_converged", c.stop_when_converged},
          {"log_every", c.log_every}};
}

DqnConfig dqn_config_from_json(const nlohmann::json& doc) {
  DqnConfig c;
  c.hidden = doc.value("hidden", c.hidden);
  c.dropout = doc.value("dropout", c.dropout);
  c.episodes = doc.value("episodes", c.episodes);
  c.batch_size = doc.value("batch_size", c.batch_size);
  c.update_every = doc.value("update_every", c.update_every);
  c.replay_capacity = doc.value("replay_capacity", c.replay_capacity);
  c.learning_rate = doc.value("learning_rate", c.learning_rate);
  c.target_sync_episodes = doc.value("target_sync_episodes", c.target_sync_episodes);
  c.epsilon.start = doc.value("epsilon_start", c.epsilon.start);
  c.epsilon.decay = doc.value("epsilon_decay", c.epsilon.decay);
  c.epsilon.floor = doc.value("epsilon_floor", c.epsilon.floor);
  c.discount = doc.value("discount", c.discount);
  c.bootstrap_timeouts = doc.value("bootstrap_timeouts", c.bootstrap_timeouts);
  c.convergence_check_every = doc.value("convergence_check_every", c.convergence_check_every);
  c.stop_when_converged = doc.value("stop_when_converged", c.stop_when_converged);
  c.log_every = doc.value("log_every", c.log_every);
  return c;
}

nlohmann::json to_json(const DqnLogEntry& e) {
  return {{"episode", e.episode}, {"epsilon", e.epsilon}, {"train_return_ma", e.train_return_ma}, {"loss_ma", e.loss_ma}};
}

double greedy_solve_rate(const nn::NetworkParameters& params, std::span<const EnvironmentConfig> configs) {
  if (configs.empty()) return 0.0;
  const Policy greedy = [&](const Environment&, std::span<const double> obs) {
    return Decision::act(greedy_action(params, obs));
  };
  std::size_t solved = 0;
  for (const auto& config : configs) {
    const auto record = run_episode(config, greedy, {}, EpisodeOptions{.keep_transitions = false});
    if (record.outcome.kind == OutcomeKind::Solved) ++solved;
  }
  return static_cast<double>(solved) / static_cast<double>(configs.size());
}

DqnResult train_dqn(std::span<const EnvironmentConfig> train, std::uint64_t seed, const DqnConfig& config,
                    std::span<const StepObserver> observers) {
  if (train.empty()) throw std::invalid_argument("train_dqn: empty training set");
  if (config.batch_size <= 0) throw std::invalid_argument("train_dqn: batch size must be positive");
  if (config.update_every <= 0) throw std::invalid_argument("train_dqn: update_every must be positive");

  const auto probe = make_environment(train.front());
  DqnResult result;
  result.params = nn::make_mlp(probe->observation_size(), config.hidden, probe->action_count(),
                               derive_seed(seed, kInitTag), config.dropout);
  nn::NetworkParameters target = result.params;
  nn::Optimizer optimizer({.kind = nn::OptimizerKind::RMSProp, .learning_rate = config.learning_rate},
                          result.params);
  ReplayBuffer buffer(config.replay_capacity);
  Rng rng(derive_seed(seed, kLoopTag));

  double window_return = 0.0;
  double window_loss = 0.0;
  std::int64_t window_episodes = 0;
  std::int64_t window_updates = 0;
  double epsilon = 1.0;

  const Policy behaviour = [&](const Environment&, std::span<const double> obs) {
    const nn::Vector q = nn::mlp_forward(result.params, obs);
    return Decision::act(
        epsilon_greedy(std::span<const double>(q.data(), static_cast<std::size_t>(q.size())), epsilon, rng).action);
  };

  std::vector<StepObserver> hooks(observers.begin(), observers.end());
  hooks.push_back([&](const Transition& t) {
    buffer.push(t);
    ++result.env_steps;
    if (buffer.size() < static_cast<std::size_t>(config.batch_size)) return;
    if (result.env_steps % config.update_every != 0) return;
    const auto batch = buffer.sample(rng, static_cast<std::size_t>(config.batch_size));
    const auto mode = config.dropout > 0.0 ? nn::DropoutMode::sampled_with(rng.next()) : nn::DropoutMode::off();
    window_loss += dqn_update(result.params, target, batch, optimizer, config.discount, mode,
                              config.bootstrap_timeouts);
    ++window_updates;
    ++result.updates;
  });

  for (std::int64_t episode = 0; episode < config.episodes; ++episode) {
    epsilon = config.epsilon.at(episode);
    const auto& env_config = train[rng.uniform_int(train.size())];
    const auto record = run_episode(env_config, behaviour, hooks, EpisodeOptions{.keep_transitions = false});
    window_return += record.outcome.ret;
    ++window_episodes;
    result.episodes_run = episode + 1;

    if (config.target_sync_episodes > 0 && (episode + 1) % config.target_sync_episodes == 0) {
      target = result.params;
    }
    if (config.log_every > 0 && (episode + 1) % config.log_every == 0) {
      result.log.push_back({episode + 1, epsilon, window_return / static_cast<double>(window_episodes),
                            window_updates > 0 ? window_loss / static_cast<double>(window_updates) : 0.0});
      window_return = window_loss = 0.0;
      window_episodes = window_updates = 0;
    }
    if (config.convergence_check_every > 0 && (episode + 1) % config.convergence_check_every == 0 &&
        config.stop_when_converged && greedy_solve_rate(result.params, train) == 1.0) {
      break;
    }
  }
  if (!result.params.all_finite()) throw std::runtime_error("train_dqn: parameters diverged");
  result.train_solve_rate = greedy_solve_rate(result.params, train);
  return result;
}

void write_log_jsonl(const std::filesystem::path& path, std::span<const DqnLogEntry> log) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& e : log) out << to_json(e).dump() << '\n';
}

}  // namespace safegen::dqn
