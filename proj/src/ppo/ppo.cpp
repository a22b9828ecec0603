#include "safegen/ppo.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "safegen/rng.hpp"

namespace safegen::ppo {

PolicyValueNet::Output PolicyValueNet::forward(const nn::Matrix& observations, nn::DropoutMode mode,
                                               nn::ForwardCache* cache) const {
  const nn::Matrix out = nn::mlp_forward(params, observations, mode, cache);
  return {out.topRows(action_count), out.row(action_count).transpose()};
}

std::vector<double> PolicyValueNet::logits(std::span<const double> observation, nn::DropoutMode mode) const {
  const nn::Vector out = nn::mlp_forward(params, observation, mode);
  return {out.data(), out.data() + action_count};
}

double PolicyValueNet::value(std::span<const double> observation, nn::DropoutMode mode) const {
  return nn::mlp_forward(params, observation, mode)(action_count);
}

PolicyValueNet make_policy_value_net(int observation_size, std::span<const int> hidden, int action_count,
                                     std::uint64_t seed, double dropout) {
  PolicyValueNet net;
  net.action_count = action_count;
  net.params = nn::make_mlp(observation_size, hidden, action_count + 1, seed, dropout);
  return net;
}

GaeResult compute_gae(std::span<const double> rewards, std::span<const double> values,
                      std::span<const std::uint8_t> terminals, double bootstrap_value, double gamma, double lambda) {
  const std::size_t n = rewards.size();
  if (values.size() != n || terminals.size() != n) throw std::invalid_argument("compute_gae: length mismatch");
  GaeResult out;
  out.advantages.assign(n, 0.0);
  out.returns.assign(n, 0.0);
  double next_advantage = 0.0;
  double next_value = bootstrap_value;
  for (std::size_t i = n; i-- > 0;) {
    const double live = terminals[i] ? 0.0 : 1.0;
    const double delta = rewards[i] + gamma * next_value * live - values[i];
    next_advantage = delta + gamma * lambda * live * next_advantage;
    out.advantages[i] = next_advantage;
    out.returns[i] = next_advantage + values[i];
    next_value = values[i];
  }
  return out;
}

void compute_gae(RolloutBatch& batch, double gamma, double lambda) {
  std::vector<double> rewards, values;
  std::vector<std::uint8_t> terminals;
  for (const auto& s : batch.steps) {
    rewards.push_back(s.reward);
    values.push_back(s.value);
    terminals.push_back(s.terminal ? 1 : 0);
  }
  auto gae = compute_gae(rewards, values, terminals, batch.bootstrap_value, gamma, lambda);
  batch.advantages = std::move(gae.advantages);
  batch.returns = std::move(gae.returns);
}

void normalize(std::vector<double>& values) {
  if (values.empty()) return;
  const double n = static_cast<double>(values.size());
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  double var = 0.0;
  for (double v : values) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / n);
  for (double& v : values) v = sd > 1e-12 ? (v - mean) / sd : 0.0;
}

PpoLoss ppo_loss(const PolicyValueNet& net, const RolloutBatch& batch, std::span<const std::size_t> indices,
                 const LossCoefficients& k, nn::DropoutMode mode) {
  if (indices.empty()) throw std::invalid_argument("ppo_loss: empty minibatch");
  const auto b = static_cast<Eigen::Index>(indices.size());
  const auto obs_size = static_cast<Eigen::Index>(batch.steps[indices[0]].observation.size());
  nn::Matrix x(obs_size, b);
  for (Eigen::Index j = 0; j < b; ++j) {
    const auto& obs = batch.steps[indices[static_cast<std::size_t>(j)]].observation;
    x.col(j) = Eigen::Map<const nn::Vector>(obs.data(), obs_size);
  }
  nn::ForwardCache cache;
  const auto out = net.forward(x, mode, &cache);

  const int a_count = net.action_count;
  nn::Matrix grad = nn::Matrix::Zero(a_count + 1, b);
  PpoLoss result;
  const double inv_b = 1.0 / static_cast<double>(b);
  int clipped = 0;
  for (Eigen::Index j = 0; j < b; ++j) {
    const std::size_t i = indices[static_cast<std::size_t>(j)];
    const RolloutStep& s = batch.steps[i];
    const double adv = batch.advantages[i];
    const double ret = batch.returns[i];

    const nn::Vector l = out.logits.col(j);
    const auto dist = nn::Categorical::from_logits(std::span<const double>(l.data(), static_cast<std::size_t>(a_count)));
    const double logp = dist.log_probs[static_cast<std::size_t>(s.action)];
    const double ratio = std::exp(logp - s.log_prob);
    if (!std::isfinite(ratio)) throw std::runtime_error("ppo_loss: non-finite probability ratio");

    const double unclipped = ratio * adv;
    const double clipped_term = std::clamp(ratio, 1.0 - k.clip, 1.0 + k.clip) * adv;
    const bool use_unclipped = unclipped <= clipped_term;
    if (!use_unclipped) ++clipped;
    result.policy_loss -= std::min(unclipped, clipped_term) * inv_b;
    // d(-surrogate)/d(logp) is -ratio*A on the unclipped branch and 0 otherwise
    const double dlogp = use_unclipped ? -unclipped * inv_b : 0.0;

    const double h = dist.entropy();
    result.entropy += h * inv_b;
    for (int a = 0; a < a_count; ++a) {
      const double p = dist.probs[static_cast<std::size_t>(a)];
      const double onehot = a == s.action ? 1.0 : 0.0;
      // dH/dl_a = -p_a (log p_a + H)
      const double dh = -p * (dist.log_probs[static_cast<std::size_t>(a)] + h);
      grad(a, j) = dlogp * (onehot - p) - k.entropy * dh * inv_b;
    }

    const double v_err = out.values(j) - ret;
    result.value_loss += v_err * v_err * inv_b;
    grad(a_count, j) = k.value * 2.0 * v_err * inv_b;
  }
  result.loss = result.policy_loss + k.value * result.value_loss - k.entropy * result.entropy;
  result.clip_fraction = static_cast<double>(clipped) * inv_b;
  result.gradients = nn::mlp_backward(net.params, cache, grad);
  return result;
}

nlohmann::json to_json(const PpoConfig& c) {
  return {{"hidden", c.hidden},
          {"total_steps", c.total_steps},
          {"steps_per_rollout", c.steps_per_rollout},
          {"minibatches", c.minibatches},
          {"epochs", c.epochs},
          {"clip", c.coefficients.clip},
          {"entropy_coef", c.coefficients.entropy},
          {"value_coef", c.coefficients.value},
          {"gamma", c.gamma},
          {"lambda", c.lambda},
          {"learning_rate", c.learning_rate},
          {"linear_decay", c.linear_decay},
          {"max_grad_norm", c.max_grad_norm},
          {"dropout_start", c.dropout_start},
          {"dropout_floor", c.dropout_floor},
          {"log_every", c.log_every}};
}

PpoConfig ppo_config_from_json(const nlohmann::json& doc) {
  PpoConfig c;
  c.hidden = doc.value("hidden", c.hidden);
  c.total_steps = doc.value("total_steps", c.total_steps);
  c.steps_per_rollout = doc.value("steps_per_rollout", c.steps_per_rollout);
  c.minibatches = doc.value("minibatches", c.minibatches);
  c.epochs = doc.value("epochs", c.epochs);
  c.coefficients.clip = doc.value("clip", c.coefficients.clip);
  c.coefficients.entropy = doc.value("entropy_coef", c.coefficients.entropy);
  c.coefficients.value = doc.value("value_coef", c.coefficients.value);
  c.gamma = doc.value("gamma", c.gamma);
  c.lambda = doc.value("lambda", c.lambda);
  c.learning_rate = doc.value("learning_rate", c.learning_rate);
  c.linear_decay = doc.value("linear_decay", c.linear_decay);
  c.max_grad_norm = doc.value("max_grad_norm", c.max_grad_norm);
  c.dropout_start = doc.value("dropout_start", c.dropout_start);
  c.dropout_floor = doc.value("dropout_floor", c.dropout_floor);
  c.log_every = doc.value("log_every", c.log_every);
  return c;
}

nlohmann::json to_json(const PpoLogEntry& e) {
  return {{"update", e.update},         {"steps", e.steps},           {"mean_return", e.mean_return},
          {"entropy", e.entropy},       {"value_loss", e.value_loss}, {"policy_loss", e.policy_loss},
          {"lr", e.lr},                 {"dropout", e.dropout}};
}

double dropout_at(const PpoConfig& config, double progress) {
  if (config.dropout_start <= 0.0) return 0.0;
  const double d = config.dropout_start * std::max(0.0, 1.0 - progress);
  return std::max(config.dropout_floor, d);
}

int sample_action(const PolicyValueNet& net, std::span<const double> observation, Rng& rng) {
  return nn::Categorical::from_logits(net.logits(observation)).sample(rng);
}

PpoResult train_ppo(std::span<const EnvironmentConfig> train, std::uint64_t seed, const PpoConfig& config,
                    const EnvironmentFactory& factory) {
  if (train.empty()) throw std::invalid_argument("train_ppo: empty training set");
  if (config.steps_per_rollout % config.minibatches != 0) {
    throw std::invalid_argument("train_ppo: rollout length must divide into minibatches");
  }
  Rng rng(derive_seed(seed, 0x9907));
  auto env = factory(train[rng.uniform_int(train.size())]);

  PpoResult result;
  result.net = make_policy_value_net(env->observation_size(), config.hidden, env->action_count(),
                                     derive_seed(seed, 0x1417), dropout_at(config, 0.0));
  const std::int64_t cycles = config.total_steps / config.steps_per_rollout;
  nn::Optimizer optimizer({.kind = nn::OptimizerKind::Adam,
                           .learning_rate = config.learning_rate,
                           .schedule = config.linear_decay ? nn::LrSchedule::LinearDecay : nn::LrSchedule::Constant,
                           .horizon = cycles * config.epochs * config.minibatches,
                           .max_grad_norm = config.max_grad_norm},
                          result.net.params);

  std::vector<double> obs = env->observe();
  double episode_return = 0.0;
  double window_return = 0.0;
  std::int64_t window_episodes = 0;
  double window_entropy = 0.0, window_value = 0.0, window_policy = 0.0;
  std::int64_t window_losses = 0;
  const std::size_t minibatch = static_cast<std::size_t>(config.steps_per_rollout / config.minibatches);

  for (std::int64_t cycle = 0; cycle < cycles; ++cycle) {
    const double p = dropout_at(config, static_cast<double>(cycle) / static_cast<double>(cycles));
    if (config.dropout_start > 0.0) nn::set_dropout(result.net.params, p);

    RolloutBatch batch;
    batch.steps.reserve(static_cast<std::size_t>(config.steps_per_rollout));
    for (int t = 0; t < config.steps_per_rollout; ++t) {
      const nn::Vector out = nn::mlp_forward(result.net.params, obs);
      const auto dist = nn::Categorical::from_logits(
          std::span<const double>(out.data(), static_cast<std::size_t>(result.net.action_count)));
      const int action = dist.sample(rng);
      const StepResult step = env->step(action);
      episode_return += step.reward;
      batch.steps.push_back({std::move(obs), action, dist.log_probs[static_cast<std::size_t>(action)],
                             out(result.net.action_count), step.reward, step.terminal});
      if (step.terminal) {
        window_return += episode_return;
        ++window_episodes;
        ++result.episodes;
        episode_return = 0.0;
        env = factory(train[rng.uniform_int(train.size())]);
        obs = env->observe();
      } else {
        obs = step.observation;
      }
    }
    batch.bootstrap_value = result.net.value(obs);
    compute_gae(batch, config.gamma, config.lambda);
    normalize(batch.advantages);

    std::vector<std::size_t> order(batch.steps.size());
    std::iota(order.begin(), order.end(), 0);
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
      rng.shuffle(std::span<std::size_t>(order));
      for (int m = 0; m < config.minibatches; ++m) {
        const std::span<const std::size_t> idx(order.data() + static_cast<std::size_t>(m) * minibatch, minibatch);
        const auto mode = config.dropout_start > 0.0 ? nn::DropoutMode::sampled_with(rng.next())
                                                      : nn::DropoutMode::off();
        const auto loss = ppo_loss(result.net, batch, idx, config.coefficients, mode);
        optimizer.step(result.net.params, loss.gradients);
        window_entropy += loss.entropy;
        window_value += loss.value_loss;
        window_policy += loss.policy_loss;
        ++window_losses;
      }
    }

    if (config.log_every > 0 && (cycle + 1) % config.log_every == 0) {
      const double nl = static_cast<double>(std::max<std::int64_t>(1, window_losses));
      result.log.push_back({cycle + 1, (cycle + 1) * config.steps_per_rollout,
                            window_episodes > 0 ? window_return / static_cast<double>(window_episodes) : 0.0,
                            window_entropy / nl, window_value / nl, window_policy / nl,
                            optimizer.current_learning_rate(), p});
      window_return = window_entropy = window_value = window_policy = 0.0;
      window_episodes = window_losses = 0;
    }
  }
  if (!result.net.params.all_finite()) throw std::runtime_error("train_ppo: parameters diverged");
  return result;
}

void write_log_jsonl(const std::filesystem::path& path, std::span<const PpoLogEntry> log) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& e : log) out << to_json(e).dump() << '\n';
}

void save_policy_value_net(const std::filesystem::path& path, const PolicyValueNet& net, const nlohmann::json& extra) {
  nlohmann::json hyper = extra;
  hyper["kind"] = "policy_value";
  hyper["action_count"] = net.action_count;
  nn::save_checkpoint(path, net.params, hyper);
}

PolicyValueNet load_policy_value_net(const std::filesystem::path& path) {
  auto ck = nn::load_checkpoint(path);
  PolicyValueNet net;
  net.params = std::move(ck.params);
  net.action_count = ck.hyperparameters.at("action_count").get<int>();
  return net;
}

}  // namespace safegen::ppo
