#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "json.hpp"
#include "safegen/env.hpp"
#include "safegen/neural.hpp"
#include "safegen/rng.hpp"

namespace safegen::ppo {

// One MLP whose final layer holds the action-logit rows followed by a single
// value row, so every head reads the same trunk features.
struct PolicyValueNet {
  nn::NetworkParameters params;
  int action_count = 0;

  struct Output {
    nn::Matrix logits;  // action_count x batch
    nn::Vector values;  // batch
  };

  Output forward(const nn::Matrix& observations, nn::DropoutMode mode = nn::DropoutMode::off(),
                 nn::ForwardCache* cache = nullptr) const;
  std::vector<double> logits(std::span<const double> observation,
                             nn::DropoutMode mode = nn::DropoutMode::off()) const;
  double value(std::span<const double> observation, nn::DropoutMode mode = nn::DropoutMode::off()) const;
};

PolicyValueNet make_policy_value_net(int observation_size, std::span<const int> hidden, int action_count,
                                     std::uint64_t seed, double dropout = 0.0);

struct RolloutStep {
  std::vector<double> observation;
  int action = 0;
  double log_prob = 0.0;  // under the collecting policy
  double value = 0.0;
  double reward = 0.0;
  bool terminal = false;  // episode ended after this step
};

struct RolloutBatch {
  std::vector<RolloutStep> steps;
  double bootstrap_value = 0.0;  // V of the state after the last step (unused if it was terminal)
  std::vector<double> advantages;
  std::vector<double> returns;
};

struct GaeResult {
  std::vector<double> advantages;
  std::vector<double> returns;  // advantages + values
};

// delta_t = r_t + gamma V(s_{t+1}) (1 - terminal_t) - V(s_t)
// A_t = delta_t + gamma lambda (1 - terminal_t) A_{t+1}
GaeResult compute_gae(std::span<const double> rewards, std::span<const double> values,
                      std::span<const std::uint8_t> terminals, double bootstrap_value, double gamma, double lambda);

void compute_gae(RolloutBatch& batch, double gamma, double lambda);

// Zero mean, unit (population) standard deviation. Constant input becomes zeros.
void normalize(std::vector<double>& values);

struct LossCoefficients {
  double clip = 0.2;
  double entropy = 0.01;
  double value = 0.5;
};

struct PpoLoss {
  double loss = 0.0;
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double entropy = 0.0;
  double clip_fraction = 0.0;
  nn::Gradients gradients;
};

// loss = -mean(min(rA, clip(r, 1-c, 1+c)A)) + cv mean((V - R)^2) - ce mean(H)
// with r = exp(logp_new - logp_old). Uses batch.advantages as given.
// Throws std::runtime_error if any ratio is not finite.
PpoLoss ppo_loss(const PolicyValueNet& net, const RolloutBatch& batch, std::span<const std::size_t> indices,
                 const LossCoefficients& coefficients, nn::DropoutMode mode = nn::DropoutMode::off());

struct PpoConfig {
  std::vector<int> hidden{256, 256};
  std::int64_t total_steps = 500000;
  int steps_per_rollout = 256;
  int minibatches = 8;
  int epochs = 3;
  LossCoefficients coefficients;
  double gamma = 0.999;
  double lambda = 0.95;
  double learning_rate = 2e-4;
  bool linear_decay = true;
  double max_grad_norm = 0.5;
  // Dropout probability max(floor, d) with d decaying linearly from
  // dropout_start to zero over training. dropout_start = 0 disables dropout.
  double dropout_start = 0.0;
  double dropout_floor = 0.01;
  std::int64_t log_every = 10;  // collection cycles
};

nlohmann::json to_json(const PpoConfig& config);
PpoConfig ppo_config_from_json(const nlohmann::json& doc);

struct PpoLogEntry {
  std::int64_t update = 0;
  std::int64_t steps = 0;
  double mean_return = 0.0;
  double entropy = 0.0;
  double value_loss = 0.0;
  double policy_loss = 0.0;
  double lr = 0.0;
  double dropout = 0.0;
};

nlohmann::json to_json(const PpoLogEntry& entry);

struct PpoResult {
  PolicyValueNet net;
  std::vector<PpoLogEntry> log;
  std::int64_t episodes = 0;
};

// Deterministic in (train, seed, config). `factory` builds each episode's
// environment from its config.
PpoResult train_ppo(std::span<const EnvironmentConfig> train, std::uint64_t seed, const PpoConfig& config,
                    const EnvironmentFactory& factory = make_environment);

double dropout_at(const PpoConfig& config, double progress);

// Samples an action from the policy head.
int sample_action(const PolicyValueNet& net, std::span<const double> observation, Rng& rng);

void write_log_jsonl(const std::filesystem::path& path, std::span<const PpoLogEntry> log);

void save_policy_value_net(const std::filesystem::path& path, const PolicyValueNet& net,
                           const nlohmann::json& extra = nlohmann::json::object());
PolicyValueNet load_policy_value_net(const std::filesystem::path& path);

}  // namespace safegen::ppo
