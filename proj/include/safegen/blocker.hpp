#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <unordered_map>
#include <vector>

#include "safegen/env.hpp"
#include "safegen/neural.hpp"

namespace safegen::blocker {

struct BlockerEntry {
  std::uint32_t observation = 0;  // index into the interned observation pool
  int action = 0;
  bool label = false;             // the action entered a catastrophe
};

// One entry per executed transition. Observations are interned because
// training streams revisit the same few hundred states many times.
class BlockerDataset {
 public:
  explicit BlockerDataset(int action_count);

  void add(std::span<const double> observation, int action, bool label);

  // Hook for dqn::train_dqn / run_episode: records (s, a, catastrophe).
  StepObserver recorder();

  int action_count() const { return action_count_; }
  std::size_t size() const { return entries_.size(); }
  std::size_t positives() const { return positives_; }
  std::size_t negatives() const { return entries_.size() - positives_; }
  std::size_t distinct_observations() const { return pool_.size(); }

  const std::vector<BlockerEntry>& entries() const { return entries_; }
  const std::vector<double>& observation(std::uint32_t index) const { return pool_[index]; }

  // JSONL lines {obs, action, label}.
  void write_jsonl(const std::filesystem::path& path) const;
  static BlockerDataset read_jsonl(const std::filesystem::path& path, int action_count);

  // Compact binary form with the interned pool; used by the model cache.
  void write_binary(const std::filesystem::path& path) const;
  static BlockerDataset read_binary(const std::filesystem::path& path);

 private:
  struct VectorHash {
    std::size_t operator()(const std::vector<double>& v) const;
  };

  int action_count_;
  std::vector<std::vector<double>> pool_;
  std::unordered_map<std::vector<double>, std::uint32_t, VectorHash> index_;
  std::vector<BlockerEntry> entries_;
  std::size_t positives_ = 0;
};

struct BlockerConfig {
  std::vector<int> hidden{128, 256, 256};
  std::int64_t iterations = 10000;
  int batch_size = 64;
  double learning_rate = 5e-3;
  bool rebalance = true;  // half positives, half negatives per minibatch
  double threshold = 0.5;
};

nlohmann::json to_json(const BlockerConfig& config);
BlockerConfig blocker_config_from_json(const nlohmann::json& doc);

// Input is observation followed by a one-hot action; output is a logit.
struct BlockerModel {
  nn::NetworkParameters params;
  int action_count = 0;
  double threshold = 0.5;

  double p_unsafe(std::span<const double> observation, int action) const;
  std::vector<double> p_unsafe_all(std::span<const double> observation) const;
};

std::vector<double> blocker_input(std::span<const double> observation, int action, int action_count);

struct BlockerTrainResult {
  BlockerModel model;
  std::vector<double> loss;  // mean minibatch loss per iteration
};

// Throws std::invalid_argument unless the dataset has both classes.
BlockerTrainResult train_blocker(const BlockerDataset& dataset, std::uint64_t seed, const BlockerConfig& config);

// Visit actions by descending Q (ties to the lower index) and take the first
// with p_unsafe <= threshold; terminate if none qualifies.
Decision filter_action(std::span<const double> p_unsafe, std::span<const double> q_values, double threshold);

using QFunction = std::function<std::vector<double>(std::span<const double> observation)>;
using UnsafeFunction = std::function<std::vector<double>(const Environment& env, std::span<const double> observation)>;

Policy filtered_policy(QFunction q_values, UnsafeFunction p_unsafe, double threshold);

// Exact one-step lookahead: 1 if the action enters a catastrophe, else 0.
UnsafeFunction oracle_unsafe();
// `model` must outlive the returned function.
UnsafeFunction model_unsafe(const BlockerModel& model);

void save_blocker(const std::filesystem::path& path, const BlockerModel& model);
BlockerModel load_blocker(const std::filesystem::path& path);

}  // namespace safegen::blocker
