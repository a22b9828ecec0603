#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <functional>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "safegen/blocker.hpp"
#include "safegen/dqn.hpp"
#include "safegen/ensemble.hpp"
#include "safegen/env.hpp"
#include "safegen/ppo.hpp"

namespace safegen::harness {

// Bumped whenever a change alters trained models or evaluation artifacts, so
// cached runs from older code are not reused.
inline constexpr std::string_view kCodeVersion = "safegen-1";

enum class Method { DQN, DropDQN, BlockDQN, EnsDQN, MajDQN, BlockEnsDQN, PPO, MajPPO, EnsMeanPPO, DropPPO, MCDropPPO };

std::string_view to_string(Method method);
Method method_from_string(std::string_view name);
const std::vector<Method>& all_methods();
bool is_dqn_family(Method method);
bool method_valid_for(Method method, EnvKind kind);
bool uses_ensemble(Method method);

struct RiskConfig {
  bool enabled = false;
  std::vector<int> dts{1, 3, 5, 10};
  std::vector<std::string> variants{"mean-only", "mean+std", "std-only"};
  int bootstrap = 10;
  std::uint64_t bootstrap_seed = 0;
  bool random_baseline = true;
};

struct ExperimentConfig {
  std::string name = "experiment";
  EnvKind env_kind = EnvKind::GridFull;
  Method method = Method::DQN;
  std::size_t n_train = 10;
  std::size_t n_test = 1000;
  std::uint64_t split_seed = 0;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4, 5, 6, 7, 8};
  int ensemble_size = 9;          // members of seed s are seeds s .. s + N - 1
  double drop_probability = 0.2;  // DropDQN hidden-layer dropout
  bool oracle_blocker = false;    // BlockDQN / BlockEnsDQN: exact lookahead instead of a classifier
  double convergence_threshold = 1.0;
  int mc_passes = 10;
  int workers = 1;
  dqn::DqnConfig dqn;
  blocker::BlockerConfig blocker;
  ppo::PpoConfig ppo;
  RiskConfig risk;
};

// Trainer settings a method actually uses: dropout only for the dropout
// variants.
dqn::DqnConfig effective_dqn(const ExperimentConfig& config);
ppo::PpoConfig effective_ppo(const ExperimentConfig& config);

// Throws std::invalid_argument with the offending key on any problem.
void validate(const ExperimentConfig& config);

nlohmann::json to_json(const ExperimentConfig& config);
// Missing keys take defaults; unknown keys are rejected.
ExperimentConfig experiment_config_from_json(const nlohmann::json& doc);

ExperimentConfig parse_config_toml(std::string_view text);
ExperimentConfig load_config(const std::filesystem::path& path);
std::string to_toml(const ExperimentConfig& config);

// FNV-1a over the canonical JSON form plus kCodeVersion, as 16 hex digits.
std::string fnv1a_hex(std::string_view bytes);
std::string config_hash(const ExperimentConfig& config);

// Writes `contents` to a sibling temp file and renames it into place.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);
std::string read_file(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Model cache: <root>/models/<key>/ holds one trained network plus metadata.

struct DqnArtifacts {
  nn::NetworkParameters params;
  nlohmann::json meta;  // train_solve_rate, episodes_run, env_steps, updates
  std::filesystem::path dir;
};

struct PpoArtifacts {
  ppo::PolicyValueNet net;
  nlohmann::json meta;
  std::filesystem::path dir;
};

class ModelCache {
 public:
  explicit ModelCache(std::filesystem::path root);

  const std::filesystem::path& root() const { return root_; }

  // Trains on a miss. The blocker dataset recorded during training is kept
  // next to the network.
  DqnArtifacts dqn(const EnvironmentSet& set, std::uint64_t seed, const dqn::DqnConfig& config);
  blocker::BlockerModel blocker(const EnvironmentSet& set, std::uint64_t seed, const dqn::DqnConfig& dqn_config,
                                const blocker::BlockerConfig& config);
  PpoArtifacts ppo(const EnvironmentSet& set, std::uint64_t seed, const ppo::PpoConfig& config);

  static std::string dqn_key(const EnvironmentSet& set, std::uint64_t seed, const dqn::DqnConfig& config);
  static std::string blocker_key(const EnvironmentSet& set, std::uint64_t seed, const dqn::DqnConfig& dqn_config,
                                 const blocker::BlockerConfig& config);
  static std::string ppo_key(const EnvironmentSet& set, std::uint64_t seed, const ppo::PpoConfig& config);

 private:
  // Process-wide, so separate caches over one root never train a key twice.
  std::mutex& key_mutex(const std::string& key);

  std::filesystem::path root_;
};

// ---------------------------------------------------------------------------
// Evaluation.

struct SeedSummary {
  std::uint64_t seed = 0;
  double pct_solved = 0.0;
  double pct_catastrophe = 0.0;
  double pct_timeout = 0.0;
  double pct_blocked = 0.0;
  double train_solve_rate = 1.0;  // minimum over the models the seed uses
  bool flagged = false;           // a model missed the convergence gate
};

struct EvalSummary {
  std::string config_hash;
  Method method = Method::DQN;
  EnvKind env_kind = EnvKind::GridFull;
  std::size_t n_train = 0;
  double pct_solved = 0.0;
  double pct_catastrophe = 0.0;
  double pct_timeout = 0.0;
  double pct_blocked = 0.0;
  std::vector<SeedSummary> per_seed;
  std::vector<std::uint64_t> flagged_seeds;
  // variant -> dt -> mean over seeds of the bootstrap mean AUC; "random" holds
  // the baseline agent.
  std::map<std::string, std::map<int, double>> auc_mean;
};

nlohmann::json to_json(const EvalSummary& summary);
EvalSummary eval_summary_from_json(const nlohmann::json& doc);

// Percentages from one outcome list.
SeedSummary summarize_outcomes(std::uint64_t seed, std::span<const OutcomeKind> outcomes);

// Everything needed to act with one method for one seed.
struct Agent {
  Method method = Method::DQN;
  int action_count = 0;
  std::vector<nn::NetworkParameters> q_members;  // DQN family
  std::optional<blocker::BlockerModel> blocker_model;
  bool oracle_blocker = false;
  std::vector<ppo::PolicyValueNet> pv_members;   // PPO family
  int mc_passes = 10;

  // Members as an ensemble for value statistics (empty for single-network
  // methods without dropout).
  ens::Ensemble ensemble() const;
};

struct AgentBundle {
  Agent agent;
  double train_solve_rate = 1.0;
  std::vector<std::filesystem::path> checkpoints;  // model files used
};

AgentBundle build_agent(const ExperimentConfig& config, const EnvironmentSet& set, std::uint64_t seed,
                        ModelCache& cache);

// Per-step value statistics for risk scoring. Returns nullopt for agents
// without an ensemble or dropout.
using StatsFn = std::function<ens::EnsembleStats(std::span<const double> observation, std::uint64_t step_seed)>;
std::optional<StatsFn> risk_stats(const Agent& agent);

// Policy for one evaluation episode; `episode_seed` drives sampled actions
// and dropout masks.
Policy make_policy(const Agent& agent, std::uint64_t episode_seed);

struct EpisodeLine {
  std::size_t index = 0;
  std::uint64_t layout_seed = 0;
  EpisodeOutcome outcome;
};

nlohmann::json to_json(const EpisodeLine& line);

// Trains (through the cache), evaluates, and writes
// <out>/runs/<config_hash>/. A run with summary.json present is returned
// unchanged without retraining or rewriting anything.
EvalSummary run_experiment(const ExperimentConfig& config, const std::filesystem::path& out);

std::filesystem::path run_directory(const ExperimentConfig& config, const std::filesystem::path& out);

// ---------------------------------------------------------------------------
// Sweeps and plot data.

struct SweepConfig {
  ExperimentConfig base;
  std::vector<Method> methods;
  std::vector<std::size_t> n_train;
  std::vector<EnvKind> env_kinds;  // empty: base.env_kind only
};

SweepConfig parse_sweep_toml(std::string_view text);
SweepConfig load_sweep(const std::filesystem::path& path);
std::vector<ExperimentConfig> expand(const SweepConfig& sweep);

// Runs every cell with `base.workers` threads. Cells sharing models wait on
// the cache instead of training twice.
std::vector<EvalSummary> run_sweep(const SweepConfig& sweep, const std::filesystem::path& out);

enum class PlotKind { CatastropheVsEnvs, SolvedVsEnvs, ROC };

std::string_view to_string(PlotKind kind);

struct PlotEmission {
  std::vector<std::filesystem::path> files;
  std::vector<std::string> missing;  // expected runs without a summary
};

// Scans <out>/runs and writes tidy CSVs under <out>/plots. If `expected` is
// given, configs without a completed run are listed in `missing`.
PlotEmission emit_plot_data(const std::filesystem::path& out, PlotKind kind,
                            std::span<const ExperimentConfig> expected = {});

// Bootstrap ROC from an exported risk-points CSV: one roc_<variant>_dt<dt>.csv
// per variant and label column, plus auc.json. Returns the auc.json content.
nlohmann::json roc_from_points_csv(const std::filesystem::path& points_csv, const std::filesystem::path& out_dir,
                                   int bootstrap, std::uint64_t seed);

}  // namespace safegen::harness
