#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "safegen/env.hpp"
#include "safegen/neural.hpp"
#include "safegen/rng.hpp"

namespace safegen::ens {

enum class MemberKind { QNetwork, PolicyValue };

// QNetwork members output action_count Q-values. PolicyValue members output
// action_count logits followed by one value.
struct Ensemble {
  MemberKind kind = MemberKind::QNetwork;
  int action_count = 0;
  std::vector<nn::NetworkParameters> members;

  std::size_t size() const { return members.size(); }
  // Member outputs as columns: (output size) x N.
  nn::Matrix member_outputs(std::span<const double> observation) const;
};

// Throws std::invalid_argument on empty or shape-inconsistent member lists.
void validate(const Ensemble& ensemble);

// Lowest index among the most frequent actions.
int mode_of(std::span<const int> votes, int action_count);

int ens_mean_q_action(const Ensemble& ensemble, std::span<const double> observation);

enum class VoteMode { GreedyVotes, SampledVotes };

// GreedyVotes: each member votes its argmax output row. SampledVotes: each
// member samples from softmax of its logits using `rng`.
int majority_vote_action(const Ensemble& ensemble, std::span<const double> observation, VoteMode mode, Rng& rng);
int majority_vote_action(const Ensemble& ensemble, std::span<const double> observation, VoteMode mode,
                         std::uint64_t seed = 0);

// Softmax of the mean member logits.
nn::Categorical logits_mean_policy(const Ensemble& ensemble, std::span<const double> observation);

struct EnsembleStats {
  double mu = 0.0;
  double sigma = 0.0;  // population standard deviation
  std::vector<double> member_values;
};

EnsembleStats stats_from_values(std::vector<double> values);

// Per-member state values: the value head for PolicyValue members, max_a Q for
// QNetwork members.
EnsembleStats value_stats(const Ensemble& ensemble, std::span<const double> observation);

// K stochastic passes of one network with sampled dropout; stats over the
// output row `value_row`.
EnsembleStats mc_dropout_stats(const nn::NetworkParameters& net, std::span<const double> observation, int passes,
                               std::uint64_t seed, int value_row);

struct ScoreVariant {
  std::string name;
  double alpha = 0.0;
  double beta = 0.0;
};

// mean-only (-1, 0), mean+std (-1, 1), std-only (0, 1).
const std::vector<ScoreVariant>& canonical_variants();
const ScoreVariant& variant_by_name(const std::string& name);

// U = alpha * mu + beta * sigma. Higher means riskier.
double u_score(const EnsembleStats& stats, double alpha, double beta);
inline double u_score(const EnsembleStats& stats, const ScoreVariant& v) { return u_score(stats, v.alpha, v.beta); }

// Step k (0-based, one per visited state) of an episode of `length` steps is
// positive iff the episode ends in a catastrophe and length - k <= dt.
std::vector<bool> label_within_dt(int length, bool ends_in_catastrophe, int dt);
std::vector<bool> label_within_dt(const EpisodeRecord& record, int dt);

struct RiskScorePoint {
  double score = 0.0;
  bool label = false;
  std::int64_t episode = 0;
  int step = 0;
};

struct RocCurve {
  std::vector<double> fpr;
  std::vector<double> tpr;
  std::vector<double> thresholds;  // +inf sentinel first
  double auc = 0.0;
};

// Thresholds descend over distinct scores; a point is predicted positive when
// score >= threshold. Equal scores enter together. Throws std::invalid_argument
// unless both classes are present.
RocCurve roc_curve(std::span<const RiskScorePoint> points);
RocCurve roc_curve(std::span<const double> scores, std::span<const bool> labels);

// Upper-envelope linear interpolation of TPR at `fpr`.
double interpolate_tpr(const RocCurve& curve, double fpr);

struct EpisodeScores {
  std::vector<double> scores;
  std::vector<bool> labels;
};

struct BootstrapRoc {
  std::vector<double> fpr_grid;
  std::vector<double> tpr_mean;
  std::vector<double> tpr_std;
  std::vector<double> auc_samples;
  double auc_mean = 0.0;
  double auc_std = 0.0;  // population std over resamples
};

std::vector<double> default_fpr_grid();  // 0, 0.01, ..., 1

// Resamples whole episodes with replacement. A resample without both classes
// is redrawn. Throws std::invalid_argument if b < 2 or the pooled data lack a
// class.
BootstrapRoc bootstrap_roc(std::span<const EpisodeScores> episodes, int b, std::uint64_t seed,
                           std::vector<double> fpr_grid = default_fpr_grid());

// Per-step record of an evaluation episode for risk analysis.
struct RiskEpisode {
  std::int64_t episode = 0;
  std::vector<double> mu;
  std::vector<double> sigma;
  bool catastrophe = false;
};

EpisodeScores score_episode(const RiskEpisode& episode, const ScoreVariant& variant, int dt);

// CSV: episode,step,mu,sigma,score_variant,score,label_dt1,label_dt3,label_dt5,label_dt10
void write_risk_points_csv(const std::filesystem::path& path, std::span<const RiskEpisode> episodes,
                           std::span<const ScoreVariant> variants);

// CSV: fpr,tpr,tpr_std
void write_roc_csv(const std::filesystem::path& path, const BootstrapRoc& roc);
nlohmann::json auc_json(const BootstrapRoc& roc);

}  // namespace safegen::ens
