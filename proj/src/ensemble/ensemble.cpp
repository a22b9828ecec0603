#include "safegen/ensemble.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <memory>
#include <numeric>
#include <stdexcept>

namespace safegen::ens {

nn::Matrix Ensemble::member_outputs(std::span<const double> observation) const {
  nn::Matrix out;
  for (std::size_t i = 0; i < members.size(); ++i) {
    const nn::Vector y = nn::mlp_forward(members[i], observation);
    if (i == 0) out.resize(y.size(), static_cast<Eigen::Index>(members.size()));
    out.col(static_cast<Eigen::Index>(i)) = y;
  }
  return out;
}

void validate(const Ensemble& e) {
  if (e.members.empty()) throw std::invalid_argument("ensemble has no members");
  const int expected_out = e.kind == MemberKind::QNetwork ? e.action_count : e.action_count + 1;
  for (const auto& m : e.members) {
    if (m.input_size() != e.members.front().input_size() || m.output_size() != expected_out) {
      throw std::invalid_argument("ensemble members disagree on shape");
    }
  }
}

int mode_of(std::span<const int> votes, int action_count) {
  std::vector<int> counts(static_cast<std::size_t>(action_count), 0);
  for (int v : votes) counts.at(static_cast<std::size_t>(v)) += 1;
  return static_cast<int>(std::max_element(counts.begin(), counts.end()) - counts.begin());
}

int ens_mean_q_action(const Ensemble& e, std::span<const double> observation) {
  const nn::Vector mean = e.member_outputs(observation).topRows(e.action_count).rowwise().mean();
  return nn::argmax(std::span<const double>(mean.data(), static_cast<std::size_t>(mean.size())));
}

int majority_vote_action(const Ensemble& e, std::span<const double> observation, VoteMode mode, Rng& rng) {
  const nn::Matrix out = e.member_outputs(observation);
  std::vector<int> votes;
  votes.reserve(e.members.size());
  for (Eigen::Index m = 0; m < out.cols(); ++m) {
    const nn::Vector head = out.col(m).head(e.action_count);
    const std::span<const double> row(head.data(), static_cast<std::size_t>(head.size()));
    votes.push_back(mode == VoteMode::GreedyVotes ? nn::argmax(row) : nn::Categorical::from_logits(row).sample(rng));
  }
  return mode_of(votes, e.action_count);
}

int majority_vote_action(const Ensemble& e, std::span<const double> observation, VoteMode mode, std::uint64_t seed) {
  Rng rng(seed);
  return majority_vote_action(e, observation, mode, rng);
}

nn::Categorical logits_mean_policy(const Ensemble& e, std::span<const double> observation) {
  const nn::Vector mean = e.member_outputs(observation).topRows(e.action_count).rowwise().mean();
  return nn::Categorical::from_logits(std::span<const double>(mean.data(), static_cast<std::size_t>(mean.size())));
}

EnsembleStats stats_from_values(std::vector<double> values) {
  EnsembleStats s;
  if (values.empty()) return s;
  const double n = static_cast<double>(values.size());
  s.mu = std::accumulate(values.begin(), values.end(), 0.0) / n;
  double var = 0.0;
  for (double v : values) var += (v - s.mu) * (v - s.mu);
  s.sigma = std::sqrt(var / n);
  s.member_values = std::move(values);
  return s;
}

EnsembleStats value_stats(const Ensemble& e, std::span<const double> observation) {
  const nn::Matrix out = e.member_outputs(observation);
  std::vector<double> values;
  for (Eigen::Index m = 0; m < out.cols(); ++m) {
    values.push_back(e.kind == MemberKind::PolicyValue ? out(e.action_count, m)
                                                       : out.col(m).head(e.action_count).maxCoeff());
  }
  return stats_from_values(std::move(values));
}

EnsembleStats mc_dropout_stats(const nn::NetworkParameters& net, std::span<const double> observation, int passes,
                               std::uint64_t seed, int value_row) {
  if (passes < 1) throw std::invalid_argument("mc_dropout_stats: need at least one pass");
  const auto n = static_cast<Eigen::Index>(observation.size());
  // All passes in one batch: each column draws its own dropout masks.
  const nn::Matrix x = Eigen::Map<const nn::Vector>(observation.data(), n).replicate(1, passes);
  const nn::Matrix out = nn::mlp_forward(net, x, nn::DropoutMode::sampled_with(seed));
  std::vector<double> values;
  values.reserve(static_cast<std::size_t>(passes));
  for (int k = 0; k < passes; ++k) values.push_back(out(value_row, k));
  return stats_from_values(std::move(values));
}

const std::vector<ScoreVariant>& canonical_variants() {
  static const std::vector<ScoreVariant> variants{
      {"mean-only", -1.0, 0.0}, {"mean+std", -1.0, 1.0}, {"std-only", 0.0, 1.0}};
  return variants;
}

const ScoreVariant& variant_by_name(const std::string& name) {
  for (const auto& v : canonical_variants()) {
    if (v.name == name) return v;
  }
  throw std::invalid_argument("unknown score variant: " + name);
}

double u_score(const EnsembleStats& stats, double alpha, double beta) { return alpha * stats.mu + beta * stats.sigma; }

std::vector<bool> label_within_dt(int length, bool ends_in_catastrophe, int dt) {
  if (dt < 1) throw std::invalid_argument("label_within_dt: dt must be >= 1");
  std::vector<bool> labels(static_cast<std::size_t>(std::max(0, length)), false);
  if (!ends_in_catastrophe) return labels;
  for (int k = std::max(0, length - dt); k < length; ++k) labels[static_cast<std::size_t>(k)] = true;
  return labels;
}

std::vector<bool> label_within_dt(const EpisodeRecord& record, int dt) {
  return label_within_dt(record.outcome.length, record.outcome.kind == OutcomeKind::Catastrophe, dt);
}

RocCurve roc_curve(std::span<const double> scores, std::span<const bool> labels) {
  if (scores.size() != labels.size()) throw std::invalid_argument("roc_curve: size mismatch");
  std::size_t positives = 0;
  for (bool l : labels) positives += l ? 1 : 0;
  const std::size_t negatives = labels.size() - positives;
  if (positives == 0 || negatives == 0) throw std::invalid_argument("roc_curve: need both classes");

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

  RocCurve curve;
  curve.fpr.push_back(0.0);
  curve.tpr.push_back(0.0);
  curve.thresholds.push_back(std::numeric_limits<double>::infinity());
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < order.size();) {
    const double s = scores[order[i]];
    while (i < order.size() && scores[order[i]] == s) {
      (labels[order[i]] ? tp : fp) += 1;
      ++i;
    }
    const double x = static_cast<double>(fp) / static_cast<double>(negatives);
    const double y = static_cast<double>(tp) / static_cast<double>(positives);
    curve.auc += (x - curve.fpr.back()) * (y + curve.tpr.back()) / 2.0;
    curve.fpr.push_back(x);
    curve.tpr.push_back(y);
    curve.thresholds.push_back(s);
  }
  return curve;
}

RocCurve roc_curve(std::span<const RiskScorePoint> points) {
  std::vector<double> scores;
  std::unique_ptr<bool[]> labels(new bool[points.size()]);
  for (std::size_t i = 0; i < points.size(); ++i) {
    scores.push_back(points[i].score);
    labels[i] = points[i].label;
  }
  return roc_curve(scores, std::span<const bool>(labels.get(), points.size()));
}

double interpolate_tpr(const RocCurve& c, double x) {
  // fpr is non-decreasing; take the highest tpr reached at or before x, then
  // interpolate across the next horizontal-ish segment.
  std::size_t hi = 0;
  while (hi < c.fpr.size() && c.fpr[hi] <= x) ++hi;
  if (hi == c.fpr.size()) return c.tpr.back();
  const std::size_t lo = hi - 1;  // fpr[0] = 0 <= x always
  const double span = c.fpr[hi] - c.fpr[lo];
  const double t = span > 0.0 ? (x - c.fpr[lo]) / span : 0.0;
  return c.tpr[lo] + t * (c.tpr[hi] - c.tpr[lo]);
}

std::vector<double> default_fpr_grid() {
  std::vector<double> grid;
  for (int i = 0; i <= 100; ++i) grid.push_back(i / 100.0);
  return grid;
}

namespace {

struct Pooled {
  std::vector<double> scores;
  std::unique_ptr<bool[]> labels;
  std::size_t size = 0;
  bool has_pos = false, has_neg = false;
};

Pooled pool(std::span<const EpisodeScores> episodes, std::span<const std::size_t> picks) {
  Pooled p;
  for (std::size_t i : picks) p.size += episodes[i].scores.size();
  p.labels.reset(new bool[p.size]);
  std::size_t k = 0;
  for (std::size_t i : picks) {
    for (std::size_t j = 0; j < episodes[i].scores.size(); ++j) {
      p.scores.push_back(episodes[i].scores[j]);
      const bool l = episodes[i].labels[j];
      p.labels[k++] = l;
      (l ? p.has_pos : p.has_neg) = true;
    }
  }
  return p;
}

double population_std(std::span<const double> v, double mean) {
  double s = 0.0;
  for (double x : v) s += (x - mean) * (x - mean);
  return std::sqrt(s / static_cast<double>(v.size()));
}

}  // namespace

BootstrapRoc bootstrap_roc(std::span<const EpisodeScores> episodes, int b, std::uint64_t seed,
                           std::vector<double> fpr_grid) {
  if (b < 2) throw std::invalid_argument("bootstrap_roc: need at least two resamples");
  std::vector<std::size_t> all(episodes.size());
  std::iota(all.begin(), all.end(), 0);
  {
    const Pooled full = pool(episodes, all);
    if (!full.has_pos || !full.has_neg) throw std::invalid_argument("bootstrap_roc: data need both classes");
  }

  BootstrapRoc out;
  out.fpr_grid = std::move(fpr_grid);
  std::vector<std::vector<double>> tprs;
  Rng rng(seed);
  constexpr int kMaxRedraws = 1000;
  for (int r = 0; r < b; ++r) {
    Pooled sample;
    for (int attempt = 0;; ++attempt) {
      if (attempt == kMaxRedraws) throw std::runtime_error("bootstrap_roc: resamples keep missing a class");
      std::vector<std::size_t> picks(episodes.size());
      for (auto& p : picks) p = rng.uniform_int(episodes.size());
      sample = pool(episodes, picks);
      if (sample.has_pos && sample.has_neg) break;
    }
    const auto curve = roc_curve(sample.scores, std::span<const bool>(sample.labels.get(), sample.size));
    out.auc_samples.push_back(curve.auc);
    std::vector<double> t;
    for (double x : out.fpr_grid) t.push_back(interpolate_tpr(curve, x));
    tprs.push_back(std::move(t));
  }

  out.auc_mean = std::accumulate(out.auc_samples.begin(), out.auc_samples.end(), 0.0) / b;
  out.auc_std = population_std(out.auc_samples, out.auc_mean);
  for (std::size_t g = 0; g < out.fpr_grid.size(); ++g) {
    std::vector<double> column;
    for (const auto& t : tprs) column.push_back(t[g]);
    const double mean = std::accumulate(column.begin(), column.end(), 0.0) / b;
    out.tpr_mean.push_back(mean);
    out.tpr_std.push_back(population_std(column, mean));
  }
  return out;
}

EpisodeScores score_episode(const RiskEpisode& episode, const ScoreVariant& variant, int dt) {
  EpisodeScores out;
  const int length = static_cast<int>(episode.mu.size());
  for (int k = 0; k < length; ++k) {
    out.scores.push_back(variant.alpha * episode.mu[static_cast<std::size_t>(k)] +
                         variant.beta * episode.sigma[static_cast<std::size_t>(k)]);
  }
  out.labels = label_within_dt(length, episode.catastrophe, dt);
  return out;
}

void write_risk_points_csv(const std::filesystem::path& path, std::span<const RiskEpisode> episodes,
                           std::span<const ScoreVariant> variants) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.precision(17);
  out << "episode,step,mu,sigma,score_variant,score,label_dt1,label_dt3,label_dt5,label_dt10\n";
  for (const auto& ep : episodes) {
    const int length = static_cast<int>(ep.mu.size());
    const auto l1 = label_within_dt(length, ep.catastrophe, 1);
    const auto l3 = label_within_dt(length, ep.catastrophe, 3);
    const auto l5 = label_within_dt(length, ep.catastrophe, 5);
    const auto l10 = label_within_dt(length, ep.catastrophe, 10);
    for (const auto& v : variants) {
      for (int k = 0; k < length; ++k) {
        const auto i = static_cast<std::size_t>(k);
        out << ep.episode << ',' << k << ',' << ep.mu[i] << ',' << ep.sigma[i] << ',' << v.name << ','
            << v.alpha * ep.mu[i] + v.beta * ep.sigma[i] << ',' << l1[i] << ',' << l3[i] << ',' << l5[i] << ','
            << l10[i] << '\n';
      }
    }
  }
}

void write_roc_csv(const std::filesystem::path& path, const BootstrapRoc& roc) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.precision(17);
  out << "fpr,tpr,tpr_std\n";
  for (std::size_t i = 0; i < roc.fpr_grid.size(); ++i) {
    out << roc.fpr_grid[i] << ',' << roc.tpr_mean[i] << ',' << roc.tpr_std[i] << '\n';
  }
}

nlohmann::json auc_json(const BootstrapRoc& roc) {
  return {{"auc_mean", roc.auc_mean}, {"auc_std", roc.auc_std}, {"auc_samples", roc.auc_samples}};
}

}  // namespace safegen::ens
