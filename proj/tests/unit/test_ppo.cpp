#include <cmath>
#include <filesystem>
#include <numbers>

#include "doctest.h"
#include "safegen/lavarun.hpp"
#include "safegen/ppo.hpp"
#include "safegen/rng.hpp"

using namespace safegen;
using namespace safegen::ppo;

namespace {

// Random batch whose old log-probs sit `offset` nats away from the current
// policy, plus per-step jitter.
RolloutBatch random_batch(const PolicyValueNet& net, int n, int obs_size, std::uint64_t seed, double offset,
                          double jitter) {
  Rng rng(seed);
  RolloutBatch batch;
  for (int i = 0; i < n; ++i) {
    RolloutStep s;
    for (int k = 0; k < obs_size; ++k) s.observation.push_back(rng.uniform(-1, 1));
    s.action = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(net.action_count)));
    const auto dist = nn::Categorical::from_logits(net.logits(s.observation));
    s.log_prob = dist.log_probs[static_cast<std::size_t>(s.action)] + offset + rng.uniform(-jitter, jitter);
    batch.steps.push_back(s);
    batch.advantages.push_back(rng.uniform(-2, 2));
    batch.returns.push_back(rng.uniform(-1, 1));
  }
  return batch;
}

// Straight-from-the-definition loss.
double reference_loss(const PolicyValueNet& net, const RolloutBatch& batch, const LossCoefficients& k) {
  double policy = 0, value = 0, entropy = 0;
  const double n = static_cast<double>(batch.steps.size());
  for (std::size_t i = 0; i < batch.steps.size(); ++i) {
    const auto& s = batch.steps[i];
    const auto logits = net.logits(s.observation);
    double z = 0;
    for (double l : logits) z += std::exp(l);
    const double logp = logits[static_cast<std::size_t>(s.action)] - std::log(z);
    const double r = std::exp(logp - s.log_prob);
    const double a = batch.advantages[i];
    policy += std::min(r * a, std::clamp(r, 1 - k.clip, 1 + k.clip) * a);
    const double v = net.value(s.observation) - batch.returns[i];
    value += v * v;
    for (double l : logits) {
      const double p = std::exp(l) / z;
      entropy -= p * std::log(p);
    }
  }
  return -policy / n + k.value * value / n - k.entropy * entropy / n;
}

std::vector<std::size_t> all_indices(std::size_t n) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  return idx;
}

}  // namespace

TEST_CASE("advantage estimation examples") {
  const std::vector<double> zeros{0, 0, 0};
  const std::vector<std::uint8_t> none{0, 0, 0}, last{0, 0, 1};

  SUBCASE("unit rewards ending in a terminal, gamma = lambda = 1") {
    const auto r = compute_gae(std::vector<double>{1, 1, 1}, zeros, last, 99.0, 1.0, 1.0);
    CHECK(r.advantages == std::vector<double>{3, 2, 1});
    CHECK(r.returns == std::vector<double>{3, 2, 1});
  }
  SUBCASE("all zeros") {
    const auto r = compute_gae(zeros, zeros, none, 0.0, 0.99, 0.95);
    CHECK(r.advantages == zeros);
  }
  SUBCASE("lambda = 0 gives one-step TD errors") {
    const std::vector<double> rewards{0.5, -1.0, 2.0}, values{0.1, 0.2, 0.3};
    const auto r = compute_gae(rewards, values, none, 0.7, 0.9, 0.0);
    CHECK(r.advantages[0] == doctest::Approx(0.5 + 0.9 * 0.2 - 0.1));
    CHECK(r.advantages[1] == doctest::Approx(-1.0 + 0.9 * 0.3 - 0.2));
    CHECK(r.advantages[2] == doctest::Approx(2.0 + 0.9 * 0.7 - 0.3));
  }
  SUBCASE("terminal cuts the recursion mid-rollout") {
    const std::vector<std::uint8_t> mid{0, 1, 0};
    const auto r = compute_gae(std::vector<double>{1, 1, 1}, zeros, mid, 5.0, 1.0, 1.0);
    CHECK(r.advantages == std::vector<double>{2, 1, 6});
  }
  CHECK_THROWS_AS(compute_gae(zeros, std::vector<double>{0}, none, 0, 1, 1), std::invalid_argument);
}

TEST_CASE("advantage normalisation") {
  std::vector<double> v{1, 2, 3, 4};
  normalize(v);
  double mean = 0, sq = 0;
  for (double x : v) mean += x / 4;
  for (double x : v) sq += x * x / 4;
  CHECK(mean == doctest::Approx(0).epsilon(1e-12));
  CHECK(sq == doctest::Approx(1));
  std::vector<double> c{2, 2, 2};
  normalize(c);
  CHECK(c == std::vector<double>{0, 0, 0});
}

TEST_CASE("policy loss at ratio one is minus the mean advantage") {
  const std::vector<int> hidden{8};
  const auto net = make_policy_value_net(4, hidden, 3, 1);
  const auto batch = random_batch(net, 20, 4, 2, 0.0, 0.0);
  const auto idx = all_indices(20);
  const auto loss = ppo_loss(net, batch, idx, {});
  double mean_adv = 0;
  for (double a : batch.advantages) mean_adv += a / 20;
  CHECK(loss.policy_loss == doctest::Approx(-mean_adv).epsilon(1e-12));
  CHECK(loss.clip_fraction == 0.0);
}

TEST_CASE("loss matches a direct evaluation and its gradient matches finite differences") {
  const std::vector<int> hidden{6, 5};
  auto net = make_policy_value_net(4, hidden, 3, 7);
  const auto batch = random_batch(net, 12, 4, 8, 0.0, 0.5);
  const auto idx = all_indices(12);
  const LossCoefficients k{0.2, 0.05, 0.5};
  const auto loss = ppo_loss(net, batch, idx, k);
  CHECK(loss.loss == doctest::Approx(reference_loss(net, batch, k)).epsilon(1e-12));
  CHECK(loss.clip_fraction > 0.0);
  CHECK(loss.clip_fraction < 1.0);

  const double h = 1e-6;
  int checked = 0;
  for (std::size_t l = 0; l < net.params.layers.size(); ++l) {
    auto& w = net.params.layers[l].weights;
    for (Eigen::Index i = 0; i < w.size(); i += 2) {
      const double orig = w.data()[i];
      w.data()[i] = orig + h;
      const double up = reference_loss(net, batch, k);
      w.data()[i] = orig - h;
      const double down = reference_loss(net, batch, k);
      w.data()[i] = orig;
      const double fd = (up - down) / (2 * h);
      const double analytic = loss.gradients.layers[l].weights.data()[i];
      CHECK(std::abs(analytic - fd) <= 1e-6 + 1e-5 * std::abs(fd));
      ++checked;
    }
  }
  CHECK(checked > 20);
}

TEST_CASE("saturated clipping yields no policy gradient") {
  const std::vector<int> hidden{8};
  const auto net = make_policy_value_net(4, hidden, 3, 3);
  // ratio = e > 1 + clip with positive advantages: the clipped branch is active.
  auto batch = random_batch(net, 16, 4, 4, -1.0, 0.0);
  for (auto& a : batch.advantages) a = std::abs(a) + 0.1;
  const auto idx = all_indices(16);
  const auto loss = ppo_loss(net, batch, idx, {0.2, 0.0, 0.0});
  CHECK(loss.clip_fraction == 1.0);
  CHECK(loss.gradients.squared_norm() == 0.0);
}

TEST_CASE("non-finite ratios are reported") {
  const std::vector<int> hidden{8};
  const auto net = make_policy_value_net(4, hidden, 3, 3);
  auto batch = random_batch(net, 4, 4, 4, 0.0, 0.0);
  batch.steps[2].log_prob = -1e6;
  const auto idx = all_indices(4);
  CHECK_THROWS_AS(ppo_loss(net, batch, idx, {}), std::runtime_error);
}

TEST_CASE("dropout schedule decays linearly to the floor") {
  PpoConfig c;
  CHECK(dropout_at(c, 0.5) == 0.0);
  c.dropout_start = 0.2;
  c.dropout_floor = 0.01;
  CHECK(dropout_at(c, 0.0) == doctest::Approx(0.2));
  CHECK(dropout_at(c, 0.5) == doctest::Approx(0.1));
  CHECK(dropout_at(c, 1.0) == doctest::Approx(0.01));
}

TEST_CASE("ppo config json roundtrip") {
  PpoConfig c;
  c.hidden = {3, 4};
  c.coefficients.entropy = 0.3;
  c.dropout_start = 0.1;
  CHECK(to_json(ppo_config_from_json(to_json(c))) == to_json(c));
}

TEST_CASE("ppo solves a trivial level and values the state before the coin") {
  // Coin three tiles right of the spawn, no pits.
  const auto layout = lava::layout_from_profile("GGGGG", 77);
  const EnvironmentFactory factory = [&](const EnvironmentConfig&) {
    return std::unique_ptr<Environment>(new lava::LavaRunEnv(layout));
  };
  const std::vector<EnvironmentConfig> train{{EnvKind::LavaRun, 77}};
  PpoConfig c;
  c.hidden = {32, 32};
  c.total_steps = 20480;
  c.learning_rate = 1e-3;
  const auto r = train_ppo(train, 2, c, factory);
  CHECK(r.log.size() == static_cast<std::size_t>(c.total_steps / c.steps_per_rollout / c.log_every));

  Rng rng(5);
  int solved = 0;
  for (int e = 0; e < 100; ++e) {
    lava::LavaRunEnv env(layout);
    const Policy sampled = [&](const Environment&, std::span<const double> obs) {
      return Decision::act(sample_action(r.net, obs, rng));
    };
    solved += run_episode(env, sampled).outcome.kind == OutcomeKind::Solved;
  }
  CHECK(solved >= 95);

  // One Right step from column 3 reaches the coin.
  auto state = lava::spawn_state();
  state.x = 3;
  const double v = r.net.value(lava::render_lavarun_observation(layout, state));
  CHECK(std::abs(v - lava::kCoinReward) < 0.5);
}

TEST_CASE("a large entropy bonus keeps the policy near uniform") {
  const auto set = split_environments(EnvKind::LavaRun, 3, 0, 6);
  PpoConfig c;
  c.hidden = {32, 32};
  c.total_steps = 8192;
  c.learning_rate = 1e-3;
  c.coefficients.entropy = 10.0;
  const auto r = train_ppo(set.train, 3, c);
  CHECK(r.log.back().entropy >= 0.95 * std::log(6.0));
  const auto env = make_environment(set.train[0]);
  const auto pi = nn::Categorical::from_logits(r.net.logits(env->observe()));
  double total = 0;
  for (double p : pi.probs) total += p;
  CHECK(total == doctest::Approx(1.0));
}

TEST_CASE("training is deterministic and checkpoints roundtrip") {
  const auto set = split_environments(EnvKind::LavaRun, 2, 0, 6);
  PpoConfig c;
  c.hidden = {16, 16};
  c.total_steps = 1024;
  c.dropout_start = 0.1;
  const auto a = train_ppo(set.train, 9, c);
  const auto b = train_ppo(set.train, 9, c);
  CHECK(nn::encode_parameters(a.net.params) == nn::encode_parameters(b.net.params));
  CHECK(a.net.params.dropout == b.net.params.dropout);

  const auto path = std::filesystem::temp_directory_path() / "safegen_ppo_net.bin";
  save_policy_value_net(path, a.net);
  const auto loaded = load_policy_value_net(path);
  CHECK(loaded.action_count == 6);
  CHECK(nn::encode_parameters(loaded.params) == nn::encode_parameters(a.net.params));
  std::filesystem::remove(path);
  std::filesystem::remove(path.string() + ".json");
}
