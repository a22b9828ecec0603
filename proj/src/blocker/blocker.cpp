#include "safegen/blocker.hpp"

#include <algorithm>
#include <bit>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "safegen/rng.hpp"

namespace safegen::blocker {

std::size_t BlockerDataset::VectorHash::operator()(const std::vector<double>& v) const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (double d : v) h = mix64(h ^ std::bit_cast<std::uint64_t>(d));
  return static_cast<std::size_t>(h);
}

BlockerDataset::BlockerDataset(int action_count) : action_count_(action_count) {
  if (action_count <= 0) throw std::invalid_argument("action count must be positive");
}

void BlockerDataset::add(std::span<const double> observation, int action, bool label) {
  if (action < 0 || action >= action_count_) throw std::out_of_range("blocker action out of range");
  std::vector<double> key(observation.begin(), observation.end());
  auto [it, inserted] = index_.try_emplace(key, static_cast<std::uint32_t>(pool_.size()));
  if (inserted) pool_.push_back(std::move(key));
  entries_.push_back({it->second, action, label});
  if (label) ++positives_;
}

StepObserver BlockerDataset::recorder() {
  return [this](const Transition& t) { add(t.observation, t.action, t.catastrophe); };
}

void BlockerDataset::write_jsonl(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& e : entries_) {
    out << nlohmann::json{{"obs", pool_[e.observation]}, {"action", e.action}, {"label", e.label ? 1 : 0}}.dump()
        << '\n';
  }
}

BlockerDataset BlockerDataset::read_jsonl(const std::filesystem::path& path, int action_count) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  BlockerDataset data(action_count);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto doc = nlohmann::json::parse(line);
    data.add(doc.at("obs").get<std::vector<double>>(), doc.at("action").get<int>(), doc.at("label").get<int>() != 0);
  }
  return data;
}

namespace {

constexpr char kDatasetMagic[4] = {'S', 'G', 'B', 'D'};

template <typename T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T get(std::istream& in) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) throw std::runtime_error("blocker dataset: truncated file");
  return v;
}

}  // namespace

void BlockerDataset::write_binary(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(kDatasetMagic, 4);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(action_count_));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(pool_.size()));
  put<std::uint32_t>(out, pool_.empty() ? 0u : static_cast<std::uint32_t>(pool_.front().size()));
  for (const auto& obs : pool_) {
    for (double d : obs) put<double>(out, d);
  }
  put<std::uint64_t>(out, entries_.size());
  for (const auto& e : entries_) {
    put<std::uint32_t>(out, e.observation);
    put<std::uint8_t>(out, static_cast<std::uint8_t>(e.action));
    put<std::uint8_t>(out, e.label ? 1 : 0);
  }
}

BlockerDataset BlockerDataset::read_binary(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  char magic[4];
  if (!in.read(magic, 4) || !std::equal(magic, magic + 4, kDatasetMagic)) {
    throw std::runtime_error("blocker dataset: bad magic in " + path.string());
  }
  BlockerDataset data(static_cast<int>(get<std::uint32_t>(in)));
  const auto pool_size = get<std::uint32_t>(in);
  const auto width = get<std::uint32_t>(in);
  for (std::uint32_t i = 0; i < pool_size; ++i) {
    std::vector<double> obs(width);
    for (auto& d : obs) d = get<double>(in);
    data.index_.emplace(obs, i);
    data.pool_.push_back(std::move(obs));
  }
  const auto count = get<std::uint64_t>(in);
  data.entries_.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    BlockerEntry e;
    e.observation = get<std::uint32_t>(in);
    e.action = get<std::uint8_t>(in);
    e.label = get<std::uint8_t>(in) != 0;
    if (e.observation >= pool_size || e.action >= data.action_count_) {
      throw std::runtime_error("blocker dataset: corrupt entry in " + path.string());
    }
    data.positives_ += e.label ? 1 : 0;
    data.entries_.push_back(e);
  }
  return data;
}

nlohmann::json to_json(const BlockerConfig& c) {
  return {{"hidden", c.hidden},         {"iterations", c.iterations}, {"batch_size", c.batch_size},
          {"learning_rate", c.learning_rate}, {"rebalance", c.rebalance},   {"threshold", c.threshold}};
}

BlockerConfig blocker_config_from_json(const nlohmann::json& doc) {
  BlockerConfig c;
  c.hidden = doc.value("hidden", c.hidden);
  c.iterations = doc.value("iterations", c.iterations);
  c.batch_size = doc.value("batch_size", c.batch_size);
  c.learning_rate = doc.value("learning_rate", c.learning_rate);
  c.rebalance = doc.value("rebalance", c.rebalance);
  c.threshold = doc.value("threshold", c.threshold);
  return c;
}

std::vector<double> blocker_input(std::span<const double> observation, int action, int action_count) {
  std::vector<double> x(observation.begin(), observation.end());
  x.resize(observation.size() + static_cast<std::size_t>(action_count), 0.0);
  x[observation.size() + static_cast<std::size_t>(action)] = 1.0;
  return x;
}

double BlockerModel::p_unsafe(std::span<const double> observation, int action) const {
  const auto x = blocker_input(observation, action, action_count);
  return nn::sigmoid(nn::mlp_forward(params, x)(0));
}

std::vector<double> BlockerModel::p_unsafe_all(std::span<const double> observation) const {
  const auto n = static_cast<Eigen::Index>(observation.size());
  nn::Matrix x = nn::Matrix::Zero(n + action_count, action_count);
  const Eigen::Map<const nn::Vector> obs(observation.data(), n);
  for (int a = 0; a < action_count; ++a) {
    x.col(a).head(n) = obs;
    x(n + a, a) = 1.0;
  }
  const nn::Matrix logits = nn::mlp_forward(params, x);
  std::vector<double> p(static_cast<std::size_t>(action_count));
  for (int a = 0; a < action_count; ++a) p[static_cast<std::size_t>(a)] = nn::sigmoid(logits(0, a));
  return p;
}

BlockerTrainResult train_blocker(const BlockerDataset& dataset, std::uint64_t seed, const BlockerConfig& config) {
  if (dataset.positives() == 0 || dataset.negatives() == 0) {
    throw std::invalid_argument("train_blocker: dataset needs both positive and negative entries");
  }
  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < dataset.entries().size(); ++i) {
    (dataset.entries()[i].label ? pos : neg).push_back(i);
  }

  const auto obs_size = static_cast<int>(dataset.observation(dataset.entries().front().observation).size());
  const int actions = dataset.action_count();
  BlockerTrainResult result;
  result.model.action_count = actions;
  result.model.threshold = config.threshold;
  result.model.params = nn::make_mlp(obs_size + actions, config.hidden, 1, derive_seed(seed, 0xb10c));
  nn::Optimizer optimizer({.kind = nn::OptimizerKind::Adam, .learning_rate = config.learning_rate},
                          result.model.params);
  Rng rng(derive_seed(seed, 0xba7c));

  const int batch = config.batch_size;
  nn::Matrix x(obs_size + actions, batch);
  nn::Matrix labels(1, batch);
  result.loss.reserve(static_cast<std::size_t>(config.iterations));
  for (std::int64_t it = 0; it < config.iterations; ++it) {
    x.setZero();
    for (int j = 0; j < batch; ++j) {
      std::size_t entry_index;
      if (config.rebalance) {
        const auto& pool = j < batch / 2 ? pos : neg;
        entry_index = pool[rng.uniform_int(pool.size())];
      } else {
        entry_index = rng.uniform_int(dataset.size());
      }
      const auto& e = dataset.entries()[entry_index];
      const auto& obs = dataset.observation(e.observation);
      x.col(j).head(obs_size) = Eigen::Map<const nn::Vector>(obs.data(), obs_size);
      x(obs_size + e.action, j) = 1.0;
      labels(0, j) = e.label ? 1.0 : 0.0;
    }
    nn::ForwardCache cache;
    const nn::Matrix logits = nn::mlp_forward(result.model.params, x, nn::DropoutMode::off(), &cache);
    nn::Matrix grad(1, batch);
    double loss = 0.0;
    for (int j = 0; j < batch; ++j) {
      const auto r = nn::bce_loss(logits(0, j), labels(0, j));
      loss += r.loss;
      grad(0, j) = r.logit_grad / batch;
    }
    optimizer.step(result.model.params, nn::mlp_backward(result.model.params, cache, grad));
    result.loss.push_back(loss / batch);
  }
  if (!result.model.params.all_finite()) throw std::runtime_error("train_blocker: parameters diverged");
  return result;
}

Decision filter_action(std::span<const double> p_unsafe, std::span<const double> q_values, double threshold) {
  if (p_unsafe.size() != q_values.size()) throw std::invalid_argument("filter_action: size mismatch");
  std::vector<int> order(q_values.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return q_values[static_cast<std::size_t>(a)] > q_values[static_cast<std::size_t>(b)];
  });
  for (int a : order) {
    if (p_unsafe[static_cast<std::size_t>(a)] <= threshold) return Decision::act(a);
  }
  return Decision::stop();
}

Policy filtered_policy(QFunction q_values, UnsafeFunction p_unsafe, double threshold) {
  return [q_values = std::move(q_values), p_unsafe = std::move(p_unsafe), threshold](
             const Environment& env, std::span<const double> obs) {
    const auto q = q_values(obs);
    const auto p = p_unsafe(env, obs);
    return filter_action(p, q, threshold);
  };
}

UnsafeFunction oracle_unsafe() {
  return [](const Environment& env, std::span<const double>) {
    std::vector<double> p(static_cast<std::size_t>(env.action_count()));
    for (int a = 0; a < env.action_count(); ++a) p[static_cast<std::size_t>(a)] = env.action_is_catastrophic(a) ? 1.0 : 0.0;
    return p;
  };
}

UnsafeFunction model_unsafe(const BlockerModel& model) {
  return [&model](const Environment&, std::span<const double> obs) { return model.p_unsafe_all(obs); };
}

void save_blocker(const std::filesystem::path& path, const BlockerModel& model) {
  nn::save_checkpoint(path, model.params,
                      {{"kind", "blocker"}, {"action_count", model.action_count}, {"threshold", model.threshold}});
}

BlockerModel load_blocker(const std::filesystem::path& path) {
  auto ck = nn::load_checkpoint(path);
  BlockerModel model;
  model.params = std::move(ck.params);
  model.action_count = ck.hyperparameters.at("action_count").get<int>();
  model.threshold = ck.hyperparameters.value("threshold", 0.5);
  return model;
}

}  // namespace safegen::blocker
