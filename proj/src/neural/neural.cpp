#include "safegen/neural.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <stdexcept>

namespace safegen::nn {

int NetworkParameters::input_size() const {
  return layers.empty() ? 0 : static_cast<int>(layers.front().weights.cols());
}

int NetworkParameters::output_size() const {
  return layers.empty() ? 0 : static_cast<int>(layers.back().weights.rows());
}

std::vector<int> NetworkParameters::dims() const {
  std::vector<int> out;
  if (layers.empty()) return out;
  out.push_back(input_size());
  for (const auto& l : layers) out.push_back(static_cast<int>(l.weights.rows()));
  return out;
}

std::size_t NetworkParameters::parameter_count() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += static_cast<std::size_t>(l.weights.size() + l.biases.size());
  return n;
}

bool NetworkParameters::all_finite() const {
  for (const auto& l : layers) {
    if (!l.weights.allFinite() || !l.biases.allFinite()) return false;
  }
  return true;
}

NetworkParameters make_mlp(int input_size, std::span<const int> hidden, int output_size, std::uint64_t seed,
                           double dropout) {
  if (input_size <= 0 || output_size <= 0) throw std::invalid_argument("make_mlp: sizes must be positive");
  Rng rng(seed);
  NetworkParameters params;
  int fan_in = input_size;
  auto add_layer = [&](int fan_out) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    DenseLayer layer{Matrix(fan_out, fan_in), Vector(fan_out)};
    for (Eigen::Index r = 0; r < layer.weights.rows(); ++r) {
      for (Eigen::Index c = 0; c < layer.weights.cols(); ++c) layer.weights(r, c) = rng.uniform(-bound, bound);
    }
    for (Eigen::Index r = 0; r < layer.biases.size(); ++r) layer.biases(r) = rng.uniform(-bound, bound);
    params.layers.push_back(std::move(layer));
    fan_in = fan_out;
  };
  for (int h : hidden) {
    if (h <= 0) throw std::invalid_argument("make_mlp: hidden sizes must be positive");
    add_layer(h);
  }
  add_layer(output_size);
  params.dropout.assign(hidden.size(), dropout);
  return params;
}

void set_dropout(NetworkParameters& params, double p) {
  if (p < 0.0 || p >= 1.0) throw std::invalid_argument("dropout probability must be in [0, 1)");
  params.dropout.assign(params.layers.empty() ? 0 : params.layers.size() - 1, p);
}

Matrix mlp_forward(const NetworkParameters& params, const Matrix& input, DropoutMode mode, ForwardCache* cache) {
  if (params.layers.empty()) throw std::invalid_argument("mlp_forward: empty network");
  if (input.rows() != params.input_size()) throw std::invalid_argument("mlp_forward: input dimension mismatch");

  Rng rng(mode.seed);
  if (cache) {
    cache->inputs.clear();
    cache->gates.clear();
    cache->dims = params.dims();
  }

  Matrix activation = input;
  const std::size_t n_layers = params.layers.size();
  for (std::size_t l = 0; l < n_layers; ++l) {
    const auto& layer = params.layers[l];
    Matrix z = layer.weights * activation;
    z.colwise() += layer.biases;
    if (cache) cache->inputs.push_back(std::move(activation));
    if (l + 1 == n_layers) return z;

    Matrix gate = (z.array() > 0.0).cast<double>().matrix();
    const double p = l < params.dropout.size() ? params.dropout[l] : 0.0;
    if (mode.sampled && p > 0.0) {
      const double keep_scale = 1.0 / (1.0 - p);
      for (Eigen::Index c = 0; c < gate.cols(); ++c) {
        for (Eigen::Index r = 0; r < gate.rows(); ++r) {
          gate(r, c) *= rng.bernoulli(p) ? 0.0 : keep_scale;
        }
      }
    }
    activation = z.cwiseProduct(gate);
    if (cache) cache->gates.push_back(std::move(gate));
  }
  return activation;  // unreachable
}

Vector mlp_forward(const NetworkParameters& params, std::span<const double> input, DropoutMode mode) {
  const Eigen::Map<const Matrix> x(input.data(), static_cast<Eigen::Index>(input.size()), 1);
  return mlp_forward(params, Matrix(x), mode, nullptr).col(0);
}

Gradients Gradients::zeros_like(const NetworkParameters& params) {
  Gradients g;
  for (const auto& l : params.layers) {
    g.layers.push_back({Matrix::Zero(l.weights.rows(), l.weights.cols()), Vector::Zero(l.biases.size())});
  }
  return g;
}

Gradients& Gradients::operator+=(const Gradients& other) {
  if (other.layers.size() != layers.size()) throw std::invalid_argument("gradient shape mismatch");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    layers[i].weights += other.layers[i].weights;
    layers[i].biases += other.layers[i].biases;
  }
  return *this;
}

void Gradients::scale(double factor) {
  for (auto& l : layers) {
    l.weights *= factor;
    l.biases *= factor;
  }
}

double Gradients::squared_norm() const {
  double s = 0.0;
  for (const auto& l : layers) s += l.weights.squaredNorm() + l.biases.squaredNorm();
  return s;
}

Gradients mlp_backward(const NetworkParameters& params, const ForwardCache& cache, const Matrix& output_grad) {
  const std::size_t n_layers = params.layers.size();
  if (cache.dims != params.dims() || cache.inputs.size() != n_layers || cache.gates.size() + 1 != n_layers) {
    throw std::invalid_argument("mlp_backward: cache does not match the network");
  }
  if (output_grad.rows() != params.output_size() || output_grad.cols() != cache.inputs.front().cols()) {
    throw std::invalid_argument("mlp_backward: output gradient shape mismatch");
  }

  Gradients grads;
  grads.layers.resize(n_layers);
  Matrix delta = output_grad;
  for (std::size_t l = n_layers; l-- > 0;) {
    grads.layers[l].weights = delta * cache.inputs[l].transpose();
    grads.layers[l].biases = delta.rowwise().sum();
    if (l == 0) break;
    delta = (params.layers[l].weights.transpose() * delta).cwiseProduct(cache.gates[l - 1]);
  }
  return grads;
}

Optimizer::Optimizer(OptimizerConfig config, const NetworkParameters& shape) : config_(config) {
  const Gradients zeros = Gradients::zeros_like(shape);
  state_.second_moment = zeros.layers;
  if (config_.kind == OptimizerKind::Adam) state_.first_moment = zeros.layers;
}

double Optimizer::learning_rate_at(std::int64_t step) const {
  if (config_.schedule == LrSchedule::Constant || config_.horizon <= 0) return config_.learning_rate;
  const double frac = 1.0 - static_cast<double>(step) / static_cast<double>(config_.horizon);
  return config_.learning_rate * std::max(0.0, frac);
}

void Optimizer::step(NetworkParameters& params, const Gradients& grads) {
  if (grads.layers.size() != params.layers.size()) throw std::invalid_argument("optimizer: shape mismatch");
  const double lr = current_learning_rate();
  double clip = 1.0;
  if (config_.max_grad_norm > 0.0) {
    const double norm = std::sqrt(grads.squared_norm());
    if (norm > config_.max_grad_norm) clip = config_.max_grad_norm / norm;
  }
  state_.step += 1;

  if (config_.kind == OptimizerKind::RMSProp) {
    const double rho = config_.rho;
    auto update = [&](auto& theta, const auto& g_raw, auto& v) {
      const auto g = (g_raw * clip).eval();
      v = rho * v + (1.0 - rho) * g.cwiseProduct(g);
      theta.array() -= lr * g.array() / (v.array().sqrt() + config_.epsilon);
    };
    for (std::size_t i = 0; i < params.layers.size(); ++i) {
      update(params.layers[i].weights, grads.layers[i].weights, state_.second_moment[i].weights);
      update(params.layers[i].biases, grads.layers[i].biases, state_.second_moment[i].biases);
    }
    return;
  }

  const double b1 = config_.beta1;
  const double b2 = config_.beta2;
  const double t = static_cast<double>(state_.step);
  const double c1 = 1.0 - std::pow(b1, t);
  const double c2 = 1.0 - std::pow(b2, t);
  auto update = [&](auto& theta, const auto& g_raw, auto& m, auto& v) {
    const auto g = (g_raw * clip).eval();
    m = b1 * m + (1.0 - b1) * g;
    v = b2 * v + (1.0 - b2) * g.cwiseProduct(g);
    theta.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + config_.epsilon);
  };
  for (std::size_t i = 0; i < params.layers.size(); ++i) {
    update(params.layers[i].weights, grads.layers[i].weights, state_.first_moment[i].weights,
           state_.second_moment[i].weights);
    update(params.layers[i].biases, grads.layers[i].biases, state_.first_moment[i].biases,
           state_.second_moment[i].biases);
  }
}

double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

BceResult bce_loss(double logit, double label) {
  BceResult r;
  r.loss = std::max(logit, 0.0) - logit * label + std::log1p(std::exp(-std::abs(logit)));
  r.logit_grad = sigmoid(logit) - label;
  return r;
}

Categorical Categorical::from_logits(std::span<const double> logits) {
  if (logits.empty()) throw std::invalid_argument("categorical: no logits");
  double max_logit = -std::numeric_limits<double>::infinity();
  for (double l : logits) max_logit = std::max(max_logit, l);
  double total = 0.0;
  for (double l : logits) total += std::exp(l - max_logit);
  const double log_total = std::log(total);

  Categorical dist;
  dist.probs.reserve(logits.size());
  dist.log_probs.reserve(logits.size());
  for (double l : logits) {
    const double lp = l - max_logit - log_total;
    dist.log_probs.push_back(lp);
    dist.probs.push_back(std::exp(lp));
  }
  return dist;
}

double Categorical::entropy() const {
  double h = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (probs[i] > 0.0) h -= probs[i] * log_probs[i];
  }
  return h;
}

int Categorical::sample(Rng& rng) const {
  const double u = rng.uniform();
  double cumulative = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    cumulative += probs[i];
    if (u < cumulative) return static_cast<int>(i);
  }
  // Rounding left u above the total mass; fall back to the last non-zero entry.
  for (std::size_t i = probs.size(); i-- > 0;) {
    if (probs[i] > 0.0) return static_cast<int>(i);
  }
  return 0;
}

int Categorical::sample(std::uint64_t seed) const {
  Rng rng(seed);
  return sample(rng);
}

int Categorical::argmax() const { return nn::argmax(probs); }

int argmax(std::span<const double> values) {
  int best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
  }
  return best;
}

namespace {

constexpr char kMagic[4] = {'S', 'G', 'N', 'N'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_f64(std::vector<std::uint8_t>& out, double d) {
  const auto bits = std::bit_cast<std::uint64_t>(d);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_++]) << (8 * i);
    return v;
  }

  double f64() {
    need(8);
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(bytes_[pos_++]) << (8 * i);
    return std::bit_cast<double>(bits);
  }

  void expect_magic() {
    need(4);
    if (std::memcmp(bytes_.data() + pos_, kMagic, 4) != 0) throw std::runtime_error("checkpoint: bad magic");
    pos_ += 4;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw std::runtime_error("checkpoint: truncated");
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_parameters(const NetworkParameters& params) {
  std::vector<std::uint8_t> out(kMagic, kMagic + 4);
  put_u32(out, kVersion);
  const auto dims = params.dims();
  put_u32(out, static_cast<std::uint32_t>(dims.size()));
  for (int d : dims) put_u32(out, static_cast<std::uint32_t>(d));
  for (const auto& l : params.layers) {
    for (Eigen::Index r = 0; r < l.weights.rows(); ++r) {
      for (Eigen::Index c = 0; c < l.weights.cols(); ++c) put_f64(out, l.weights(r, c));
    }
    for (Eigen::Index r = 0; r < l.biases.size(); ++r) put_f64(out, l.biases(r));
  }
  return out;
}

NetworkParameters decode_parameters(std::span<const std::uint8_t> bytes) {
  Reader in(bytes);
  in.expect_magic();
  if (const auto version = in.u32(); version != kVersion) {
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  }
  const std::uint32_t n_dims = in.u32();
  if (n_dims < 2) throw std::runtime_error("checkpoint: need at least two dims");
  std::vector<int> dims;
  for (std::uint32_t i = 0; i < n_dims; ++i) dims.push_back(static_cast<int>(in.u32()));

  NetworkParameters params;
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    DenseLayer layer{Matrix(dims[l + 1], dims[l]), Vector(dims[l + 1])};
    for (Eigen::Index r = 0; r < layer.weights.rows(); ++r) {
      for (Eigen::Index c = 0; c < layer.weights.cols(); ++c) layer.weights(r, c) = in.f64();
    }
    for (Eigen::Index r = 0; r < layer.biases.size(); ++r) layer.biases(r) = in.f64();
    params.layers.push_back(std::move(layer));
  }
  if (!in.done()) throw std::runtime_error("checkpoint: trailing bytes");
  params.dropout.assign(params.layers.size() - 1, 0.0);
  return params;
}

void save_checkpoint(const std::filesystem::path& path, const NetworkParameters& params,
                     const nlohmann::json& hyperparameters) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto bytes = encode_parameters(params);
  {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  }
  nlohmann::json sidecar = hyperparameters;
  sidecar["dims"] = params.dims();
  sidecar["dropout"] = params.dropout;
  std::ofstream meta(path.string() + ".json");
  meta << sidecar.dump(2) << '\n';
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  Checkpoint ck;
  ck.params = decode_parameters(bytes);
  std::ifstream meta(path.string() + ".json");
  if (meta) {
    ck.hyperparameters = nlohmann::json::parse(meta);
    if (ck.hyperparameters.contains("dropout")) {
      ck.params.dropout = ck.hyperparameters["dropout"].get<std::vector<double>>();
    }
  }
  return ck;
}

}  // namespace safegen::nn
