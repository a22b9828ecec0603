#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "safegen/rng.hpp"

namespace safegen::nn {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// weights are (fan_out x fan_in); inputs are column vectors, batches are
// matrices with one example per column.
struct DenseLayer {
  Matrix weights;
  Vector biases;
};

// ReLU hidden layers and a linear head. dropout[i] applies to the output of
// hidden layer i, so dropout.size() == layers.size() - 1.
struct NetworkParameters {
  std::vector<DenseLayer> layers;
  std::vector<double> dropout;

  int input_size() const;
  int output_size() const;
  std::vector<int> dims() const;  // input, hidden..., output
  std::size_t parameter_count() const;
  bool all_finite() const;
};

// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases.
NetworkParameters make_mlp(int input_size, std::span<const int> hidden, int output_size, std::uint64_t seed,
                           double dropout = 0.0);

void set_dropout(NetworkParameters& params, double p);

struct DropoutMode {
  bool sampled = false;
  std::uint64_t seed = 0;

  static DropoutMode off() { return {}; }
  static DropoutMode sampled_with(std::uint64_t seed) { return {true, seed}; }
};

struct ForwardCache {
  std::vector<Matrix> inputs;  // input to each layer
  std::vector<Matrix> gates;   // d(hidden output)/d(pre-activation), per hidden layer
  std::vector<int> dims;
};

// Inverted dropout: in sampled mode each hidden unit is zeroed with its
// layer's probability p and survivors are scaled by 1/(1-p).
Matrix mlp_forward(const NetworkParameters& params, const Matrix& input, DropoutMode mode = DropoutMode::off(),
                   ForwardCache* cache = nullptr);

Vector mlp_forward(const NetworkParameters& params, std::span<const double> input,
                   DropoutMode mode = DropoutMode::off());

struct Gradients {
  std::vector<DenseLayer> layers;

  static Gradients zeros_like(const NetworkParameters& params);
  Gradients& operator+=(const Gradients& other);
  void scale(double factor);
  double squared_norm() const;
};

// Gradients of sum_j <output_grad[:, j], f(input[:, j])> for the cached batch.
// Throws std::invalid_argument if the cache does not match params/output_grad.
Gradients mlp_backward(const NetworkParameters& params, const ForwardCache& cache, const Matrix& output_grad);

enum class OptimizerKind { RMSProp, Adam };
enum class LrSchedule { Constant, LinearDecay };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::Adam;
  double learning_rate = 1e-3;
  LrSchedule schedule = LrSchedule::Constant;
  std::int64_t horizon = 0;  // steps over which LinearDecay reaches zero
  double rho = 0.99;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double max_grad_norm = 0.0;  // 0 disables global-norm clipping
};

struct OptimizerState {
  std::vector<DenseLayer> first_moment;   // Adam only
  std::vector<DenseLayer> second_moment;  // RMSProp v, Adam v
  std::int64_t step = 0;
};

class Optimizer {
 public:
  Optimizer(OptimizerConfig config, const NetworkParameters& shape);

  void step(NetworkParameters& params, const Gradients& grads);

  double learning_rate_at(std::int64_t step) const;
  double current_learning_rate() const { return learning_rate_at(state_.step); }
  const OptimizerState& state() const { return state_; }
  const OptimizerConfig& config() const { return config_; }

 private:
  OptimizerConfig config_;
  OptimizerState state_;
};

struct BceResult {
  double loss = 0.0;
  double logit_grad = 0.0;  // p - y
};

// Binary cross entropy evaluated from the pre-sigmoid logit without forming
// log(p) directly: loss = max(z, 0) - z*y + log1p(exp(-|z|)).
BceResult bce_loss(double logit, double label);

double sigmoid(double z);

struct Categorical {
  std::vector<double> probs;
  std::vector<double> log_probs;

  static Categorical from_logits(std::span<const double> logits);

  double entropy() const;
  int sample(Rng& rng) const;
  int sample(std::uint64_t seed) const;
  int argmax() const;
};

// Lowest index among the maxima.
int argmax(std::span<const double> values);

// Binary checkpoint: "SGNN" magic, uint32 version, uint32 dim count, uint32
// dims, then every layer's weights (row-major) and biases as little-endian
// IEEE-754 doubles. Hyperparameters and dropout go in a JSON sidecar at
// path + ".json".
std::vector<std::uint8_t> encode_parameters(const NetworkParameters& params);
NetworkParameters decode_parameters(std::span<const std::uint8_t> bytes);

void save_checkpoint(const std::filesystem::path& path, const NetworkParameters& params,
                     const nlohmann::json& hyperparameters = nlohmann::json::object());

struct Checkpoint {
  NetworkParameters params;
  nlohmann::json hyperparameters;
};

Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace safegen::nn
