#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "weightvol/data.hpp"
#include "weightvol/error.hpp"
#include "weightvol/linalg.hpp"
#include "weightvol/rng.hpp"

namespace weightvol {

enum class Activation { relu, tanh, softmax_output };

std::string_view activation_name(Activation a);
Activation parse_activation(std::string_view name);

struct LayerSpec {
  std::size_t in_dim = 0;
  std::size_t out_dim = 0;
  Activation activation = Activation::relu;
  double dropout_rate = 0.0;  // applied to this layer's output

  bool operator==(const LayerSpec&) const = default;
};

/// Dims must chain, rates lie in [0,1), and exactly the last layer is
/// softmax_output (with no dropout). Throws InvalidArgument.
void validate_layers(std::span<const LayerSpec> layers);

/// dims = {input, hidden..., classes}; every hidden layer gets `dropout_rate`.
std::vector<LayerSpec> make_mlp(std::span<const std::size_t> dims, Activation hidden, double dropout_rate);

// Bias-free fully connected network. weights[l] is out_dim x in_dim.
struct NetworkParams {
  std::vector<LayerSpec> layers;
  std::vector<Matrix> weights;

  std::size_t layer_count() const noexcept { return layers.size(); }
  std::size_t parameter_count() const;
  Vector flatten() const;
  void assign_flat(std::span<const double> flat);

  bool operator==(const NetworkParams&) const = default;
};

/// N(0, 2/in) for relu layers, N(0, 1/in) otherwise. Deterministic per seed.
NetworkParams init_network(std::span<const LayerSpec> layers, std::uint64_t seed);

/// One batch x out_dim matrix per layer; entries 0 w.p. q, else 1/(1-q).
using DropoutMasks = std::vector<Matrix>;
DropoutMasks sample_dropout_masks(std::span<const LayerSpec> layers, std::size_t batch_size, Rng& rng);

/// Additive noise injected into a pass. activation[l] is added to the input of
/// layer l (batch x in_dim); node_grad[l] is added to the per-sample loss
/// gradient w.r.t. h_l (batch x out_dim). Empty matrices mean "none".
struct Perturbations {
  std::vector<Matrix> activation;
  std::vector<Matrix> node_grad;
};

struct ForwardTrace {
  std::vector<Matrix> inputs;  // inputs[l]: exactly what W_l multiplies (masked, perturbed)
  std::vector<Matrix> pre;     // pre[l] = h_l
  Matrix probs;                // softmax(h_L)
  DropoutMasks masks;          // empty in evaluation mode
};

struct ForwardResult {
  ForwardTrace trace;
  Vector losses;  // per-sample cross-entropy
};

ForwardResult forward(const NetworkParams& params, const Matrix& batch, std::span<const std::size_t> labels,
                      const DropoutMasks* masks = nullptr, const Perturbations* perturb = nullptr);

/// Gradients of the batch-mean loss, shaped like the weights.
std::vector<Matrix> backward(const NetworkParams& params, const ForwardTrace& trace,
                             std::span<const std::size_t> labels, const Perturbations* perturb = nullptr);

double activation_derivative(Activation a, double h);

struct MomentumState {
  std::vector<Matrix> velocity;
};

/// v <- m v + g + wd W;  W <- W - lr v.
void sgd_step(NetworkParams& params, std::span<const Matrix> grads, double lr, double momentum,
              double weight_decay, MomentumState& state);

struct EvalResult {
  double loss = 0.0;
  double accuracy = 0.0;
};

/// Evaluation mode (no dropout), fixed-order chunked reduction.
EvalResult evaluate(const NetworkParams& params, const Dataset& data);

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  double learning_rate = 0.05;
  std::size_t lr_halve_every = 0;  // 0: every 20% of epochs
  double momentum = 0.9;
  double weight_decay = 0.0;
  std::uint64_t seed = 1;
  bool dropout_enabled = true;

  void validate() const;
  std::size_t halving_period() const;
  double learning_rate_at(std::size_t epoch_index) const;
};

struct EpochStats {
  std::size_t epoch = 0;  // 1-based
  double batch_loss = 0.0;
  double train_loss = 0.0;
  double train_accuracy = 0.0;
  double test_loss = 0.0;
  double test_accuracy = 0.0;

  bool operator==(const EpochStats&) const = default;
};

using History = std::vector<EpochStats>;

/// Hook interface for injecting noise into the training loop.
class BatchNoise {
 public:
  virtual ~BatchNoise() = default;
  virtual void begin(const NetworkParams& /*params*/, const Dataset& /*data*/) {}
  /// Noise for the next pass, or nullptr.
  virtual const Perturbations* before_batch(const NetworkParams& params, std::size_t batch_rows) = 0;
  virtual void after_forward(const NetworkParams& /*params*/, const ForwardTrace& /*trace*/) {}
  virtual void after_step(NetworkParams& /*params*/) {}
};

struct TrainHooks {
  /// Called with epoch 0 before training and after every completed epoch.
  std::function<void(std::size_t epoch, const NetworkParams& params)> on_epoch;
  BatchNoise* noise = nullptr;
};

struct TrainResult {
  NetworkParams initial;
  NetworkParams final;
  History history;
};

class TrainingDiverged : public Error {
 public:
  TrainingDiverged(const std::string& message, History partial)
      : Error(ErrorKind::DivergenceDetected, message), history(std::move(partial)) {}
  History history;
};

inline constexpr double kDivergenceLoss = 1e4;

struct EpochOptions {
  std::size_t batch_size = 32;
  double learning_rate = 0.05;
  double momentum = 0.0;
  double weight_decay = 0.0;
  bool dropout = false;
  std::uint64_t shuffle_seed = 0;
  std::size_t epoch = 0;
};

/// One pass over `data`; returns the mean batch loss. Throws TrainingDiverged
/// (with empty history) if a batch loss exceeds kDivergenceLoss or is non-finite.
double train_epoch(NetworkParams& params, MomentumState& state, const Dataset& data, const EpochOptions& opts,
                   Rng& mask_rng, BatchNoise* noise = nullptr);

TrainResult train(const TrainConfig& config, const Dataset& train_set, const Dataset* test_set,
                  std::span<const LayerSpec> layers, const TrainHooks& hooks = {});

}  // namespace weightvol
