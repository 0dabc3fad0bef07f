#include "weightvol/nn.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace weightvol {

std::string_view activation_name(Activation a) {
  switch (a) {
    case Activation::relu: return "relu";
    case Activation::tanh: return "tanh";
    case Activation::softmax_output: return "softmax_output";
  }
  return "unknown";
}

Activation parse_activation(std::string_view name) {
  if (name == "relu") return Activation::relu;
  if (name == "tanh") return Activation::tanh;
  if (name == "softmax_output" || name == "softmax") return Activation::softmax_output;
  throw Error(ErrorKind::InvalidArgument, "unknown activation '" + std::string(name) + "'");
}

void validate_layers(std::span<const LayerSpec> layers) {
  if (layers.empty()) throw Error(ErrorKind::InvalidArgument, "network needs at least one layer");
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const LayerSpec& s = layers[l];
    const std::string where = "layer " + std::to_string(l) + ": ";
    if (s.in_dim == 0 || s.out_dim == 0) throw Error(ErrorKind::InvalidArgument, where + "dimensions must be >= 1");
    if (!(s.dropout_rate >= 0.0 && s.dropout_rate < 1.0)) {
      throw Error(ErrorKind::InvalidArgument, where + "dropout rate must lie in [0,1)");
    }
    if (l > 0 && layers[l - 1].out_dim != s.in_dim) {
      throw Error(ErrorKind::InvalidArgument, where + "in_dim does not match previous out_dim");
    }
    const bool last = l + 1 == layers.size();
    if (last != (s.activation == Activation::softmax_output)) {
      throw Error(ErrorKind::InvalidArgument, where + "softmax_output must be used by the last layer only");
    }
    if (last && s.dropout_rate != 0.0) throw Error(ErrorKind::InvalidArgument, where + "output layer cannot drop out");
  }
}

std::vector<LayerSpec> make_mlp(std::span<const std::size_t> dims, Activation hidden, double dropout_rate) {
  if (dims.size() < 2) throw Error(ErrorKind::InvalidArgument, "make_mlp: need input and output dims");
  std::vector<LayerSpec> layers;
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    const bool last = l + 2 == dims.size();
    layers.push_back({dims[l], dims[l + 1], last ? Activation::softmax_output : hidden, last ? 0.0 : dropout_rate});
  }
  validate_layers(layers);
  return layers;
}

std::size_t NetworkParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& w : weights) n += w.size();
  return n;
}

Vector NetworkParams::flatten() const {
  Vector out;
  out.reserve(parameter_count());
  for (const auto& w : weights) out.insert(out.end(), w.data().begin(), w.data().end());
  return out;
}

void NetworkParams::assign_flat(std::span<const double> flat) {
  if (flat.size() != parameter_count()) throw Error(ErrorKind::ShapeMismatch, "assign_flat: length mismatch");
  std::size_t off = 0;
  for (auto& w : weights) {
    std::copy(flat.begin() + static_cast<std::ptrdiff_t>(off),
              flat.begin() + static_cast<std::ptrdiff_t>(off + w.size()), w.data().begin());
    off += w.size();
  }
}

NetworkParams init_network(std::span<const LayerSpec> layers, std::uint64_t seed) {
  validate_layers(layers);
  NetworkParams p;
  p.layers.assign(layers.begin(), layers.end());
  Rng rng(derive_seed(seed, 0x1417));
  for (const LayerSpec& s : layers) {
    const double var = (s.activation == Activation::relu ? 2.0 : 1.0) / static_cast<double>(s.in_dim);
    const double sd = std::sqrt(var);
    Matrix w(s.out_dim, s.in_dim);
    for (double& v : w.data()) v = sd * rng.normal();
    p.weights.push_back(std::move(w));
  }
  return p;
}

DropoutMasks sample_dropout_masks(std::span<const LayerSpec> layers, std::size_t batch_size, Rng& rng) {
  DropoutMasks masks;
  masks.reserve(layers.size());
  for (const LayerSpec& s : layers) {
    Matrix m(batch_size, s.out_dim, 1.0);
    const double q = s.dropout_rate;
    if (q > 0.0) {
      const double keep = 1.0 / (1.0 - q);
      for (double& v : m.data()) v = rng.bernoulli(q) ? 0.0 : keep;
    }
    masks.push_back(std::move(m));
  }
  return masks;
}

double activation_derivative(Activation a, double h) {
  switch (a) {
    case Activation::relu: return h > 0.0 ? 1.0 : 0.0;
    case Activation::tanh: {
      const double t = std::tanh(h);
      return 1.0 - t * t;
    }
    case Activation::softmax_output: return 1.0;
  }
  return 1.0;
}

namespace {

double apply_activation(Activation a, double h) {
  switch (a) {
    case Activation::relu: return h > 0.0 ? h : 0.0;
    case Activation::tanh: return std::tanh(h);
    case Activation::softmax_output: return h;
  }
  return h;
}

bool has(const std::vector<Matrix>& v, std::size_t i) { return i < v.size() && !v[i].empty(); }

void check_perturbation(const Matrix& m, std::size_t rows, std::size_t cols, const char* what) {
  if (m.rows() != rows || m.cols() != cols) {
    throw Error(ErrorKind::ShapeMismatch, std::string("perturbation shape mismatch for ") + what);
  }
}

}  // namespace

ForwardResult forward(const NetworkParams& params, const Matrix& batch, std::span<const std::size_t> labels,
                      const DropoutMasks* masks, const Perturbations* perturb) {
  const std::size_t n_layers = params.layer_count();
  if (n_layers == 0 || params.weights.size() != n_layers) {
    throw Error(ErrorKind::ShapeMismatch, "forward: malformed network");
  }
  const std::size_t rows = batch.rows();
  if (batch.cols() != params.layers.front().in_dim) {
    throw Error(ErrorKind::ShapeMismatch, "forward: batch has " + std::to_string(batch.cols()) +
                                              " features, network expects " +
                                              std::to_string(params.layers.front().in_dim));
  }
  if (labels.size() != rows) throw Error(ErrorKind::ShapeMismatch, "forward: label count mismatch");
  if (masks && masks->size() != n_layers) throw Error(ErrorKind::ShapeMismatch, "forward: mask count mismatch");

  ForwardResult result;
  ForwardTrace& tr = result.trace;
  tr.inputs.reserve(n_layers);
  tr.pre.reserve(n_layers);
  if (masks) tr.masks = *masks;

  Matrix current = batch;
  for (std::size_t l = 0; l < n_layers; ++l) {
    const LayerSpec& spec = params.layers[l];
    if (perturb && has(perturb->activation, l)) {
      check_perturbation(perturb->activation[l], rows, spec.in_dim, "activation");
      current += perturb->activation[l];
    }
    Matrix h = matmul_nt(current, params.weights[l]);
    tr.inputs.push_back(std::move(current));
    if (l + 1 < n_layers) {
      Matrix a(rows, spec.out_dim);
      for (std::size_t i = 0; i < h.size(); ++i) a.data()[i] = apply_activation(spec.activation, h.data()[i]);
      if (masks) {
        const Matrix& m = (*masks)[l];
        if (m.rows() != rows || m.cols() != spec.out_dim) {
          throw Error(ErrorKind::ShapeMismatch, "forward: mask shape mismatch at layer " + std::to_string(l));
        }
        for (std::size_t i = 0; i < a.size(); ++i) a.data()[i] *= m.data()[i];
      }
      current = std::move(a);
    }
    tr.pre.push_back(std::move(h));
  }

  const Matrix& logits = tr.pre.back();
  const std::size_t k = logits.cols();
  tr.probs = Matrix(rows, k);
  result.losses.resize(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    if (labels[i] >= k) throw Error(ErrorKind::ShapeMismatch, "forward: label out of range");
    auto z = logits.row(i);
    const double zmax = *std::max_element(z.begin(), z.end());
    double sum = 0.0;
    auto p = tr.probs.row(i);
    for (std::size_t c = 0; c < k; ++c) {
      p[c] = std::exp(z[c] - zmax);
      sum += p[c];
    }
    for (std::size_t c = 0; c < k; ++c) p[c] /= sum;
    result.losses[i] = std::max(0.0, zmax + std::log(sum) - z[labels[i]]);
  }
  return result;
}

std::vector<Matrix> backward(const NetworkParams& params, const ForwardTrace& trace,
                             std::span<const std::size_t> labels, const Perturbations* perturb) {
  const std::size_t n_layers = params.layer_count();
  if (trace.inputs.size() != n_layers || trace.pre.size() != n_layers) {
    throw Error(ErrorKind::StaleTrace, "backward: trace layer count does not match network");
  }
  const std::size_t rows = trace.probs.rows();
  if (labels.size() != rows) throw Error(ErrorKind::StaleTrace, "backward: label count does not match trace");
  for (std::size_t l = 0; l < n_layers; ++l) {
    if (trace.inputs[l].rows() != rows || trace.inputs[l].cols() != params.layers[l].in_dim ||
        trace.pre[l].rows() != rows || trace.pre[l].cols() != params.layers[l].out_dim) {
      throw Error(ErrorKind::StaleTrace, "backward: trace shapes inconsistent at layer " + std::to_string(l));
    }
  }
  const bool masked = !trace.masks.empty();
  if (masked && trace.masks.size() != n_layers) throw Error(ErrorKind::StaleTrace, "backward: mask count mismatch");

  std::vector<Matrix> grads(n_layers);
  Matrix delta = trace.probs;
  for (std::size_t i = 0; i < rows; ++i) delta(i, labels[i]) -= 1.0;

  const double inv_rows = 1.0 / static_cast<double>(rows);
  for (std::size_t l = n_layers; l-- > 0;) {
    if (perturb && has(perturb->node_grad, l)) {
      check_perturbation(perturb->node_grad[l], rows, params.layers[l].out_dim, "node_grad");
      delta += perturb->node_grad[l];
    }
    grads[l] = matmul_tn(delta, trace.inputs[l]);
    grads[l] *= inv_rows;
    if (l == 0) break;
    Matrix g = matmul(delta, params.weights[l]);
    const Activation act = params.layers[l - 1].activation;
    const Matrix& h = trace.pre[l - 1];
    for (std::size_t i = 0; i < g.size(); ++i) {
      double d = activation_derivative(act, h.data()[i]);
      if (masked) d *= trace.masks[l - 1].data()[i];
      g.data()[i] *= d;
    }
    delta = std::move(g);
  }
  return grads;
}

void sgd_step(NetworkParams& params, std::span<const Matrix> grads, double lr, double momentum,
              double weight_decay, MomentumState& state) {
  const std::size_t n_layers = params.layer_count();
  if (grads.size() != n_layers) throw Error(ErrorKind::ShapeMismatch, "sgd_step: gradient count mismatch");
  if (state.velocity.size() != n_layers) {
    state.velocity.clear();
    for (const auto& w : params.weights) state.velocity.emplace_back(w.rows(), w.cols());
  }
  for (std::size_t l = 0; l < n_layers; ++l) {
    Matrix& w = params.weights[l];
    Matrix& v = state.velocity[l];
    const Matrix& g = grads[l];
    if (g.rows() != w.rows() || g.cols() != w.cols()) {
      throw Error(ErrorKind::ShapeMismatch, "sgd_step: gradient shape mismatch at layer " + std::to_string(l));
    }
    for (std::size_t i = 0; i < w.size(); ++i) {
      double& vi = v.data()[i];
      vi = momentum * vi + g.data()[i] + weight_decay * w.data()[i];
      w.data()[i] -= lr * vi;
    }
  }
}

EvalResult evaluate(const NetworkParams& params, const Dataset& data) {
  if (data.size() == 0) throw Error(ErrorKind::InvalidArgument, "evaluate: empty dataset");
  if (data.dim() != params.layers.front().in_dim) throw Error(ErrorKind::ShapeMismatch, "evaluate: feature dim mismatch");
  constexpr std::size_t kChunk = 256;
  double loss_sum = 0.0;
  std::size_t correct = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += kChunk) {
    const std::size_t end = std::min(data.size(), start + kChunk);
    idx.resize(end - start);
    for (std::size_t i = start; i < end; ++i) idx[i - start] = i;
    const Dataset chunk = subset(data, idx);
    const ForwardResult r = forward(params, chunk.features, chunk.labels);
    double chunk_sum = 0.0;
    for (double l : r.losses) chunk_sum += l;
    loss_sum += chunk_sum;
    for (std::size_t i = 0; i < chunk.size(); ++i) {
      auto p = r.trace.probs.row(i);
      const auto best = static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin());
      if (best == chunk.labels[i]) ++correct;
    }
  }
  const double n = static_cast<double>(data.size());
  return {loss_sum / n, static_cast<double>(correct) / n};
}

void TrainConfig::validate() const {
  if (batch_size == 0) throw Error(ErrorKind::InvalidArgument, "batch_size must be >= 1");
  if (!(learning_rate > 0.0)) throw Error(ErrorKind::InvalidArgument, "learning_rate must be > 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw Error(ErrorKind::InvalidArgument, "momentum must lie in [0,1)");
  if (!(weight_decay >= 0.0)) throw Error(ErrorKind::InvalidArgument, "weight_decay must be >= 0");
}

std::size_t TrainConfig::halving_period() const {
  if (lr_halve_every > 0) return lr_halve_every;
  return std::max<std::size_t>(1, (epochs + 4) / 5);
}

double TrainConfig::learning_rate_at(std::size_t epoch_index) const {
  return learning_rate * std::pow(0.5, static_cast<double>(epoch_index / halving_period()));
}

double train_epoch(NetworkParams& params, MomentumState& state, const Dataset& data, const EpochOptions& opts,
                   Rng& mask_rng, BatchNoise* noise) {
  const auto plan = batches(data.size(), {opts.batch_size, opts.shuffle_seed, opts.epoch});
  double loss_sum = 0.0;
  for (const auto& idx : plan) {
    const Dataset b = subset(data, idx);
    DropoutMasks masks;
    if (opts.dropout) masks = sample_dropout_masks(params.layers, b.size(), mask_rng);
    const Perturbations* perturb = noise ? noise->before_batch(params, b.size()) : nullptr;
    const ForwardResult fr = forward(params, b.features, b.labels, opts.dropout ? &masks : nullptr, perturb);
    double batch_loss = 0.0;
    for (double l : fr.losses) batch_loss += l;
    batch_loss /= static_cast<double>(b.size());
    if (!std::isfinite(batch_loss) || batch_loss > kDivergenceLoss) {
      throw TrainingDiverged("batch loss " + std::to_string(batch_loss) + " in epoch " + std::to_string(opts.epoch),
                             {});
    }
    if (noise) noise->after_forward(params, fr.trace);
    const auto grads = backward(params, fr.trace, b.labels, perturb);
    sgd_step(params, grads, opts.learning_rate, opts.momentum, opts.weight_decay, state);
    if (noise) noise->after_step(params);
    loss_sum += batch_loss;
  }
  return plan.empty() ? 0.0 : loss_sum / static_cast<double>(plan.size());
}

TrainResult train(const TrainConfig& config, const Dataset& train_set, const Dataset* test_set,
                  std::span<const LayerSpec> layers, const TrainHooks& hooks) {
  config.validate();
  validate_dataset(train_set);
  if (test_set) validate_dataset(*test_set);

  TrainResult result;
  result.initial = init_network(layers, config.seed);
  result.final = result.initial;
  if (hooks.on_epoch) hooks.on_epoch(0, result.final);
  if (hooks.noise) hooks.noise->begin(result.final, train_set);

  MomentumState state;
  Rng mask_rng(derive_seed(config.seed, 0xd20f));
  const std::uint64_t shuffle_seed = derive_seed(config.seed, 0x5b0f);
  for (std::size_t e = 0; e < config.epochs; ++e) {
    EpochOptions opts;
    opts.batch_size = config.batch_size;
    opts.learning_rate = config.learning_rate_at(e);
    opts.momentum = config.momentum;
    opts.weight_decay = config.weight_decay;
    opts.dropout = config.dropout_enabled;
    opts.shuffle_seed = shuffle_seed;
    opts.epoch = e;
    EpochStats stats;
    stats.epoch = e + 1;
    try {
      stats.batch_loss = train_epoch(result.final, state, train_set, opts, mask_rng, hooks.noise);
    } catch (const TrainingDiverged& d) {
      throw TrainingDiverged(d.what(), result.history);
    }
    const EvalResult tr = evaluate(result.final, train_set);
    stats.train_loss = tr.loss;
    stats.train_accuracy = tr.accuracy;
    if (test_set) {
      const EvalResult te = evaluate(result.final, *test_set);
      stats.test_loss = te.loss;
      stats.test_accuracy = te.accuracy;
    }
    result.history.push_back(stats);
    if (hooks.on_epoch) hooks.on_epoch(e + 1, result.final);
  }
  return result;
}

}  // namespace weightvol
