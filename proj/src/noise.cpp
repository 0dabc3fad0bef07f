#include "weightvol/noise.hpp"

#include <algorithm>
#include <cmath>

namespace weightvol {

std::string_view noise_mode_name(NoiseMode m) {
  switch (m) {
    case NoiseMode::none: return "none";
    case NoiseMode::disentangle: return "disentangle";
    case NoiseMode::weight_noise: return "weight_noise";
  }
  return "none";
}

NoiseMode parse_noise_mode(std::string_view name) {
  if (name == "none") return NoiseMode::none;
  if (name == "disentangle") return NoiseMode::disentangle;
  if (name == "weight_noise") return NoiseMode::weight_noise;
  throw Error(ErrorKind::InvalidArgument, "unknown noise mode '" + std::string(name) + "'");
}

void NoiseConfig::validate() const {
  for (double v : {lambda1, lambda2, lambda3}) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw Error(ErrorKind::InvalidArgument, "noise strengths must be finite and >= 0");
  }
  if (refresh_every == 0) throw Error(ErrorKind::InvalidArgument, "refresh_every must be >= 1");
  if (!(ema_decay >= 0.0 && ema_decay < 1.0)) throw Error(ErrorKind::InvalidArgument, "ema_decay must lie in [0,1)");
  if (!(damping_scale >= 0.0)) throw Error(ErrorKind::InvalidArgument, "noise damping must be >= 0");
}

Vector NoiseSampler::sample(Rng& rng) const {
  Vector z(transform.cols());
  for (double& v : z) v = rng.normal();
  Vector out = matvec(transform, z);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += mean[i];
  return out;
}

Matrix NoiseSampler::sample_rows(std::size_t rows, double scale, Rng& rng) const {
  Matrix z(rows, transform.cols());
  for (double& v : z.data()) v = rng.normal();
  Matrix out = matmul_nt(z, transform);
  for (std::size_t r = 0; r < rows; ++r) {
    auto row = out.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] = scale * (row[c] + mean[c]);
  }
  return out;
}

namespace {

Matrix psd_square_root(const Matrix& cov) {
  const SymEig e = sym_eig(cov);
  const std::size_t n = cov.rows();
  Matrix t(n, n);
  for (std::size_t k = 0; k < n; ++k) {
    const double s = std::sqrt(std::max(e.values[k], 0.0));
    for (std::size_t i = 0; i < n; ++i) t(i, k) = e.vectors(i, k) * s;
  }
  return t;
}

NoiseSampler make_sampler(Matrix cov) {
  NoiseSampler s;
  s.mean.assign(cov.rows(), 0.0);
  s.transform = psd_square_root(cov);
  s.covariance = std::move(cov);
  return s;
}

}  // namespace

NoiseSampler reverse_noise_params(const Matrix& factor) {
  Matrix inv = cholesky_logdet(factor).inverse();
  for (std::size_t r = 0; r < inv.rows(); ++r)
    for (std::size_t c = 0; c < inv.cols(); ++c)
      if (r != c) inv(r, c) = -inv(r, c);
  return make_sampler(nearest_psd(symmetrized(inv), 0.0));
}

Matrix rescale_to_diagonal(const Matrix& cov, std::span<const double> target_diag) {
  if (target_diag.size() != cov.rows()) throw Error(ErrorKind::ShapeMismatch, "rescale: diagonal length mismatch");
  Vector s(cov.rows(), 0.0);
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (cov(i, i) > 0.0 && target_diag[i] > 0.0) s[i] = std::sqrt(target_diag[i] / cov(i, i));
  }
  Matrix out(cov.rows(), cov.cols());
  for (std::size_t r = 0; r < cov.rows(); ++r)
    for (std::size_t c = 0; c < cov.cols(); ++c) out(r, c) = s[r] * cov(r, c) * s[c];
  return out;
}

NoiseInjector::NoiseInjector(NoiseConfig config, std::uint64_t seed)
    : config_(config), rng_(derive_seed(seed, 0x7015e)) {
  config_.validate();
}

bool NoiseInjector::disentangling() const {
  return config_.mode == NoiseMode::disentangle && (config_.lambda1 > 0.0 || config_.lambda2 > 0.0);
}

void NoiseInjector::begin(const NetworkParams& params, const Dataset& data) {
  if (!disentangling()) return;
  KfacOptions ko;
  ko.dropout_enabled = false;
  ko.damping_scale = 0.0;
  Rng unused(0);
  const KroneckerFactors f = kfac_factors(params, head(data, 256), ko, unused);
  ema_a_ = f.a;
  ema_h_ = f.h;
  refresh();
}

void NoiseInjector::refresh() {
  auto build = [&](const Matrix& factor) {
    Matrix damped = factor;
    const Vector d = damped.diag();
    double mean = 0.0;
    for (double v : d) mean += v;
    mean /= static_cast<double>(d.size());
    const double lambda = std::max(config_.damping_scale * mean, 1e-12);
    for (std::size_t i = 0; i < damped.rows(); ++i) damped(i, i) += lambda;
    NoiseSampler s = reverse_noise_params(damped);
    if (config_.match_factor_scale) s = make_sampler(rescale_to_diagonal(s.covariance, factor.diag()));
    return s;
  };
  act_samplers_.clear();
  node_samplers_.clear();
  for (const Matrix& a : ema_a_) act_samplers_.push_back(build(a));
  for (const Matrix& h : ema_h_) node_samplers_.push_back(build(h));
  ++refreshes_;
}

const Perturbations* NoiseInjector::before_batch(const NetworkParams& params, std::size_t batch_rows) {
  if (!disentangling()) return nullptr;
  const std::size_t n_layers = params.layer_count();
  current_.activation.assign(n_layers, Matrix());
  current_.node_grad.assign(n_layers, Matrix());
  for (std::size_t l = 0; l < n_layers; ++l) {
    if (config_.lambda1 > 0.0) current_.activation[l] = act_samplers_[l].sample_rows(batch_rows, config_.lambda1, rng_);
    if (config_.lambda2 > 0.0) current_.node_grad[l] = node_samplers_[l].sample_rows(batch_rows, config_.lambda2, rng_);
  }
  return &current_;
}

void NoiseInjector::after_forward(const NetworkParams& params, const ForwardTrace& trace) {
  if (!disentangling()) return;
  std::vector<Matrix> a_sum;
  std::vector<Matrix> h_sum;
  accumulate_factors(params, trace, a_sum, h_sum);
  const double inv = 1.0 / static_cast<double>(trace.probs.rows());
  const double d = config_.ema_decay;
  for (std::size_t l = 0; l < a_sum.size(); ++l) {
    a_sum[l] *= (1.0 - d) * inv;
    h_sum[l] *= (1.0 - d) * inv;
    ema_a_[l] *= d;
    ema_a_[l] += a_sum[l];
    ema_h_[l] *= d;
    ema_h_[l] += h_sum[l];
  }
  if (++batches_ % config_.refresh_every == 0) refresh();
}

void NoiseInjector::after_step(NetworkParams& params) {
  if (config_.mode != NoiseMode::weight_noise || config_.lambda3 == 0.0) return;
  for (Matrix& w : params.weights)
    for (double& v : w.data()) v += config_.lambda3 * rng_.normal();
}

NoiseRunResult train_with_noise(const TrainConfig& config, const NoiseConfig& noise, const Dataset& train_set,
                                const Dataset* test_set, std::span<const LayerSpec> layers,
                                const TrackOptions& track) {
  noise.validate();
  NoiseInjector injector(noise, config.seed);
  TrackOptions to = track;
  to.total_epochs = config.epochs;
  VolumeTracker tracker(train_set, to);
  TrainHooks hooks;
  hooks.on_epoch = tracker.hook();
  hooks.noise = noise.mode == NoiseMode::none ? nullptr : &injector;
  NoiseRunResult out;
  out.train = train(config, train_set, test_set, layers, hooks);
  out.volume_trail = tracker.series();
  return out;
}

std::string_view volume_effect_name(VolumeEffect e) {
  switch (e) {
    case VolumeEffect::expansion: return "expansion";
    case VolumeEffect::contraction: return "contraction";
    case VolumeEffect::neutral: return "neutral";
  }
  return "neutral";
}

VolumeEffect classify_volume_effect(const VolumeReport& run, const VolumeReport& baseline, double tau) {
  if (run.layers.size() != baseline.layers.size()) {
    throw Error(ErrorKind::LayerMismatch, "volume reports have different layer counts");
  }
  for (std::size_t l = 0; l < run.layers.size(); ++l) {
    if (run.layers[l].dim != baseline.layers[l].dim) {
      throw Error(ErrorKind::LayerMismatch, "volume reports differ at layer " + std::to_string(l));
    }
  }
  const double diff = run.mean_log_per_dim() - baseline.mean_log_per_dim();
  if (diff > tau) return VolumeEffect::expansion;
  if (diff < -tau) return VolumeEffect::contraction;
  return VolumeEffect::neutral;
}

}  // namespace weightvol
