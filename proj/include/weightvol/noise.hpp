#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "weightvol/data.hpp"
#include "weightvol/linalg.hpp"
#include "weightvol/nn.hpp"
#include "weightvol/volume.hpp"

namespace weightvol {

enum class NoiseMode { none, disentangle, weight_noise };

std::string_view noise_mode_name(NoiseMode m);
NoiseMode parse_noise_mode(std::string_view name);

struct NoiseConfig {
  NoiseMode mode = NoiseMode::none;
  double lambda1 = 0.0;  // activation noise strength
  double lambda2 = 0.0;  // node-loss noise strength
  double lambda3 = 0.0;  // weight noise std
  std::size_t refresh_every = 50;
  double ema_decay = 0.95;
  double damping_scale = 1e-3;  // relative damping before inverting a factor
  bool match_factor_scale = true;

  void validate() const;
};

// Zero-mean Gaussian sampler: sample = mean + transform * z.
struct NoiseSampler {
  Vector mean;
  Matrix covariance;
  Matrix transform;

  Vector sample(Rng& rng) const;
  /// rows x dim matrix of independent samples, each scaled by `scale`.
  Matrix sample_rows(std::size_t rows, double scale, Rng& rng) const;
};

/// Covariance nearest_psd(r(factor^-1), 0), where r negates the off-diagonal
/// entries. Throws NotPositiveDefinite if `factor` cannot be inverted.
NoiseSampler reverse_noise_params(const Matrix& factor);

/// Rescales `cov` so that its diagonal equals `target_diag`, keeping the
/// correlation structure. Zero-variance coordinates stay zero.
Matrix rescale_to_diagonal(const Matrix& cov, std::span<const double> target_diag);

/// BatchNoise implementing both injection modes.
class NoiseInjector : public BatchNoise {
 public:
  NoiseInjector(NoiseConfig config, std::uint64_t seed);

  void begin(const NetworkParams& params, const Dataset& data) override;
  const Perturbations* before_batch(const NetworkParams& params, std::size_t batch_rows) override;
  void after_forward(const NetworkParams& params, const ForwardTrace& trace) override;
  void after_step(NetworkParams& params) override;

  std::size_t refresh_count() const { return refreshes_; }
  const std::vector<NoiseSampler>& activation_samplers() const { return act_samplers_; }
  const std::vector<NoiseSampler>& node_samplers() const { return node_samplers_; }

 private:
  bool disentangling() const;
  void refresh();

  NoiseConfig config_;
  Rng rng_;
  std::vector<Matrix> ema_a_;
  std::vector<Matrix> ema_h_;
  std::vector<NoiseSampler> act_samplers_;
  std::vector<NoiseSampler> node_samplers_;
  Perturbations current_;
  std::size_t batches_ = 0;
  std::size_t refreshes_ = 0;
};

struct NoiseRunResult {
  TrainResult train;
  std::vector<TrackedVolume> volume_trail;
};

NoiseRunResult train_with_noise(const TrainConfig& config, const NoiseConfig& noise, const Dataset& train_set,
                                const Dataset* test_set, std::span<const LayerSpec> layers,
                                const TrackOptions& track);

enum class VolumeEffect { expansion, contraction, neutral };

std::string_view volume_effect_name(VolumeEffect e);

/// Compares mean per-layer log(per_dim_vol). Throws LayerMismatch.
VolumeEffect classify_volume_effect(const VolumeReport& run, const VolumeReport& baseline, double tau = 0.01);

}  // namespace weightvol
