#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "weightvol/data.hpp"
#include "weightvol/linalg.hpp"
#include "weightvol/nn.hpp"
#include "weightvol/rng.hpp"

namespace weightvol {

// ---- Sampling estimator ----------------------------------------------------

struct SamplingOptions {
  std::size_t n_iters = 200;
  double epsilon = 0.05;
  double perturb_std = 0.1;  // std of the isotropic noise added each iteration
  double ft_lr = 1e-4;       // fine-tuning learning rate (one epoch per iteration)
  std::size_t batch_size = 32;
  bool dropout = true;       // fine-tune with the network's own dropout rates
  std::size_t min_accepted = 2;
};

struct PosteriorSamples {
  std::vector<LayerSpec> layers;
  std::vector<std::vector<Vector>> per_layer;  // per_layer[l][s]: flattened W_l of snapshot s
  double epsilon = 0.0;
  double reference_loss = 0.0;
  std::size_t accepted = 0;
  std::size_t rejected = 0;
};

/// Noisy fine-tuning chain started at `params`. Each iteration perturbs every
/// weight, fine-tunes for one epoch and keeps the snapshot when the training
/// loss stays within epsilon of the starting loss. Throws TooFewSamples when
/// fewer than min_accepted snapshots survive.
PosteriorSamples collect_posterior_samples(const NetworkParams& params, const Dataset& data,
                                           const SamplingOptions& opts, Rng& rng);

struct SubsetOptions {
  std::size_t subset_size = 50;   // k
  std::size_t subset_count = 20;  // R
  double shrinkage = 0.1;         // gamma
};

enum class VolumeMethod { sampling, laplace };

std::string_view volume_method_name(VolumeMethod m);

struct LayerVolume {
  std::size_t layer = 0;
  std::size_t dim = 0;
  double log_vol = 0.0;      // full-layer log volume, <= 0
  double per_dim_vol = 1.0;  // exp(log_vol / dim)
  std::optional<std::size_t> subset_size;
  std::optional<std::size_t> subset_count;
  std::size_t skipped_subsets = 0;
};

struct VolumeReport {
  VolumeMethod method = VolumeMethod::laplace;
  double damping = 0.0;                 // relative damping scale (laplace)
  std::string curvature = "none";       // "gauss_newton" (exact for relu) or "gauss_newton_approx"
  std::vector<LayerVolume> layers;

  /// Mean over layers of log(per_dim_vol).
  double mean_log_per_dim() const;
  double total_log_vol() const;
};

/// Per-layer volume from random coordinate subsets of the samples. Requires
/// at least 3 * min(k, dim) accepted snapshots.
VolumeReport sampling_volume(const PosteriorSamples& samples, const SubsetOptions& opts, Rng& rng);

/// Volume of a single (n_samples x dim) sample matrix via coordinate subsets;
/// returns the mean per-dimension log-volume.
double subset_log_volume_per_dim(const Matrix& samples, const SubsetOptions& opts, Rng& rng,
                                 std::size_t* skipped = nullptr);

// ---- Kronecker-factored Laplace estimator -----------------------------------

struct KfacOptions {
  bool dropout_enabled = true;
  std::size_t mask_draws = 8;
  double damping_scale = 1e-4;
  std::size_t chunk_size = 256;
};

struct KroneckerFactors {
  std::vector<Matrix> a;  // a[l]: E[a a^T] of the input to layer l (in_dim x in_dim)
  std::vector<Matrix> h;  // h[l]: Gauss-Newton E[d2 loss / dh_l dh_l] (out_dim x out_dim)
  double damping_scale = 0.0;
  Vector damping_a;  // absolute damping added to a[l]
  Vector damping_h;
  bool approximate = false;  // true when a tanh layer makes Gauss-Newton inexact
};

/// Accumulates sum over samples of the per-layer factor contributions of one
/// forward trace into `a_sum` / `h_sum` (which must be sized, or empty).
void accumulate_factors(const NetworkParams& params, const ForwardTrace& trace, std::vector<Matrix>& a_sum,
                        std::vector<Matrix>& h_sum);

KroneckerFactors kfac_factors(const NetworkParams& params, const Dataset& data, const KfacOptions& opts, Rng& rng);

struct KroneckerLogTerms {
  double log_det_sigma = 0.0;  // log det(A^-1 (x) H^-1)
  double log_diag_prod = 0.0;  // sum of log diagonal entries of A^-1 (x) H^-1
  double log_vol = 0.0;        // difference, clamped to <= 0
};

/// Log-determinant and diagonal-product of (A^-1 (x) H^-1) from the factors'
/// Cholesky decompositions. Throws NotPositiveDefinite.
KroneckerLogTerms kronecker_log_terms(const Matrix& a, const Matrix& h);

VolumeReport laplace_volume(const KroneckerFactors& factors);

// ---- Training-time tracker --------------------------------------------------

struct TrackedVolume {
  std::size_t epoch = 0;
  VolumeReport report;
};

struct TrackOptions {
  std::size_t every_k = 1;
  std::size_t total_epochs = 0;
  bool include_initial = false;
  KfacOptions kfac;
  std::uint64_t seed = 0;
};

/// Emits a Laplace report at epochs that are multiples of every_k and at the
/// final epoch (plus epoch 0 when include_initial). Uses its own RNG stream,
/// so training is not perturbed.
class VolumeTracker {
 public:
  VolumeTracker(const Dataset& data, TrackOptions opts);

  void observe(std::size_t epoch, const NetworkParams& params);
  std::function<void(std::size_t, const NetworkParams&)> hook();
  const std::vector<TrackedVolume>& series() const { return series_; }

 private:
  const Dataset* data_;
  TrackOptions opts_;
  std::vector<TrackedVolume> series_;
};

std::string volume_report_to_json(const VolumeReport& report);

}  // namespace weightvol
