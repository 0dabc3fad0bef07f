#include "weightvol/volume.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <json.hpp>

#include "weightvol/csv.hpp"

namespace weightvol {

std::string_view volume_method_name(VolumeMethod m) {
  return m == VolumeMethod::sampling ? "sampling" : "laplace";
}

double VolumeReport::mean_log_per_dim() const {
  if (layers.empty()) return 0.0;
  double s = 0.0;
  for (const LayerVolume& l : layers) s += std::log(l.per_dim_vol);
  return s / static_cast<double>(layers.size());
}

double VolumeReport::total_log_vol() const {
  double s = 0.0;
  for (const LayerVolume& l : layers) s += l.log_vol;
  return s;
}

PosteriorSamples collect_posterior_samples(const NetworkParams& params, const Dataset& data,
                                           const SamplingOptions& opts, Rng& rng) {
  if (!(opts.epsilon > 0.0)) throw Error(ErrorKind::InvalidArgument, "sampling epsilon must be > 0");
  if (!(opts.perturb_std >= 0.0)) throw Error(ErrorKind::InvalidArgument, "perturb_std must be >= 0");
  if (!(opts.ft_lr >= 0.0)) throw Error(ErrorKind::InvalidArgument, "ft_lr must be >= 0");
  validate_dataset(data);

  PosteriorSamples out;
  out.layers = params.layers;
  out.per_layer.resize(params.layer_count());
  out.epsilon = opts.epsilon;
  out.reference_loss = evaluate(params, data).loss;

  NetworkParams current = params;
  MomentumState state;
  for (std::size_t it = 0; it < opts.n_iters; ++it) {
    for (Matrix& w : current.weights)
      for (double& v : w.data()) v += opts.perturb_std * rng.normal();
    EpochOptions eo;
    eo.batch_size = opts.batch_size;
    eo.learning_rate = opts.ft_lr;
    eo.dropout = opts.dropout;
    eo.shuffle_seed = rng.next_u64();
    eo.epoch = it;
    double loss = 0.0;
    try {
      if (opts.ft_lr > 0.0) train_epoch(current, state, data, eo, rng);
      loss = evaluate(current, data).loss;
    } catch (const TrainingDiverged&) {
      out.rejected += opts.n_iters - it;
      break;
    }
    if (std::isfinite(loss) && std::abs(loss - out.reference_loss) <= opts.epsilon) {
      ++out.accepted;
      for (std::size_t l = 0; l < current.layer_count(); ++l) out.per_layer[l].push_back(current.weights[l].data());
    } else {
      ++out.rejected;
    }
  }
  if (out.accepted < std::max<std::size_t>(opts.min_accepted, 1)) {
    throw Error(ErrorKind::TooFewSamples, "sampling accepted " + std::to_string(out.accepted) + " of " +
                                              std::to_string(opts.n_iters) + " snapshots (epsilon " +
                                              format_double(opts.epsilon) + ")");
  }
  return out;
}

double subset_log_volume_per_dim(const Matrix& samples, const SubsetOptions& opts, Rng& rng, std::size_t* skipped) {
  const std::size_t n = samples.rows();
  const std::size_t dim = samples.cols();
  if (opts.subset_size == 0 || opts.subset_count == 0) {
    throw Error(ErrorKind::InvalidArgument, "subset size and count must be >= 1");
  }
  if (!(opts.shrinkage >= 0.0 && opts.shrinkage <= 1.0)) {
    throw Error(ErrorKind::InvalidArgument, "shrinkage must lie in [0,1]");
  }
  const std::size_t k = std::min(opts.subset_size, dim);
  if (n < 3 * k || n < 2) {
    throw Error(ErrorKind::TooFewSamples, "need at least " + std::to_string(std::max<std::size_t>(3 * k, 2)) +
                                              " samples, have " + std::to_string(n));
  }
  if (skipped) *skipped = 0;
  if (k == 1) return 0.0;

  const std::size_t rounds = k == dim ? 1 : opts.subset_count;
  std::vector<std::size_t> coords(dim);
  double sum = 0.0;
  std::size_t used = 0;
  Matrix sub(n, k);
  for (std::size_t r = 0; r < rounds; ++r) {
    std::iota(coords.begin(), coords.end(), 0);
    for (std::size_t i = 0; i < k; ++i) {
      const std::size_t j = i + static_cast<std::size_t>(rng.next_u64() % (dim - i));
      std::swap(coords[i], coords[j]);
    }
    std::sort(coords.begin(), coords.begin() + static_cast<std::ptrdiff_t>(k));
    for (std::size_t s = 0; s < n; ++s)
      for (std::size_t c = 0; c < k; ++c) sub(s, c) = samples(s, coords[c]);
    try {
      const Matrix cov = shrink_covariance(sample_covariance(sub), opts.shrinkage);
      sum += normalized_log_volume(cov).log_vol / static_cast<double>(k);
      ++used;
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::NotPositiveDefinite && e.kind() != ErrorKind::ZeroVariance) throw;
      if (skipped) ++*skipped;
    }
  }
  if (used == 0) throw Error(ErrorKind::NotPositiveDefinite, "every coordinate subset was degenerate");
  return sum / static_cast<double>(used);
}

VolumeReport sampling_volume(const PosteriorSamples& samples, const SubsetOptions& opts, Rng& rng) {
  VolumeReport report;
  report.method = VolumeMethod::sampling;
  for (std::size_t l = 0; l < samples.per_layer.size(); ++l) {
    const auto& snaps = samples.per_layer[l];
    if (snaps.empty()) throw Error(ErrorKind::TooFewSamples, "no samples for layer " + std::to_string(l));
    const std::size_t dim = snaps.front().size();
    Matrix m(snaps.size(), dim);
    for (std::size_t s = 0; s < snaps.size(); ++s) std::copy(snaps[s].begin(), snaps[s].end(), m.row(s).begin());
    LayerVolume lv;
    lv.layer = l;
    lv.dim = dim;
    const double per_dim = subset_log_volume_per_dim(m, opts, rng, &lv.skipped_subsets);
    lv.log_vol = per_dim * static_cast<double>(dim);
    lv.per_dim_vol = std::exp(per_dim);
    lv.subset_size = std::min(opts.subset_size, dim);
    lv.subset_count = opts.subset_count;
    report.layers.push_back(lv);
  }
  return report;
}

void accumulate_factors(const NetworkParams& params, const ForwardTrace& trace, std::vector<Matrix>& a_sum,
                        std::vector<Matrix>& h_sum) {
  const std::size_t n_layers = params.layer_count();
  if (a_sum.empty()) {
    for (const LayerSpec& s : params.layers) {
      a_sum.emplace_back(s.in_dim, s.in_dim);
      h_sum.emplace_back(s.out_dim, s.out_dim);
    }
  }
  if (trace.inputs.size() != n_layers || trace.pre.size() != n_layers) {
    throw Error(ErrorKind::StaleTrace, "accumulate_factors: trace does not match network");
  }
  for (std::size_t l = 0; l < n_layers; ++l) a_sum[l] += matmul_tn(trace.inputs[l], trace.inputs[l]);

  const bool masked = !trace.masks.empty();
  const std::size_t rows = trace.probs.rows();
  const std::size_t k = trace.probs.cols();
  for (std::size_t i = 0; i < rows; ++i) {
    const auto p = trace.probs.row(i);
    Matrix hl(k, k);
    for (std::size_t r = 0; r < k; ++r) {
      for (std::size_t c = 0; c < k; ++c) hl(r, c) = -p[r] * p[c];
      hl(r, r) += p[r];
    }
    h_sum[n_layers - 1] += hl;
    for (std::size_t l = n_layers - 1; l > 0; --l) {
      const Matrix& w = params.weights[l];
      Matrix m = matmul_tn(w, matmul(hl, w));
      const Activation act = params.layers[l - 1].activation;
      const auto h = trace.pre[l - 1].row(i);
      Vector b(h.size());
      for (std::size_t j = 0; j < b.size(); ++j) {
        b[j] = activation_derivative(act, h[j]);
        if (masked) b[j] *= trace.masks[l - 1](i, j);
      }
      for (std::size_t r = 0; r < m.rows(); ++r)
        for (std::size_t c = 0; c < m.cols(); ++c) m(r, c) *= b[r] * b[c];
      h_sum[l - 1] += m;
      hl = std::move(m);
    }
  }
}

KroneckerFactors kfac_factors(const NetworkParams& params, const Dataset& data, const KfacOptions& opts, Rng& rng) {
  validate_dataset(data);
  if (data.dim() != params.layers.front().in_dim) throw Error(ErrorKind::ShapeMismatch, "kfac: feature dim mismatch");
  if (!(opts.damping_scale >= 0.0)) throw Error(ErrorKind::InvalidArgument, "damping_scale must be >= 0");
  if (opts.chunk_size == 0) throw Error(ErrorKind::InvalidArgument, "chunk_size must be >= 1");
  bool any_dropout = false;
  for (const LayerSpec& s : params.layers) any_dropout = any_dropout || s.dropout_rate > 0.0;
  const bool use_masks = opts.dropout_enabled && any_dropout;
  const std::size_t draws = use_masks ? std::max<std::size_t>(opts.mask_draws, 1) : 1;

  std::vector<Matrix> a_sum;
  std::vector<Matrix> h_sum;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += opts.chunk_size) {
    const std::size_t end = std::min(data.size(), start + opts.chunk_size);
    idx.resize(end - start);
    std::iota(idx.begin(), idx.end(), start);
    const Dataset chunk = subset(data, idx);
    for (std::size_t d = 0; d < draws; ++d) {
      DropoutMasks masks;
      if (use_masks) masks = sample_dropout_masks(params.layers, chunk.size(), rng);
      const ForwardResult fr = forward(params, chunk.features, chunk.labels, use_masks ? &masks : nullptr);
      accumulate_factors(params, fr.trace, a_sum, h_sum);
    }
  }

  KroneckerFactors f;
  f.damping_scale = opts.damping_scale;
  const double inv = 1.0 / static_cast<double>(data.size() * draws);
  auto finish = [&](Matrix& m) {
    m *= inv;
    m = symmetrized(m);
    const Vector d = m.diag();
    const double lambda = opts.damping_scale * std::accumulate(d.begin(), d.end(), 0.0) / static_cast<double>(d.size());
    for (std::size_t i = 0; i < m.rows(); ++i) m(i, i) += lambda;
    return lambda;
  };
  for (std::size_t l = 0; l < params.layer_count(); ++l) {
    f.damping_a.push_back(finish(a_sum[l]));
    f.damping_h.push_back(finish(h_sum[l]));
    if (l + 1 < params.layer_count() && params.layers[l].activation == Activation::tanh) f.approximate = true;
  }
  f.a = std::move(a_sum);
  f.h = std::move(h_sum);
  return f;
}

KroneckerLogTerms kronecker_log_terms(const Matrix& a, const Matrix& h) {
  const SpdFactorization fa = cholesky_logdet(a);
  const SpdFactorization fh = cholesky_logdet(h);
  const double na = static_cast<double>(a.rows());
  const double nh = static_cast<double>(h.rows());
  double log_diag_a = 0.0;
  for (double v : fa.inverse_diagonal()) log_diag_a += std::log(v);
  double log_diag_h = 0.0;
  for (double v : fh.inverse_diagonal()) log_diag_h += std::log(v);

  KroneckerLogTerms t;
  t.log_det_sigma = -(nh * fa.log_det + na * fh.log_det);
  t.log_diag_prod = nh * log_diag_a + na * log_diag_h;
  t.log_vol = std::min(0.0, t.log_det_sigma - t.log_diag_prod);
  return t;
}

VolumeReport laplace_volume(const KroneckerFactors& factors) {
  if (factors.a.size() != factors.h.size()) throw Error(ErrorKind::ShapeMismatch, "laplace: factor count mismatch");
  VolumeReport report;
  report.method = VolumeMethod::laplace;
  report.damping = factors.damping_scale;
  report.curvature = factors.approximate ? "gauss_newton_approx" : "gauss_newton";
  for (std::size_t l = 0; l < factors.a.size(); ++l) {
    const KroneckerLogTerms t = kronecker_log_terms(factors.a[l], factors.h[l]);
    LayerVolume lv;
    lv.layer = l;
    lv.dim = factors.a[l].rows() * factors.h[l].rows();
    lv.log_vol = t.log_vol;
    lv.per_dim_vol = std::exp(t.log_vol / static_cast<double>(lv.dim));
    report.layers.push_back(lv);
  }
  return report;
}

VolumeTracker::VolumeTracker(const Dataset& data, TrackOptions opts) : data_(&data), opts_(opts) {
  if (opts_.every_k == 0) throw Error(ErrorKind::InvalidArgument, "track every_k must be >= 1");
}

void VolumeTracker::observe(std::size_t epoch, const NetworkParams& params) {
  const bool due = epoch == opts_.total_epochs || (epoch > 0 && epoch % opts_.every_k == 0) ||
                   (epoch == 0 && opts_.include_initial);
  if (!due) return;
  if (!series_.empty() && series_.back().epoch == epoch) return;
  Rng rng(derive_seed(opts_.seed, 0x7a0c0000ULL + epoch));
  series_.push_back({epoch, laplace_volume(kfac_factors(params, *data_, opts_.kfac, rng))});
}

std::function<void(std::size_t, const NetworkParams&)> VolumeTracker::hook() {
  return [this](std::size_t epoch, const NetworkParams& params) { observe(epoch, params); };
}

std::string volume_report_to_json(const VolumeReport& report) {
  nlohmann::json layers = nlohmann::json::array();
  for (const LayerVolume& l : report.layers) {
    nlohmann::json j = {{"layer", l.layer}, {"dim", l.dim}, {"log_vol", l.log_vol}, {"per_dim_vol", l.per_dim_vol}};
    if (l.subset_size) j["k"] = *l.subset_size;
    if (l.subset_count) j["R"] = *l.subset_count;
    if (report.method == VolumeMethod::sampling) j["skipped_subsets"] = l.skipped_subsets;
    layers.push_back(j);
  }
  nlohmann::json doc = {{"schema_version", 1},
                        {"method", std::string(volume_method_name(report.method))},
                        {"damping", report.damping},
                        {"curvature", report.curvature},
                        {"per_layer", layers},
                        {"mean_per_dim_vol", std::exp(report.mean_log_per_dim())}};
  return doc.dump(1) + "\n";
}

}  // namespace weightvol
