#include "weightvol/measures.hpp"

#include <cmath>
#include <limits>

#include <json.hpp>

#include "weightvol/csv.hpp"

namespace weightvol {

SharpnessResult search_sharpness(const std::function<double(double)>& deviation, const SharpnessOptions& opts) {
  if (!(opts.epsilon > 0.0)) throw Error(ErrorKind::InvalidArgument, "sharpness epsilon must be > 0");
  if (!(opts.sigma_min > 0.0 && opts.sigma_max > opts.sigma_min)) {
    throw Error(ErrorKind::InvalidArgument, "sharpness sigma bracket is invalid");
  }
  SharpnessResult r;
  r.epsilon = opts.epsilon;
  r.mc_draws = opts.mc_draws;

  const double d_min = deviation(opts.sigma_min);
  if (!(d_min <= opts.epsilon)) {
    throw Error(ErrorKind::OutOfRange, "loss deviation " + std::to_string(d_min) + " at sigma " +
                                           std::to_string(opts.sigma_min) + " already exceeds epsilon");
  }
  const double d_max = deviation(opts.sigma_max);
  if (d_max <= opts.epsilon) {
    r.sigma = opts.sigma_max;
    r.deviation_lo = d_max;
    r.deviation_hi = std::numeric_limits<double>::infinity();
    r.hit_upper = true;
    return r;
  }
  double lo = std::log(opts.sigma_min);
  double hi = std::log(opts.sigma_max);
  double dev_lo = d_min;
  double dev_hi = d_max;
  for (int i = 0; i < opts.iterations; ++i) {
    const double mid = 0.5 * (lo + hi);
    const double d = deviation(std::exp(mid));
    if (d <= opts.epsilon) {
      lo = mid;
      dev_lo = d;
    } else {
      hi = mid;
      dev_hi = d;
    }
    ++r.iterations;
  }
  r.sigma = std::exp(lo);
  r.deviation_lo = dev_lo;
  r.deviation_hi = dev_hi;
  return r;
}

SharpnessResult sharpness_sigma(const NetworkParams& params, const Dataset& data, const SharpnessOptions& opts,
                                std::uint64_t seed) {
  if (opts.mc_draws == 0) throw Error(ErrorKind::InvalidArgument, "mc_draws must be >= 1");
  const Dataset eval = head(data, opts.eval_samples);
  const double base = evaluate(params, eval).loss;
  const Vector w0 = params.flatten();

  Rng rng(derive_seed(seed, 0x54a7));
  std::vector<Vector> directions(opts.mc_draws, Vector(w0.size()));
  for (Vector& z : directions)
    for (double& v : z) v = rng.normal();

  NetworkParams probe = params;
  Vector w(w0.size());
  auto deviation = [&](double sigma) {
    double worst = 0.0;
    for (const Vector& z : directions) {
      for (std::size_t i = 0; i < w.size(); ++i) w[i] = w0[i] + sigma * z[i];
      probe.assign_flat(w);
      const double loss = evaluate(probe, eval).loss;
      const double d = std::isfinite(loss) ? std::abs(loss - base) : std::numeric_limits<double>::infinity();
      worst = std::max(worst, d);
    }
    return worst;
  };
  return search_sharpness(deviation, opts);
}

double path_norm(const NetworkParams& params) {
  if (params.layers.empty()) return 0.0;
  Vector v(params.layers.front().in_dim, 1.0);
  for (const Matrix& w : params.weights) {
    Vector next(w.rows(), 0.0);
    for (std::size_t r = 0; r < w.rows(); ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < w.cols(); ++c) s += w(r, c) * w(r, c) * v[c];
      next[r] = s;
    }
    v = std::move(next);
  }
  double total = 0.0;
  for (double x : v) total += x;
  return total;
}

const std::vector<std::string>& measure_names() {
  static const std::vector<std::string> names = {"frob", "spectral", "param", "path",
                                                 "sharp_alpha", "pac_sharp", "pac_s_laplace", "pac_s_sampling"};
  return names;
}

double measure_value(const MeasureReport& r, std::string_view name) {
  if (name == "frob") return r.frob_distance;
  if (name == "spectral") return r.spectral_norm;
  if (name == "param") return r.parameter_norm;
  if (name == "path") return r.path_norm;
  if (name == "sharp_alpha") return r.sharpness_alpha;
  if (name == "pac_sharp") return r.pac_sharpness;
  if (name == "pac_s_laplace") return r.pac_s_laplace;
  if (name == "pac_s_sampling") return r.pac_s_sampling;
  if (name == "sigma") return r.sigma;
  throw Error(ErrorKind::InvalidArgument, "unknown measure '" + std::string(name) + "'");
}

namespace {

double volume_term(const VolumeReport& report, const NetworkParams& params, const char* which) {
  if (report.layers.size() != params.layer_count()) {
    throw Error(ErrorKind::MissingVolume, std::string(which) + " volume report covers " +
                                              std::to_string(report.layers.size()) + " of " +
                                              std::to_string(params.layer_count()) + " layers");
  }
  double s = 0.0;
  for (std::size_t l = 0; l < report.layers.size(); ++l) {
    const LayerVolume& lv = report.layers[l];
    if (lv.layer != l || lv.dim != params.weights[l].size() || !std::isfinite(lv.log_vol)) {
      throw Error(ErrorKind::MissingVolume, std::string(which) + " volume report lacks layer " + std::to_string(l));
    }
    s += -lv.log_vol;
  }
  return 0.5 * s;
}

}  // namespace

MeasureReport complexity_measures(const NetworkParams& final_params, const NetworkParams& initial_params,
                                  const SharpnessResult& sharpness, const VolumeReport& vol_laplace,
                                  const VolumeReport& vol_sampling) {
  if (final_params.layers != initial_params.layers) {
    throw Error(ErrorKind::ShapeMismatch, "final and initial networks differ in architecture");
  }
  if (!(sharpness.sigma > 0.0)) throw Error(ErrorKind::InvalidArgument, "sharpness sigma must be > 0");
  MeasureReport r;
  for (std::size_t l = 0; l < final_params.layer_count(); ++l) {
    const Matrix delta = final_params.weights[l] - initial_params.weights[l];
    r.frob_distance += frobenius_norm_sq(delta);
    const double s = spectral_norm(delta);
    r.spectral_norm += s * s;
    r.parameter_norm += frobenius_norm_sq(final_params.weights[l]);
    if (l + 1 < final_params.layer_count() && final_params.layers[l].activation == Activation::tanh) {
      r.path_norm_heuristic = true;
    }
  }
  r.path_norm = path_norm(final_params);
  r.sigma = sharpness.sigma;
  const double s2 = sharpness.sigma * sharpness.sigma;
  r.sharpness_alpha = 1.0 / s2;
  r.pac_sharpness = r.frob_distance / (2.0 * s2);
  r.pac_s_laplace = r.pac_sharpness + volume_term(vol_laplace, final_params, "laplace");
  r.pac_s_sampling = r.pac_sharpness + volume_term(vol_sampling, final_params, "sampling");
  return r;
}

std::string measure_csv_header() {
  return "config_id,frob,spectral,param,path,sharp_alpha,pac_sharp,pac_s_laplace,pac_s_sampling,sigma,gg_loss,gg_acc";
}

std::string measure_csv_row(const std::string& config_id, const MeasureReport& r, double gg_loss, double gg_acc) {
  std::vector<std::string> f = {config_id};
  for (const std::string& name : measure_names()) f.push_back(format_double(measure_value(r, name)));
  f.push_back(format_double(r.sigma));
  f.push_back(format_double(gg_loss));
  f.push_back(format_double(gg_acc));
  return join_csv(f);
}

std::string measure_report_to_json(const MeasureReport& r, double gg_loss, double gg_acc) {
  nlohmann::json doc = {{"schema_version", 1}};
  for (const std::string& name : measure_names()) doc[name] = measure_value(r, name);
  doc["sigma"] = r.sigma;
  doc["gg_loss"] = gg_loss;
  doc["gg_acc"] = gg_acc;
  doc["sharp_alpha_definition"] = "1/sigma^2";
  doc["path_norm_heuristic"] = r.path_norm_heuristic;
  return doc.dump(1) + "\n";
}

}  // namespace weightvol
