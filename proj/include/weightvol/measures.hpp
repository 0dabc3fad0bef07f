#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "weightvol/data.hpp"
#include "weightvol/nn.hpp"
#include "weightvol/volume.hpp"

namespace weightvol {

struct SharpnessOptions {
  double epsilon = 0.05;
  std::size_t mc_draws = 10;
  std::size_t eval_samples = 1000;  // fixed evaluation subset (head of the dataset)
  double sigma_min = 1e-4;
  double sigma_max = 1.0;
  int iterations = 20;
};

struct SharpnessResult {
  double sigma = 0.0;
  double epsilon = 0.0;
  std::size_t mc_draws = 0;
  int iterations = 0;
  double deviation_lo = 0.0;  // deviation(sigma)
  double deviation_hi = 0.0;  // deviation at the upper bracket (infinity if sigma hit sigma_max)
  bool hit_upper = false;
};

/// Bisection on log(sigma) for the largest sigma with deviation(sigma) <= epsilon.
/// Throws OutOfRange when deviation(sigma_min) already exceeds epsilon.
SharpnessResult search_sharpness(const std::function<double(double)>& deviation, const SharpnessOptions& opts);

/// Deviation(sigma) is the max over mc_draws fixed Gaussian directions z of
/// |L(W + sigma z) - L(W)|; the directions are reused for every sigma.
SharpnessResult sharpness_sigma(const NetworkParams& params, const Dataset& data, const SharpnessOptions& opts,
                                std::uint64_t seed);

/// Sum of the outputs of the squared-weight network on an all-ones input,
/// with every activation treated as identity.
double path_norm(const NetworkParams& params);

struct MeasureReport {
  double frob_distance = 0.0;
  double spectral_norm = 0.0;
  double parameter_norm = 0.0;
  double path_norm = 0.0;
  double sharpness_alpha = 0.0;
  double pac_sharpness = 0.0;
  double pac_s_laplace = 0.0;
  double pac_s_sampling = 0.0;
  double sigma = 0.0;
  bool path_norm_heuristic = false;  // tanh layers present
};

/// Names used in CSV headers and by the analysis harness, in column order.
const std::vector<std::string>& measure_names();
double measure_value(const MeasureReport& r, std::string_view name);

/// Throws MissingVolume when a volume report does not cover every layer.
MeasureReport complexity_measures(const NetworkParams& final_params, const NetworkParams& initial_params,
                                  const SharpnessResult& sharpness, const VolumeReport& vol_laplace,
                                  const VolumeReport& vol_sampling);

std::string measure_csv_header();
std::string measure_csv_row(const std::string& config_id, const MeasureReport& r, double gg_loss, double gg_acc);
std::string measure_report_to_json(const MeasureReport& r, double gg_loss, double gg_acc);

}  // namespace weightvol
