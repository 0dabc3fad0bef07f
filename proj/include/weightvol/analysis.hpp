#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "weightvol/data.hpp"
#include "weightvol/measures.hpp"
#include "weightvol/nn.hpp"

namespace weightvol {

/// Hyperparameter names a record may carry.
const std::vector<std::string>& hyperparameter_registry();

struct ExperimentRecord {
  std::string config_id;
  std::uint64_t seed = 0;
  std::map<std::string, std::string> hyperparams;  // canonical text values
  MeasureReport measures;
  double gg_loss = 0.0;
  double gg_acc = 0.0;
};

/// Numeric value for a measure name, "gg_loss", "gg_acc" or a numeric
/// hyperparameter. Throws InvalidArgument for unknown or non-numeric keys.
double record_value(const ExperimentRecord& r, std::string_view key);

inline constexpr double kSignTieThreshold = 1e-12;
int sign_of_difference(double a, double b);

/// Normalized MI I(V_co; V_pa) / H(V_pa) between pairwise sign variables.
/// Throws DegenerateTarget when every target value is equal.
double normalized_mi(const std::vector<ExperimentRecord>& records, std::string_view measure_key,
                     std::string_view target_key);

/// Uniform average over all size-j subsets of `registry` of the normalized MI
/// with gg_loss, restricted to record pairs agreeing on the subset.
double conditional_mi_expectation(const std::vector<ExperimentRecord>& records, std::string_view measure_key,
                                  const std::vector<std::string>& registry, std::size_t j);

/// Fraction of unordered pairs whose measure ordering differs from the
/// gg_loss ordering (three-valued signs).
double average_sign_error(const std::vector<ExperimentRecord>& records, std::string_view measure_key);

struct MIRow {
  std::string measure;
  double mi_dropout = 0.0;
  double mi_gg[3] = {0.0, 0.0, 0.0};
  double sign_error = 0.0;
};

struct MIReport {
  std::vector<MIRow> rows;
  std::vector<std::string> registry;
  std::size_t record_count = 0;
  std::size_t pair_count = 0;
};

/// Registry used when none is given: hyperparameters that vary across the
/// records, excluding dropout_rate.
std::vector<std::string> default_registry(const std::vector<ExperimentRecord>& records);

MIReport mi_report(const std::vector<ExperimentRecord>& records, const std::vector<std::string>& registry);
std::string mi_report_csv(const MIReport& report);
std::string mi_report_json(const MIReport& report);

// ---- Gradient-update correlation ---------------------------------------------

struct ProbeOptions {
  std::size_t layer = 1;
  std::size_t probe_count = 64;
  std::size_t batches_per_probe = 50;
  std::size_t batch_size = 32;
  bool dropout = true;
  std::uint64_t seed = 0;
};

struct GradientCorrelation {
  std::size_t epoch = 0;
  std::vector<std::size_t> coordinates;  // probed flat indices with nonzero variance
  Matrix abs_correlation;
  double mean_offdiag = 0.0;
};

/// Correlation across minibatches of per-minibatch gradients of a fixed set
/// of probe coordinates. Throws TooFewBatches.
GradientCorrelation gradient_update_correlation(const NetworkParams& params, const Dataset& data,
                                                const ProbeOptions& opts);

/// Trains with `config` and probes gradient correlations at `checkpoints`.
std::vector<GradientCorrelation> track_gradient_correlation(const TrainConfig& config, const Dataset& data,
                                                            std::span<const LayerSpec> layers,
                                                            const std::vector<std::size_t>& checkpoints,
                                                            const ProbeOptions& opts);

// ---- Dropout algebra Monte-Carlo ---------------------------------------------

struct LemmaParams {
  double rho = 0.0;
  double mu[2] = {0.0, 0.0};
  double var[2] = {1.0, 1.0};
  double q = 0.0;
  std::size_t n_draws = 1000000;
  std::uint64_t seed = 1;
  double weight_rho = 0.5;  // correlation of the Gaussian weights in the updated-weight check
  double weight_var = 1.0;
};

struct LemmaReport {
  bool cov_preserved = false;
  bool var_formula = false;
  bool corr_bound = false;
  bool weight_corr_bound = false;

  double cov_expected = 0.0;
  double cov_dropout = 0.0;
  double cov_se = 0.0;
  double var_expected = 0.0;
  double var_dropout = 0.0;
  double var_se = 0.0;
  double corr_bound_value = 0.0;
  double corr_dropout = 0.0;
  double corr_se = 0.0;
  double weight_corr_plain = 0.0;
  double weight_corr_dropout = 0.0;
  double weight_corr_se = 0.0;

  bool all() const { return cov_preserved && var_formula && corr_bound && weight_corr_bound; }
};

LemmaReport lemma2_montecarlo(const LemmaParams& p);

}  // namespace weightvol
