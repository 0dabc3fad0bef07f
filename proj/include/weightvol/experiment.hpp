#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "weightvol/analysis.hpp"
#include "weightvol/data.hpp"
#include "weightvol/measures.hpp"
#include "weightvol/nn.hpp"
#include "weightvol/noise.hpp"
#include "weightvol/volume.hpp"

namespace weightvol {

inline constexpr int kConfigSchemaVersion = 1;

struct DatasetSpec {
  std::string kind = "synth";  // "synth" or "idx"
  std::size_t class_count = 10;
  std::size_t dim = 64;
  std::size_t n_per_class = 100;
  std::size_t test_n_per_class = 100;
  double spread = 1.0;
  std::uint64_t seed = 7;
  std::string train_images;
  std::string train_labels;
  std::string test_images;
  std::string test_labels;
  std::optional<std::size_t> limit;
  std::optional<std::size_t> test_limit;
};

struct ArchitectureSpec {
  std::vector<std::size_t> hidden = {32, 16};
  Activation activation = Activation::relu;
  double dropout_rate = 0.0;
};

struct VolumeSettings {
  SamplingOptions sampling;
  SubsetOptions subsets;
  KfacOptions kfac;
  std::size_t track_every = 0;  // 0 disables the per-epoch volume trail
};

struct ExperimentConfig {
  DatasetSpec dataset;
  ArchitectureSpec architecture;
  TrainConfig train;
  NoiseConfig noise;
  VolumeSettings volume;
  SharpnessOptions sharpness;
  std::string output_dir = "out";
  std::uint64_t seed = 1;
};

/// Throws ConfigError on unknown keys, wrong types or a schema mismatch.
ExperimentConfig parse_experiment_config(const std::string& json_text);
std::string experiment_config_to_json(const ExperimentConfig& config);

struct DatasetPair {
  Dataset train;
  Dataset test;
};

DatasetPair load_datasets(const DatasetSpec& spec);
std::vector<LayerSpec> build_layers(const ArchitectureSpec& arch, std::size_t in_dim, std::size_t classes);

struct ExperimentOutcome {
  TrainResult train;
  VolumeReport laplace;
  VolumeReport sampling;
  SharpnessResult sharpness;
  MeasureReport measures;
  std::vector<TrackedVolume> volume_trail;
  std::size_t samples_accepted = 0;
  std::size_t samples_rejected = 0;
  double train_loss = 0.0;
  double test_loss = 0.0;
  double gg_loss = 0.0;
  double gg_acc = 0.0;
};

/// Trains, estimates both volumes and all measures on in-memory data.
ExperimentOutcome evaluate_experiment(const ExperimentConfig& config, const DatasetPair& data);

/// evaluate_experiment plus the on-disk bundle in `out_dir`.
ExperimentOutcome run_experiment(const ExperimentConfig& config, const std::filesystem::path& out_dir,
                                 const std::string& config_id = "run");

std::string history_csv(const History& history);

// ---- Grids --------------------------------------------------------------------

struct GridSpec {
  ExperimentConfig base;
  std::vector<std::pair<std::string, std::vector<std::string>>> axes;  // registry order, canonical text values
  std::vector<std::uint64_t> seeds = {1};
  std::size_t cap = 512;
};

GridSpec parse_grid_spec(const std::string& json_text);

struct GridCell {
  std::string config_id;
  std::uint64_t seed = 0;
  std::map<std::string, std::string> hyperparams;
  ExperimentConfig config;
};

/// Cartesian expansion, first axis slowest, seeds innermost. Throws ConfigError
/// when the expansion exceeds the cap.
std::vector<GridCell> expand_grid(const GridSpec& spec);

std::string records_csv_header();
std::string record_csv_row(const ExperimentRecord& r);
std::vector<ExperimentRecord> parse_records_csv(const std::string& text);

struct GridSummary {
  std::size_t total = 0;
  std::size_t ran = 0;
  std::size_t skipped = 0;
  std::size_t failed = 0;
};

/// Runs every cell (skipping completed ones when `resume`), then merges the
/// per-cell rows in canonical order into out_dir/records.csv.
GridSummary run_grid(const GridSpec& spec, const std::filesystem::path& out_dir, std::size_t workers, bool resume);

/// Reads records.csv and writes mi_report.csv and mi_report.json to out_dir.
MIReport analyze_records(const std::filesystem::path& records_csv, const std::filesystem::path& out_dir,
                         const std::vector<std::string>& registry);

}  // namespace weightvol
