#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "weightvol/analysis.hpp"
#include "weightvol/checkpoint.hpp"
#include "weightvol/csv.hpp"
#include "weightvol/experiment.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace weightvol;

namespace {

int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::ConfigError:
    case ErrorKind::ParseError:
    case ErrorKind::InvalidArgument:
    case ErrorKind::DatasetNotFound:
    case ErrorKind::BadMagic:
    case ErrorKind::TruncatedFile:
    case ErrorKind::CountMismatch:
    case ErrorKind::DegenerateTarget:
      return 2;
    default:
      return 1;
  }
}

void report_error(std::string_view kind, const std::string& message) {
  std::cerr << json({{"kind", kind}, {"message", message}}).dump() << "\n";
}

ExperimentConfig load_config(const std::string& path, std::optional<std::uint64_t> seed) {
  if (!fs::exists(path)) throw Error(ErrorKind::ConfigError, "config file not found: " + path);
  ExperimentConfig c = parse_experiment_config(read_text(path));
  if (seed) {
    c.seed = *seed;
    c.train.seed = *seed;
  }
  return c;
}

fs::path output_dir(const std::string& flag, const ExperimentConfig& c) { return flag.empty() ? fs::path(c.output_dir) : fs::path(flag); }

std::size_t resolve_workers(std::optional<std::size_t> flag) {
  if (flag) return std::max<std::size_t>(1, *flag);
  if (const char* env = std::getenv("WEIGHTVOL_WORKERS")) {
    try {
      const long v = std::stol(env);
      if (v >= 1) return static_cast<std::size_t>(v);
    } catch (const std::exception&) {
    }
    throw Error(ErrorKind::ConfigError, std::string("WEIGHTVOL_WORKERS must be a positive integer, got '") + env + "'");
  }
  return 1;
}

void print_summary(const json& j) { std::cout << j.dump(1) << "\n"; }

int cmd_train(const std::string& config_path, const std::string& out, std::optional<std::uint64_t> seed) {
  const ExperimentConfig c = load_config(config_path, seed);
  const DatasetPair data = load_datasets(c.dataset);
  const auto layers = build_layers(c.architecture, data.train.dim(), data.train.class_count);
  TrackOptions track;
  track.every_k = c.volume.track_every > 0 ? c.volume.track_every : std::max<std::size_t>(c.train.epochs, 1);
  track.kfac = c.volume.kfac;
  track.seed = derive_seed(c.seed, 0x7ac4);
  const NoiseRunResult r = train_with_noise(c.train, c.noise, data.train, &data.test, layers, track);
  const fs::path dir = output_dir(out, c);
  fs::create_directories(dir);
  write_text(dir / "config.json", experiment_config_to_json(c));
  save_checkpoint({r.train.initial, c.seed, 0}, dir / "checkpoint_initial.json");
  save_checkpoint({r.train.final, c.seed, r.train.history.size()}, dir / "checkpoint_final.json");
  write_text(dir / "history.csv", history_csv(r.train.history));
  json summary = {{"output_dir", dir.string()}, {"epochs", r.train.history.size()}};
  if (!r.train.history.empty()) {
    summary["train_loss"] = r.train.history.back().train_loss;
    summary["test_loss"] = r.train.history.back().test_loss;
    summary["test_accuracy"] = r.train.history.back().test_accuracy;
  }
  print_summary(summary);
  return 0;
}

int cmd_volume(const std::string& config_path, const std::string& out, std::optional<std::uint64_t> seed,
               const std::string& checkpoint) {
  const ExperimentConfig c = load_config(config_path, seed);
  const DatasetPair data = load_datasets(c.dataset);
  NetworkParams params;
  if (!checkpoint.empty()) {
    if (!fs::exists(checkpoint)) throw Error(ErrorKind::ConfigError, "checkpoint not found: " + checkpoint);
    params = load_checkpoint(checkpoint).params;
  } else {
    const auto layers = build_layers(c.architecture, data.train.dim(), data.train.class_count);
    params = train(c.train, data.train, &data.test, layers).final;
  }
  Rng kfac_rng(derive_seed(c.seed, 0xfac));
  const VolumeReport laplace = laplace_volume(kfac_factors(params, data.train, c.volume.kfac, kfac_rng));
  Rng sample_rng(derive_seed(c.seed, 0x5a3b1));
  const PosteriorSamples samples = collect_posterior_samples(params, data.train, c.volume.sampling, sample_rng);
  const VolumeReport sampling = sampling_volume(samples, c.volume.subsets, sample_rng);
  const fs::path dir = output_dir(out, c);
  fs::create_directories(dir);
  write_text(dir / "volume_laplace.json", volume_report_to_json(laplace));
  write_text(dir / "volume_sampling.json", volume_report_to_json(sampling));
  print_summary({{"laplace_mean_per_dim_vol", std::exp(laplace.mean_log_per_dim())},
                 {"sampling_mean_per_dim_vol", std::exp(sampling.mean_log_per_dim())},
                 {"samples_accepted", samples.accepted},
                 {"samples_rejected", samples.rejected}});
  return 0;
}

int cmd_measures(const std::string& config_path, const std::string& out, std::optional<std::uint64_t> seed) {
  const ExperimentConfig c = load_config(config_path, seed);
  const fs::path dir = output_dir(out, c);
  const ExperimentOutcome o = run_experiment(c, dir);
  json m = json::parse(measure_report_to_json(o.measures, o.gg_loss, o.gg_acc));
  m["output_dir"] = dir.string();
  print_summary(m);
  return 0;
}

int cmd_grid(const std::string& config_path, const std::string& out, std::optional<std::uint64_t> seed,
             std::optional<std::size_t> workers, bool resume) {
  if (!fs::exists(config_path)) throw Error(ErrorKind::ConfigError, "grid file not found: " + config_path);
  GridSpec g = parse_grid_spec(read_text(config_path));
  if (seed) g.seeds = {*seed};
  const fs::path dir = out.empty() ? fs::path(g.base.output_dir) : fs::path(out);
  const GridSummary s = run_grid(g, dir, resolve_workers(workers), resume);
  print_summary({{"records", (dir / "records.csv").string()},
                 {"total", s.total},
                 {"ran", s.ran},
                 {"skipped", s.skipped},
                 {"failed", s.failed}});
  return s.failed == 0 ? 0 : 1;
}

int cmd_analyze(const std::string& records, const std::string& out, const std::vector<std::string>& registry) {
  const fs::path dir = out.empty() ? fs::path(records).parent_path() : fs::path(out);
  const MIReport r = analyze_records(records, dir.empty() ? fs::path(".") : dir, registry);
  std::cout << mi_report_csv(r);
  return 0;
}

int cmd_lemma(const LemmaParams& p, const std::string& out) {
  const LemmaReport r = lemma2_montecarlo(p);
  const json doc = {{"rho", p.rho},
                    {"mu", {p.mu[0], p.mu[1]}},
                    {"var", {p.var[0], p.var[1]}},
                    {"q", p.q},
                    {"n_draws", p.n_draws},
                    {"cov_preserved", r.cov_preserved},
                    {"var_formula", r.var_formula},
                    {"corr_bound", r.corr_bound},
                    {"weight_corr_bound", r.weight_corr_bound},
                    {"cov_expected", r.cov_expected},
                    {"cov_dropout", r.cov_dropout},
                    {"var_expected", r.var_expected},
                    {"var_dropout", r.var_dropout},
                    {"corr_bound_value", r.corr_bound_value},
                    {"corr_dropout", r.corr_dropout},
                    {"weight_corr_plain", r.weight_corr_plain},
                    {"weight_corr_dropout", r.weight_corr_dropout}};
  if (!out.empty()) {
    fs::create_directories(out);
    write_text(fs::path(out) / "lemma_check.json", doc.dump(1) + "\n");
  }
  print_summary(doc);
  return 0;
}

int cmd_noise_train(const std::string& config_path, const std::string& out, std::optional<std::uint64_t> seed) {
  const ExperimentConfig c = load_config(config_path, seed);
  const DatasetPair data = load_datasets(c.dataset);
  const auto layers = build_layers(c.architecture, data.train.dim(), data.train.class_count);
  TrackOptions track;
  track.every_k = c.volume.track_every > 0 ? c.volume.track_every : std::max<std::size_t>(c.train.epochs, 1);
  track.kfac = c.volume.kfac;
  track.seed = derive_seed(c.seed, 0x7ac4);
  const NoiseRunResult r = train_with_noise(c.train, c.noise, data.train, &data.test, layers, track);

  const fs::path dir = output_dir(out, c);
  fs::create_directories(dir);
  write_text(dir / "config.json", experiment_config_to_json(c));
  save_checkpoint({r.train.final, c.seed, r.train.history.size()}, dir / "checkpoint_final.json");
  save_checkpoint({r.train.initial, c.seed, 0}, dir / "checkpoint_initial.json");
  write_text(dir / "history.csv", history_csv(r.train.history));
  json trail = json::array();
  for (const TrackedVolume& tv : r.volume_trail) {
    trail.push_back({{"epoch", tv.epoch}, {"report", json::parse(volume_report_to_json(tv.report))}});
  }
  write_text(dir / "volume_trail.json", json({{"schema_version", 1}, {"trail", trail}}).dump(1) + "\n");
  json summary = {{"mode", std::string(noise_mode_name(c.noise.mode))},
                  {"lambda1", c.noise.lambda1},
                  {"lambda2", c.noise.lambda2},
                  {"lambda3", c.noise.lambda3},
                  {"output_dir", dir.string()}};
  if (!r.train.history.empty()) summary["test_loss"] = r.train.history.back().test_loss;
  if (!r.volume_trail.empty()) {
    summary["final_mean_per_dim_vol"] = std::exp(r.volume_trail.back().report.mean_log_per_dim());
  }
  write_text(dir / "noise_summary.json", summary.dump(1) + "\n");
  print_summary(summary);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Weight-volume, PAC-Bayes and dropout experiment runner"};
  app.require_subcommand(1);

  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> workers;
  bool resume = false;
  std::string checkpoint;
  std::string records;
  std::vector<std::string> registry;
  LemmaParams lemma;
  std::vector<double> lemma_mu = {0.0, 0.0};
  std::vector<double> lemma_var = {1.0, 1.0};

  auto add_common = [&](CLI::App* sub, bool needs_config) {
    auto* opt = sub->add_option("--config", config, "JSON config file");
    if (needs_config) opt->required();
    sub->add_option("--out", out, "Output directory");
    sub->add_option("--seed", seed, "Override the run seed");
  };

  auto* train_cmd = app.add_subcommand("train", "Train one network and save checkpoints");
  add_common(train_cmd, true);
  auto* volume_cmd = app.add_subcommand("volume", "Estimate weight volume with both estimators");
  add_common(volume_cmd, true);
  volume_cmd->add_option("--checkpoint", checkpoint, "Use a saved checkpoint instead of training");
  auto* measures_cmd = app.add_subcommand("measures", "Full run: train, volumes and complexity measures");
  add_common(measures_cmd, true);
  auto* grid_cmd = app.add_subcommand("grid", "Run a hyperparameter grid");
  add_common(grid_cmd, true);
  grid_cmd->add_option("--workers", workers, "Parallel cells (default WEIGHTVOL_WORKERS or 1)");
  grid_cmd->add_flag("--resume", resume, "Skip cells that already have a completed row");
  auto* analyze_cmd = app.add_subcommand("analyze", "Mutual-information and sign-error report from records.csv");
  analyze_cmd->add_option("--records", records, "records.csv produced by grid")->required();
  analyze_cmd->add_option("--out", out, "Output directory (default: next to records)");
  analyze_cmd->add_option("--registry", registry, "Hyperparameters to condition on")->delimiter(',');
  auto* lemma_cmd = app.add_subcommand("lemma-check", "Monte-Carlo check of the dropout covariance algebra");
  lemma_cmd->add_option("--rho", lemma.rho, "Correlation of the update pair");
  lemma_cmd->add_option("--q", lemma.q, "Dropout rate");
  lemma_cmd->add_option("--mu", lemma_mu, "Means of the pair")->expected(2);
  lemma_cmd->add_option("--var", lemma_var, "Variances of the pair")->expected(2);
  lemma_cmd->add_option("--draws", lemma.n_draws, "Monte-Carlo draws");
  lemma_cmd->add_option("--seed", lemma.seed, "RNG seed");
  lemma_cmd->add_option("--out", out, "Write lemma_check.json here");
  auto* noise_cmd = app.add_subcommand("noise-train", "Train with disentanglement or weight noise");
  add_common(noise_cmd, true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*train_cmd) return cmd_train(config, out, seed);
    if (*volume_cmd) return cmd_volume(config, out, seed, checkpoint);
    if (*measures_cmd) return cmd_measures(config, out, seed);
    if (*grid_cmd) return cmd_grid(config, out, seed, workers, resume);
    if (*analyze_cmd) return cmd_analyze(records, out, registry);
    if (*lemma_cmd) {
      lemma.mu[0] = lemma_mu[0];
      lemma.mu[1] = lemma_mu[1];
      lemma.var[0] = lemma_var[0];
      lemma.var[1] = lemma_var[1];
      return cmd_lemma(lemma, out);
    }
    if (*noise_cmd) return cmd_noise_train(config, out, seed);
  } catch (const Error& e) {
    report_error(error_kind_name(e.kind()), e.what());
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    report_error("Internal", e.what());
    return 1;
  }
  return 0;
}
