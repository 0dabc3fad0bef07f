#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <sys/wait.h>

#include <json.hpp>

#include "helpers.hpp"
#include "weightvol/checkpoint.hpp"
#include "weightvol/csv.hpp"
#include "weightvol/experiment.hpp"

using namespace weightvol;
using testing::error_kind;
using nlohmann::json;

namespace {

json tiny_config() {
  return json::parse(R"({
    "schema_version": 1,
    "seed": 3,
    "dataset": {"kind": "synth", "class_count": 3, "dim": 6, "n_per_class": 20, "test_n_per_class": 20, "spread": 1.0, "seed": 2},
    "architecture": {"hidden": [8], "activation": "relu", "dropout_rate": 0.0},
    "train": {"epochs": 3, "batch_size": 16, "learning_rate": 0.05, "momentum": 0.9},
    "volume": {"sampling_iters": 20, "epsilon": 0.5, "perturb_std": 0.01, "ft_lr": 0.01,
               "subset_size": 4, "subset_count": 3, "mask_draws": 2},
    "sharpness": {"epsilon": 0.05, "mc_draws": 3, "eval_samples": 60}
  })");
}

json tiny_grid() {
  json g = {{"schema_version", 1}, {"base", tiny_config()}};
  g["axes"] = {{"dropout_rate", {0.0, 0.2}}, {"batch_size", {16, 32}}};
  g["seeds"] = {1};
  return g;
}

int run_cli(const std::string& args, const std::filesystem::path& err_file) {
  const std::string cmd = std::string(WEIGHTVOL_CLI_PATH) + " " + args + " >/dev/null 2>" + err_file.string();
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_CASE("config parsing") {
  const ExperimentConfig c = parse_experiment_config(tiny_config().dump());
  CHECK(c.seed == 3);
  CHECK(c.dataset.class_count == 3);
  CHECK(c.architecture.hidden == std::vector<std::size_t>{8});
  CHECK(c.train.epochs == 3);
  CHECK(c.volume.sampling.n_iters == 20);
  CHECK(c.volume.subsets.subset_size == 4);
  CHECK(c.volume.kfac.mask_draws == 2);
  CHECK(c.sharpness.mc_draws == 3);
  CHECK(parse_experiment_config(experiment_config_to_json(c)).volume.sampling.perturb_std == 0.01);
  CHECK(experiment_config_to_json(parse_experiment_config(experiment_config_to_json(c))) ==
        experiment_config_to_json(c));

  json unknown = tiny_config();
  unknown["train"]["epoch"] = 3;
  CHECK(error_kind([&] { parse_experiment_config(unknown.dump()); }) == ErrorKind::ConfigError);
  json schema = tiny_config();
  schema["schema_version"] = 2;
  CHECK(error_kind([&] { parse_experiment_config(schema.dump()); }) == ErrorKind::ConfigError);
  json typed = tiny_config();
  typed["train"]["epochs"] = "three";
  CHECK(error_kind([&] { parse_experiment_config(typed.dump()); }) == ErrorKind::ConfigError);
  CHECK(error_kind([] { parse_experiment_config("{"); }).has_value());
}

TEST_CASE("grid expansion") {
  const GridSpec g = parse_grid_spec(tiny_grid().dump());
  const auto cells = expand_grid(g);
  REQUIRE(cells.size() == 4);
  CHECK(cells[0].config_id == "c0000");
  CHECK(cells[0].hyperparams.at("dropout_rate") == "0");
  CHECK(cells[1].hyperparams.at("batch_size") == "32");
  CHECK(cells[2].hyperparams.at("dropout_rate") == "0.2");
  CHECK(cells[2].config.architecture.dropout_rate == 0.2);
  CHECK(cells[3].config.train.batch_size == 32);

  json depth = tiny_grid();
  depth["axes"] = {{"depth", {2, 4}}, {"width", {0.5}}};
  depth["seeds"] = {1, 2};
  const auto dc = expand_grid(parse_grid_spec(depth.dump()));
  REQUIRE(dc.size() == 4);
  CHECK(dc[0].seed == 1);
  CHECK(dc[1].seed == 2);
  CHECK(dc[1].config_id == "c0000");
  CHECK(dc[0].config.architecture.hidden == std::vector<std::size_t>{4});
  CHECK(dc[2].config.architecture.hidden == std::vector<std::size_t>{4, 4, 4});

  json big = tiny_grid();
  big["axes"] = {{"learning_rate", json::array()}};
  CHECK(error_kind([&] { parse_grid_spec(big.dump()); }) == ErrorKind::ConfigError);
  json capped = tiny_grid();
  capped["cap"] = 3;
  CHECK(error_kind([&] { expand_grid(parse_grid_spec(capped.dump())); }) == ErrorKind::ConfigError);
  json bad_axis = tiny_grid();
  bad_axis["axes"]["momentum"] = {0.5};
  CHECK(error_kind([&] { parse_grid_spec(bad_axis.dump()); }) == ErrorKind::ConfigError);
}

TEST_CASE("grid refused above the cap before any training") {
  json g = tiny_grid();
  g["axes"] = {{"learning_rate", json::array()}};
  std::vector<double> lrs;
  for (int i = 0; i < 600; ++i) lrs.push_back(0.001 * (i + 1));
  g["axes"]["learning_rate"] = lrs;
  const auto dir = testing::temp_dir("grid_cap");
  CHECK(error_kind([&] { run_grid(parse_grid_spec(g.dump()), dir, 1, false); }) == ErrorKind::ConfigError);
  CHECK_FALSE(std::filesystem::exists(dir / "records.csv"));
}

TEST_CASE("experiment bundle") {
  const auto dir = testing::temp_dir("bundle");
  const ExperimentConfig c = parse_experiment_config(tiny_config().dump());
  const ExperimentOutcome o = run_experiment(c, dir / "a");
  for (const char* f : {"config.json", "checkpoint_initial.json", "checkpoint_final.json", "history.csv",
                        "volume_laplace.json", "volume_sampling.json", "measures.csv", "measures.json"}) {
    CHECK(std::filesystem::exists(dir / "a" / f));
  }
  CHECK(load_checkpoint(dir / "a" / "checkpoint_final.json").params == o.train.final);
  CHECK(load_checkpoint(dir / "a" / "checkpoint_initial.json").params == o.train.initial);
  CHECK(parse_experiment_config(read_text(dir / "a" / "config.json")).seed == c.seed);
  const CsvTable hist = read_csv(dir / "a" / "history.csv");
  CHECK(hist.rows.size() == 3);
  const json vs = json::parse(read_text(dir / "a" / "volume_sampling.json"));
  CHECK(vs["method"] == "sampling");
  CHECK(vs["samples_accepted"].get<std::size_t>() + vs["samples_rejected"].get<std::size_t>() == 20);
  const json vl = json::parse(read_text(dir / "a" / "volume_laplace.json"));
  CHECK(vl["per_layer"].size() == 2);
  CHECK(o.gg_loss == doctest::Approx(o.test_loss - o.train_loss));

  run_experiment(c, dir / "b");
  CHECK(read_text(dir / "a" / "measures.csv") == read_text(dir / "b" / "measures.csv"));
  CHECK(read_text(dir / "a" / "checkpoint_final.json") == read_text(dir / "b" / "checkpoint_final.json"));
}

TEST_CASE("grid run, resume and analysis") {
  const GridSpec g = parse_grid_spec(tiny_grid().dump());
  const auto full = testing::temp_dir("grid_full");
  const GridSummary s = run_grid(g, full, 2, false);
  CHECK(s.total == 4);
  CHECK(s.ran == 4);
  CHECK(s.failed == 0);
  const std::string records = read_text(full / "records.csv");
  const auto parsed = parse_records_csv(records);
  REQUIRE(parsed.size() == 4);
  CHECK(parsed[2].hyperparams.at("dropout_rate") == "0.2");
  std::string rebuilt = records_csv_header() + "\n";
  for (const ExperimentRecord& r : parsed) rebuilt += record_csv_row(r) + "\n";
  CHECK(rebuilt == records);

  // Interrupted after two cells: the rest is run, the first two are reused.
  const auto part = testing::temp_dir("grid_resume");
  run_grid(g, part, 1, false);
  std::filesystem::remove(part / "cells" / "c0002_s1.csv");
  std::filesystem::remove(part / "cells" / "c0003_s1.csv");
  std::filesystem::remove(part / "records.csv");
  const GridSummary r = run_grid(g, part, 1, true);
  CHECK(r.skipped == 2);
  CHECK(r.ran == 2);
  CHECK(read_text(part / "records.csv") == records);

  const MIReport rep = analyze_records(full / "records.csv", full, {"batch_size"});
  CHECK(std::filesystem::exists(full / "mi_report.csv"));
  CHECK(std::filesystem::exists(full / "mi_report.json"));
  CHECK(rep.record_count == 4);
  const json j = json::parse(read_text(full / "mi_report.json"));
  CHECK(j["schema_version"] == 1);

  const auto one = testing::temp_dir("grid_one_row");
  write_text(one / "records.csv", records_csv_header() + "\n" + record_csv_row(parsed[0]) + "\n");
  CHECK(error_kind([&] { analyze_records(one / "records.csv", one, {}); }).has_value());
}

TEST_CASE("grid tolerates failing cells") {
  json g = tiny_grid();
  g["base"]["volume"]["epsilon"] = 1e-9;
  g["base"]["volume"]["min_accepted"] = 5;
  g["axes"] = {{"batch_size", {16}}};
  const auto dir = testing::temp_dir("grid_fail");
  const GridSummary s = run_grid(parse_grid_spec(g.dump()), dir, 1, false);
  CHECK(s.failed == 1);
  const json err = json::parse(read_text(dir / "cells" / "c0000_s1.error.json"));
  CHECK(err["kind"] == "TooFewSamples");
  CHECK(read_text(dir / "records.csv") == records_csv_header() + "\n");
}

TEST_CASE("cli exit codes") {
  const auto dir = testing::temp_dir("cli");
  json missing = tiny_config();
  missing["dataset"] = {{"kind", "idx"},
                        {"train_images", (dir / "nope-images").string()},
                        {"train_labels", (dir / "nope-labels").string()},
                        {"test_images", (dir / "nope-images").string()},
                        {"test_labels", (dir / "nope-labels").string()}};
  write_text(dir / "missing.json", missing.dump());
  CHECK(run_cli("train --config " + (dir / "missing.json").string() + " --out " + (dir / "o").string(),
                dir / "err.txt") == 2);
  const json err = json::parse(read_text(dir / "err.txt"));
  CHECK(err["kind"] == "DatasetNotFound");

  json unknown = tiny_config();
  unknown["extra"] = 1;
  write_text(dir / "unknown.json", unknown.dump());
  CHECK(run_cli("train --config " + (dir / "unknown.json").string(), dir / "err2.txt") == 2);
  CHECK(json::parse(read_text(dir / "err2.txt"))["kind"] == "ConfigError");

  CHECK(run_cli("no-such-command", dir / "err3.txt") == 2);

  write_text(dir / "tiny.json", tiny_config().dump());
  CHECK(run_cli("train --config " + (dir / "tiny.json").string() + " --out " + (dir / "run").string(),
                dir / "err4.txt") == 0);
  CHECK(std::filesystem::exists(dir / "run" / "checkpoint_final.json"));

  CHECK(run_cli("lemma-check --rho 0.6 --q 0.5 --mu 0.5 0.5 --draws 20000 --out " + (dir / "lemma").string(),
                dir / "err5.txt") == 0);
  CHECK(std::filesystem::exists(dir / "lemma" / "lemma_check.json"));
}
