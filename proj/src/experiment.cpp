#include "weightvol/experiment.hpp"

#include <atomic>
#include <cmath>
#include <iostream>
#include <mutex>
#include <set>
#include <thread>

#include <json.hpp>

#include "weightvol/checkpoint.hpp"
#include "weightvol/csv.hpp"

namespace weightvol {

using nlohmann::json;

namespace {

[[noreturn]] void config_error(const std::string& msg) { throw Error(ErrorKind::ConfigError, msg); }

// Reads an object's keys, tracking which were consumed so leftovers can be rejected.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) config_error(path_ + " must be a JSON object");
  }

  template <class T>
  void get(const char* key, T& out) {
    const json* v = find(key);
    if (!v) return;
    try {
      out = v->get<T>();
    } catch (const json::exception&) {
      config_error(path_ + "." + key + " has the wrong type");
    }
  }

  void get_count(const char* key, std::size_t& out) {
    const json* v = find(key);
    if (!v) return;
    if (!v->is_number_unsigned()) config_error(path_ + "." + key + " must be a non-negative integer");
    out = v->get<std::size_t>();
  }

  void get_seed(const char* key, std::uint64_t& out) {
    const json* v = find(key);
    if (!v) return;
    if (!v->is_number_unsigned()) config_error(path_ + "." + key + " must be a non-negative integer");
    out = v->get<std::uint64_t>();
  }

  void get_optional_count(const char* key, std::optional<std::size_t>& out) {
    const json* v = find(key);
    if (!v || v->is_null()) return;
    if (!v->is_number_unsigned()) config_error(path_ + "." + key + " must be a non-negative integer");
    out = v->get<std::size_t>();
  }

  const json* child(const char* key) { return find(key); }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) config_error("unknown key '" + path_ + "." + it.key() + "'");
    }
  }

 private:
  const json* find(const char* key) {
    seen_.insert(key);
    const auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

void check_schema(ObjectReader& r) {
  int version = 0;
  r.get("schema_version", version);
  if (version != kConfigSchemaVersion) {
    config_error("schema_version must be " + std::to_string(kConfigSchemaVersion) + ", got " + std::to_string(version));
  }
}

void read_dataset(const json& j, DatasetSpec& d) {
  ObjectReader r(j, "dataset");
  r.get("kind", d.kind);
  r.get_count("class_count", d.class_count);
  r.get_count("dim", d.dim);
  r.get_count("n_per_class", d.n_per_class);
  r.get_count("test_n_per_class", d.test_n_per_class);
  r.get("spread", d.spread);
  r.get_seed("seed", d.seed);
  r.get("train_images", d.train_images);
  r.get("train_labels", d.train_labels);
  r.get("test_images", d.test_images);
  r.get("test_labels", d.test_labels);
  r.get_optional_count("limit", d.limit);
  r.get_optional_count("test_limit", d.test_limit);
  r.finish();
  if (d.kind != "synth" && d.kind != "idx") config_error("dataset.kind must be 'synth' or 'idx'");
  if (d.kind == "idx" && (d.train_images.empty() || d.train_labels.empty() || d.test_images.empty() ||
                          d.test_labels.empty())) {
    config_error("idx datasets need train_images, train_labels, test_images and test_labels");
  }
}

void read_architecture(const json& j, ArchitectureSpec& a) {
  ObjectReader r(j, "architecture");
  r.get("hidden", a.hidden);
  std::string act(activation_name(a.activation));
  r.get("activation", act);
  r.get("dropout_rate", a.dropout_rate);
  r.finish();
  try {
    a.activation = parse_activation(act);
  } catch (const Error& e) {
    config_error(std::string("architecture.activation: ") + e.what());
  }
  if (a.activation == Activation::softmax_output) config_error("architecture.activation must be relu or tanh");
  for (std::size_t w : a.hidden)
    if (w == 0) config_error("architecture.hidden widths must be >= 1");
}

void read_train(const json& j, TrainConfig& t) {
  ObjectReader r(j, "train");
  r.get_count("epochs", t.epochs);
  r.get_count("batch_size", t.batch_size);
  r.get("learning_rate", t.learning_rate);
  r.get_count("lr_halve_every", t.lr_halve_every);
  r.get("momentum", t.momentum);
  r.get("weight_decay", t.weight_decay);
  r.get("dropout", t.dropout_enabled);
  r.finish();
}

void read_noise(const json& j, NoiseConfig& n) {
  ObjectReader r(j, "noise");
  std::string mode(noise_mode_name(n.mode));
  r.get("mode", mode);
  r.get("lambda1", n.lambda1);
  r.get("lambda2", n.lambda2);
  r.get("lambda3", n.lambda3);
  r.get_count("refresh_every", n.refresh_every);
  r.get("ema_decay", n.ema_decay);
  r.get("damping", n.damping_scale);
  r.get("match_factor_scale", n.match_factor_scale);
  r.finish();
  try {
    n.mode = parse_noise_mode(mode);
  } catch (const Error& e) {
    config_error(std::string("noise.mode: ") + e.what());
  }
}

void read_volume(const json& j, VolumeSettings& v) {
  ObjectReader r(j, "volume");
  r.get_count("sampling_iters", v.sampling.n_iters);
  r.get("epsilon", v.sampling.epsilon);
  r.get("perturb_std", v.sampling.perturb_std);
  r.get("ft_lr", v.sampling.ft_lr);
  r.get_count("ft_batch_size", v.sampling.batch_size);
  r.get_count("min_accepted", v.sampling.min_accepted);
  r.get_count("subset_size", v.subsets.subset_size);
  r.get_count("subset_count", v.subsets.subset_count);
  r.get("shrinkage", v.subsets.shrinkage);
  r.get("damping", v.kfac.damping_scale);
  r.get_count("mask_draws", v.kfac.mask_draws);
  r.get_count("track_every", v.track_every);
  r.finish();
}

void read_sharpness(const json& j, SharpnessOptions& s) {
  ObjectReader r(j, "sharpness");
  r.get("epsilon", s.epsilon);
  r.get_count("mc_draws", s.mc_draws);
  r.get_count("eval_samples", s.eval_samples);
  r.finish();
}

ExperimentConfig read_experiment(const json& j, bool require_schema) {
  ExperimentConfig c;
  ObjectReader r(j, "config");
  if (require_schema) {
    check_schema(r);
  } else {
    r.child("schema_version");
  }
  r.get_seed("seed", c.seed);
  r.get("output_dir", c.output_dir);
  if (const json* d = r.child("dataset")) read_dataset(*d, c.dataset);
  if (const json* a = r.child("architecture")) read_architecture(*a, c.architecture);
  if (const json* t = r.child("train")) read_train(*t, c.train);
  if (const json* n = r.child("noise")) read_noise(*n, c.noise);
  if (const json* v = r.child("volume")) read_volume(*v, c.volume);
  if (const json* s = r.child("sharpness")) read_sharpness(*s, c.sharpness);
  r.finish();
  c.train.seed = c.seed;
  try {
    c.train.validate();
    c.noise.validate();
  } catch (const Error& e) {
    config_error(e.what());
  }
  return c;
}

json parse_json(const std::string& text) {
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::ConfigError, std::string("invalid JSON: ") + e.what());
  }
}

}  // namespace

ExperimentConfig parse_experiment_config(const std::string& json_text) {
  return read_experiment(parse_json(json_text), true);
}

std::string experiment_config_to_json(const ExperimentConfig& c) {
  json dataset = {{"kind", c.dataset.kind},
                  {"class_count", c.dataset.class_count},
                  {"dim", c.dataset.dim},
                  {"n_per_class", c.dataset.n_per_class},
                  {"test_n_per_class", c.dataset.test_n_per_class},
                  {"spread", c.dataset.spread},
                  {"seed", c.dataset.seed}};
  if (c.dataset.kind == "idx") {
    dataset["train_images"] = c.dataset.train_images;
    dataset["train_labels"] = c.dataset.train_labels;
    dataset["test_images"] = c.dataset.test_images;
    dataset["test_labels"] = c.dataset.test_labels;
    if (c.dataset.limit) dataset["limit"] = *c.dataset.limit;
    if (c.dataset.test_limit) dataset["test_limit"] = *c.dataset.test_limit;
  }
  json doc = {
      {"schema_version", kConfigSchemaVersion},
      {"seed", c.seed},
      {"output_dir", c.output_dir},
      {"dataset", dataset},
      {"architecture",
       {{"hidden", c.architecture.hidden},
        {"activation", std::string(activation_name(c.architecture.activation))},
        {"dropout_rate", c.architecture.dropout_rate}}},
      {"train",
       {{"epochs", c.train.epochs},
        {"batch_size", c.train.batch_size},
        {"learning_rate", c.train.learning_rate},
        {"lr_halve_every", c.train.lr_halve_every},
        {"momentum", c.train.momentum},
        {"weight_decay", c.train.weight_decay},
        {"dropout", c.train.dropout_enabled}}},
      {"noise",
       {{"mode", std::string(noise_mode_name(c.noise.mode))},
        {"lambda1", c.noise.lambda1},
        {"lambda2", c.noise.lambda2},
        {"lambda3", c.noise.lambda3},
        {"refresh_every", c.noise.refresh_every},
        {"ema_decay", c.noise.ema_decay},
        {"damping", c.noise.damping_scale},
        {"match_factor_scale", c.noise.match_factor_scale}}},
      {"volume",
       {{"sampling_iters", c.volume.sampling.n_iters},
        {"epsilon", c.volume.sampling.epsilon},
        {"perturb_std", c.volume.sampling.perturb_std},
        {"ft_lr", c.volume.sampling.ft_lr},
        {"ft_batch_size", c.volume.sampling.batch_size},
        {"min_accepted", c.volume.sampling.min_accepted},
        {"subset_size", c.volume.subsets.subset_size},
        {"subset_count", c.volume.subsets.subset_count},
        {"shrinkage", c.volume.subsets.shrinkage},
        {"damping", c.volume.kfac.damping_scale},
        {"mask_draws", c.volume.kfac.mask_draws},
        {"track_every", c.volume.track_every}}},
      {"sharpness",
       {{"epsilon", c.sharpness.epsilon},
        {"mc_draws", c.sharpness.mc_draws},
        {"eval_samples", c.sharpness.eval_samples}}}};
  return doc.dump(1) + "\n";
}

DatasetPair load_datasets(const DatasetSpec& spec) {
  DatasetPair p;
  if (spec.kind == "idx") {
    p.train = load_idx(spec.train_images, spec.train_labels, spec.limit);
    p.test = load_idx(spec.test_images, spec.test_labels, spec.test_limit);
    if (p.train.dim() != p.test.dim()) throw Error(ErrorKind::ShapeMismatch, "train and test feature dims differ");
    const std::size_t k = std::max(p.train.class_count, p.test.class_count);
    p.train.class_count = p.test.class_count = k;
  } else {
    p.train = synth_blobs(spec.class_count, spec.dim, spec.n_per_class, spec.spread, spec.seed);
    p.test = synth_blobs(spec.class_count, spec.dim, spec.test_n_per_class, spec.spread, derive_seed(spec.seed, 0x7e57));
  }
  return p;
}

std::vector<LayerSpec> build_layers(const ArchitectureSpec& arch, std::size_t in_dim, std::size_t classes) {
  std::vector<std::size_t> dims = {in_dim};
  dims.insert(dims.end(), arch.hidden.begin(), arch.hidden.end());
  dims.push_back(classes);
  return make_mlp(dims, arch.activation, arch.dropout_rate);
}

ExperimentOutcome evaluate_experiment(const ExperimentConfig& config, const DatasetPair& data) {
  const auto layers = build_layers(config.architecture, data.train.dim(), data.train.class_count);
  TrainConfig tc = config.train;
  tc.seed = config.seed;

  ExperimentOutcome out;
  if (config.noise.mode != NoiseMode::none || config.volume.track_every > 0) {
    TrackOptions track;
    track.every_k = config.volume.track_every > 0 ? config.volume.track_every : std::max<std::size_t>(tc.epochs, 1);
    track.kfac = config.volume.kfac;
    track.seed = derive_seed(config.seed, 0x7ac4);
    NoiseRunResult r = train_with_noise(tc, config.noise, data.train, &data.test, layers, track);
    out.train = std::move(r.train);
    if (config.volume.track_every > 0) out.volume_trail = std::move(r.volume_trail);
  } else {
    out.train = train(tc, data.train, &data.test, layers);
  }
  const NetworkParams& final_params = out.train.final;

  Rng kfac_rng(derive_seed(config.seed, 0xfac));
  out.laplace = laplace_volume(kfac_factors(final_params, data.train, config.volume.kfac, kfac_rng));

  Rng sample_rng(derive_seed(config.seed, 0x5a3b1));
  const PosteriorSamples samples = collect_posterior_samples(final_params, data.train, config.volume.sampling, sample_rng);
  out.samples_accepted = samples.accepted;
  out.samples_rejected = samples.rejected;
  out.sampling = sampling_volume(samples, config.volume.subsets, sample_rng);

  out.sharpness = sharpness_sigma(final_params, data.train, config.sharpness, derive_seed(config.seed, 0x54a));
  out.measures = complexity_measures(final_params, out.train.initial, out.sharpness, out.laplace, out.sampling);

  const EvalResult tr = evaluate(final_params, data.train);
  const EvalResult te = evaluate(final_params, data.test);
  out.train_loss = tr.loss;
  out.test_loss = te.loss;
  out.gg_loss = te.loss - tr.loss;
  out.gg_acc = tr.accuracy - te.accuracy;
  return out;
}

std::string history_csv(const History& history) {
  std::string out = "epoch,batch_loss,train_loss,train_accuracy,test_loss,test_accuracy\n";
  for (const EpochStats& s : history) {
    out += join_csv({std::to_string(s.epoch), format_double(s.batch_loss), format_double(s.train_loss),
                     format_double(s.train_accuracy), format_double(s.test_loss), format_double(s.test_accuracy)});
    out += '\n';
  }
  return out;
}

ExperimentOutcome run_experiment(const ExperimentConfig& config, const std::filesystem::path& out_dir,
                                 const std::string& config_id) {
  const DatasetPair data = load_datasets(config.dataset);
  ExperimentOutcome out = evaluate_experiment(config, data);

  std::filesystem::create_directories(out_dir);
  write_text(out_dir / "config.json", experiment_config_to_json(config));
  save_checkpoint({out.train.initial, config.seed, 0}, out_dir / "checkpoint_initial.json");
  save_checkpoint({out.train.final, config.seed, out.train.history.size()}, out_dir / "checkpoint_final.json");
  write_text(out_dir / "history.csv", history_csv(out.train.history));
  write_text(out_dir / "volume_laplace.json", volume_report_to_json(out.laplace));
  {
    json doc = json::parse(volume_report_to_json(out.sampling));
    doc["samples_accepted"] = out.samples_accepted;
    doc["samples_rejected"] = out.samples_rejected;
    doc["epsilon"] = config.volume.sampling.epsilon;
    write_text(out_dir / "volume_sampling.json", doc.dump(1) + "\n");
  }
  write_text(out_dir / "measures.csv",
             measure_csv_header() + "\n" + measure_csv_row(config_id, out.measures, out.gg_loss, out.gg_acc) + "\n");
  write_text(out_dir / "measures.json", measure_report_to_json(out.measures, out.gg_loss, out.gg_acc));
  if (!out.volume_trail.empty()) {
    json trail = json::array();
    for (const TrackedVolume& tv : out.volume_trail) {
      trail.push_back({{"epoch", tv.epoch}, {"report", json::parse(volume_report_to_json(tv.report))}});
    }
    write_text(out_dir / "volume_trail.json", json({{"schema_version", 1}, {"trail", trail}}).dump(1) + "\n");
  }
  return out;
}

// ---- Grids --------------------------------------------------------------------

namespace {

std::string canonical_value(const std::string& axis, const json& v) {
  if (axis == "activation") {
    if (!v.is_string()) config_error("grid axis activation needs string values");
    const Activation a = parse_activation(v.get<std::string>());
    if (a == Activation::softmax_output) config_error("grid activation must be relu or tanh");
    return std::string(activation_name(a));
  }
  if (!v.is_number()) config_error("grid axis " + axis + " needs numeric values");
  const double d = v.get<double>();
  if (axis == "batch_size" || axis == "depth") {
    if (!v.is_number_unsigned() || d < 1) config_error("grid axis " + axis + " needs positive integers");
  }
  return format_double(d);
}

std::string base_value(const ExperimentConfig& c, const std::string& axis) {
  if (axis == "dropout_rate") return format_double(c.architecture.dropout_rate);
  if (axis == "batch_size") return std::to_string(c.train.batch_size);
  if (axis == "learning_rate") return format_double(c.train.learning_rate);
  if (axis == "depth") return std::to_string(c.architecture.hidden.size() + 1);
  if (axis == "activation") return std::string(activation_name(c.architecture.activation));
  if (axis == "weight_decay") return format_double(c.train.weight_decay);
  if (axis == "width") return "1";
  config_error("unknown hyperparameter '" + axis + "'");
}

void apply_hyperparams(ExperimentConfig& c, const std::map<std::string, std::string>& h) {
  c.architecture.dropout_rate = parse_double(h.at("dropout_rate"));
  c.train.batch_size = static_cast<std::size_t>(parse_double(h.at("batch_size")));
  c.train.learning_rate = parse_double(h.at("learning_rate"));
  c.train.weight_decay = parse_double(h.at("weight_decay"));
  c.architecture.activation = parse_activation(h.at("activation"));

  const auto depth = static_cast<std::size_t>(parse_double(h.at("depth")));
  std::vector<std::size_t> base = c.architecture.hidden;
  if (base.empty() && depth > 1) config_error("grid depth needs a non-empty base hidden schedule");
  std::vector<std::size_t> hidden;
  for (std::size_t i = 0; i + 1 < depth; ++i) hidden.push_back(base[std::min(i, base.size() - 1)]);
  const double width = parse_double(h.at("width"));
  if (!(width > 0.0)) config_error("grid width multiplier must be > 0");
  for (std::size_t& w : hidden) w = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(w * width)));
  c.architecture.hidden = hidden;
}

std::string pad_index(std::size_t i) {
  std::string s = std::to_string(i);
  return "c" + std::string(s.size() < 4 ? 4 - s.size() : 0, '0') + s;
}

}  // namespace

GridSpec parse_grid_spec(const std::string& json_text) {
  const json doc = parse_json(json_text);
  GridSpec g;
  ObjectReader r(doc, "grid");
  check_schema(r);
  const json* base = r.child("base");
  if (!base) config_error("grid.base is required");
  g.base = read_experiment(*base, false);
  if (const json* axes = r.child("axes")) {
    if (!axes->is_object()) config_error("grid.axes must be an object");
    for (auto it = axes->begin(); it != axes->end(); ++it) {
      const auto& reg = hyperparameter_registry();
      if (std::find(reg.begin(), reg.end(), it.key()) == reg.end()) {
        config_error("unknown grid axis '" + it.key() + "'");
      }
    }
    for (const std::string& name : hyperparameter_registry()) {
      const auto it = axes->find(name);
      if (it == axes->end()) continue;
      if (!it->is_array() || it->empty()) config_error("grid axis " + name + " must be a non-empty array");
      std::vector<std::string> values;
      for (const json& v : *it) values.push_back(canonical_value(name, v));
      g.axes.emplace_back(name, values);
    }
  }
  if (const json* seeds = r.child("seeds")) {
    g.seeds.clear();
    if (!seeds->is_array() || seeds->empty()) config_error("grid.seeds must be a non-empty array");
    for (const json& s : *seeds) {
      if (!s.is_number_unsigned()) config_error("grid.seeds must hold non-negative integers");
      g.seeds.push_back(s.get<std::uint64_t>());
    }
  }
  r.get_count("cap", g.cap);
  r.finish();
  return g;
}

std::vector<GridCell> expand_grid(const GridSpec& spec) {
  std::size_t combos = 1;
  for (const auto& [name, values] : spec.axes) combos *= values.size();
  const std::size_t total = combos * spec.seeds.size();
  if (total > spec.cap) {
    config_error("grid has " + std::to_string(total) + " runs, above the cap of " + std::to_string(spec.cap));
  }
  std::vector<GridCell> cells;
  std::vector<std::size_t> pos(spec.axes.size(), 0);
  for (std::size_t c = 0; c < combos; ++c) {
    std::map<std::string, std::string> h;
    for (const std::string& name : hyperparameter_registry()) h[name] = base_value(spec.base, name);
    for (std::size_t a = 0; a < spec.axes.size(); ++a) h[spec.axes[a].first] = spec.axes[a].second[pos[a]];
    for (std::uint64_t seed : spec.seeds) {
      GridCell cell;
      cell.config_id = pad_index(c);
      cell.seed = seed;
      cell.hyperparams = h;
      cell.config = spec.base;
      apply_hyperparams(cell.config, h);
      cell.config.seed = seed;
      cell.config.train.seed = seed;
      cells.push_back(std::move(cell));
    }
    for (std::size_t a = spec.axes.size(); a-- > 0;) {
      if (++pos[a] < spec.axes[a].second.size()) break;
      pos[a] = 0;
    }
  }
  return cells;
}

std::string records_csv_header() {
  std::vector<std::string> cols = {"config_id", "seed"};
  for (const std::string& h : hyperparameter_registry()) cols.push_back(h);
  for (const std::string& m : measure_names()) cols.push_back(m);
  cols.insert(cols.end(), {"sigma", "gg_loss", "gg_acc"});
  return join_csv(cols);
}

std::string record_csv_row(const ExperimentRecord& r) {
  std::vector<std::string> f = {r.config_id, std::to_string(r.seed)};
  for (const std::string& h : hyperparameter_registry()) {
    const auto it = r.hyperparams.find(h);
    f.push_back(it == r.hyperparams.end() ? std::string() : it->second);
  }
  for (const std::string& m : measure_names()) f.push_back(format_double(measure_value(r.measures, m)));
  f.push_back(format_double(r.measures.sigma));
  f.push_back(format_double(r.gg_loss));
  f.push_back(format_double(r.gg_acc));
  return join_csv(f);
}

std::vector<ExperimentRecord> parse_records_csv(const std::string& text) {
  const CsvTable t = parse_csv(text);
  std::vector<ExperimentRecord> out;
  const std::size_t id_col = t.column("config_id");
  const std::size_t seed_col = t.column("seed");
  for (const auto& row : t.rows) {
    ExperimentRecord r;
    r.config_id = row[id_col];
    r.seed = static_cast<std::uint64_t>(parse_double(row[seed_col]));
    for (const std::string& h : hyperparameter_registry()) {
      for (std::size_t i = 0; i < t.header.size(); ++i)
        if (t.header[i] == h) r.hyperparams[h] = row[i];
    }
    r.measures.frob_distance = parse_double(row[t.column("frob")]);
    r.measures.spectral_norm = parse_double(row[t.column("spectral")]);
    r.measures.parameter_norm = parse_double(row[t.column("param")]);
    r.measures.path_norm = parse_double(row[t.column("path")]);
    r.measures.sharpness_alpha = parse_double(row[t.column("sharp_alpha")]);
    r.measures.pac_sharpness = parse_double(row[t.column("pac_sharp")]);
    r.measures.pac_s_laplace = parse_double(row[t.column("pac_s_laplace")]);
    r.measures.pac_s_sampling = parse_double(row[t.column("pac_s_sampling")]);
    r.measures.sigma = parse_double(row[t.column("sigma")]);
    r.gg_loss = parse_double(row[t.column("gg_loss")]);
    r.gg_acc = parse_double(row[t.column("gg_acc")]);
    out.push_back(std::move(r));
  }
  return out;
}

namespace {

std::string cell_stem(const GridCell& c) { return c.config_id + "_s" + std::to_string(c.seed); }

std::optional<std::string> completed_row(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) return std::nullopt;
  try {
    const std::string text = read_text(path);
    const CsvTable t = parse_csv(text);
    if (join_csv(t.header) != records_csv_header() || t.rows.size() != 1) return std::nullopt;
    return join_csv(t.rows.front());
  } catch (const Error&) {
    return std::nullopt;
  }
}

}  // namespace

GridSummary run_grid(const GridSpec& spec, const std::filesystem::path& out_dir, std::size_t workers, bool resume) {
  const std::vector<GridCell> cells = expand_grid(spec);
  const std::filesystem::path cell_dir = out_dir / "cells";
  std::filesystem::create_directories(cell_dir);

  GridSummary summary;
  summary.total = cells.size();
  std::vector<std::size_t> todo;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (resume && completed_row(cell_dir / (cell_stem(cells[i]) + ".csv"))) {
      ++summary.skipped;
    } else {
      todo.push_back(i);
    }
  }

  std::atomic<std::size_t> next{0};
  std::atomic<std::size_t> ran{0};
  std::atomic<std::size_t> failed{0};
  std::mutex log_mutex;
  auto worker = [&]() {
    while (true) {
      const std::size_t k = next.fetch_add(1);
      if (k >= todo.size()) return;
      const GridCell& cell = cells[todo[k]];
      const std::string stem = cell_stem(cell);
      const std::filesystem::path row_path = cell_dir / (stem + ".csv");
      const std::filesystem::path err_path = cell_dir / (stem + ".error.json");
      std::filesystem::remove(row_path);
      std::filesystem::remove(err_path);
      try {
        const ExperimentOutcome o = run_experiment(cell.config, cell_dir / stem, cell.config_id);
        ExperimentRecord rec;
        rec.config_id = cell.config_id;
        rec.seed = cell.seed;
        rec.hyperparams = cell.hyperparams;
        rec.measures = o.measures;
        rec.gg_loss = o.gg_loss;
        rec.gg_acc = o.gg_acc;
        const std::filesystem::path tmp = cell_dir / (stem + ".csv.tmp");
        write_text(tmp, records_csv_header() + "\n" + record_csv_row(rec) + "\n");
        std::filesystem::rename(tmp, row_path);
        ++ran;
        std::lock_guard<std::mutex> lock(log_mutex);
        std::cerr << "[grid] " << stem << " done (gg_loss " << o.gg_loss << ")\n";
      } catch (const std::exception& e) {
        ++failed;
        const Error* err = dynamic_cast<const Error*>(&e);
        const json doc = {{"kind", err ? std::string(error_kind_name(err->kind())) : std::string("Internal")},
                          {"message", e.what()}};
        try {
          write_text(err_path, doc.dump() + "\n");
        } catch (const Error&) {
        }
        std::lock_guard<std::mutex> lock(log_mutex);
        std::cerr << "[grid] " << stem << " failed: " << e.what() << "\n";
      }
    }
  };
  const std::size_t n_threads = std::max<std::size_t>(1, std::min(workers, todo.size()));
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < n_threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  summary.ran = ran;
  summary.failed = failed;

  std::string merged = records_csv_header() + "\n";
  for (const GridCell& cell : cells) {
    if (const auto row = completed_row(cell_dir / (cell_stem(cell) + ".csv"))) merged += *row + "\n";
  }
  const std::filesystem::path tmp = out_dir / "records.csv.tmp";
  write_text(tmp, merged);
  std::filesystem::rename(tmp, out_dir / "records.csv");
  return summary;
}

MIReport analyze_records(const std::filesystem::path& records_csv, const std::filesystem::path& out_dir,
                         const std::vector<std::string>& registry) {
  if (!std::filesystem::exists(records_csv)) {
    throw Error(ErrorKind::DatasetNotFound, "records file not found: " + records_csv.string());
  }
  const std::vector<ExperimentRecord> records = parse_records_csv(read_text(records_csv));
  if (records.size() < 2) {
    throw Error(ErrorKind::InvalidArgument, "analysis needs at least 2 records, found " + std::to_string(records.size()));
  }
  const std::vector<std::string> reg = registry.empty() ? default_registry(records) : registry;
  for (const std::string& h : reg) {
    const auto& known = hyperparameter_registry();
    if (std::find(known.begin(), known.end(), h) == known.end()) {
      throw Error(ErrorKind::ConfigError, "unknown hyperparameter '" + h + "' in registry");
    }
  }
  const MIReport report = mi_report(records, reg);
  std::filesystem::create_directories(out_dir);
  write_text(out_dir / "mi_report.csv", mi_report_csv(report));
  write_text(out_dir / "mi_report.json", mi_report_json(report));
  return report;
}

}  // namespace weightvol
