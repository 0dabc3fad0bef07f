#include "weightvol/checkpoint.hpp"

#include <fstream>
#include <sstream>

#include <json.hpp>

namespace weightvol {

using nlohmann::json;

std::string checkpoint_to_json(const Checkpoint& ckpt) {
  json specs = json::array();
  for (const LayerSpec& s : ckpt.params.layers) {
    specs.push_back({{"in_dim", s.in_dim},
                     {"out_dim", s.out_dim},
                     {"activation", std::string(activation_name(s.activation))},
                     {"dropout_rate", s.dropout_rate}});
  }
  json weights = json::array();
  for (const Matrix& w : ckpt.params.weights) weights.push_back(w.data());
  json doc = {{"format_version", kCheckpointFormatVersion},
              {"layer_specs", specs},
              {"weights", weights},
              {"seed", ckpt.seed},
              {"epoch", ckpt.epoch}};
  return doc.dump(1) + "\n";
}

Checkpoint checkpoint_from_json(const std::string& text) {
  Checkpoint ckpt;
  try {
    const json doc = json::parse(text);
    const int version = doc.at("format_version").get<int>();
    if (version != kCheckpointFormatVersion) {
      throw Error(ErrorKind::ParseError, "unsupported checkpoint format_version " + std::to_string(version));
    }
    for (const json& s : doc.at("layer_specs")) {
      LayerSpec spec;
      spec.in_dim = s.at("in_dim").get<std::size_t>();
      spec.out_dim = s.at("out_dim").get<std::size_t>();
      spec.activation = parse_activation(s.at("activation").get<std::string>());
      spec.dropout_rate = s.at("dropout_rate").get<double>();
      ckpt.params.layers.push_back(spec);
    }
    validate_layers(ckpt.params.layers);
    const json& weights = doc.at("weights");
    if (weights.size() != ckpt.params.layers.size()) throw Error(ErrorKind::ParseError, "checkpoint weight count mismatch");
    for (std::size_t l = 0; l < weights.size(); ++l) {
      const LayerSpec& s = ckpt.params.layers[l];
      auto values = weights[l].get<std::vector<double>>();
      if (values.size() != s.in_dim * s.out_dim) {
        throw Error(ErrorKind::ParseError, "checkpoint layer " + std::to_string(l) + " has wrong weight count");
      }
      ckpt.params.weights.emplace_back(s.out_dim, s.in_dim, std::move(values));
    }
    ckpt.seed = doc.at("seed").get<std::uint64_t>();
    ckpt.epoch = doc.at("epoch").get<std::size_t>();
  } catch (const json::exception& e) {
    throw Error(ErrorKind::ParseError, std::string("checkpoint: ") + e.what());
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::ParseError) throw;
    throw Error(ErrorKind::ParseError, std::string("checkpoint: ") + e.what());
  }
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::IoError, "cannot write " + path.string());
  out << checkpoint_to_json(ckpt);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::IoError, "cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return checkpoint_from_json(ss.str());
}

}  // namespace weightvol
