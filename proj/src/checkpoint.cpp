#include "hsinet/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace hsinet {

static_assert(std::endian::native == std::endian::little, "payloads are written as native little-endian");

using nlohmann::json;

json config_to_json(const ModelConfig& c) {
  return {{"bands", c.bands},   {"patch", c.patch},
          {"classes", c.classes}, {"s", c.s},
          {"d", c.d},           {"groups", c.groups},
          {"heads", c.heads},   {"encoders", c.encoders},
          {"mlp", c.mlp_width()}, {"dropout", c.dropout},
          {"tbfe", c.tbfe},     {"hpa", c.hpa},
          {"cff", c.cff},       {"straight_pairing", c.straight_pairing}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  if (!j.is_object()) throw ConfigError("model config must be an object");
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "bands") c.bands = value.get<std::size_t>();
      else if (key == "patch") c.patch = value.get<std::size_t>();
      else if (key == "classes") c.classes = value.get<std::size_t>();
      else if (key == "s") c.s = value.get<std::size_t>();
      else if (key == "d") c.d = value.get<std::size_t>();
      else if (key == "groups") c.groups = value.get<std::size_t>();
      else if (key == "heads") c.heads = value.get<std::size_t>();
      else if (key == "encoders") c.encoders = value.get<std::size_t>();
      else if (key == "mlp") c.mlp = value.get<std::size_t>();
      else if (key == "dropout") c.dropout = value.get<double>();
      else if (key == "tbfe") c.tbfe = value.get<bool>();
      else if (key == "hpa") c.hpa = value.get<bool>();
      else if (key == "cff") c.cff = value.get<bool>();
      else if (key == "straight_pairing") c.straight_pairing = value.get<bool>();
      else throw ConfigError("unknown model config key '" + key + "'");
    } catch (const json::exception& e) {
      throw ConfigError("model config key '" + key + "': " + e.what());
    }
  }
  return c;
}

namespace {

json read_manifest(const std::filesystem::path& dir) {
  std::ifstream in(dir / "model.json");
  if (!in) throw CheckpointError("cannot open " + (dir / "model.json").string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw CheckpointError((dir / "model.json").string() + ": " + e.what());
  }
}

}  // namespace

void save_checkpoint(const Model<float>& model, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  json registry = json::array();
  std::size_t offset = 0;
  for (const auto& p : model.params().entries()) {
    registry.push_back({{"name", p.name}, {"shape", p.tensor.shape()}, {"trainable", p.trainable}, {"offset", offset}});
    offset += p.tensor.size();
  }
  const json manifest = {{"format", "hsinet-checkpoint"},
                         {"version", 1},
                         {"config", config_to_json(model.config())},
                         {"parameters", registry},
                         {"scalars", offset}};
  {
    std::ofstream out(dir / "model.json", std::ios::trunc);
    out << manifest.dump(2) << '\n';
    if (!out) throw CheckpointError("cannot write " + (dir / "model.json").string());
  }
  std::ofstream out(dir / "model.bin", std::ios::binary | std::ios::trunc);
  for (const auto& p : model.params().entries()) {
    out.write(reinterpret_cast<const char*>(p.tensor.data().data()),
              static_cast<std::streamsize>(p.tensor.size() * sizeof(float)));
  }
  if (!out) throw CheckpointError("cannot write " + (dir / "model.bin").string());
}

ModelConfig read_checkpoint_config(const std::filesystem::path& dir) {
  const json manifest = read_manifest(dir);
  if (!manifest.contains("config")) throw CheckpointError((dir / "model.json").string() + ": no config");
  return config_from_json(manifest["config"]);
}

void load_checkpoint(Model<float>& model, const std::filesystem::path& dir) {
  const json manifest = read_manifest(dir);
  const json& registry = manifest.at("parameters");
  auto& entries = model.params().entries();

  std::vector<std::string> diffs;
  const std::size_t common = std::min(entries.size(), registry.size());
  for (std::size_t i = 0; i < common; ++i) {
    const auto name = registry[i].at("name").get<std::string>();
    const auto shape = registry[i].at("shape").get<Shape>();
    if (name != entries[i].name || shape != entries[i].tensor.shape()) {
      diffs.push_back("  #" + std::to_string(i) + " checkpoint " + name + " " + to_string(shape) + " vs model " +
                      entries[i].name + " " + to_string(entries[i].tensor.shape()));
    }
  }
  for (std::size_t i = common; i < registry.size(); ++i) {
    diffs.push_back("  #" + std::to_string(i) + " checkpoint " + registry[i].at("name").get<std::string>() + " " +
                    to_string(registry[i].at("shape").get<Shape>()) + " missing from model");
  }
  for (std::size_t i = common; i < entries.size(); ++i) {
    diffs.push_back("  #" + std::to_string(i) + " model " + entries[i].name + " " +
                    to_string(entries[i].tensor.shape()) + " missing from checkpoint");
  }
  if (!diffs.empty()) {
    std::string msg = "checkpoint " + dir.string() + " does not match the model architecture:";
    for (const auto& d : diffs) msg += "\n" + d;
    throw CheckpointError(msg);
  }

  std::ifstream in(dir / "model.bin", std::ios::binary);
  if (!in) throw CheckpointError("cannot open " + (dir / "model.bin").string());
  const std::vector<char> bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  const std::size_t expected = model.params().count(false) * sizeof(float);
  if (bytes.size() != expected) {
    throw CheckpointError((dir / "model.bin").string() + ": expected " + std::to_string(expected) +
                          " bytes, found " + std::to_string(bytes.size()));
  }
  std::size_t offset = 0;
  for (auto& p : entries) {
    std::memcpy(p.tensor.mutable_data().data(), bytes.data() + offset, p.tensor.size() * sizeof(float));
    offset += p.tensor.size() * sizeof(float);
  }
}

}  // namespace hsinet
