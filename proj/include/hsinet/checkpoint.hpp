#pragma once

#include <filesystem>
#include <stdexcept>

#include "json.hpp"

#include "hsinet/model.hpp"

namespace hsinet {

/// Missing files, corrupt payloads, or a registry that does not match the
/// model being loaded (the message lists every differing entry).
class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

nlohmann::json config_to_json(const ModelConfig& config);
/// Missing keys keep their defaults; unknown keys are rejected.
ModelConfig config_from_json(const nlohmann::json& j);

/// Writes <dir>/model.json (config and parameter registry) and
/// <dir>/model.bin (little-endian f32 values in registry order).
void save_checkpoint(const Model<float>& model, const std::filesystem::path& dir);
ModelConfig read_checkpoint_config(const std::filesystem::path& dir);
/// Copies checkpoint values into an existing model of the same architecture.
void load_checkpoint(Model<float>& model, const std::filesystem::path& dir);

}  // namespace hsinet
