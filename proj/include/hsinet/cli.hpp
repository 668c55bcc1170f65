#pragma once

// Pipeline commands behind the hsinet executable. Each command reads and
// writes files under RunConfig::out and reports progress on `log`.

#include <array>
#include <cstdint>
#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"

#include "hsinet/data.hpp"
#include "hsinet/model.hpp"
#include "hsinet/train.hpp"

namespace hsinet {

struct RunConfig {
  std::string cube, labels;
  std::string out = "run";
  std::string checkpoint;  // empty: <out>/checkpoint

  std::size_t bands = 30;
  std::size_t patch = 19;
  std::size_t s = 32, d = 64, groups = 8, heads = 16, encoders = 4, mlp = 0;
  double dropout = 0.1;
  bool tbfe = true, hpa = true, cff = true, straight_pairing = false;
  std::size_t classes = 0;  // 0: taken from the manifest

  double train_fraction = 0.05;
  std::size_t train_per_class = 0;  // nonzero overrides train_fraction
  std::string rounding = "nearest";
  std::uint64_t seed = 0;

  double lr = 1e-3;
  std::size_t batch = 64, epochs = 100;

  std::string split = "test";
  bool full = false;
  std::vector<int> cases{1, 2, 3, 4, 5, 6};

  /// Checks every field without touching the filesystem.
  void validate() const;
  ModelConfig model(std::size_t classes) const;
  TrainConfig training() const;
  std::filesystem::path checkpoint_dir() const;
};

/// Keys accepted in a config file, in declaration order.
const std::vector<std::string>& run_config_keys();
nlohmann::json to_json(const RunConfig& c);
/// Unknown keys and wrongly typed values raise ConfigError.
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);
/// Parses a command-line string for `key` into the JSON type the key expects.
nlohmann::json parse_override(const std::string& key, const std::string& text);

using Rgb = std::array<std::uint8_t, 3>;
/// K + 1 colors: index 0 is black, class k gets hue (k - 1) / K at full
/// saturation and value.
std::vector<Rgb> palette(std::size_t classes);
/// Binary P6 pixmap from row-major label indices into `colors`.
void write_ppm(const std::filesystem::path& path, std::size_t height, std::size_t width,
               const std::vector<int>& labels, const std::vector<Rgb>& colors);

/// Reduced cube plus split reconstructed from a preprocess directory.
struct Prepared {
  PatchSet data;
  nlohmann::json manifest;
};
Prepared load_prepared(const RunConfig& config);

void cmd_preprocess(const RunConfig& config, std::ostream& log);
std::vector<EpochLog> cmd_train(const RunConfig& config, std::ostream& log);
Evaluation cmd_eval(const RunConfig& config, std::ostream& log);
std::vector<AblationResult> cmd_ablate(const RunConfig& config, std::ostream& log);
/// Returns the rendered label image, row-major, 0 where nothing was predicted.
std::vector<int> cmd_map(const RunConfig& config, std::ostream& log);
ParamReport cmd_params(const RunConfig& config, std::ostream& log);

struct ConvertOptions {
  std::string input, output;
  std::size_t height = 0, width = 0, bands = 1;
  std::string dtype = "f32", interleave = "bip";
  bool labels = false;
};
void cmd_convert(const ConvertOptions& options, std::ostream& log);

/// Writes <out>/synth.hsic and <out>/synth.hsil.
void cmd_synth(const SynthConfig& config, const std::filesystem::path& out, std::ostream& log);

}  // namespace hsinet
