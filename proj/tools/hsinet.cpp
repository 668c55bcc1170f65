#include <iostream>
#include <map>
#include <optional>

#include "CLI11.hpp"

#include "hsinet/checkpoint.hpp"
#include "hsinet/cli.hpp"

using namespace hsinet;

namespace {

std::string flag_name(std::string key) {
  std::replace(key.begin(), key.end(), '_', '-');
  return "--" + key;
}

// Every run-config key becomes a same-named flag (underscores as hyphens).
struct ConfigFlags {
  std::string config_path;
  std::map<std::string, std::string> values;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", config_path, "JSON run config");
    for (const auto& key : run_config_keys()) {
      if (key == "full") continue;
      cmd->add_option(flag_name(key), values[key], "override '" + key + "'");
    }
  }

  RunConfig resolve(const CLI::App* cmd, bool full) const {
    nlohmann::json j = nlohmann::json::object();
    if (!config_path.empty()) j = to_json(load_run_config(config_path));
    for (const auto& [key, text] : values)
      if (cmd->count(flag_name(key)) > 0) j[key] = parse_override(key, text);
    if (full) j["full"] = true;
    RunConfig c = run_config_from_json(j);
    c.validate();
    return c;
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hyperspectral image classification with a CNN-Transformer network"};
  app.require_subcommand(1);

  std::map<std::string, ConfigFlags> flags;
  std::map<std::string, CLI::App*> cmds;
  const std::vector<std::pair<std::string, std::string>> pipeline{
      {"preprocess", "PCA-reduce a cube and write the split manifest"},
      {"train", "train a model and write a checkpoint"},
      {"eval", "evaluate a checkpoint and write metrics"},
      {"ablate", "train and evaluate the module ablation cases"},
      {"map", "render a classification map"},
      {"params", "print parameter counts per component"}};
  for (const auto& [name, help] : pipeline) {
    cmds[name] = app.add_subcommand(name, help);
    flags[name].attach(cmds[name]);
  }
  bool full = false;
  cmds["map"]->add_flag("--full", full, "predict every pixel, not only labeled ones");

  ConvertOptions conv;
  auto* convert = app.add_subcommand("convert", "convert a headerless raw cube or label raster");
  convert->add_option("--input", conv.input)->required();
  convert->add_option("--output", conv.output)->required();
  convert->add_option("--height", conv.height)->required();
  convert->add_option("--width", conv.width)->required();
  convert->add_option("--bands", conv.bands);
  convert->add_option("--dtype", conv.dtype, "f32, u16 or i16");
  convert->add_option("--interleave", conv.interleave, "bip, bil or bsq");
  convert->add_flag("--labels", conv.labels, "input is a label raster");

  SynthConfig synth;
  std::string synth_out = "synth";
  auto* synth_cmd = app.add_subcommand("synth", "write a synthetic block-layout scene");
  synth_cmd->add_option("--height", synth.height);
  synth_cmd->add_option("--width", synth.width);
  synth_cmd->add_option("--bands", synth.bands);
  synth_cmd->add_option("--classes", synth.classes);
  synth_cmd->add_option("--separation", synth.separation, "class mean distance in noise sigmas");
  synth_cmd->add_option("--noise", synth.noise);
  synth_cmd->add_option("--seed", synth.seed);
  synth_cmd->add_option("--out", synth_out);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    if (convert->parsed()) {
      cmd_convert(conv, std::cout);
      return 0;
    }
    if (synth_cmd->parsed()) {
      cmd_synth(synth, synth_out, std::cout);
      return 0;
    }
    for (const auto& [name, cmd] : cmds) {
      if (!cmd->parsed()) continue;
      const RunConfig config = flags[name].resolve(cmd, full);
      if (name == "preprocess") cmd_preprocess(config, std::cout);
      else if (name == "train") cmd_train(config, std::cout);
      else if (name == "eval") cmd_eval(config, std::cout);
      else if (name == "ablate") cmd_ablate(config, std::cout);
      else if (name == "map") cmd_map(config, std::cout);
      else if (name == "params") cmd_params(config, std::cout);
    }
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
