#include "hsinet/cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

#include "hsinet/checkpoint.hpp"

namespace hsinet {

using nlohmann::json;

namespace {

enum class Kind { text, count, real, flag, list };

struct Key {
  std::string name;
  Kind kind;
};

const std::vector<Key>& keys() {
  static const std::vector<Key> k{
      {"cube", Kind::text},         {"labels", Kind::text},          {"out", Kind::text},
      {"checkpoint", Kind::text},   {"bands", Kind::count},          {"patch", Kind::count},
      {"s", Kind::count},           {"d", Kind::count},              {"groups", Kind::count},
      {"heads", Kind::count},       {"encoders", Kind::count},       {"mlp", Kind::count},
      {"dropout", Kind::real},      {"tbfe", Kind::flag},            {"hpa", Kind::flag},
      {"cff", Kind::flag},          {"straight_pairing", Kind::flag}, {"classes", Kind::count},
      {"train_fraction", Kind::real}, {"train_per_class", Kind::count}, {"rounding", Kind::text},
      {"seed", Kind::count},        {"lr", Kind::real},              {"batch", Kind::count},
      {"epochs", Kind::count},      {"split", Kind::text},           {"full", Kind::flag},
      {"cases", Kind::list}};
  return k;
}

std::string fixed(double v, int digits) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

std::ofstream open_out(const std::filesystem::path& path, std::ios::openmode mode = std::ios::trunc) {
  std::ofstream out(path, mode | std::ios::trunc);
  if (!out) throw LoadError("cannot write " + path.string());
  return out;
}

json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw LoadError(path.string() + ": " + e.what());
  }
}

void write_json(const std::filesystem::path& path, const json& j, int indent = 2) {
  auto out = open_out(path);
  out << j.dump(indent) << '\n';
  if (!out) throw LoadError("write failed for " + path.string());
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "test") return Split::test;
  throw ConfigError("split must be 'train' or 'test', got '" + s + "'");
}

std::size_t resolve_classes(const RunConfig& config, const Prepared* prepared) {
  const std::size_t k = prepared ? prepared->manifest.at("classes").get<std::size_t>() : config.classes;
  if (prepared && config.classes != 0 && config.classes != k) {
    throw ConfigError("classes = " + std::to_string(config.classes) + " but the manifest has " + std::to_string(k));
  }
  return k;
}

Model<float> trained_model(const RunConfig& config, const Prepared& prepared) {
  Model<float> model(config.model(resolve_classes(config, &prepared)), config.seed);
  load_checkpoint(model, config.checkpoint_dir());
  return model;
}

}  // namespace

void RunConfig::validate() const {
  model(std::max<std::size_t>(classes, 1)).validate();
  training().validate();
  if (out.empty()) throw ConfigError("out must name a directory");
  if (train_per_class == 0 && !(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw ConfigError("train_fraction must lie in (0, 1), got " + std::to_string(train_fraction));
  }
  if (rounding != "nearest" && rounding != "ceiling") {
    throw ConfigError("rounding must be 'nearest' or 'ceiling', got '" + rounding + "'");
  }
  parse_split(split);
  if (cases.empty()) throw ConfigError("cases must list at least one ablation case");
  for (int c : cases)
    if (c < 1 || c > 6) throw ConfigError("ablation case " + std::to_string(c) + " is not in 1..6");
}

ModelConfig RunConfig::model(std::size_t k) const {
  ModelConfig m;
  m.bands = bands;
  m.patch = patch;
  m.classes = k;
  m.s = s;
  m.d = d;
  m.groups = groups;
  m.heads = heads;
  m.encoders = encoders;
  m.mlp = mlp;
  m.dropout = dropout;
  m.tbfe = tbfe;
  m.hpa = hpa;
  m.cff = cff;
  m.straight_pairing = straight_pairing;
  return m;
}

TrainConfig RunConfig::training() const {
  TrainConfig t;
  t.lr = lr;
  t.batch = batch;
  t.epochs = epochs;
  t.seed = seed;
  return t;
}

std::filesystem::path RunConfig::checkpoint_dir() const {
  return checkpoint.empty() ? std::filesystem::path(out) / "checkpoint" : std::filesystem::path(checkpoint);
}

const std::vector<std::string>& run_config_keys() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> n;
    for (const auto& k : keys()) n.push_back(k.name);
    return n;
  }();
  return names;
}

json to_json(const RunConfig& c) {
  return {{"cube", c.cube},
          {"labels", c.labels},
          {"out", c.out},
          {"checkpoint", c.checkpoint},
          {"bands", c.bands},
          {"patch", c.patch},
          {"s", c.s},
          {"d", c.d},
          {"groups", c.groups},
          {"heads", c.heads},
          {"encoders", c.encoders},
          {"mlp", c.mlp},
          {"dropout", c.dropout},
          {"tbfe", c.tbfe},
          {"hpa", c.hpa},
          {"cff", c.cff},
          {"straight_pairing", c.straight_pairing},
          {"classes", c.classes},
          {"train_fraction", c.train_fraction},
          {"train_per_class", c.train_per_class},
          {"rounding", c.rounding},
          {"seed", c.seed},
          {"lr", c.lr},
          {"batch", c.batch},
          {"epochs", c.epochs},
          {"split", c.split},
          {"full", c.full},
          {"cases", c.cases}};
}

RunConfig run_config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("run config must be a JSON object");
  RunConfig c;
  for (const auto& [key, v] : j.items()) {
    const auto it = std::find_if(keys().begin(), keys().end(), [&](const Key& k) { return k.name == key; });
    if (it == keys().end()) throw ConfigError("unknown config key '" + key + "'");
    const bool ok = it->kind == Kind::text    ? v.is_string()
                    : it->kind == Kind::count ? v.is_number_unsigned()
                    : it->kind == Kind::real  ? v.is_number()
                    : it->kind == Kind::flag  ? v.is_boolean()
                                              : v.is_array();
    if (!ok) throw ConfigError("config key '" + key + "' has the wrong type: " + v.dump());
    try {
      if (key == "cube") c.cube = v.get<decltype(c.cube)>();
      else if (key == "labels") c.labels = v.get<decltype(c.labels)>();
      else if (key == "out") c.out = v.get<decltype(c.out)>();
      else if (key == "checkpoint") c.checkpoint = v.get<decltype(c.checkpoint)>();
      else if (key == "bands") c.bands = v.get<decltype(c.bands)>();
      else if (key == "patch") c.patch = v.get<decltype(c.patch)>();
      else if (key == "s") c.s = v.get<decltype(c.s)>();
      else if (key == "d") c.d = v.get<decltype(c.d)>();
      else if (key == "groups") c.groups = v.get<decltype(c.groups)>();
      else if (key == "heads") c.heads = v.get<decltype(c.heads)>();
      else if (key == "encoders") c.encoders = v.get<decltype(c.encoders)>();
      else if (key == "mlp") c.mlp = v.get<decltype(c.mlp)>();
      else if (key == "dropout") c.dropout = v.get<decltype(c.dropout)>();
      else if (key == "tbfe") c.tbfe = v.get<decltype(c.tbfe)>();
      else if (key == "hpa") c.hpa = v.get<decltype(c.hpa)>();
      else if (key == "cff") c.cff = v.get<decltype(c.cff)>();
      else if (key == "straight_pairing") c.straight_pairing = v.get<decltype(c.straight_pairing)>();
      else if (key == "classes") c.classes = v.get<decltype(c.classes)>();
      else if (key == "train_fraction") c.train_fraction = v.get<decltype(c.train_fraction)>();
      else if (key == "train_per_class") c.train_per_class = v.get<decltype(c.train_per_class)>();
      else if (key == "rounding") c.rounding = v.get<decltype(c.rounding)>();
      else if (key == "seed") c.seed = v.get<decltype(c.seed)>();
      else if (key == "lr") c.lr = v.get<decltype(c.lr)>();
      else if (key == "batch") c.batch = v.get<decltype(c.batch)>();
      else if (key == "epochs") c.epochs = v.get<decltype(c.epochs)>();
      else if (key == "split") c.split = v.get<decltype(c.split)>();
      else if (key == "full") c.full = v.get<decltype(c.full)>();
      else if (key == "cases") c.cases = v.get<std::vector<int>>();
    } catch (const json::exception& e) {
      throw ConfigError("config key '" + key + "': " + e.what());
    }
  }
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  try {
    return run_config_from_json(json::parse(in));
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

json parse_override(const std::string& key, const std::string& text) {
  const auto it = std::find_if(keys().begin(), keys().end(), [&](const Key& k) { return k.name == key; });
  if (it == keys().end()) throw ConfigError("unknown config key '" + key + "'");
  const std::string flag = "--" + [&] {
    std::string f = key;
    std::replace(f.begin(), f.end(), '_', '-');
    return f;
  }();
  auto bad = [&](const std::string& what) { return ConfigError(flag + " expects " + what + ", got '" + text + "'"); };
  switch (it->kind) {
    case Kind::text:
      return text;
    case Kind::count: {
      if (text.empty() || text.find_first_not_of("0123456789") != std::string::npos) throw bad("a non-negative integer");
      try {
        return std::stoull(text);
      } catch (const std::exception&) {
        throw bad("a non-negative integer");
      }
    }
    case Kind::real: {
      std::size_t used = 0;
      double v = 0;
      try {
        v = std::stod(text, &used);
      } catch (const std::exception&) {
        throw bad("a number");
      }
      if (used != text.size()) throw bad("a number");
      return v;
    }
    case Kind::flag:
      if (text == "true" || text == "1" || text == "on") return true;
      if (text == "false" || text == "0" || text == "off") return false;
      throw bad("true or false");
    case Kind::list: {
      json list = json::array();
      std::size_t start = 0;
      while (start <= text.size()) {
        const std::size_t end = std::min(text.find(',', start), text.size());
        const std::string item = text.substr(start, end - start);
        if (item.empty() || item.find_first_not_of("0123456789") != std::string::npos) {
          throw bad("a comma-separated list of integers");
        }
        list.push_back(std::stoi(item));
        start = end + 1;
      }
      return list;
    }
  }
  return nullptr;
}

std::vector<Rgb> palette(std::size_t classes) {
  std::vector<Rgb> colors{{0, 0, 0}};
  for (std::size_t k = 0; k < classes; ++k) {
    const double h = 6.0 * static_cast<double>(k) / static_cast<double>(classes);
    const int sector = static_cast<int>(h) % 6;
    const double f = h - std::floor(h);
    auto byte = [](double v) { return static_cast<std::uint8_t>(std::lround(255.0 * v)); };
    const std::uint8_t up = byte(f), down = byte(1.0 - f);
    switch (sector) {
      case 0: colors.push_back({255, up, 0}); break;
      case 1: colors.push_back({down, 255, 0}); break;
      case 2: colors.push_back({0, 255, up}); break;
      case 3: colors.push_back({0, down, 255}); break;
      case 4: colors.push_back({up, 0, 255}); break;
      default: colors.push_back({255, 0, down}); break;
    }
  }
  return colors;
}

void write_ppm(const std::filesystem::path& path, std::size_t height, std::size_t width,
               const std::vector<int>& labels, const std::vector<Rgb>& colors) {
  if (labels.size() != height * width) {
    throw DimensionError("write_ppm: " + std::to_string(labels.size()) + " labels for a " + std::to_string(height) +
                         "x" + std::to_string(width) + " image");
  }
  auto out = open_out(path, std::ios::binary);
  out << "P6\n" << width << ' ' << height << "\n255\n";
  for (int l : labels) {
    const Rgb& c = colors.at(static_cast<std::size_t>(l));
    out.write(reinterpret_cast<const char*>(c.data()), 3);
  }
  if (!out) throw LoadError("write failed for " + path.string());
}

Prepared load_prepared(const RunConfig& config) {
  const std::filesystem::path dir(config.out);
  Prepared p;
  p.manifest = read_json(dir / "manifest.json");
  auto cube = std::make_shared<HsiCube>(load_cube(dir / p.manifest.at("cube").get<std::string>()));
  if (cube->bands != config.bands) {
    throw ConfigError("bands = " + std::to_string(config.bands) + " but the preprocessed cube in " + dir.string() +
                      " has " + std::to_string(cube->bands) + "; rerun preprocess");
  }
  PatchSet& s = p.data;
  s.cube = cube;
  s.patch = config.patch;
  s.classes = p.manifest.at("classes").get<int>();
  for (const auto& px : p.manifest.at("pixels")) {
    const std::size_t r = px.at(0), c = px.at(1);
    const int label = px.at(2);
    const std::string split = px.at(3);
    if (r >= cube->height || c >= cube->width || label < 1 || label > s.classes) {
      throw LoadError(dir.string() + "/manifest.json: pixel entry " + px.dump() + " is out of range");
    }
    s.rows.push_back(r);
    s.cols.push_back(c);
    s.labels.push_back(label);
    s.split.push_back(parse_split(split));
  }
  return p;
}

void cmd_preprocess(const RunConfig& config, std::ostream& log) {
  config.validate();
  if (config.cube.empty() || config.labels.empty()) throw ConfigError("preprocess needs --cube and --labels");
  const CubeShape shape = read_cube_shape(config.cube);
  if (config.bands > shape.bands) {
    throw ConfigError("bands B = " + std::to_string(config.bands) + " exceeds the C = " +
                      std::to_string(shape.bands) + " bands of " + config.cube);
  }
  auto [cube, labels] = load_dataset(config.cube, config.labels);
  log << "loaded " << cube.height << "x" << cube.width << "x" << cube.bands << " cube, " << labels.classes
      << " classes\n";
  auto [pca, reduced] = pca_reduce(cube, config.bands);
  const auto shared = std::make_shared<HsiCube>(std::move(reduced));
  const PatchSet all = extract_patches(shared, labels, config.patch);
  const PatchSet set = config.train_per_class > 0
                           ? stratified_split_count(all, config.train_per_class, config.seed)
                           : stratified_split(all, config.train_fraction, config.seed,
                                              config.rounding == "ceiling" ? SplitRounding::ceiling
                                                                           : SplitRounding::nearest);

  const std::filesystem::path dir(config.out);
  std::filesystem::create_directories(dir);
  save_cube(*shared, dir / "reduced.hsic");
  write_json(dir / "pca.json", {{"bands", pca.bands},
                                {"retained", pca.retained},
                                {"mean", pca.mean},
                                {"components", pca.components},
                                {"explained", pca.explained}});

  json pixels = json::array();
  std::vector<std::size_t> train(static_cast<std::size_t>(set.classes) + 1), test(train.size());
  for (std::size_t i = 0; i < set.size(); ++i) {
    const bool is_train = set.split[i] == Split::train;
    pixels.push_back({set.rows[i], set.cols[i], set.labels[i], is_train ? "train" : "test"});
    (is_train ? train : test)[static_cast<std::size_t>(set.labels[i])] += 1;
  }
  json counts = json::array();
  for (int k = 1; k <= set.classes; ++k) {
    counts.push_back({{"class", k}, {"train", train[static_cast<std::size_t>(k)]}, {"test", test[static_cast<std::size_t>(k)]}});
  }
  const json manifest = {{"format", "hsinet-manifest"},
                         {"version", 1},
                         {"config", to_json(config)},
                         {"cube", "reduced.hsic"},
                         {"source", {{"height", cube.height}, {"width", cube.width}, {"bands", cube.bands}}},
                         {"bands", config.bands},
                         {"classes", set.classes},
                         {"counts", counts},
                         {"pixels", pixels}};
  write_json(dir / "manifest.json", manifest, -1);
  log << "retained " << config.bands << " of " << cube.bands << " bands; " << set.indices(Split::train).size()
      << " train / " << set.indices(Split::test).size() << " test samples -> " << dir.string() << "\n";
}

std::vector<EpochLog> cmd_train(const RunConfig& config, std::ostream& log) {
  config.validate();
  const Prepared prepared = load_prepared(config);
  Model<float> model(config.model(resolve_classes(config, &prepared)), config.seed);
  const std::filesystem::path dir(config.out);
  auto csv = open_out(dir / "train_log.csv");
  csv << "epoch,loss,train_oa,seconds\n";
  auto history = train(model, prepared.data, config.training(), [&](const EpochLog& e) {
    csv << e.epoch << ',' << fixed(e.loss, 6) << ',' << fixed(e.train_oa, 6) << ',' << fixed(e.seconds, 3) << '\n';
    log << "epoch " << e.epoch << "/" << config.epochs << "  loss " << fixed(e.loss, 4) << "  train OA "
        << fixed(e.train_oa, 4) << "  (" << fixed(e.seconds, 1) << " s)\n";
  });
  save_checkpoint(model, config.checkpoint_dir());
  log << "checkpoint written to " << config.checkpoint_dir().string() << "\n";
  return history;
}

Evaluation cmd_eval(const RunConfig& config, std::ostream& log) {
  config.validate();
  const Prepared prepared = load_prepared(config);
  Model<float> model = trained_model(config, prepared);
  const Split which = parse_split(config.split);
  if (prepared.data.indices(which).empty()) throw DataError("the " + config.split + " split is empty");
  Evaluation e = evaluate(model, prepared.data, which);

  const std::filesystem::path dir(config.out);
  const MetricsReport& m = e.metrics;
  json per_class = json::array();
  for (double v : m.per_class) per_class.push_back(std::isnan(v) ? json(nullptr) : json(v));
  write_json(dir / "metrics.json", {{"split", config.split},
                                    {"samples", e.samples.size()},
                                    {"oa", m.oa},
                                    {"aa", m.aa},
                                    {"kappa", m.kappa},
                                    {"per_class", per_class}});
  auto csv = open_out(dir / "confusion.csv");
  csv << "true\\predicted";
  for (std::size_t k = 1; k <= e.confusion.classes; ++k) csv << ',' << k;
  csv << '\n';
  for (std::size_t i = 0; i < e.confusion.classes; ++i) {
    csv << i + 1;
    for (std::size_t j = 0; j < e.confusion.classes; ++j) csv << ',' << e.confusion.at(i, j);
    csv << '\n';
  }
  log << config.split << " samples " << e.samples.size() << "\nOA    " << fixed(100 * m.oa, 2) << "%\nAA    "
      << fixed(100 * m.aa, 2) << "%\nkappa " << fixed(m.kappa, 4) << "\n";
  for (std::size_t k = 0; k < m.per_class.size(); ++k) {
    log << "  class " << k + 1 << "  " << (std::isnan(m.per_class[k]) ? std::string("n/a") : fixed(100 * m.per_class[k], 2) + "%")
        << "\n";
  }
  return e;
}

std::vector<AblationResult> cmd_ablate(const RunConfig& config, std::ostream& log) {
  config.validate();
  const Prepared prepared = load_prepared(config);
  std::vector<AblationCase> chosen;
  for (int id : config.cases) chosen.push_back(ablation_cases()[static_cast<std::size_t>(id - 1)]);
  const std::filesystem::path dir(config.out);
  auto csv = open_out(dir / "ablation.csv");
  csv << "case,tbfe,hpa,cff,parameters,oa,aa,kappa\n";
  return ablate(config.model(resolve_classes(config, &prepared)), prepared.data, config.training(), chosen,
                [&](const AblationResult& r) {
                  const auto& c = r.which;
                  csv << c.id << ',' << (c.tbfe ? "twin" : "naive") << ',' << (c.hpa ? "on" : "off") << ','
                      << (c.cff ? "on" : "off") << ',' << r.parameters << ',' << fixed(r.metrics.oa, 6) << ','
                      << fixed(r.metrics.aa, 6) << ',' << fixed(r.metrics.kappa, 6) << '\n';
                  csv.flush();
                  log << c.label() << "  params " << r.parameters << "  OA " << fixed(100 * r.metrics.oa, 2)
                      << "%  AA " << fixed(100 * r.metrics.aa, 2) << "%  kappa " << fixed(r.metrics.kappa, 4)
                      << "\n";
                });
}

std::vector<int> cmd_map(const RunConfig& config, std::ostream& log) {
  config.validate();
  const Prepared prepared = load_prepared(config);
  Model<float> model = trained_model(config, prepared);
  const HsiCube& cube = *prepared.data.cube;
  std::vector<std::size_t> rows, cols;
  if (config.full) {
    for (std::size_t r = 0; r < cube.height; ++r)
      for (std::size_t c = 0; c < cube.width; ++c) {
        rows.push_back(r);
        cols.push_back(c);
      }
  } else {
    rows = prepared.data.rows;
    cols = prepared.data.cols;
  }
  std::vector<int> image(cube.pixels(), 0);
  constexpr std::size_t chunk = 256;
  for (std::size_t start = 0; start < rows.size(); start += chunk) {
    const std::size_t n = std::min(chunk, rows.size() - start);
    const auto patches = gather_windows<float>(cube, config.patch, std::span(rows).subspan(start, n),
                                               std::span(cols).subspan(start, n));
    const auto pred = model.predict(patches, chunk);
    for (std::size_t i = 0; i < n; ++i) image[rows[start + i] * cube.width + cols[start + i]] = pred[i] + 1;
  }
  const auto path = std::filesystem::path(config.out) / (config.full ? "map_full.ppm" : "map.ppm");
  write_ppm(path, cube.height, cube.width, image, palette(model.config().classes));
  log << "predicted " << rows.size() << " pixels -> " << path.string() << "\n";
  return image;
}

ParamReport cmd_params(const RunConfig& config, std::ostream& log) {
  config.validate();
  std::size_t k = config.classes;
  if (k == 0) {
    const auto manifest = std::filesystem::path(config.out) / "manifest.json";
    if (!std::filesystem::exists(manifest)) throw ConfigError("params needs --classes or a preprocessed --out");
    k = read_json(manifest).at("classes").get<std::size_t>();
  }
  const ModelConfig mc = config.model(k);
  const ParamReport r = param_report(Model<float>(mc, config.seed));
  for (const auto& [name, n] : r.by_component) log << std::left << std::setw(12) << name << n << "\n";
  log << std::left << std::setw(12) << "total" << r.total << " (" << fixed(r.total / 1000.0, 2) << "k)\n";
  log << std::left << std::setw(12) << "buffers" << r.buffers << "\n";
  auto more = mc;
  more.encoders += 1;
  log << "one more encoder adds " << param_report(Model<float>(more, config.seed)).total - r.total << "\n";
  return r;
}

void cmd_convert(const ConvertOptions& o, std::ostream& log) {
  if (o.input.empty() || o.output.empty()) throw ConfigError("convert needs --input and --output");
  if (o.height == 0 || o.width == 0 || o.bands == 0) throw ConfigError("convert needs positive --height, --width, --bands");
  const RawType type = parse_raw_type(o.dtype);
  if (o.labels) {
    const LabelRaster l = read_raw_labels(o.input, o.height, o.width, type);
    save_labels(l, o.output);
    log << "wrote " << o.height << "x" << o.width << " label raster with " << l.classes << " classes to " << o.output
        << "\n";
  } else {
    save_cube(read_raw_cube(o.input, o.height, o.width, o.bands, type, parse_interleave(o.interleave)), o.output);
    log << "wrote " << o.height << "x" << o.width << "x" << o.bands << " cube to " << o.output << "\n";
  }
}

void cmd_synth(const SynthConfig& config, const std::filesystem::path& out, std::ostream& log) {
  auto [cube, labels] = make_synthetic(config);
  std::filesystem::create_directories(out);
  save_cube(cube, out / "synth.hsic");
  save_labels(labels, out / "synth.hsil");
  log << "wrote " << cube.height << "x" << cube.width << "x" << cube.bands << " synthetic scene with "
      << labels.classes << " classes to " << out.string() << "\n";
}

}  // namespace hsinet
