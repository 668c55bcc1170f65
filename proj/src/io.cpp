#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include "json.hpp"

#include "hsinet/data.hpp"

namespace hsinet {

static_assert(std::endian::native == std::endian::little, "payloads are read as native little-endian");

namespace {

using nlohmann::json;

std::vector<char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

struct Header {
  json fields;
  std::size_t payload_offset = 0;
};

Header parse_header(const std::vector<char>& bytes, const std::filesystem::path& path) {
  std::size_t end = 0;
  while (end + 1 < bytes.size() && !(bytes[end] == '\n' && bytes[end + 1] == '\0')) ++end;
  if (end + 1 >= bytes.size()) {
    throw LoadError(path.string() + ": header terminator (newline + NUL) not found in " +
                    std::to_string(bytes.size()) + " bytes");
  }
  Header h;
  try {
    h.fields = json::parse(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(end));
  } catch (const json::parse_error& e) {
    throw LoadError(path.string() + ": malformed header at byte offset " + std::to_string(e.byte) + ": " +
                    e.what());
  }
  if (!h.fields.is_object()) throw LoadError(path.string() + ": header at byte offset 0 is not an object");
  h.payload_offset = end + 2;
  return h;
}

std::size_t positive_field(const Header& h, const char* key, const std::filesystem::path& path) {
  const auto it = h.fields.find(key);
  if (it == h.fields.end() || !it->is_number_integer() || it->get<long long>() <= 0) {
    throw LoadError(path.string() + ": header (byte offset 0) needs a positive integer '" + key + "'");
  }
  return it->get<std::size_t>();
}

void expect_string(const Header& h, const char* key, const std::string& value, const std::filesystem::path& path) {
  const auto it = h.fields.find(key);
  if (it == h.fields.end() || !it->is_string() || it->get<std::string>() != value) {
    throw LoadError(path.string() + ": header (byte offset 0) needs " + key + " = \"" + value + "\"");
  }
}

void check_payload(std::size_t available, std::size_t offset, std::size_t expected,
                   const std::filesystem::path& path) {
  if (available != expected) {
    throw LoadError(path.string() + ": payload at byte offset " + std::to_string(offset) + ": expected " +
                    std::to_string(expected) + " bytes, found " + std::to_string(available));
  }
}

void write_with_header(const std::filesystem::path& path, const json& header, const void* payload,
                       std::size_t bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw LoadError("cannot write " + path.string());
  const std::string text = header.dump();
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  out.put('\n');
  out.put('\0');
  out.write(static_cast<const char*>(payload), static_cast<std::streamsize>(bytes));
  if (!out) throw LoadError("write failed for " + path.string());
}

}  // namespace

HsiCube load_cube(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  const Header h = parse_header(bytes, path);
  HsiCube cube;
  cube.height = positive_field(h, "height", path);
  cube.width = positive_field(h, "width", path);
  cube.bands = positive_field(h, "bands", path);
  expect_string(h, "dtype", "f32", path);
  expect_string(h, "order", "band-interleaved-by-pixel", path);
  const std::size_t count = cube.height * cube.width * cube.bands;
  check_payload(bytes.size() - h.payload_offset, h.payload_offset, count * sizeof(float), path);
  cube.values.resize(count);
  std::memcpy(cube.values.data(), bytes.data() + h.payload_offset, count * sizeof(float));
  for (std::size_t i = 0; i < count; ++i) {
    if (!std::isfinite(cube.values[i])) {
      throw LoadError(path.string() + ": non-finite value at byte offset " +
                      std::to_string(h.payload_offset + i * sizeof(float)));
    }
  }
  return cube;
}

CubeShape read_cube_shape(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open " + path.string());
  std::vector<char> bytes;
  char c;
  while (in.get(c)) {
    bytes.push_back(c);
    if (c == '\0' && bytes.size() >= 2 && bytes[bytes.size() - 2] == '\n') break;
  }
  const Header h = parse_header(bytes, path);
  return {positive_field(h, "height", path), positive_field(h, "width", path), positive_field(h, "bands", path)};
}

LabelRaster load_labels(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  const Header h = parse_header(bytes, path);
  LabelRaster raster;
  raster.height = positive_field(h, "height", path);
  raster.width = positive_field(h, "width", path);
  const auto it = h.fields.find("classes");
  if (it == h.fields.end() || !it->is_number_integer() || it->get<long long>() < 0 ||
      it->get<long long>() > 65535) {
    throw LoadError(path.string() + ": header (byte offset 0) needs an integer 'classes' in [0, 65535]");
  }
  raster.classes = it->get<int>();
  expect_string(h, "dtype", "u16", path);
  const std::size_t count = raster.height * raster.width;
  check_payload(bytes.size() - h.payload_offset, h.payload_offset, count * sizeof(std::uint16_t), path);
  raster.labels.resize(count);
  std::memcpy(raster.labels.data(), bytes.data() + h.payload_offset, count * sizeof(std::uint16_t));
  for (std::size_t i = 0; i < count; ++i) {
    if (raster.labels[i] > raster.classes) {
      throw LoadError(path.string() + ": label " + std::to_string(raster.labels[i]) + " at byte offset " +
                      std::to_string(h.payload_offset + i * 2) + " exceeds classes = " +
                      std::to_string(raster.classes));
    }
  }
  return raster;
}

std::pair<HsiCube, LabelRaster> load_dataset(const std::filesystem::path& cube_path,
                                             const std::filesystem::path& label_path) {
  auto cube = load_cube(cube_path);
  auto labels = load_labels(label_path);
  if (cube.height != labels.height || cube.width != labels.width) {
    throw LoadError(label_path.string() + ": header (byte offset 0) dimensions " + std::to_string(labels.height) +
                    "x" + std::to_string(labels.width) + " do not match cube " + std::to_string(cube.height) + "x" +
                    std::to_string(cube.width));
  }
  return {std::move(cube), std::move(labels)};
}

void save_cube(const HsiCube& cube, const std::filesystem::path& path) {
  if (cube.values.size() != cube.height * cube.width * cube.bands) {
    throw DimensionError("save_cube: value count does not match geometry");
  }
  const json header = {{"height", cube.height},
                       {"width", cube.width},
                       {"bands", cube.bands},
                       {"dtype", "f32"},
                       {"order", "band-interleaved-by-pixel"}};
  write_with_header(path, header, cube.values.data(), cube.values.size() * sizeof(float));
}

void save_labels(const LabelRaster& labels, const std::filesystem::path& path) {
  if (labels.labels.size() != labels.height * labels.width) {
    throw DimensionError("save_labels: label count does not match geometry");
  }
  const json header = {
      {"height", labels.height}, {"width", labels.width}, {"classes", labels.classes}, {"dtype", "u16"}};
  write_with_header(path, header, labels.labels.data(), labels.labels.size() * sizeof(std::uint16_t));
}

RawType parse_raw_type(const std::string& name) {
  if (name == "f32") return RawType::f32;
  if (name == "u16") return RawType::u16;
  if (name == "i16") return RawType::i16;
  throw ConfigError("unknown raw dtype '" + name + "' (expected f32, u16 or i16)");
}

Interleave parse_interleave(const std::string& name) {
  if (name == "bip") return Interleave::bip;
  if (name == "bil") return Interleave::bil;
  if (name == "bsq") return Interleave::bsq;
  throw ConfigError("unknown interleave '" + name + "' (expected bip, bil or bsq)");
}

namespace {

std::size_t raw_size(RawType type) { return type == RawType::f32 ? 4 : 2; }

double raw_value(const char* p, RawType type) {
  switch (type) {
    case RawType::f32: {
      float v;
      std::memcpy(&v, p, 4);
      return v;
    }
    case RawType::u16: {
      std::uint16_t v;
      std::memcpy(&v, p, 2);
      return v;
    }
    case RawType::i16: {
      std::int16_t v;
      std::memcpy(&v, p, 2);
      return v;
    }
  }
  return 0;
}

}  // namespace

HsiCube read_raw_cube(const std::filesystem::path& path, std::size_t height, std::size_t width, std::size_t bands,
                      RawType type, Interleave order) {
  if (height == 0 || width == 0 || bands == 0) throw ConfigError("raw cube dimensions must be positive");
  const auto bytes = read_file(path);
  const std::size_t count = height * width * bands;
  check_payload(bytes.size(), 0, count * raw_size(type), path);
  HsiCube cube{height, width, bands, std::vector<float>(count)};
  for (std::size_t r = 0; r < height; ++r)
    for (std::size_t c = 0; c < width; ++c)
      for (std::size_t b = 0; b < bands; ++b) {
        std::size_t src = 0;
        switch (order) {
          case Interleave::bip: src = (r * width + c) * bands + b; break;
          case Interleave::bil: src = (r * bands + b) * width + c; break;
          case Interleave::bsq: src = (b * height + r) * width + c; break;
        }
        const double v = raw_value(bytes.data() + src * raw_size(type), type);
        if (!std::isfinite(v)) {
          throw LoadError(path.string() + ": non-finite value at byte offset " +
                          std::to_string(src * raw_size(type)));
        }
        cube.values[(r * width + c) * bands + b] = static_cast<float>(v);
      }
  return cube;
}

LabelRaster read_raw_labels(const std::filesystem::path& path, std::size_t height, std::size_t width,
                            RawType type) {
  if (type == RawType::f32) throw ConfigError("raw labels must be u16 or i16");
  const auto bytes = read_file(path);
  check_payload(bytes.size(), 0, height * width * 2, path);
  LabelRaster raster{height, width, 0, std::vector<std::uint16_t>(height * width)};
  for (std::size_t i = 0; i < raster.labels.size(); ++i) {
    const double v = raw_value(bytes.data() + i * 2, type);
    if (v < 0) throw LoadError(path.string() + ": negative label at byte offset " + std::to_string(i * 2));
    raster.labels[i] = static_cast<std::uint16_t>(v);
    raster.classes = std::max<int>(raster.classes, raster.labels[i]);
  }
  return raster;
}

}  // namespace hsinet
