#pragma once

// Hyperspectral cubes, label rasters, PCA reduction, patch extraction and
// stratified splitting.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "hsinet/tensor.hpp"

namespace hsinet {

/// Malformed or inconsistent file contents. Messages name the byte offset.
class LoadError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Data that is well formed but unusable (no labeled pixels, empty class).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// H x W x C radiances, band-interleaved-by-pixel.
struct HsiCube {
  std::size_t height = 0, width = 0, bands = 0;
  std::vector<float> values;

  float at(std::size_t row, std::size_t col, std::size_t band) const {
    return values[(row * width + col) * bands + band];
  }
  std::size_t pixels() const { return height * width; }
};

/// 0 marks unlabeled pixels; labeled pixels carry 1..classes.
struct LabelRaster {
  std::size_t height = 0, width = 0;
  int classes = 0;
  std::vector<std::uint16_t> labels;

  int at(std::size_t row, std::size_t col) const { return labels[row * width + col]; }
};

HsiCube load_cube(const std::filesystem::path& path);
/// Geometry from the header alone; the payload is not read.
struct CubeShape {
  std::size_t height = 0, width = 0, bands = 0;
};
CubeShape read_cube_shape(const std::filesystem::path& path);
LabelRaster load_labels(const std::filesystem::path& path);
/// Loads both files and checks that their spatial dimensions agree.
std::pair<HsiCube, LabelRaster> load_dataset(const std::filesystem::path& cube_path,
                                             const std::filesystem::path& label_path);
void save_cube(const HsiCube& cube, const std::filesystem::path& path);
void save_labels(const LabelRaster& labels, const std::filesystem::path& path);

enum class RawType { f32, u16, i16 };
enum class Interleave { bip, bil, bsq };
RawType parse_raw_type(const std::string& name);
Interleave parse_interleave(const std::string& name);

/// Reads a headerless little-endian raw cube of the given geometry.
HsiCube read_raw_cube(const std::filesystem::path& path, std::size_t height, std::size_t width, std::size_t bands,
                      RawType type, Interleave order);
/// Reads a headerless raw label raster (u16 or u8 style integers stored as
/// the given type). `classes` is taken as the largest label present.
LabelRaster read_raw_labels(const std::filesystem::path& path, std::size_t height, std::size_t width,
                            RawType type);

struct PcaModel {
  std::vector<double> mean;        // C
  std::vector<double> components;  // C x B row-major, columns orthonormal
  std::vector<double> explained;   // B, non-increasing
  std::size_t bands = 0, retained = 0;
};

/// Projects every pixel onto the top-B principal components of the sample
/// covariance computed over all pixels.
std::pair<PcaModel, HsiCube> pca_reduce(const HsiCube& cube, std::size_t retained);
HsiCube pca_apply(const PcaModel& model, const HsiCube& cube);

enum class Split : std::uint8_t { unassigned, train, test };

/// Labeled pixel centers over a shared cube. Patches are materialized on
/// demand by gather().
struct PatchSet {
  std::shared_ptr<const HsiCube> cube;
  std::size_t patch = 0;
  int classes = 0;
  std::vector<std::size_t> rows, cols;
  std::vector<int> labels;  // 1..classes
  std::vector<Split> split;

  std::size_t size() const { return labels.size(); }
  std::vector<std::size_t> indices(Split which) const;

  /// Zero-padded windows for the given samples, laid out [n, B, P, P].
  template <typename T>
  Tensor<T> gather(std::span<const std::size_t> which) const;
};

/// Patches for an arbitrary list of pixel centers (labels are not needed).
template <typename T>
Tensor<T> gather_windows(const HsiCube& cube, std::size_t patch, std::span<const std::size_t> rows,
                         std::span<const std::size_t> cols);

PatchSet extract_patches(std::shared_ptr<const HsiCube> cube, const LabelRaster& labels, std::size_t patch);

enum class SplitRounding { nearest, ceiling };

/// Training samples drawn from a class of n samples; at least 1.
std::size_t train_count(std::size_t n, double fraction, SplitRounding rounding = SplitRounding::nearest);

/// Per-class seeded shuffle; the first train_count samples of each class go
/// to training. Classes are visited in ascending order.
PatchSet stratified_split(const PatchSet& set, double fraction, std::uint64_t seed,
                          SplitRounding rounding = SplitRounding::nearest);
/// Same, with a fixed number of training samples per class (capped at n).
PatchSet stratified_split_count(const PatchSet& set, std::size_t per_class, std::uint64_t seed);

struct SynthConfig {
  std::size_t height = 32, width = 32, bands = 16;
  int classes = 4;
  // Minimum distance between class mean spectra, in units of noise sigma.
  double separation = 3.0;
  double noise = 1.0;
  std::uint64_t seed = 0;
};

/// Block-layout scene: the image is tiled into ceil(sqrt(K))^2 rectangles
/// assigned to classes in row-major order, each pixel a class signature
/// (Gaussian bump over bands on a flat baseline) plus iid Gaussian noise.
std::pair<HsiCube, LabelRaster> make_synthetic(const SynthConfig& config);
/// Class mean spectra used by make_synthetic, [classes][bands].
std::vector<std::vector<double>> synthetic_signatures(const SynthConfig& config);

}  // namespace hsinet
