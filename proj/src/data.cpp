#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>

#include <Eigen/Dense>

#include "hsinet/data.hpp"
#include "hsinet/rng.hpp"

namespace hsinet {

std::pair<PcaModel, HsiCube> pca_reduce(const HsiCube& cube, std::size_t retained) {
  const std::size_t c = cube.bands;
  const std::size_t n = cube.pixels();
  if (retained < 1 || retained > c) {
    throw ConfigError("pca: retained bands B = " + std::to_string(retained) + " must lie in [1, " +
                      std::to_string(c) + "]");
  }
  if (n < 2) throw DataError("pca: need at least 2 pixels");

  Eigen::VectorXd mean = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(c));
  for (std::size_t p = 0; p < n; ++p)
    for (std::size_t b = 0; b < c; ++b) mean[b] += cube.values[p * c + b];
  mean /= static_cast<double>(n);

  // Covariance accumulated over row blocks to bound memory.
  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(c, c);
  constexpr std::size_t kBlock = 4096;
  Eigen::MatrixXd block;
  for (std::size_t start = 0; start < n; start += kBlock) {
    const std::size_t rows = std::min(kBlock, n - start);
    block.resize(rows, c);
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t b = 0; b < c; ++b) block(i, b) = cube.values[(start + i) * c + b] - mean[b];
    cov.selfadjointView<Eigen::Lower>().rankUpdate(block.transpose());
  }
  cov = cov.selfadjointView<Eigen::Lower>();
  cov /= static_cast<double>(n - 1);

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  if (solver.info() != Eigen::Success) throw NumericError("pca: eigendecomposition failed");

  PcaModel model;
  model.bands = c;
  model.retained = retained;
  model.mean.assign(mean.data(), mean.data() + c);
  model.components.assign(c * retained, 0.0);
  model.explained.resize(retained);
  // Eigen returns ascending eigenvalues.
  for (std::size_t j = 0; j < retained; ++j) {
    const Eigen::Index src = static_cast<Eigen::Index>(c - 1 - j);
    Eigen::VectorXd v = solver.eigenvectors().col(src);
    Eigen::Index pivot = 0;
    for (Eigen::Index i = 1; i < v.size(); ++i)
      if (std::abs(v[i]) > std::abs(v[pivot])) pivot = i;
    if (v[pivot] < 0) v = -v;
    for (std::size_t i = 0; i < c; ++i) model.components[i * retained + j] = v[static_cast<Eigen::Index>(i)];
    model.explained[j] = std::max(0.0, solver.eigenvalues()[src]);
  }
  return {model, pca_apply(model, cube)};
}

HsiCube pca_apply(const PcaModel& model, const HsiCube& cube) {
  if (cube.bands != model.bands) {
    throw DimensionError("pca_apply: cube has " + std::to_string(cube.bands) + " bands, model expects " +
                         std::to_string(model.bands));
  }
  const std::size_t c = model.bands, b = model.retained;
  HsiCube out{cube.height, cube.width, b, std::vector<float>(cube.pixels() * b)};
  std::vector<double> centered(c);
  for (std::size_t p = 0; p < cube.pixels(); ++p) {
    for (std::size_t i = 0; i < c; ++i) centered[i] = cube.values[p * c + i] - model.mean[i];
    for (std::size_t j = 0; j < b; ++j) {
      double acc = 0;
      for (std::size_t i = 0; i < c; ++i) acc += centered[i] * model.components[i * b + j];
      out.values[p * b + j] = static_cast<float>(acc);
    }
  }
  return out;
}

std::vector<std::size_t> PatchSet::indices(Split which) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < split.size(); ++i)
    if (split[i] == which) out.push_back(i);
  return out;
}

template <typename T>
Tensor<T> gather_windows(const HsiCube& cube, std::size_t patch, std::span<const std::size_t> rows,
                         std::span<const std::size_t> cols) {
  if (rows.size() != cols.size() || rows.empty()) throw DimensionError("gather_windows: bad center list");
  const std::size_t b = cube.bands, p = patch;
  const long pad = static_cast<long>(p / 2);
  std::vector<T> out(rows.size() * b * p * p, T(0));
  for (std::size_t n = 0; n < rows.size(); ++n) {
    T* dst = out.data() + n * b * p * p;
    for (std::size_t y = 0; y < p; ++y) {
      const long r = static_cast<long>(rows[n]) + static_cast<long>(y) - pad;
      if (r < 0 || r >= static_cast<long>(cube.height)) continue;
      for (std::size_t x = 0; x < p; ++x) {
        const long c = static_cast<long>(cols[n]) + static_cast<long>(x) - pad;
        if (c < 0 || c >= static_cast<long>(cube.width)) continue;
        const float* src = cube.values.data() + (static_cast<std::size_t>(r) * cube.width + c) * b;
        for (std::size_t band = 0; band < b; ++band) dst[(band * p + y) * p + x] = static_cast<T>(src[band]);
      }
    }
  }
  return Tensor<T>({rows.size(), b, p, p}, std::move(out));
}

template <typename T>
Tensor<T> PatchSet::gather(std::span<const std::size_t> which) const {
  std::vector<std::size_t> r(which.size()), c(which.size());
  for (std::size_t i = 0; i < which.size(); ++i) {
    r[i] = rows.at(which[i]);
    c[i] = cols.at(which[i]);
  }
  return gather_windows<T>(*cube, patch, r, c);
}

template Tensor<float> gather_windows<float>(const HsiCube&, std::size_t, std::span<const std::size_t>,
                                             std::span<const std::size_t>);
template Tensor<double> gather_windows<double>(const HsiCube&, std::size_t, std::span<const std::size_t>,
                                               std::span<const std::size_t>);
template Tensor<float> PatchSet::gather<float>(std::span<const std::size_t>) const;
template Tensor<double> PatchSet::gather<double>(std::span<const std::size_t>) const;

PatchSet extract_patches(std::shared_ptr<const HsiCube> cube, const LabelRaster& labels, std::size_t patch) {
  if (patch < 3 || patch % 2 == 0) {
    throw ConfigError("patch size P = " + std::to_string(patch) + " must be odd and at least 3");
  }
  if (cube->height != labels.height || cube->width != labels.width) {
    throw DimensionError("extract_patches: label raster does not match cube dimensions");
  }
  PatchSet set;
  set.cube = std::move(cube);
  set.patch = patch;
  set.classes = labels.classes;
  for (std::size_t r = 0; r < labels.height; ++r)
    for (std::size_t c = 0; c < labels.width; ++c) {
      const int label = labels.at(r, c);
      if (label == 0) continue;
      set.rows.push_back(r);
      set.cols.push_back(c);
      set.labels.push_back(label);
    }
  set.split.assign(set.labels.size(), Split::unassigned);
  return set;
}

std::size_t train_count(std::size_t n, double fraction, SplitRounding rounding) {
  const double raw = fraction * static_cast<double>(n);
  // Guard against representation error pushing an exact product upward.
  const double exact = std::nearbyint(raw);
  const double value = rounding == SplitRounding::ceiling
                           ? (std::abs(raw - exact) < 1e-9 ? exact : std::ceil(raw))
                           : static_cast<double>(std::llround(raw));
  return std::clamp<std::size_t>(static_cast<std::size_t>(value), 1, std::max<std::size_t>(n, 1));
}

namespace {

PatchSet split_with(const PatchSet& set, std::uint64_t seed,
                    const std::function<std::size_t(std::size_t)>& count_for) {
  if (set.size() == 0) throw DataError("split: no labeled pixels");
  std::vector<std::vector<std::size_t>> members(static_cast<std::size_t>(set.classes) + 1);
  for (std::size_t i = 0; i < set.size(); ++i) members.at(static_cast<std::size_t>(set.labels[i])).push_back(i);
  PatchSet out = set;
  out.split.assign(set.size(), Split::test);
  Rng rng(seed);
  for (int k = 1; k <= set.classes; ++k) {
    auto& idx = members[static_cast<std::size_t>(k)];
    if (idx.empty()) throw DataError("split: class " + std::to_string(k) + " has no labeled samples");
    std::shuffle(idx.begin(), idx.end(), rng.engine());
    const std::size_t m = count_for(idx.size());
    for (std::size_t j = 0; j < m; ++j) out.split[idx[j]] = Split::train;
  }
  return out;
}

}  // namespace

PatchSet stratified_split(const PatchSet& set, double fraction, std::uint64_t seed, SplitRounding rounding) {
  if (!(fraction > 0.0 && fraction < 1.0)) {
    throw ConfigError("train fraction must lie in (0, 1), got " + std::to_string(fraction));
  }
  return split_with(set, seed, [&](std::size_t n) { return train_count(n, fraction, rounding); });
}

PatchSet stratified_split_count(const PatchSet& set, std::size_t per_class, std::uint64_t seed) {
  if (per_class < 1) throw ConfigError("train samples per class must be at least 1");
  return split_with(set, seed, [&](std::size_t n) { return std::min(per_class, n); });
}

std::vector<std::vector<double>> synthetic_signatures(const SynthConfig& config) {
  const std::size_t k = static_cast<std::size_t>(config.classes);
  const double bands = static_cast<double>(config.bands);
  const double width = std::max(1.0, bands / (2.0 * static_cast<double>(k)));
  std::vector<std::vector<double>> bumps(k, std::vector<double>(config.bands));
  for (std::size_t c = 0; c < k; ++c) {
    const double centre = (static_cast<double>(c) + 0.5) * bands / static_cast<double>(k);
    for (std::size_t b = 0; b < config.bands; ++b) {
      const double z = (static_cast<double>(b) - centre) / width;
      bumps[c][b] = std::exp(-0.5 * z * z);
    }
  }
  double min_dist = std::numeric_limits<double>::infinity();
  for (std::size_t a = 0; a < k; ++a)
    for (std::size_t b = a + 1; b < k; ++b) {
      double d = 0;
      for (std::size_t i = 0; i < config.bands; ++i) d += (bumps[a][i] - bumps[b][i]) * (bumps[a][i] - bumps[b][i]);
      min_dist = std::min(min_dist, std::sqrt(d));
    }
  const double amplitude = k > 1 ? config.separation * config.noise / min_dist : 1.0;
  for (auto& s : bumps)
    for (auto& v : s) v = 1.0 + amplitude * v;
  return bumps;
}

std::pair<HsiCube, LabelRaster> make_synthetic(const SynthConfig& config) {
  if (config.classes < 1 || config.height == 0 || config.width == 0 || config.bands == 0) {
    throw ConfigError("synthetic: dimensions and class count must be positive");
  }
  const auto signatures = synthetic_signatures(config);
  const std::size_t grid = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(config.classes))));
  HsiCube cube{config.height, config.width, config.bands, std::vector<float>(config.height * config.width * config.bands)};
  LabelRaster labels{config.height, config.width, config.classes, std::vector<std::uint16_t>(config.height * config.width)};
  Rng rng(config.seed);
  for (std::size_t r = 0; r < config.height; ++r)
    for (std::size_t c = 0; c < config.width; ++c) {
      const std::size_t block = (r * grid / config.height) * grid + c * grid / config.width;
      const std::size_t cls = block % static_cast<std::size_t>(config.classes);
      labels.labels[r * config.width + c] = static_cast<std::uint16_t>(cls + 1);
      for (std::size_t b = 0; b < config.bands; ++b) {
        cube.values[(r * config.width + c) * config.bands + b] =
            static_cast<float>(signatures[cls][b] + rng.normal(0.0, config.noise));
      }
    }
  return {std::move(cube), std::move(labels)};
}

}  // namespace hsinet
