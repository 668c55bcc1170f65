#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <fstream>
#include <map>
#include <numeric>

#include "hsinet/data.hpp"
#include "hsinet/rng.hpp"
#include "temp_dir.hpp"

using namespace hsinet;

namespace {

// Per-class train and test counts of the 16-class Salinas scene at 0.5%.
const std::vector<std::size_t> kSalinasTrain{10, 19, 10, 7, 13, 20, 18, 56, 31, 16, 5, 10, 5, 5, 36, 9};
const std::vector<std::size_t> kSalinasTest{1999, 3707, 1966, 1387, 2665, 3939, 3561, 11215,
                                            6172, 3262, 1063, 1917, 911,  1065, 7232, 1798};

HsiCube random_cube(std::size_t h, std::size_t w, std::size_t c, std::uint64_t seed) {
  Rng rng(seed);
  HsiCube cube{h, w, c, std::vector<float>(h * w * c)};
  for (auto& v : cube.values) v = static_cast<float>(rng.normal(0.0, 1.0));
  return cube;
}

PatchSet labelled_set(const std::vector<std::size_t>& counts) {
  const std::size_t total = std::accumulate(counts.begin(), counts.end(), std::size_t{0});
  auto cube = std::make_shared<HsiCube>(HsiCube{1, total + 3, 1, std::vector<float>(total + 3, 1.f)});
  LabelRaster raster{1, total + 3, static_cast<int>(counts.size()), std::vector<std::uint16_t>(total + 3, 0)};
  std::size_t pos = 0;
  for (std::size_t k = 0; k < counts.size(); ++k)
    for (std::size_t i = 0; i < counts[k]; ++i) raster.labels[pos++] = static_cast<std::uint16_t>(k + 1);
  return extract_patches(cube, raster, 3);
}

std::map<int, std::pair<std::size_t, std::size_t>> split_counts(const PatchSet& set) {
  std::map<int, std::pair<std::size_t, std::size_t>> out;
  for (std::size_t i = 0; i < set.size(); ++i) {
    auto& e = out[set.labels[i]];
    (set.split[i] == Split::train ? e.first : e.second) += 1;
  }
  return out;
}

}  // namespace

TEST_CASE("cube and label files round-trip") {
  hsinet::testing::TempDir dir;
  HsiCube cube{2, 2, 3, {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12}};
  save_cube(cube, dir / "a.hsic");
  auto back = load_cube(dir / "a.hsic");
  CHECK(back.height == 2);
  CHECK(back.width == 2);
  CHECK(back.bands == 3);
  CHECK(back.values == cube.values);
  CHECK(back.at(1, 0, 2) == 9.f);

  LabelRaster zeros{2, 2, 0, {0, 0, 0, 0}};
  save_labels(zeros, dir / "a.hsil");
  auto [c2, l2] = load_dataset(dir / "a.hsic", dir / "a.hsil");
  CHECK(l2.labels == zeros.labels);
  auto set = extract_patches(std::make_shared<HsiCube>(c2), l2, 3);
  CHECK(set.size() == 0);
  CHECK_THROWS_AS(stratified_split(set, 0.5, 1), DataError);
}

TEST_CASE("load errors name offsets and counts") {
  hsinet::testing::TempDir dir;
  HsiCube cube{2, 2, 3, std::vector<float>(12, 1.f)};
  save_cube(cube, dir / "c.hsic");
  {
    std::ifstream in(dir / "c.hsic", std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    std::ofstream(dir / "t.hsic", std::ios::binary).write(bytes.data(), static_cast<long>(bytes.size() - 5));
    const std::size_t offset = bytes.size() - 48;
    try {
      load_cube(dir / "t.hsic");
      FAIL("expected a load error");
    } catch (const LoadError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("expected 48 bytes") != std::string::npos);
      CHECK(msg.find("found 43") != std::string::npos);
      CHECK(msg.find("byte offset " + std::to_string(offset)) != std::string::npos);
    }
    std::string nan_bytes = bytes;
    const float nan = NAN;
    std::memcpy(nan_bytes.data() + offset + 8, &nan, 4);
    std::ofstream(dir / "n.hsic", std::ios::binary).write(nan_bytes.data(), static_cast<long>(nan_bytes.size()));
    try {
      load_cube(dir / "n.hsic");
      FAIL("expected a load error");
    } catch (const LoadError& e) {
      CHECK(std::string(e.what()).find("byte offset " + std::to_string(offset + 8)) != std::string::npos);
    }
  }
  std::ofstream(dir / "bad.hsic", std::ios::binary) << "{\"height\": 2,,}\n" << '\0';
  CHECK_THROWS_AS(load_cube(dir / "bad.hsic"), LoadError);
  std::ofstream(dir / "none.hsic", std::ios::binary) << "{\"height\": 2}";
  CHECK_THROWS_AS(load_cube(dir / "none.hsic"), LoadError);

  save_labels(LabelRaster{3, 2, 1, std::vector<std::uint16_t>(6, 1)}, dir / "l.hsil");
  CHECK_THROWS_AS(load_dataset(dir / "c.hsic", dir / "l.hsil"), LoadError);
  save_labels(LabelRaster{2, 2, 1, {0, 1, 2, 0}}, dir / "over.hsil");
  CHECK_THROWS_AS(load_labels(dir / "over.hsil"), LoadError);
}

TEST_CASE("raw conversion handles interleaves") {
  hsinet::testing::TempDir dir;
  // 2 x 3 pixels, 2 bands; value = 100*band + 10*row + col.
  std::vector<std::int16_t> bsq, bil;
  for (int b = 0; b < 2; ++b)
    for (int r = 0; r < 2; ++r)
      for (int c = 0; c < 3; ++c) bsq.push_back(static_cast<std::int16_t>(100 * b + 10 * r + c));
  for (int r = 0; r < 2; ++r)
    for (int b = 0; b < 2; ++b)
      for (int c = 0; c < 3; ++c) bil.push_back(static_cast<std::int16_t>(100 * b + 10 * r + c));
  std::ofstream(dir / "bsq.raw", std::ios::binary).write(reinterpret_cast<const char*>(bsq.data()), 24);
  std::ofstream(dir / "bil.raw", std::ios::binary).write(reinterpret_cast<const char*>(bil.data()), 24);
  for (auto [file, order] : {std::pair{"bsq.raw", Interleave::bsq}, std::pair{"bil.raw", Interleave::bil}}) {
    auto cube = read_raw_cube(dir / file, 2, 3, 2, RawType::i16, order);
    for (std::size_t r = 0; r < 2; ++r)
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t b = 0; b < 2; ++b) CHECK(cube.at(r, c, b) == static_cast<float>(100 * b + 10 * r + c));
  }
  CHECK_THROWS_AS(read_raw_cube(dir / "bsq.raw", 2, 3, 3, RawType::i16, Interleave::bsq), LoadError);
  CHECK_THROWS_AS(parse_interleave("xyz"), ConfigError);
}

TEST_CASE("pca on analytic cases") {
  SUBCASE("rank one data") {
    HsiCube cube{1, 5, 2, {}};
    for (float x : {1.f, 2.f, -3.f, 0.5f, 4.f}) {
      cube.values.push_back(x);
      cube.values.push_back(2 * x);
    }
    auto [model, reduced] = pca_reduce(cube, 1);
    auto [full, unused] = pca_reduce(cube, 2);
    const double total = full.explained[0] + full.explained[1];
    CHECK(full.explained[0] / total == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(model.components[0] == doctest::Approx(1 / std::sqrt(5.0)));
    CHECK(model.components[1] == doctest::Approx(2 / std::sqrt(5.0)));
    CHECK(reduced.bands == 1);
  }
  SUBCASE("diagonal covariance") {
    const float a = static_cast<float>(std::sqrt(6.0)), b = static_cast<float>(std::sqrt(1.5));
    HsiCube cube{2, 2, 2, {a, 0, -a, 0, 0, b, 0, -b}};
    auto [model, reduced] = pca_reduce(cube, 2);
    CHECK(model.explained[0] == doctest::Approx(4.0).epsilon(1e-6));
    CHECK(model.explained[1] == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(std::abs(model.components[0] - 1.0) < 1e-12);
    CHECK(std::abs(model.components[1]) < 1e-12);
    CHECK(std::abs(model.components[2]) < 1e-12);
    CHECK(std::abs(model.components[3] - 1.0) < 1e-12);
  }
  CHECK_THROWS_AS(pca_reduce(random_cube(2, 2, 3, 1), 4), ConfigError);
}

TEST_CASE("pca invariants on random cubes") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto cube = random_cube(6, 7, 9, seed);
    // Correlate bands so the spectrum is not flat.
    for (std::size_t p = 0; p < cube.pixels(); ++p)
      for (std::size_t b = 1; b < 9; ++b) cube.values[p * 9 + b] += 0.7f * cube.values[p * 9 + b - 1];
    auto [model, reduced] = pca_reduce(cube, 9);
    double worst = 0;
    for (std::size_t i = 0; i < 9; ++i)
      for (std::size_t j = 0; j < 9; ++j) {
        double dot = 0;
        for (std::size_t r = 0; r < 9; ++r) dot += model.components[r * 9 + i] * model.components[r * 9 + j];
        worst = std::max(worst, std::abs(dot - (i == j ? 1.0 : 0.0)));
      }
    CHECK(worst < 1e-8);
    for (std::size_t j = 0; j < 9; ++j) {
      CHECK(model.explained[j] >= 0.0);
      if (j > 0) CHECK(model.explained[j] <= model.explained[j - 1]);
      std::size_t pivot = 0;
      for (std::size_t r = 1; r < 9; ++r)
        if (std::abs(model.components[r * 9 + j]) > std::abs(model.components[pivot * 9 + j])) pivot = r;
      CHECK(model.components[pivot * 9 + j] > 0.0);
    }
    double err = 0, norm = 0;
    for (std::size_t p = 0; p < cube.pixels(); ++p)
      for (std::size_t i = 0; i < 9; ++i) {
        double back = 0;
        for (std::size_t j = 0; j < 9; ++j) back += model.components[i * 9 + j] * reduced.values[p * 9 + j];
        const double centred = cube.values[p * 9 + i] - model.mean[i];
        err = std::max(err, std::abs(back - centred));
        norm = std::max(norm, std::abs(centred));
      }
    CHECK(err / norm < 1e-5);
    auto again = pca_reduce(cube, 4);
    CHECK(again.second.bands == 4);
    for (std::size_t p = 0; p < cube.pixels(); ++p)
      for (std::size_t j = 0; j < 4; ++j) CHECK(again.second.values[p * 4 + j] == reduced.values[p * 9 + j]);
  }
}

TEST_CASE("patch extraction") {
  auto ones = std::make_shared<HsiCube>(HsiCube{10, 10, 2, std::vector<float>(200, 1.f)});
  LabelRaster raster{10, 10, 2, std::vector<std::uint16_t>(100, 0)};
  raster.labels[0] = 1;
  raster.labels[55] = 2;
  raster.labels[99] = 1;
  auto set = extract_patches(ones, raster, 5);
  REQUIRE(set.size() == 3);
  CHECK(set.labels == std::vector<int>{1, 2, 1});
  CHECK(set.rows == std::vector<std::size_t>{0, 5, 9});
  CHECK(set.cols == std::vector<std::size_t>{0, 5, 9});
  std::vector<std::size_t> first{0};
  auto corner = set.gather<double>(first);
  CHECK(corner.shape() == Shape{1, 2, 5, 5});
  for (std::size_t b = 0; b < 2; ++b) {
    std::size_t inside = 0, padded = 0;
    for (std::size_t i = 0; i < 25; ++i) (corner.data()[b * 25 + i] == 1.0 ? inside : padded) += 1;
    // pad 2: a 3 x 3 block of the window overlaps the image.
    CHECK(inside == 9);
    CHECK(padded == 16);
  }

  auto big = std::make_shared<HsiCube>(HsiCube{20, 20, 1, std::vector<float>(400, 1.f)});
  LabelRaster one{20, 20, 1, std::vector<std::uint16_t>(400, 0)};
  one.labels[0] = 1;
  auto wide = extract_patches(big, one, 19);
  auto w = wide.gather<float>(first);
  CHECK(std::accumulate(w.data().begin(), w.data().end(), 0.0) == 100.0);  // pad 9: 10 x 10 overlap

  auto cube = std::make_shared<HsiCube>(random_cube(12, 11, 3, 4));
  LabelRaster all{12, 11, 1, std::vector<std::uint16_t>(132, 1)};
  auto dense = extract_patches(cube, all, 5);
  const std::size_t idx = 6 * 11 + 5;
  CHECK(dense.rows[idx] == 6);
  CHECK(dense.cols[idx] == 5);
  std::vector<std::size_t> pick{idx};
  auto p = dense.gather<double>(pick);
  for (std::size_t b = 0; b < 3; ++b)
    for (std::size_t y = 0; y < 5; ++y)
      for (std::size_t x = 0; x < 5; ++x) CHECK(p.at({0, b, y, x}) == cube->at(4 + y, 3 + x, b));

  CHECK_THROWS_AS(extract_patches(cube, all, 4), ConfigError);
  CHECK_THROWS_AS(extract_patches(cube, all, 1), ConfigError);
}

TEST_CASE("stratified split counts") {
  auto ten = labelled_set({10});
  auto half = stratified_split(ten, 0.5, 3);
  CHECK(split_counts(half)[1] == std::pair<std::size_t, std::size_t>{5, 5});

  std::vector<std::size_t> totals(16);
  for (std::size_t k = 0; k < 16; ++k) totals[k] = kSalinasTrain[k] + kSalinasTest[k];
  auto salinas = labelled_set(totals);
  auto split = stratified_split(salinas, 0.005, 7);
  auto counts = split_counts(split);
  for (int k = 1; k <= 16; ++k) {
    CAPTURE(k);
    CHECK(counts[k].first == kSalinasTrain[k - 1]);
    CHECK(counts[k].second == kSalinasTest[k - 1]);
    CHECK(counts[k].first + counts[k].second == totals[k - 1]);
  }
  CHECK(counts[2] == std::pair<std::size_t, std::size_t>{19, 3707});

  std::size_t ceiling_mismatches = 0;
  for (std::size_t k = 0; k < 16; ++k)
    if (train_count(totals[k], 0.005, SplitRounding::ceiling) != kSalinasTrain[k]) ++ceiling_mismatches;
  CHECK(ceiling_mismatches > 0);
  CHECK(train_count(2009, 0.005, SplitRounding::ceiling) == 11);
  CHECK(train_count(3, 0.01) == 1);
  CHECK(train_count(20, 0.5, SplitRounding::ceiling) == 10);

  auto again = stratified_split(salinas, 0.005, 7);
  CHECK(again.split == split.split);
  auto other = stratified_split(salinas, 0.005, 8);
  CHECK(other.split != split.split);
  CHECK(split_counts(other) == counts);

  auto fixed = stratified_split_count(salinas, 20, 1);
  for (auto& [k, c] : split_counts(fixed)) CHECK(c.first == 20);

  CHECK_THROWS_AS(stratified_split(salinas, 1.0, 1), ConfigError);
  CHECK_THROWS_AS(stratified_split(labelled_set({4, 0, 3}), 0.5, 1), DataError);
}

TEST_CASE("synthetic generator") {
  SynthConfig cfg;
  cfg.seed = 5;
  auto sig = synthetic_signatures(cfg);
  double min_d = INFINITY;
  for (std::size_t a = 0; a < 4; ++a)
    for (std::size_t b = a + 1; b < 4; ++b) {
      double d = 0;
      for (std::size_t i = 0; i < 16; ++i) d += (sig[a][i] - sig[b][i]) * (sig[a][i] - sig[b][i]);
      min_d = std::min(min_d, std::sqrt(d));
    }
  CHECK(min_d == doctest::Approx(3.0));
  auto [cube, labels] = make_synthetic(cfg);
  CHECK(labels.at(0, 0) == 1);
  CHECK(labels.at(0, 31) == 2);
  CHECK(labels.at(31, 0) == 3);
  CHECK(labels.at(31, 31) == 4);
  for (int k = 1; k <= 4; ++k) CHECK(std::count(labels.labels.begin(), labels.labels.end(), k) == 256);
  auto [cube2, labels2] = make_synthetic(cfg);
  CHECK(cube2.values == cube.values);
  // Sample class means approach the signatures.
  double mean_b4 = 0;
  for (std::size_t r = 0; r < 16; ++r)
    for (std::size_t c = 0; c < 16; ++c) mean_b4 += cube.at(r, c, 2) / 256.0;
  CHECK(std::abs(mean_b4 - sig[0][2]) < 0.3);
}
