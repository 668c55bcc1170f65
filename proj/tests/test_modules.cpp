#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fixtures.hpp"
#include "hsinet/grad_check.hpp"
#include "hsinet/model.hpp"
#include "oracles.hpp"

using namespace hsinet;
using namespace hsinet::testing;

namespace {

std::vector<double> as_vec(const Tensor64& t) { return {t.data().begin(), t.data().end()}; }

TbfeBlockParams<double> random_block(std::size_t in, std::size_t s, Rng& rng, bool requires_grad = false) {
  TbfeBlockParams<double> b;
  b.pw_weight = random_tensor({s, in, 1, 1}, rng, requires_grad);
  b.pw_bias = random_tensor({s}, rng, requires_grad);
  b.w3d = random_tensor({1, 1, 3, 1, 1}, rng, requires_grad);
  b.b3d = random_tensor({1}, rng, requires_grad);
  b.w2d = random_tensor({s, s, 3, 3}, rng, requires_grad);
  b.b2d = random_tensor({s}, rng, requires_grad);
  b.norm = {random_tensor({2 * s}, rng, requires_grad, 0.5, 1.5), random_tensor({2 * s}, rng, requires_grad),
            Tensor64::zeros({2 * s}), Tensor64::full({2 * s}, 1.0)};
  return b;
}

std::vector<Tensor64> block_tensors(const TbfeBlockParams<double>& b) {
  return {b.pw_weight, b.pw_bias, b.w3d, b.b3d, b.w2d, b.b2d, b.norm.gain, b.norm.shift};
}

// Channel slice [from, from+count) of a [N, C, H, W] tensor.
std::vector<double> channels(const Tensor64& t, std::size_t from, std::size_t count) {
  std::vector<double> out;
  const std::size_t area = t.dim(2) * t.dim(3);
  for (std::size_t n = 0; n < t.dim(0); ++n)
    for (std::size_t c = from; c < from + count; ++c)
      for (std::size_t p = 0; p < area; ++p) out.push_back(t.data()[(n * t.dim(1) + c) * area + p]);
  return out;
}

}  // namespace

TEST_CASE("tbfe block shapes and branch layout") {
  Rng rng(1);
  auto p = random_block(5, 3, rng);
  auto x = random_tensor({2, 5, 7, 7}, rng);
  Tensor64 cat;
  auto y = tbfe_block(x, p, true, &cat);
  CHECK(y.shape() == Shape{2, 6, 7, 7});
  CHECK(tbfe_block(random_tensor({5, 7, 7}, rng), p, true).shape() == Shape{6, 7, 7});

  auto f = conv2d(x, p.pw_weight, p.pw_bias, 0);
  auto spectral = reshape(relu(conv3d(reshape(f, {2, 1, 3, 7, 7}), p.w3d, p.b3d, 1)), {2, 3, 7, 7});
  auto spatial = relu(conv2d(f, p.w2d, p.b2d, 1));
  CHECK(max_abs_diff<double>(channels(cat, 0, 3), as_vec(spectral)) == 0.0);
  CHECK(max_abs_diff<double>(channels(cat, 3, 3), as_vec(spatial)) == 0.0);

  SUBCASE("zero parameters give zero pre-normalization output") {
    auto z = p;
    for (auto* t : {&z.pw_weight, &z.pw_bias, &z.w3d, &z.b3d, &z.w2d, &z.b2d}) *t = Tensor64::zeros(t->shape());
    Tensor64 zc;
    tbfe_block(x, z, true, &zc);
    for (double v : zc.data()) CHECK(v == 0.0);
  }
  SUBCASE("branch independence") {
    auto q = p;
    q.w3d = random_tensor({1, 1, 3, 1, 1}, rng);
    Tensor64 qc;
    tbfe_block(x, q, true, &qc);
    CHECK(channels(qc, 3, 3) == channels(cat, 3, 3));
    CHECK(channels(qc, 0, 3) != channels(cat, 0, 3));
    auto r = p;
    r.w2d = random_tensor({3, 3, 3, 3}, rng);
    Tensor64 rc;
    tbfe_block(x, r, true, &rc);
    CHECK(channels(rc, 0, 3) == channels(cat, 0, 3));
    CHECK(channels(rc, 3, 3) != channels(cat, 3, 3));
  }
  SUBCASE("spectral branch is spatially local") {
    Tensor64 tc;
    tbfe_block(transpose(x, 2, 3), p, true, &tc);
    CHECK(max_abs_diff<double>(channels(tc, 0, 3), as_vec(transpose(spectral, 2, 3))) < 1e-12);
  }
  CHECK_THROWS_AS(tbfe_block(random_tensor({2, 4, 7, 7}, rng), p, true), DimensionError);
}

TEST_CASE("tbfe stack shape contract") {
  for (auto [b, s, d, p] : {std::tuple<std::size_t, std::size_t, std::size_t, std::size_t>{30, 32, 64, 19},
                            {8, 4, 8, 9},
                            {3, 2, 6, 5}}) {
    ModelConfig c = toy_config();
    c.bands = b;
    c.s = s;
    c.d = d;
    c.patch = p;
    c.hpa = false;
    c.heads = 2;
    Model<float> m(c, 1);
    Rng rng(2);
    auto x = random_tensor<float>({1, b, p, p}, rng);
    NoGradGuard guard;
    CHECK(tbfe_stack(x, m.tbfe, false).shape() == Shape{1, d, p, p});
    CHECK(tbfe_block(x, m.tbfe.block1, false).shape() == Shape{1, 2 * s, p, p});
  }
  auto naive_cfg = toy_config();
  naive_cfg.tbfe = false;
  Model<double> toy(naive_cfg, 3);
  Rng rng(3);
  auto x = random_tensor({2, 8, 9, 9}, rng);
  CHECK(tbfe_stack(x, toy.tbfe, true, true).shape() == Shape{2, 4, 9, 9});
}

TEST_CASE("group split and merge") {
  Rng rng(4);
  auto x = random_tensor({2, 32, 3, 3}, rng);
  auto g = group_split(x, 8);
  CHECK(g.shape() == Shape{16, 4, 3, 3});
  CHECK(max_abs_diff<double>(group_merge(g, 8).data(), x.data()) == 0.0);
  CHECK(max_abs_diff<double>(group_split(x, 1).data(), x.data()) == 0.0);
  CHECK(group_split(random_tensor({6, 2, 2}, rng), 3).shape() == Shape{3, 2, 2, 2});
  try {
    group_split(x, 5);
    FAIL("expected a configuration error");
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("32") != std::string::npos);
    CHECK(msg.find("5") != std::string::npos);
  }
}

TEST_CASE("pooled recalibration") {
  Rng rng(5);
  RecalibrateParams<double> zero{Tensor64::zeros({2, 2, 1, 1}), Tensor64::zeros({2})};
  auto g = random_tensor({1, 2, 3, 4}, rng);
  auto y = pooled_recalibrate(g, PoolMode::avg, zero);
  for (std::size_t i = 0; i < g.size(); ++i) CHECK(y.data()[i] == doctest::Approx(0.25 * g.data()[i]));

  RecalibrateParams<double> p{random_tensor({2, 2, 1, 1}, rng), random_tensor({2}, rng)};
  auto flat = Tensor64::full({1, 2, 3, 4}, 0.7);
  CHECK(max_abs_diff<double>(pooled_recalibrate(flat, PoolMode::avg, p).data(),
                             pooled_recalibrate(flat, PoolMode::max, p).data()) < 1e-15);

  for (bool use_max : {false, true}) {
    auto out = pooled_recalibrate(g, use_max ? PoolMode::max : PoolMode::avg, p);
    auto ref = oracle::pooled_recalibrate(as_vec(g), 2, 3, 4, as_vec(p.weight), as_vec(p.bias), use_max);
    CHECK(max_abs_diff(out, ref) < 1e-12);
  }
}

TEST_CASE("cross spatial aggregation") {
  Rng rng(6);
  auto p = random_hpa<double>(3, 1, rng);
  auto x = random_tensor({1, 3, 4, 5}, rng);
  SUBCASE("zero maps with zero affine halve the input") {
    auto q = p;
    q.norm_avg = {Tensor64::zeros({3}), Tensor64::zeros({3})};
    q.norm_max = q.norm_avg;
    auto zero = Tensor64::zeros({1, 3, 4, 5});
    auto y = cross_spatial_aggregate(zero, zero, x, q);
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(y.data()[i] == doctest::Approx(0.5 * x.data()[i]));
  }
  for (bool straight : {false, true}) {
    p.straight = straight;
    auto ga = random_tensor({1, 3, 4, 5}, rng), gm = random_tensor({1, 3, 4, 5}, rng);
    Tensor64 gate;
    auto y = cross_spatial_aggregate(ga, gm, x, p, &gate);
    CHECK(y.shape() == x.shape());
    std::vector<double> ref_gate;
    auto ref = oracle::cross_spatial_aggregate(as_vec(ga), as_vec(gm), as_vec(x), 3, 20, as_vec(p.norm_avg.gain),
                                               as_vec(p.norm_avg.shift), as_vec(p.norm_max.gain),
                                               as_vec(p.norm_max.shift), straight, &ref_gate);
    CHECK(max_abs_diff(y, ref) < 1e-12);
    CHECK(max_abs_diff(gate, ref_gate) < 1e-12);
    for (double v : gate.data()) CHECK((v > 0.0 && v < 1.0));
    double in_max = 0, out_max = 0;
    for (double v : x.data()) in_max = std::max(in_max, std::abs(v));
    for (double v : y.data()) out_max = std::max(out_max, std::abs(v));
    CHECK(out_max < in_max);
  }
}

TEST_CASE("hpa forward composition and locality") {
  Rng rng(7);
  auto p = random_hpa<double>(2, 4, rng);
  auto x = random_tensor({2, 8, 5, 6}, rng);
  auto y = hpa_forward(x, p);
  CHECK(y.shape() == x.shape());

  // Composition oracle per (sample, group).
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t g = 0; g < 4; ++g) {
      std::vector<double> grp(x.data().begin() + (n * 8 + 2 * g) * 30, x.data().begin() + (n * 8 + 2 * g + 2) * 30);
      auto ga = oracle::pooled_recalibrate(grp, 2, 5, 6, as_vec(p.avg.weight), as_vec(p.avg.bias), false);
      auto gm = oracle::pooled_recalibrate(grp, 2, 5, 6, as_vec(p.max.weight), as_vec(p.max.bias), true);
      auto ref = oracle::cross_spatial_aggregate(ga, gm, grp, 2, 30, as_vec(p.norm_avg.gain), as_vec(p.norm_avg.shift),
                                                 as_vec(p.norm_max.gain), as_vec(p.norm_max.shift), false);
      std::vector<double> got(y.data().begin() + (n * 8 + 2 * g) * 30, y.data().begin() + (n * 8 + 2 * g + 2) * 30);
      CHECK(max_abs_diff<double>(got, ref) < 1e-12);
    }

  // Perturbing group 1 only changes group 1 outputs.
  auto z = Tensor64(x.shape(), as_vec(x));
  for (std::size_t i = 0; i < 30; ++i) z.mutable_data()[(2 + 0) * 30 + i] += 0.3;
  auto yz = hpa_forward(z, p);
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t c = 0; c < 8; ++c) {
      bool same = true;
      for (std::size_t i = 0; i < 30; ++i) same = same && yz.data()[(n * 8 + c) * 30 + i] == y.data()[(n * 8 + c) * 30 + i];
      CHECK(same == !(n == 0 && (c == 2 || c == 3)));
    }

  auto single = random_hpa<double>(8, 1, rng);
  auto ys = hpa_forward(x, single);
  auto gs = group_split(x, 1);
  auto direct = cross_spatial_aggregate(pooled_recalibrate(gs, PoolMode::avg, single.avg),
                                        pooled_recalibrate(gs, PoolMode::max, single.max), gs, single);
  CHECK(max_abs_diff<double>(ys.data(), direct.data()) == 0.0);
  CHECK(hpa_forward(random_tensor({8, 3, 3}, rng), p).shape() == Shape{8, 3, 3});
  CHECK_THROWS_AS(hpa_forward(random_tensor({1, 6, 3, 3}, rng), p), ConfigError);
}

TEST_CASE("tokenize") {
  Rng rng(8);
  auto pos = random_tensor({10, 3}, rng);
  auto t = tokenize(Tensor64::zeros({3, 3, 3}), Tensor64::zeros({3}), pos);
  CHECK(max_abs_diff<double>(t.data(), pos.data()) == 0.0);

  auto f = random_tensor({2, 3, 3, 3}, rng);
  auto cls = random_tensor({3}, rng);
  auto zero_pos = Tensor64::zeros({10, 3});
  auto s = tokenize(f, cls, zero_pos);
  CHECK(s.shape() == Shape{2, 10, 3});
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t d = 0; d < 3; ++d) {
      CHECK(s.at({n, 0, d}) == cls.at({d}));
      for (std::size_t k = 1; k < 10; ++k) CHECK(s.at({n, k, d}) == f.at({n, d, (k - 1) / 3, (k - 1) % 3}));
    }
  Model<float> m(ModelConfig{}, 0);
  NoGradGuard guard;
  CHECK(tokenize(Tensor32::zeros({1, 64, 19, 19}), m.cls, m.pos).shape() == Shape{1, 362, 64});
  CHECK_THROWS_AS(tokenize(f, cls, Tensor64::zeros({9, 3})), DimensionError);
}

TEST_CASE("encoder properties") {
  Rng rng(9);
  auto e = random_encoder<double>(8, 16, rng);
  auto x = random_tensor({2, 6, 8}, rng);
  EncoderRun run{4, 0.0, false, nullptr};
  std::vector<double> att;
  auto y = encoder_forward(x, e, run, &att);
  CHECK(y.shape() == x.shape());
  REQUIRE(att.size() == 2 * 4 * 6 * 6);
  for (std::size_t r = 0; r < 2 * 4 * 6; ++r) {
    double sum = 0;
    for (std::size_t j = 0; j < 6; ++j) sum += att[r * 6 + j];
    CHECK(std::abs(sum - 1.0) < 1e-6);
  }

  auto idle = e;
  idle.wo = Tensor64::zeros({8, 8});
  idle.bo = Tensor64::zeros({8});
  idle.w2 = Tensor64::zeros({8, 16});
  idle.b2 = Tensor64::zeros({8});
  CHECK(max_abs_diff<double>(encoder_forward(x, idle, run).data(), x.data()) < 1e-6);

  // Permuting the spatial tokens (class token fixed) permutes the output.
  std::vector<std::size_t> perm{0, 3, 5, 1, 2, 4};
  std::vector<double> px(x.size());
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t t = 0; t < 6; ++t)
      for (std::size_t d = 0; d < 8; ++d) px[(n * 6 + t) * 8 + d] = x.at({n, perm[t], d});
  auto py = encoder_forward(Tensor64(x.shape(), px), e, run);
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t t = 0; t < 6; ++t)
      for (std::size_t d = 0; d < 8; ++d) CHECK(std::abs(py.at({n, t, d}) - y.at({n, perm[t], d})) < 1e-12);

  CHECK_THROWS_AS(encoder_forward(x, e, EncoderRun{3, 0.0, false, nullptr}), ConfigError);

  Rng drop(1);
  auto train = encoder_forward(x, e, EncoderRun{4, 0.5, true, &drop});
  CHECK(max_abs_diff<double>(train.data(), y.data()) > 0.0);
}

TEST_CASE("cross-layer fusion") {
  Rng rng(10);
  auto a = random_tensor({2, 3}, rng), b = random_tensor({2, 3}, rng), c = random_tensor({2, 3}, rng);
  auto mid = cff_fuse(a, {b}, Tensor64::zeros({2}));
  for (std::size_t i = 0; i < 6; ++i) CHECK(mid.data()[i] == doctest::Approx((a.data()[i] + b.data()[i]) / 2));
  auto sat = cff_fuse(a, {b}, Tensor64({2}, {0.0, 50.0}));
  CHECK(max_abs_diff<double>(sat.data(), b.data()) < 1e-6);

  auto logits = random_tensor({3}, rng, false, -2, 2);
  auto fused = cff_fuse(a, {b, c}, logits);
  auto w = oracle::softmax(as_vec(logits));
  for (std::size_t i = 0; i < 6; ++i) {
    const double ref = w[0] * a.data()[i] + w[1] * b.data()[i] + w[2] * c.data()[i];
    CHECK(std::abs(fused.data()[i] - ref) < 1e-12);
    const double lo = std::min({a.data()[i], b.data()[i], c.data()[i]});
    const double hi = std::max({a.data()[i], b.data()[i], c.data()[i]});
    CHECK(fused.data()[i] >= lo - 1e-12);
    CHECK(fused.data()[i] <= hi + 1e-12);
  }
  CHECK_THROWS_AS(cff_fuse(a, {b}, Tensor64::zeros({3})), ConfigError);
}

TEST_CASE("classification head") {
  Rng rng(11);
  HeadParams<double> head{{Tensor64::full({4}, 1.0), Tensor64::zeros({4})}, Tensor64::zeros({5, 4}),
                          Tensor64({5}, {0.1, -1, 3, 2, 0})};
  auto seq = random_tensor({2, 7, 4}, rng);
  auto logits = classify(seq, head);
  CHECK(logits.shape() == Shape{2, 5});
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t k = 0; k < 5; ++k) CHECK(logits.at({n, k}) == head.bias.data()[k]);

  head.weight = random_tensor({5, 4}, rng);
  auto before = classify(seq, head);
  auto probe = Tensor64(seq.shape(), as_vec(seq));
  for (std::size_t d = 0; d < 4; ++d) probe.mutable_data()[5 * 4 + d] += 1.0;
  CHECK(max_abs_diff<double>(classify(probe, head).data(), before.data()) == 0.0);
  CHECK(classify(random_tensor({7, 4}, rng), head).shape() == Shape{5});
}

TEST_CASE("model forward and configuration") {
  auto cfg = toy_config();
  Model<double> m(cfg, 1);
  Rng rng(12);
  auto x = random_tensor({3, 8, 9, 9}, rng);
  auto y1 = m.forward(x, false);
  auto y2 = m.forward(x, false);
  CHECK(y1.shape() == Shape{3, 3});
  CHECK(std::equal(y1.data().begin(), y1.data().end(), y2.data().begin()));
  Model<double> same(cfg, 1);
  CHECK(std::equal(y1.data().begin(), y1.data().end(), same.forward(x, false).data().begin()));

  for (int mask = 0; mask < 8; ++mask) {
    auto c = cfg;
    c.tbfe = mask & 1;
    c.hpa = mask & 2;
    c.cff = mask & 4;
    Model<double> variant(c, 2);
    CHECK(variant.forward(x, true).shape() == Shape{3, 3});
  }
  CHECK_THROWS_AS(m.forward(random_tensor({1, 7, 9, 9}, rng), false), DimensionError);

  auto bad = cfg;
  bad.patch = 8;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.heads = 3;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.groups = 3;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad.hpa = false;
  CHECK_NOTHROW(bad.validate());

  CHECK(ModelConfig{}.mlp_width() == 256);
  CHECK(ModelConfig{}.heads == 16);
  CHECK(ModelConfig{}.bands == 30);
}

TEST_CASE("parameter accounting") {
  auto count = [](std::size_t encoders, bool cff) {
    ModelConfig c;
    c.encoders = encoders;
    c.cff = cff;
    return Model<float>(c, 0).params().count();
  };
  for (bool cff : {true, false}) {
    const std::size_t delta = count(2, cff) - count(1, cff);
    for (std::size_t l = 2; l <= 4; ++l) CHECK(count(l + 1, cff) - count(l, cff) == delta);
  }
  CHECK(count(3, true) - count(3, false) == 3);

  Model<float> m(ModelConfig{}, 0);
  auto parts = m.params().count_by_component();
  CHECK(parts["head"] == 64 * 16 + 16 + 2 * 64);
  CHECK(parts["cff"] == 4);
  const std::size_t d = 64, mlp = 256;
  CHECK(parts["encoder1"] == 4 * (d * d + d) + 4 * d + mlp * d + mlp + d * mlp + d);
  CHECK(m.params().count(false) > m.params().count());
}

TEST_CASE("module gradients") {
  const std::uint64_t seed = 1;
  Rng rng(seed);
  {
    auto p = random_block(3, 2, rng, true);
    auto x = random_tensor({2, 3, 4, 4}, rng, true);
    auto wrt = block_tensors(p);
    wrt.push_back(x);
    CHECK(grad_check([&] { return tbfe_block(x, p, true); }, wrt, seed).passed(kGradCheckThreshold));
  }
  {
    auto p = random_hpa<double>(4, 2, rng, true);
    auto x = random_tensor({1, 8, 5, 5}, rng, true);
    auto wrt = hpa_tensors(p);
    wrt.push_back(x);
    auto r = grad_check([&] { return hpa_forward(x, p); }, wrt, seed);
    CAPTURE(r.max_rel_error);
    CHECK(r.passed(kGradCheckThreshold));
  }
  {
    auto e = random_encoder<double>(4, 8, rng, true);
    auto x = random_tensor({2, 5, 4}, rng, true);
    auto wrt = encoder_tensors(e);
    wrt.push_back(x);
    CHECK(grad_check([&] { return encoder_forward(x, e, EncoderRun{2, 0.0, false, nullptr}); }, wrt, seed)
              .passed(kGradCheckThreshold));
  }
  {
    auto f = random_tensor({2, 3, 2, 2}, rng, true), cls = random_tensor({3}, rng, true),
         pos = random_tensor({5, 3}, rng, true);
    CHECK(grad_check([&] { return tokenize(f, cls, pos); }, {f, cls, pos}, seed).passed(kGradCheckThreshold));
    HeadParams<double> head{{random_tensor({3}, rng, true, 0.5, 1.5), random_tensor({3}, rng, true)},
                            random_tensor({4, 3}, rng, true), random_tensor({4}, rng, true)};
    auto s = random_tensor({2, 5, 3}, rng, true);
    CHECK(grad_check([&] { return classify(s, head); }, {s, head.norm.gain, head.norm.shift, head.weight, head.bias},
                     seed)
              .passed(kGradCheckThreshold));
    auto a = random_tensor({2, 3}, rng, true), b = random_tensor({2, 3}, rng, true),
         l = random_tensor({2}, rng, true);
    CHECK(grad_check([&] { return cff_fuse(a, {b}, l); }, {a, b, l}, seed).passed(kGradCheckThreshold));
  }
}
