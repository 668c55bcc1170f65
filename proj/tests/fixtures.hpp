#pragma once

#include "hsinet/model.hpp"
#include "test_util.hpp"

namespace hsinet::testing {

/// 8 x 9 x 9 patches, small widths; used by the backbone gradient checks.
inline ModelConfig toy_config() {
  ModelConfig c;
  c.bands = 8;
  c.patch = 9;
  c.classes = 3;
  c.s = 2;
  c.d = 4;
  c.groups = 2;
  c.heads = 2;
  c.encoders = 2;
  c.mlp = 8;
  c.dropout = 0.0;
  return c;
}

/// Replaces every trainable value with a draw from [-scale, scale], shifting
/// gains towards 1 so normalizers stay well conditioned.
template <typename T>
void randomize(ParamStore<T>& store, Rng& rng, double scale = 0.5) {
  for (auto& p : store.entries()) {
    if (!p.trainable) continue;
    const bool gain = p.name.size() >= 5 && p.name.compare(p.name.size() - 5, 5, ".gain") == 0;
    for (auto& v : p.tensor.mutable_data()) v = static_cast<T>((gain ? 1.0 : 0.0) + rng.uniform(-scale, scale));
  }
}

template <typename T>
HpaParams<T> random_hpa(std::size_t c, std::size_t groups, Rng& rng, bool requires_grad = false) {
  auto r = [&](Shape s) { return random_tensor<T>(std::move(s), rng, requires_grad); };
  auto g = [&](std::size_t n) {
    auto t = random_tensor<T>({n}, rng, requires_grad, 0.5, 1.5);
    return t;
  };
  HpaParams<T> p;
  p.groups = groups;
  p.avg = {r({c, c, 1, 1}), r({c})};
  p.max = {r({c, c, 1, 1}), r({c})};
  p.norm_avg = {g(c), r({c})};
  p.norm_max = {g(c), r({c})};
  return p;
}

template <typename T>
std::vector<Tensor<T>> hpa_tensors(const HpaParams<T>& p) {
  return {p.avg.weight, p.avg.bias, p.max.weight, p.max.bias,
          p.norm_avg.gain, p.norm_avg.shift, p.norm_max.gain, p.norm_max.shift};
}

template <typename T>
EncoderParams<T> random_encoder(std::size_t d, std::size_t mlp, Rng& rng, bool requires_grad = false) {
  auto r = [&](Shape s) { return random_tensor<T>(std::move(s), rng, requires_grad); };
  EncoderParams<T> e;
  e.ln1 = {random_tensor<T>({d}, rng, requires_grad, 0.5, 1.5), r({d})};
  e.ln2 = {random_tensor<T>({d}, rng, requires_grad, 0.5, 1.5), r({d})};
  e.wq = r({d, d});
  e.bq = r({d});
  e.wk = r({d, d});
  e.bk = r({d});
  e.wv = r({d, d});
  e.bv = r({d});
  e.wo = r({d, d});
  e.bo = r({d});
  e.w1 = r({mlp, d});
  e.b1 = r({mlp});
  e.w2 = r({d, mlp});
  e.b2 = r({d});
  return e;
}

template <typename T>
std::vector<Tensor<T>> encoder_tensors(const EncoderParams<T>& e) {
  return {e.ln1.gain, e.ln1.shift, e.wq, e.bq, e.wk, e.bk, e.wv, e.bv, e.wo,
          e.bo,       e.ln2.gain,  e.ln2.shift, e.w1, e.b1, e.w2, e.b2};
}

}  // namespace hsinet::testing
