#include "hsinet/model.hpp"

#include <algorithm>
#include <cmath>

namespace hsinet {

namespace {

template <typename T>
Tensor<T> batched(const Tensor<T>& x, std::size_t rank, bool& was_unbatched) {
  was_unbatched = x.rank() == rank - 1;
  if (!was_unbatched) return x;
  Shape s = x.shape();
  s.insert(s.begin(), 1);
  return reshape(x, s);
}

template <typename T>
Tensor<T> restore(const Tensor<T>& x, bool was_unbatched) {
  if (!was_unbatched) return x;
  Shape s(x.shape().begin() + 1, x.shape().end());
  return reshape(x, s);
}

}  // namespace

template <typename T>
Tensor<T> apply(const BatchNormParams<T>& p, const Tensor<T>& x, bool training) {
  Tensor<T> mean = p.running_mean, var = p.running_var;
  return batch_norm(x, p.gain, p.shift, mean, var, training);
}

template <typename T>
Tensor<T> apply(const LayerNormParams<T>& p, const Tensor<T>& x) {
  return layer_norm(x, p.gain, p.shift);
}

template <typename T>
Tensor<T> tbfe_block(const Tensor<T>& input, const TbfeBlockParams<T>& p, bool training, Tensor<T>* concat_out) {
  bool unbatched = false;
  const Tensor<T> x = batched(input, 4, unbatched);
  if (x.rank() != 4 || x.dim(1) != p.pw_weight.dim(1)) {
    throw DimensionError("tbfe_block: input " + to_string(input.shape()) + " does not match pointwise weight " +
                         to_string(p.pw_weight.shape()));
  }
  const std::size_t n = x.dim(0), s = p.pw_weight.dim(0), h = x.dim(2), w = x.dim(3);
  const Tensor<T> f = conv2d(x, p.pw_weight, p.pw_bias, 0);
  const Tensor<T> spectral =
      reshape(relu(conv3d(reshape(f, {n, 1, s, h, w}), p.w3d, p.b3d, 1)), {n, s, h, w});
  const Tensor<T> spatial = relu(conv2d(f, p.w2d, p.b2d, 1));
  const Tensor<T> cat = concat<T>({spectral, spatial}, 1);
  if (concat_out != nullptr) *concat_out = restore(cat, unbatched);
  return restore(apply(p.norm, cat, training), unbatched);
}

template <typename T>
Tensor<T> naive_block(const Tensor<T>& input, const TbfeBlockParams<T>& p, bool training) {
  bool unbatched = false;
  const Tensor<T> x = batched(input, 4, unbatched);
  if (x.rank() != 4 || x.dim(1) != p.pw_weight.dim(1)) {
    throw DimensionError("naive_block: input " + to_string(input.shape()) + " does not match pointwise weight " +
                         to_string(p.pw_weight.shape()));
  }
  const std::size_t n = x.dim(0), s = p.pw_weight.dim(0), h = x.dim(2), w = x.dim(3);
  const Tensor<T> f = conv2d(x, p.pw_weight, p.pw_bias, 0);
  const Tensor<T> spectral =
      reshape(relu(conv3d(reshape(f, {n, 1, s, h, w}), p.w3d, p.b3d, 1)), {n, s, h, w});
  const Tensor<T> spatial = relu(conv2d(spectral, p.w2d, p.b2d, 1));
  return restore(apply(p.norm, spatial, training), unbatched);
}

template <typename T>
Tensor<T> tbfe_stack(const Tensor<T>& input, const TbfeStackParams<T>& p, bool training, bool naive) {
  auto block = [&](const Tensor<T>& x, const TbfeBlockParams<T>& bp) {
    return naive ? naive_block(x, bp, training) : tbfe_block(x, bp, training);
  };
  bool unbatched = false;
  const Tensor<T> x = batched(input, 4, unbatched);
  Tensor<T> y = block(block(x, p.block1), p.block2);
  y = apply(p.norm1, relu(conv2d(y, p.conv1_weight, p.conv1_bias, 1)), training);
  y = apply(p.norm2, relu(conv2d(y, p.conv2_weight, p.conv2_bias, 1)), training);
  return restore(y, unbatched);
}

template <typename T>
Tensor<T> group_split(const Tensor<T>& input, std::size_t groups) {
  bool unbatched = false;
  const Tensor<T> x = batched(input, 4, unbatched);
  if (x.rank() != 4) throw DimensionError("group_split: expected [N, C, H, W], got " + to_string(input.shape()));
  const std::size_t c = x.dim(1);
  if (groups == 0 || c % groups != 0) {
    throw ConfigError("group_split: channel count C = " + std::to_string(c) + " is not divisible by G = " +
                      std::to_string(groups));
  }
  return reshape(x, {x.dim(0) * groups, c / groups, x.dim(2), x.dim(3)});
}

template <typename T>
Tensor<T> group_merge(const Tensor<T>& g, std::size_t groups) {
  if (g.rank() != 4 || groups == 0 || g.dim(0) % groups != 0) {
    throw DimensionError("group_merge: cannot merge " + to_string(g.shape()) + " into " + std::to_string(groups) +
                         " groups");
  }
  return reshape(g, {g.dim(0) / groups, g.dim(1) * groups, g.dim(2), g.dim(3)});
}

template <typename T>
Tensor<T> pooled_recalibrate(const Tensor<T>& group, PoolMode mode, const RecalibrateParams<T>& p) {
  bool unbatched = false;
  const Tensor<T> g = batched(group, 4, unbatched);
  if (g.rank() != 4) throw DimensionError("pooled_recalibrate: expected a 4-D group, got " + to_string(group.shape()));
  const std::size_t m = g.dim(0), c = g.dim(1), h = g.dim(2), w = g.dim(3);
  const Tensor<T> zh = directional_pool(g, PoolAxis::horizontal, mode);
  const Tensor<T> zw = directional_pool(g, PoolAxis::vertical, mode);
  const Tensor<T> fused =
      reshape(conv2d(reshape(concat<T>({zh, zw}, 2), {m, c, 1, h + w}), p.weight, p.bias, 0), {m, c, h + w});
  const Tensor<T> att_h = sigmoid(reshape(narrow(fused, 2, 0, h), {m, c, h, 1}));
  const Tensor<T> att_w = sigmoid(reshape(narrow(fused, 2, h, w), {m, c, 1, w}));
  return restore(mul(mul(g, att_h), att_w), unbatched);
}

template <typename T>
Tensor<T> cross_spatial_aggregate(const Tensor<T>& g_avg, const Tensor<T>& g_max, const Tensor<T>& group_input,
                                  const HpaParams<T>& p, Tensor<T>* gate_out) {
  if (g_avg.shape() != g_max.shape() || g_avg.shape() != group_input.shape()) {
    throw DimensionError("cross_spatial_aggregate: shapes " + to_string(g_avg.shape()) + ", " +
                         to_string(g_max.shape()) + ", " + to_string(group_input.shape()) + " differ");
  }
  bool unbatched = false;
  const Tensor<T> x = batched(group_input, 4, unbatched);
  const Tensor<T> a_in = batched(g_avg, 4, unbatched);
  const Tensor<T> m_in = batched(g_max, 4, unbatched);
  const std::size_t m = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const Tensor<T> n_avg = group_norm(a_in, 1, p.norm_avg.gain, p.norm_avg.shift);
  const Tensor<T> n_max = group_norm(m_in, 1, p.norm_max.gain, p.norm_max.shift);
  const Tensor<T> a = reshape(softmax(global_pool2d(n_avg, PoolMode::avg)), {m, 1, c});
  const Tensor<T> b = reshape(softmax(global_pool2d(n_max, PoolMode::max)), {m, 1, c});
  const Tensor<T> flat_avg = reshape(n_avg, {m, c, h * w});
  const Tensor<T> flat_max = reshape(n_max, {m, c, h * w});
  const Tensor<T> w_avg = matmul(a, p.straight ? flat_avg : flat_max);
  const Tensor<T> w_max = matmul(b, p.straight ? flat_max : flat_avg);
  const Tensor<T> gate = reshape(sigmoid(add(w_avg, w_max)), {m, 1, h, w});
  if (gate_out != nullptr) *gate_out = restore(gate, unbatched);
  return restore(mul(x, gate), unbatched);
}

template <typename T>
Tensor<T> hpa_forward(const Tensor<T>& input, const HpaParams<T>& p) {
  bool unbatched = false;
  const Tensor<T> x = batched(input, 4, unbatched);
  const Tensor<T> g = group_split(x, p.groups);
  const Tensor<T> ga = pooled_recalibrate(g, PoolMode::avg, p.avg);
  const Tensor<T> gm = pooled_recalibrate(g, PoolMode::max, p.max);
  return restore(group_merge(cross_spatial_aggregate(ga, gm, g, p), p.groups), unbatched);
}

template <typename T>
Tensor<T> tokenize(const Tensor<T>& features, const Tensor<T>& cls, const Tensor<T>& pos) {
  bool unbatched = false;
  const Tensor<T> x = batched(features, 4, unbatched);
  if (x.rank() != 4 || x.dim(2) != x.dim(3)) {
    throw DimensionError("tokenize: expected square feature maps, got " + to_string(features.shape()));
  }
  const std::size_t n = x.dim(0), d = x.dim(1), area = x.dim(2) * x.dim(3);
  if (cls.shape() != Shape{d} || pos.shape() != Shape{area + 1, d}) {
    throw DimensionError("tokenize: features " + to_string(features.shape()) + " need cls [" + std::to_string(d) +
                         "] and pos [" + std::to_string(area + 1) + ", " + std::to_string(d) + "], got " +
                         to_string(cls.shape()) + " and " + to_string(pos.shape()));
  }
  const Tensor<T> spatial = transpose(reshape(x, {n, d, area}), 1, 2);
  const Tensor<T> cls_rows = add(Tensor<T>::zeros({n, 1, d}), reshape(cls, {1, 1, d}));
  return restore(add(concat<T>({cls_rows, spatial}, 1), pos), unbatched);
}

template <typename T>
Tensor<T> encoder_forward(const Tensor<T>& seq, const EncoderParams<T>& p, const EncoderRun& run,
                          std::vector<T>* attention) {
  const bool drop = run.training && run.dropout > 0.0;
  if (drop && run.rng == nullptr) throw std::logic_error("encoder_forward: dropout needs an Rng");
  auto maybe_drop = [&](const Tensor<T>& t) { return drop ? dropout(t, static_cast<T>(run.dropout), *run.rng, true) : t; };
  const Tensor<T> h = apply(p.ln1, seq);
  const Tensor<T> att = attention_core(linear(h, p.wq, p.bq), linear(h, p.wk, p.bk), linear(h, p.wv, p.bv), run.heads,
                                       attention);
  const Tensor<T> x1 = add(seq, maybe_drop(linear(att, p.wo, p.bo)));
  const Tensor<T> mlp = linear(gelu(linear(apply(p.ln2, x1), p.w1, p.b1)), p.w2, p.b2);
  return add(x1, maybe_drop(mlp));
}

template <typename T>
Tensor<T> cff_fuse(const Tensor<T>& x_in, const std::vector<Tensor<T>>& outputs, const Tensor<T>& logits) {
  std::vector<Tensor<T>> sources{x_in};
  sources.insert(sources.end(), outputs.begin(), outputs.end());
  if (logits.rank() != 1 || logits.size() != sources.size()) {
    throw ConfigError("cff_fuse: " + std::to_string(sources.size()) + " sources but fusion logits " +
                      to_string(logits.shape()));
  }
  return weighted_sum(sources, softmax(logits));
}

template <typename T>
Tensor<T> classify(const Tensor<T>& seq, const HeadParams<T>& head) {
  bool unbatched = false;
  const Tensor<T> x = batched(seq, 3, unbatched);
  const std::size_t n = x.dim(0), d = x.dim(2);
  if (head.weight.rank() != 2 || head.weight.dim(1) != d) {
    throw DimensionError("classify: head weight " + to_string(head.weight.shape()) + " for token width " +
                         std::to_string(d));
  }
  const Tensor<T> token = reshape(narrow(x, 1, 0, 1), {n, d});
  return restore(linear(apply(head.norm, token), head.weight, head.bias), unbatched);
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError(msg); };
  if (bands < 1) fail("bands must be at least 1");
  if (patch < 3 || patch % 2 == 0) fail("patch size P = " + std::to_string(patch) + " must be odd and at least 3");
  if (classes < 1) fail("classes must be at least 1");
  if (s < 1 || d < 1) fail("channel widths s and d must be positive");
  if (heads < 1 || d % heads != 0) {
    fail("token width D = " + std::to_string(d) + " is not divisible by heads h = " + std::to_string(heads));
  }
  if (hpa && (groups < 1 || d % groups != 0)) {
    fail("channel count C = " + std::to_string(d) + " is not divisible by groups G = " + std::to_string(groups));
  }
  if (encoders < 1) fail("encoders must be at least 1");
  if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout must lie in [0, 1)");
}

template <typename T>
Model<T>::Model(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(seed);
  const std::size_t s = config_.s, d = config_.d, k = config_.classes, mlp = config_.mlp_width();
  const std::size_t area = config_.patch * config_.patch;

  auto uniform = [&](const std::string& name, const std::string& comp, Shape shape, std::size_t fan_in) {
    Tensor<T> t = store_.add(name, comp, std::move(shape));
    ParamStore<T>::fill_uniform(t, 1.0 / std::sqrt(static_cast<double>(fan_in)), rng);
    return t;
  };
  auto constant = [&](const std::string& name, const std::string& comp, Shape shape, T value) {
    Tensor<T> t = store_.add(name, comp, std::move(shape));
    std::fill(t.mutable_data().begin(), t.mutable_data().end(), value);
    return t;
  };
  auto batch_norm_params = [&](const std::string& prefix, std::size_t channels) {
    BatchNormParams<T> bn;
    bn.gain = constant(prefix + ".gain", "tbfe", {channels}, T(1));
    bn.shift = constant(prefix + ".shift", "tbfe", {channels}, T(0));
    bn.running_mean = store_.add(prefix + ".running_mean", "tbfe", {channels}, false);
    bn.running_var = store_.add(prefix + ".running_var", "tbfe", {channels}, false);
    std::fill(bn.running_var.mutable_data().begin(), bn.running_var.mutable_data().end(), T(1));
    return bn;
  };
  auto layer_norm_params = [&](const std::string& prefix, const std::string& comp, std::size_t width) {
    return LayerNormParams<T>{constant(prefix + ".gain", comp, {width}, T(1)),
                              constant(prefix + ".shift", comp, {width}, T(0))};
  };
  auto block = [&](const std::string& prefix, std::size_t in) {
    TbfeBlockParams<T> b;
    b.pw_weight = uniform(prefix + ".pointwise.weight", "tbfe", {s, in, 1, 1}, in);
    b.pw_bias = uniform(prefix + ".pointwise.bias", "tbfe", {s}, in);
    b.w3d = uniform(prefix + ".spectral.weight", "tbfe", {1, 1, 3, 1, 1}, 3);
    b.b3d = uniform(prefix + ".spectral.bias", "tbfe", {1}, 3);
    const std::size_t out = config_.tbfe ? s : 2 * s;
    b.w2d = uniform(prefix + ".spatial.weight", "tbfe", {out, s, 3, 3}, 9 * s);
    b.b2d = uniform(prefix + ".spatial.bias", "tbfe", {out}, 9 * s);
    b.norm = batch_norm_params(prefix + ".norm", 2 * s);
    return b;
  };

  tbfe.block1 = block("tbfe.block1", config_.bands);
  tbfe.block2 = block("tbfe.block2", 2 * s);
  tbfe.conv1_weight = uniform("tbfe.conv1.weight", "tbfe", {d, 2 * s, 3, 3}, 18 * s);
  tbfe.conv1_bias = uniform("tbfe.conv1.bias", "tbfe", {d}, 18 * s);
  tbfe.norm1 = batch_norm_params("tbfe.norm1", d);
  tbfe.conv2_weight = uniform("tbfe.conv2.weight", "tbfe", {d, d, 3, 3}, 9 * d);
  tbfe.conv2_bias = uniform("tbfe.conv2.bias", "tbfe", {d}, 9 * d);
  tbfe.norm2 = batch_norm_params("tbfe.norm2", d);

  if (config_.hpa) {
    const std::size_t c = d / config_.groups;
    hpa.groups = config_.groups;
    hpa.straight = config_.straight_pairing;
    hpa.avg = {uniform("hpa.avg.weight", "hpa", {c, c, 1, 1}, c), uniform("hpa.avg.bias", "hpa", {c}, c)};
    hpa.max = {uniform("hpa.max.weight", "hpa", {c, c, 1, 1}, c), uniform("hpa.max.bias", "hpa", {c}, c)};
    hpa.norm_avg = layer_norm_params("hpa.norm_avg", "hpa", c);
    hpa.norm_max = layer_norm_params("hpa.norm_max", "hpa", c);
  }

  cls = store_.add("tokens.cls", "tokens", {d});
  ParamStore<T>::fill_normal(cls, 0.02, rng);
  pos = store_.add("tokens.pos", "tokens", {area + 1, d});
  ParamStore<T>::fill_normal(pos, 0.02, rng);

  for (std::size_t l = 0; l < config_.encoders; ++l) {
    const std::string comp = "encoder" + std::to_string(l + 1);
    EncoderParams<T> e;
    e.ln1 = layer_norm_params(comp + ".ln1", comp, d);
    e.wq = uniform(comp + ".attn.q.weight", comp, {d, d}, d);
    e.bq = uniform(comp + ".attn.q.bias", comp, {d}, d);
    e.wk = uniform(comp + ".attn.k.weight", comp, {d, d}, d);
    e.bk = uniform(comp + ".attn.k.bias", comp, {d}, d);
    e.wv = uniform(comp + ".attn.v.weight", comp, {d, d}, d);
    e.bv = uniform(comp + ".attn.v.bias", comp, {d}, d);
    e.wo = uniform(comp + ".attn.out.weight", comp, {d, d}, d);
    e.bo = uniform(comp + ".attn.out.bias", comp, {d}, d);
    e.ln2 = layer_norm_params(comp + ".ln2", comp, d);
    e.w1 = uniform(comp + ".mlp.fc1.weight", comp, {mlp, d}, d);
    e.b1 = uniform(comp + ".mlp.fc1.bias", comp, {mlp}, d);
    e.w2 = uniform(comp + ".mlp.fc2.weight", comp, {d, mlp}, mlp);
    e.b2 = uniform(comp + ".mlp.fc2.bias", comp, {d}, mlp);
    encoders.push_back(e);
  }
  if (config_.cff) cff_logits = store_.add("cff.logits", "cff", {config_.encoders});

  head.norm = layer_norm_params("head.norm", "head", d);
  head.weight = uniform("head.fc.weight", "head", {k, d}, d);
  head.bias = uniform("head.fc.bias", "head", {k}, d);
}

template <typename T>
Tensor<T> Model<T>::forward(const Tensor<T>& patches, bool training, Rng* rng) {
  const Shape expected{config_.bands, config_.patch, config_.patch};
  if (patches.rank() != 4 || Shape(patches.shape().begin() + 1, patches.shape().end()) != expected) {
    throw DimensionError("model: expected patches [N, " + std::to_string(config_.bands) + ", " +
                         std::to_string(config_.patch) + ", " + std::to_string(config_.patch) + "], got " +
                         to_string(patches.shape()));
  }
  Tensor<T> x = tbfe_stack(patches, tbfe, training, !config_.tbfe);
  if (config_.hpa) x = hpa_forward(x, hpa);
  const Tensor<T> tokens = tokenize(x, cls, pos);
  const EncoderRun run{config_.heads, config_.dropout, training, rng};
  Tensor<T> z = tokens;
  const std::size_t last = encoders.size() - 1;
  std::vector<Tensor<T>> outputs;
  for (std::size_t l = 0; l < last; ++l) {
    z = encoder_forward(z, encoders[l], run);
    outputs.push_back(z);
  }
  if (config_.cff) z = cff_fuse(tokens, outputs, cff_logits);
  z = encoder_forward(z, encoders[last], run);
  return classify(z, head);
}

template <typename T>
std::vector<int> Model<T>::predict(const Tensor<T>& patches, std::size_t chunk) {
  NoGradGuard guard;
  std::vector<int> out;
  const std::size_t n = patches.dim(0);
  for (std::size_t start = 0; start < n; start += chunk) {
    const std::size_t len = std::min(chunk, n - start);
    const Tensor<T> logits = forward(len == n ? patches : narrow(patches, 0, start, len), false);
    const std::size_t k = logits.dim(1);
    for (std::size_t i = 0; i < len; ++i) {
      const T* row = logits.data().data() + i * k;
      out.push_back(static_cast<int>(std::max_element(row, row + k) - row));
    }
  }
  return out;
}

#define HSINET_INSTANTIATE(T)                                                                                        \
  template Tensor<T> apply(const BatchNormParams<T>&, const Tensor<T>&, bool);                                      \
  template Tensor<T> apply(const LayerNormParams<T>&, const Tensor<T>&);                                            \
  template Tensor<T> tbfe_block(const Tensor<T>&, const TbfeBlockParams<T>&, bool, Tensor<T>*);                     \
  template Tensor<T> naive_block(const Tensor<T>&, const TbfeBlockParams<T>&, bool);                                \
  template Tensor<T> tbfe_stack(const Tensor<T>&, const TbfeStackParams<T>&, bool, bool);                           \
  template Tensor<T> group_split(const Tensor<T>&, std::size_t);                                                    \
  template Tensor<T> group_merge(const Tensor<T>&, std::size_t);                                                    \
  template Tensor<T> pooled_recalibrate(const Tensor<T>&, PoolMode, const RecalibrateParams<T>&);                  \
  template Tensor<T> cross_spatial_aggregate(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,                 \
                                             const HpaParams<T>&, Tensor<T>*);                                      \
  template Tensor<T> hpa_forward(const Tensor<T>&, const HpaParams<T>&);                                            \
  template Tensor<T> tokenize(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> encoder_forward(const Tensor<T>&, const EncoderParams<T>&, const EncoderRun&, std::vector<T>*); \
  template Tensor<T> cff_fuse(const Tensor<T>&, const std::vector<Tensor<T>>&, const Tensor<T>&);                   \
  template Tensor<T> classify(const Tensor<T>&, const HeadParams<T>&);                                              \
  template class Model<T>;

HSINET_INSTANTIATE(float)
HSINET_INSTANTIATE(double)

#undef HSINET_INSTANTIATE

}  // namespace hsinet
