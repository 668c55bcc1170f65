#pragma once

// Network building blocks and the full classifier.
//
//   patch [N, B, P, P]
//     -> twin-branch feature extraction (two blocks + two 3x3 convs) [N, D, P, P]
//     -> hybrid pooling attention                                    [N, D, P, P]
//     -> tokens (class token + P*P spatial tokens, learned positions) [N, P*P+1, D]
//     -> encoders 1..L-1, cross-layer fusion, encoder L
//     -> class-token head                                             [N, K]

#include <cstdint>
#include <string>
#include <vector>

#include "hsinet/ops.hpp"
#include "hsinet/params.hpp"

namespace hsinet {

template <typename T>
struct BatchNormParams {
  Tensor<T> gain, shift, running_mean, running_var;
};

template <typename T>
struct LayerNormParams {
  Tensor<T> gain, shift;
};

template <typename T>
Tensor<T> apply(const BatchNormParams<T>& p, const Tensor<T>& x, bool training);
template <typename T>
Tensor<T> apply(const LayerNormParams<T>& p, const Tensor<T>& x);

// ---------------------------------------------------------------- TBFE

template <typename T>
struct TbfeBlockParams {
  Tensor<T> pw_weight, pw_bias;  // [S, C_in, 1, 1], [S]
  Tensor<T> w3d, b3d;            // [1, 1, 3, 1, 1], [1]
  Tensor<T> w2d, b2d;            // [S, S, 3, 3], [S]  (naive: [2S, S, 3, 3])
  BatchNormParams<T> norm;       // 2S channels
};

template <typename T>
struct TbfeStackParams {
  TbfeBlockParams<T> block1, block2;
  Tensor<T> conv1_weight, conv1_bias;  // [D, 2S, 3, 3]
  BatchNormParams<T> norm1;
  Tensor<T> conv2_weight, conv2_bias;  // [D, D, 3, 3]
  BatchNormParams<T> norm2;
};

/// Pointwise reduction to S channels, then a depth-only 3-D convolution
/// branch and a 3x3 spatial branch, concatenated as [3-D; 2-D], activated and
/// batch-normalized. input [N, C_in, P, P] or [C_in, P, P]. If `concat` is
/// given it receives the activated concatenation before normalization.
template <typename T>
Tensor<T> tbfe_block(const Tensor<T>& input, const TbfeBlockParams<T>& p, bool training,
                     Tensor<T>* concat = nullptr);

/// Serial variant used by the ablation: pointwise -> 3-D conv -> 3x3 conv
/// (S -> 2S), activated and normalized.
template <typename T>
Tensor<T> naive_block(const Tensor<T>& input, const TbfeBlockParams<T>& p, bool training);

template <typename T>
Tensor<T> tbfe_stack(const Tensor<T>& input, const TbfeStackParams<T>& p, bool training, bool naive = false);

// ---------------------------------------------------------------- HPA

template <typename T>
struct RecalibrateParams {
  Tensor<T> weight, bias;  // [c', c', 1, 1], [c']
};

template <typename T>
struct HpaParams {
  std::size_t groups = 1;
  RecalibrateParams<T> avg, max;
  LayerNormParams<T> norm_avg, norm_max;  // group-norm affines, [c']
  // false: the avg-branch softmax weights the max-branch map and vice versa.
  bool straight = false;
};

/// [N, C, H, W] -> [N*G, C/G, H, W]. Unbatched input is treated as N = 1.
template <typename T>
Tensor<T> group_split(const Tensor<T>& input, std::size_t groups);
/// Inverse of group_split: [N*G, c', H, W] -> [N, G*c', H, W].
template <typename T>
Tensor<T> group_merge(const Tensor<T>& groups_tensor, std::size_t groups);

/// Directional avg or max encodings along H and W, fused by a 1x1 conv,
/// turned into two sigmoid maps that rescale the group. [M, c, H, W].
template <typename T>
Tensor<T> pooled_recalibrate(const Tensor<T>& group, PoolMode mode, const RecalibrateParams<T>& p);

/// Spatial gate from the two recalibrated maps applied to `group_input`.
/// If `gate` is given it receives the sigmoid map [M, 1, H, W].
template <typename T>
Tensor<T> cross_spatial_aggregate(const Tensor<T>& g_avg, const Tensor<T>& g_max, const Tensor<T>& group_input,
                                  const HpaParams<T>& p, Tensor<T>* gate = nullptr);

template <typename T>
Tensor<T> hpa_forward(const Tensor<T>& input, const HpaParams<T>& p);

// ---------------------------------------------------------------- transformer

template <typename T>
struct EncoderParams {
  LayerNormParams<T> ln1, ln2;
  Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;  // [D, D], [D]
  Tensor<T> w1, b1;                          // [D_mlp, D], [D_mlp]
  Tensor<T> w2, b2;                          // [D, D_mlp], [D]
};

template <typename T>
struct HeadParams {
  LayerNormParams<T> norm;
  Tensor<T> weight, bias;  // [K, D], [K]
};

/// features [N, D, P, P] or [D, P, P]; cls [D]; pos [P*P+1, D].
/// Returns [N, P*P+1, D] (or unbatched) with the class token at index 0.
template <typename T>
Tensor<T> tokenize(const Tensor<T>& features, const Tensor<T>& cls, const Tensor<T>& pos);

struct EncoderRun {
  std::size_t heads = 1;
  double dropout = 0.0;
  bool training = false;
  Rng* rng = nullptr;  // required when training with dropout > 0
};

/// Pre-norm block: x + MSA(LN x), then + MLP(LN x). If `attention` is given
/// it receives the probabilities [N, heads, T, T].
template <typename T>
Tensor<T> encoder_forward(const Tensor<T>& seq, const EncoderParams<T>& p, const EncoderRun& run,
                          std::vector<T>* attention = nullptr);

/// softmax(logits)-weighted sum of [x_in, outputs...]; logits has one entry
/// per source.
template <typename T>
Tensor<T> cff_fuse(const Tensor<T>& x_in, const std::vector<Tensor<T>>& outputs, const Tensor<T>& logits);

/// Layer-normalized class token through a linear layer: [N, K] (or [K]).
template <typename T>
Tensor<T> classify(const Tensor<T>& seq, const HeadParams<T>& head);

// ---------------------------------------------------------------- model

struct ModelConfig {
  std::size_t bands = 30;
  std::size_t patch = 19;
  std::size_t classes = 16;
  std::size_t s = 32;
  std::size_t d = 64;
  std::size_t groups = 8;
  std::size_t heads = 16;
  std::size_t encoders = 4;
  std::size_t mlp = 0;  // 0 selects 4 * d
  double dropout = 0.1;
  bool tbfe = true;  // false: serial conv3d-then-conv2d blocks
  bool hpa = true;
  bool cff = true;
  bool straight_pairing = false;

  std::size_t mlp_width() const { return mlp == 0 ? 4 * d : mlp; }
  /// Throws ConfigError naming the offending field.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

template <typename T>
class Model {
 public:
  Model(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  ParamStore<T>& params() { return store_; }
  const ParamStore<T>& params() const { return store_; }

  /// patches [N, B, P, P] -> logits [N, K]. `rng` drives dropout and is only
  /// consulted when training.
  Tensor<T> forward(const Tensor<T>& patches, bool training, Rng* rng = nullptr);

  /// Class indices 0..K-1 in inference mode, evaluated in chunks.
  std::vector<int> predict(const Tensor<T>& patches, std::size_t chunk = 256);

  TbfeStackParams<T> tbfe;
  HpaParams<T> hpa;
  Tensor<T> cls, pos;
  std::vector<EncoderParams<T>> encoders;
  Tensor<T> cff_logits;  // [L], only when config.cff
  HeadParams<T> head;

 private:
  ModelConfig config_;
  ParamStore<T> store_;
};

extern template class Model<float>;
extern template class Model<double>;

}  // namespace hsinet
