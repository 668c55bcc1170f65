#pragma once

// Differentiable operations over Tensor<T>. Every function records a
// backward closure when grad mode is enabled and an input requires a
// gradient. Instantiated for float (training) and double (verification).
//
// Layout conventions: images are [N, C, H, W]; token sequences are
// [N, T, D]. Where noted, the unbatched form (leading N dropped) is also
// accepted and returned unbatched.

#include <cstddef>
#include <span>
#include <vector>

#include "hsinet/rng.hpp"
#include "hsinet/tensor.hpp"

namespace hsinet {

enum class PoolMode { avg, max };
/// horizontal reduces over W (one value per row), vertical reduces over H.
enum class PoolAxis { horizontal, vertical };

// Elementwise binary ops with right-aligned broadcasting (size-1 or missing
// leading dimensions broadcast).
template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(const Tensor<T>& a, T factor);

template <typename T> Tensor<T> relu(const Tensor<T>& x);
/// Exact (erf) GELU.
template <typename T> Tensor<T> gelu(const Tensor<T>& x);
template <typename T> Tensor<T> sigmoid(const Tensor<T>& x);
/// Softmax over the last axis.
template <typename T> Tensor<T> softmax(const Tensor<T>& x);

template <typename T> Tensor<T> sum(const Tensor<T>& x);
template <typename T> Tensor<T> mean(const Tensor<T>& x);

template <typename T> Tensor<T> reshape(const Tensor<T>& x, Shape shape);
template <typename T> Tensor<T> transpose(const Tensor<T>& x, std::size_t axis0, std::size_t axis1);
template <typename T> Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis);
template <typename T> Tensor<T> narrow(const Tensor<T>& x, std::size_t axis, std::size_t start, std::size_t length);

/// x [..., in] times weight [out, in] transposed, plus optional bias [out].
template <typename T> Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);
/// Batched matrix product: [..., m, k] x [..., k, n]; b may also be rank 2.
template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

/// 2-D cross-correlation with zero padding. input [N, C_in, H, W] or
/// [C_in, H, W]; weight [C_out, C_in, k, k]; bias [C_out] or undefined.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias, std::size_t pad);

/// Single-filter 3-D convolution whose kernel spans only the depth axis.
/// input [N, 1, S, H, W] or [1, S, H, W]; weight [1, 1, k_d, 1, 1]; bias [1].
template <typename T>
Tensor<T> conv3d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias, std::size_t pad_depth);

/// One-dimensional global pooling along a spatial axis. input [N, C, H, W]
/// or [C, H, W]; output [N, C, H] (horizontal) or [N, C, W] (vertical).
template <typename T> Tensor<T> directional_pool(const Tensor<T>& input, PoolAxis axis, PoolMode mode);

/// Per-channel reduction over all spatial positions: [N, C, H, W] -> [N, C]
/// or [C, H, W] -> [C].
template <typename T> Tensor<T> global_pool2d(const Tensor<T>& input, PoolMode mode);

inline constexpr double kNormEps = 1e-5;

/// Normalizes over the last axis; gain and shift have that axis' length.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& shift, T eps = T(kNormEps));

/// x [N, C, ...]; statistics per (sample, group of C/groups channels).
template <typename T>
Tensor<T> group_norm(const Tensor<T>& x, std::size_t groups, const Tensor<T>& gain, const Tensor<T>& shift,
                     T eps = T(kNormEps));

/// x [N, C, ...]; statistics per channel over the batch and spatial axes in
/// training mode (updating the running buffers in place), running
/// statistics otherwise.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& shift, Tensor<T>& running_mean,
                     Tensor<T>& running_var, bool training, T momentum = T(0.1), T eps = T(kNormEps));

/// softmax(Q K^T / sqrt(d_head)) V evaluated per head on column slices of
/// width D / heads. q, k, v are [T, D] or [N, T, D]. If `weights` is given
/// it receives the attention probabilities laid out [N, heads, T, T].
template <typename T>
Tensor<T> attention_core(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t heads = 1,
                         std::vector<T>* weights = nullptr);

/// sum_i weights[i] * sources[i]; all sources share one shape, weights [L].
template <typename T> Tensor<T> weighted_sum(const std::vector<Tensor<T>>& sources, const Tensor<T>& weights);

/// Inverted dropout; identity when not training or p == 0.
template <typename T> Tensor<T> dropout(const Tensor<T>& x, T p, Rng& rng, bool training);

/// Mean cross-entropy of logits [N, K] against class indices in [0, K).
template <typename T> Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> targets);

}  // namespace hsinet
