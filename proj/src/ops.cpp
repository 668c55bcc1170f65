#include "hsinet/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

namespace hsinet {

using detail::make_result;
using detail::parent_grad;

namespace {

// ---------------------------------------------------------------------------
// Broadcasting

struct BroadcastPlan {
  Shape out;
  std::vector<std::size_t> stride_a;
  std::vector<std::size_t> stride_b;
};

std::vector<std::size_t> contiguous_strides(const Shape& shape) {
  std::vector<std::size_t> s(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) s[i - 1] = s[i] * shape[i];
  return s;
}

BroadcastPlan plan_broadcast(const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  BroadcastPlan p;
  p.out.assign(r, 1);
  p.stride_a.assign(r, 0);
  p.stride_b.assign(r, 0);
  const auto sa = contiguous_strides(a);
  const auto sb = contiguous_strides(b);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t da = i + a.size() >= r ? a[i + a.size() - r] : 1;
    const std::size_t db = i + b.size() >= r ? b[i + b.size() - r] : 1;
    if (da != db && da != 1 && db != 1) {
      throw DimensionError("cannot broadcast " + to_string(a) + " with " + to_string(b));
    }
    p.out[i] = std::max(da, db);
    if (da != 1) p.stride_a[i] = sa[i + a.size() - r];
    if (db != 1) p.stride_b[i] = sb[i + b.size() - r];
  }
  return p;
}

template <typename F>
void for_each_broadcast(const BroadcastPlan& p, F&& f) {
  const std::size_t r = p.out.size();
  const std::size_t n = numel(p.out);
  std::vector<std::size_t> idx(r, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t o = 0; o < n; ++o) {
    f(o, ia, ib);
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      ia += p.stride_a[d];
      ib += p.stride_b[d];
      if (idx[d] < p.out[d]) break;
      ia -= p.stride_a[d] * p.out[d];
      ib -= p.stride_b[d] * p.out[d];
      idx[d] = 0;
    }
  }
}

template <typename T, typename Fwd, typename DA, typename DB>
Tensor<T> binary_op(const Tensor<T>& a, const Tensor<T>& b, Fwd fwd, DA da, DB db) {
  if (a.shape() == b.shape()) {
    const auto x = a.data();
    const auto y = b.data();
    std::vector<T> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(x[i], y[i]);
    return make_result<T>(a.shape(), std::move(out), {&a, &b}, [da, db](TensorNode<T>& self) {
      const auto& x = self.parents[0]->value;
      const auto& y = self.parents[1]->value;
      const auto& g = self.grad;
      if (auto ga = parent_grad(self, 0); !ga.empty()) {
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += da(x[i], y[i], g[i]);
      }
      if (auto gb = parent_grad(self, 1); !gb.empty()) {
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += db(x[i], y[i], g[i]);
      }
    });
  }
  auto plan = plan_broadcast(a.shape(), b.shape());
  std::vector<T> out(numel(plan.out));
  const auto x = a.data();
  const auto y = b.data();
  for_each_broadcast(plan, [&](std::size_t o, std::size_t i, std::size_t j) { out[o] = fwd(x[i], y[j]); });
  Shape shape = plan.out;
  return make_result<T>(std::move(shape), std::move(out), {&a, &b},
                        [plan = std::move(plan), da, db](TensorNode<T>& self) {
                          const auto& x = self.parents[0]->value;
                          const auto& y = self.parents[1]->value;
                          const auto& g = self.grad;
                          auto ga = parent_grad(self, 0);
                          auto gb = parent_grad(self, 1);
                          for_each_broadcast(plan, [&](std::size_t o, std::size_t i, std::size_t j) {
                            if (!ga.empty()) ga[i] += da(x[i], y[j], g[o]);
                            if (!gb.empty()) gb[j] += db(x[i], y[j], g[o]);
                          });
                        });
}

template <typename T, typename Fwd, typename Deriv>
Tensor<T> unary_op(const Tensor<T>& a, Fwd fwd, Deriv deriv) {
  const auto x = a.data();
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(x[i]);
  return make_result<T>(a.shape(), std::move(out), {&a}, [deriv](TensorNode<T>& self) {
    const auto& x = self.parents[0]->value;
    const auto& y = self.value;
    auto g = parent_grad(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * deriv(x[i], y[i]);
  });
}

std::size_t product(const Shape& s, std::size_t begin, std::size_t end) {
  std::size_t n = 1;
  for (std::size_t i = begin; i < end; ++i) n *= s[i];
  return n;
}

void require_rank(const Shape& s, std::initializer_list<std::size_t> ranks, const char* op) {
  for (auto r : ranks) {
    if (s.size() == r) return;
  }
  throw DimensionError(std::string(op) + ": unsupported input shape " + to_string(s));
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op<T>(
      a, b, [](T x, T y) { return x + y; }, [](T, T, T g) { return g; }, [](T, T, T g) { return g; });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op<T>(
      a, b, [](T x, T y) { return x - y; }, [](T, T, T g) { return g; }, [](T, T, T g) { return -g; });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op<T>(
      a, b, [](T x, T y) { return x * y; }, [](T, T y, T g) { return g * y; },
      [](T x, T, T g) { return g * x; });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  return unary_op<T>(a, [factor](T x) { return x * factor; }, [factor](T, T) { return factor; });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return unary_op<T>(x, [](T v) { return v > T(0) ? v : T(0); }, [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T inv_sqrt2 = T(0.70710678118654752440);
  constexpr T inv_sqrt2pi = T(0.39894228040143267794);
  return unary_op<T>(
      x, [](T v) { return T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2)); },
      [](T v, T) { return T(0.5) * (T(1) + std::erf(v * inv_sqrt2)) + v * inv_sqrt2pi * std::exp(T(-0.5) * v * v); });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return unary_op<T>(
      x,
      [](T v) {
        if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
        const T e = std::exp(v);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x) {
  if (x.rank() == 0) throw DimensionError("softmax needs at least one axis");
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.size() / n;
  const auto in = x.data();
  std::vector<T> out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* src = in.data() + r * n;
    T* dst = out.data() + r * n;
    const T mx = *std::max_element(src, src + n);
    T total = 0;
    for (std::size_t i = 0; i < n; ++i) {
      dst[i] = std::exp(src[i] - mx);
      total += dst[i];
    }
    for (std::size_t i = 0; i < n; ++i) dst[i] /= total;
  }
  return make_result<T>(x.shape(), std::move(out), {&x}, [n, rows](TensorNode<T>& self) {
    auto g = parent_grad(self, 0);
    const auto& y = self.value;
    for (std::size_t r = 0; r < rows; ++r) {
      T dot = 0;
      for (std::size_t i = 0; i < n; ++i) dot += self.grad[r * n + i] * y[r * n + i];
      for (std::size_t i = 0; i < n; ++i) g[r * n + i] += y[r * n + i] * (self.grad[r * n + i] - dot);
    }
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T total = 0;
  for (T v : x.data()) total += v;
  return make_result<T>(Shape{}, {total}, {&x}, [](TensorNode<T>& self) {
    auto g = parent_grad(self, 0);
    for (auto& v : g) v += self.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.size()));
}

// ---------------------------------------------------------------------------
// Layout

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel(shape) != x.size()) {
    throw DimensionError("reshape " + to_string(x.shape()) + " -> " + to_string(shape));
  }
  std::vector<T> out(x.data().begin(), x.data().end());
  return make_result<T>(std::move(shape), std::move(out), {&x}, [](TensorNode<T>& self) {
    auto g = parent_grad(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x, std::size_t axis0, std::size_t axis1) {
  if (axis0 >= x.rank() || axis1 >= x.rank()) {
    throw DimensionError("transpose axes out of range for " + to_string(x.shape()));
  }
  Shape out_shape = x.shape();
  std::swap(out_shape[axis0], out_shape[axis1]);
  auto in_strides = contiguous_strides(x.shape());
  std::swap(in_strides[axis0], in_strides[axis1]);
  // Map every output position to its source offset once; reused by backward.
  std::vector<std::size_t> src(x.size());
  {
    BroadcastPlan p{out_shape, in_strides, std::vector<std::size_t>(out_shape.size(), 0)};
    for_each_broadcast(p, [&](std::size_t o, std::size_t i, std::size_t) { src[o] = i; });
  }
  const auto in = x.data();
  std::vector<T> out(x.size());
  for (std::size_t o = 0; o < out.size(); ++o) out[o] = in[src[o]];
  return make_result<T>(std::move(out_shape), std::move(out), {&x}, [src = std::move(src)](TensorNode<T>& self) {
    auto g = parent_grad(self, 0);
    for (std::size_t o = 0; o < src.size(); ++o) g[src[o]] += self.grad[o];
  });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat of zero tensors");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) throw DimensionError("concat axis out of range for " + to_string(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  std::vector<std::size_t> lengths;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == axis || s[i] == first[i];
    if (!ok) throw DimensionError("concat shape mismatch: " + to_string(first) + " vs " + to_string(s));
    lengths.push_back(s[axis]);
    out_shape[axis] += s[axis];
  }
  const std::size_t outer = product(first, 0, axis);
  const std::size_t inner = product(first, axis + 1, first.size());
  const std::size_t row = out_shape[axis] * inner;
  std::vector<T> out(numel(out_shape));
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto src = parts[k].data();
    const std::size_t block = lengths[k] * inner;
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(src.data() + o * block, block, out.data() + o * row + offset);
    }
    offset += block;
  }
  std::vector<const Tensor<T>*> inputs;
  for (const auto& p : parts) inputs.push_back(&p);
  return make_result<T>(std::move(out_shape), std::move(out), inputs,
                        [lengths, outer, inner, row](TensorNode<T>& self) {
                          std::size_t offset = 0;
                          for (std::size_t k = 0; k < lengths.size(); ++k) {
                            const std::size_t block = lengths[k] * inner;
                            if (auto g = parent_grad(self, k); !g.empty()) {
                              for (std::size_t o = 0; o < outer; ++o) {
                                for (std::size_t i = 0; i < block; ++i) {
                                  g[o * block + i] += self.grad[o * row + offset + i];
                                }
                              }
                            }
                            offset += block;
                          }
                        });
}

template <typename T>
Tensor<T> narrow(const Tensor<T>& x, std::size_t axis, std::size_t start, std::size_t length) {
  const Shape& s = x.shape();
  if (axis >= s.size() || length == 0 || start + length > s[axis]) {
    throw DimensionError("narrow(" + std::to_string(axis) + ", " + std::to_string(start) + ", " +
                         std::to_string(length) + ") out of range for " + to_string(s));
  }
  Shape out_shape = s;
  out_shape[axis] = length;
  const std::size_t outer = product(s, 0, axis);
  const std::size_t inner = product(s, axis + 1, s.size());
  const std::size_t row = s[axis] * inner;
  const std::size_t block = length * inner;
  const std::size_t offset = start * inner;
  const auto in = x.data();
  std::vector<T> out(outer * block);
  for (std::size_t o = 0; o < outer; ++o) std::copy_n(in.data() + o * row + offset, block, out.data() + o * block);
  return make_result<T>(std::move(out_shape), std::move(out), {&x}, [=](TensorNode<T>& self) {
    auto g = parent_grad(self, 0);
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t i = 0; i < block; ++i) g[o * row + offset + i] += self.grad[o * block + i];
    }
  });
}

// ---------------------------------------------------------------------------
// Dense products

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  if (x.rank() < 1 || weight.rank() != 2 || x.shape().back() != weight.dim(1)) {
    throw DimensionError("linear: input " + to_string(x.shape()) + " incompatible with weight " +
                         to_string(weight.shape()));
  }
  const std::size_t in_f = weight.dim(1);
  const std::size_t out_f = weight.dim(0);
  if (bias.defined() && bias.shape() != Shape{out_f}) {
    throw DimensionError("linear: bias " + to_string(bias.shape()) + " for " + std::to_string(out_f) + " outputs");
  }
  const std::size_t rows = x.size() / in_f;
  Shape out_shape = x.shape();
  out_shape.back() = out_f;
  const T* xv = x.data().data();
  const T* wv = weight.data().data();
  std::vector<T> out(rows * out_f);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = xv + r * in_f;
    for (std::size_t o = 0; o < out_f; ++o) {
      const T* wr = wv + o * in_f;
      T acc = bias.defined() ? bias.data()[o] : T(0);
      for (std::size_t i = 0; i < in_f; ++i) acc += xr[i] * wr[i];
      out[r * out_f + o] = acc;
    }
  }
  return make_result<T>(std::move(out_shape), std::move(out), {&x, &weight, &bias},
                        [rows, in_f, out_f](TensorNode<T>& self) {
                          const T* xv = self.parents[0]->value.data();
                          const T* wv = self.parents[1]->value.data();
                          auto gx = parent_grad(self, 0);
                          auto gw = parent_grad(self, 1);
                          auto gb = parent_grad(self, 2);
                          for (std::size_t r = 0; r < rows; ++r) {
                            const T* gy = self.grad.data() + r * out_f;
                            const T* xr = xv + r * in_f;
                            for (std::size_t o = 0; o < out_f; ++o) {
                              const T go = gy[o];
                              if (go == T(0)) continue;
                              if (!gx.empty()) {
                                T* gxr = gx.data() + r * in_f;
                                const T* wr = wv + o * in_f;
                                for (std::size_t i = 0; i < in_f; ++i) gxr[i] += go * wr[i];
                              }
                              if (!gw.empty()) {
                                T* gwr = gw.data() + o * in_f;
                                for (std::size_t i = 0; i < in_f; ++i) gwr[i] += go * xr[i];
                              }
                              if (!gb.empty()) gb[o] += go;
                            }
                          }
                        });
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || b.rank() < 2) throw DimensionError("matmul needs rank >= 2 operands");
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  const std::size_t m = sa[sa.size() - 2], k = sa.back();
  const std::size_t n = sb.back();
  if (sb[sb.size() - 2] != k) {
    throw DimensionError("matmul inner dimension mismatch: " + to_string(sa) + " x " + to_string(sb));
  }
  const bool shared_b = sb.size() == 2;
  if (!shared_b && (sb.size() != sa.size() || !std::equal(sa.begin(), sa.end() - 2, sb.begin()))) {
    throw DimensionError("matmul batch mismatch: " + to_string(sa) + " x " + to_string(sb));
  }
  const std::size_t batch = a.size() / (m * k);
  Shape out_shape = sa;
  out_shape.back() = n;
  std::vector<T> out(batch * m * n, T(0));
  const T* av = a.data().data();
  const T* bv = b.data().data();
  for (std::size_t t = 0; t < batch; ++t) {
    const T* A = av + t * m * k;
    const T* B = bv + (shared_b ? 0 : t * k * n);
    T* C = out.data() + t * m * n;
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t p = 0; p < k; ++p) {
        const T aip = A[i * k + p];
        for (std::size_t j = 0; j < n; ++j) C[i * n + j] += aip * B[p * n + j];
      }
    }
  }
  return make_result<T>(std::move(out_shape), std::move(out), {&a, &b},
                        [batch, m, k, n, shared_b](TensorNode<T>& self) {
                          const T* av = self.parents[0]->value.data();
                          const T* bv = self.parents[1]->value.data();
                          auto ga = parent_grad(self, 0);
                          auto gb = parent_grad(self, 1);
                          for (std::size_t t = 0; t < batch; ++t) {
                            const T* A = av + t * m * k;
                            const std::size_t boff = shared_b ? 0 : t * k * n;
                            const T* B = bv + boff;
                            const T* G = self.grad.data() + t * m * n;
                            for (std::size_t i = 0; i < m; ++i) {
                              for (std::size_t p = 0; p < k; ++p) {
                                T acc = 0;
                                for (std::size_t j = 0; j < n; ++j) acc += G[i * n + j] * B[p * n + j];
                                if (!ga.empty()) ga[t * m * k + i * k + p] += acc;
                                if (!gb.empty()) {
                                  const T aip = A[i * k + p];
                                  for (std::size_t j = 0; j < n; ++j) gb[boff + p * n + j] += aip * G[i * n + j];
                                }
                              }
                            }
                          }
                        });
}

// ---------------------------------------------------------------------------
// Convolution

namespace {

struct Conv2dGeometry {
  std::size_t batch, c_in, h, w, c_out, k, pad, h_out, w_out;
};

// col[(c*k + ky)*k + kx][y*w_out + x] = input[c][y + ky - pad][x + kx - pad]
template <typename T>
void im2col(const T* in, const Conv2dGeometry& g, T* col) {
  const std::size_t hw = g.h_out * g.w_out;
  for (std::size_t c = 0; c < g.c_in; ++c) {
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        T* dst = col + ((c * g.k + ky) * g.k + kx) * hw;
        for (std::size_t y = 0; y < g.h_out; ++y) {
          const long sy = static_cast<long>(y + ky) - static_cast<long>(g.pad);
          for (std::size_t x = 0; x < g.w_out; ++x) {
            const long sx = static_cast<long>(x + kx) - static_cast<long>(g.pad);
            const bool inside = sy >= 0 && sy < static_cast<long>(g.h) && sx >= 0 && sx < static_cast<long>(g.w);
            dst[y * g.w_out + x] = inside ? in[(c * g.h + sy) * g.w + sx] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, const Conv2dGeometry& g, T* in) {
  const std::size_t hw = g.h_out * g.w_out;
  for (std::size_t c = 0; c < g.c_in; ++c) {
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const T* src = col + ((c * g.k + ky) * g.k + kx) * hw;
        for (std::size_t y = 0; y < g.h_out; ++y) {
          const long sy = static_cast<long>(y + ky) - static_cast<long>(g.pad);
          if (sy < 0 || sy >= static_cast<long>(g.h)) continue;
          for (std::size_t x = 0; x < g.w_out; ++x) {
            const long sx = static_cast<long>(x + kx) - static_cast<long>(g.pad);
            if (sx < 0 || sx >= static_cast<long>(g.w)) continue;
            in[(c * g.h + sy) * g.w + sx] += src[y * g.w_out + x];
          }
        }
      }
    }
  }
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias, std::size_t pad) {
  require_rank(input.shape(), {3, 4}, "conv2d");
  const bool unbatched = input.rank() == 3;
  const std::size_t off = unbatched ? 0 : 1;
  if (weight.rank() != 4 || weight.dim(2) != weight.dim(3)) {
    throw DimensionError("conv2d: weight must be [C_out, C_in, k, k], got " + to_string(weight.shape()));
  }
  Conv2dGeometry g{};
  g.batch = unbatched ? 1 : input.dim(0);
  g.c_in = input.dim(off);
  g.h = input.dim(off + 1);
  g.w = input.dim(off + 2);
  g.c_out = weight.dim(0);
  g.k = weight.dim(2);
  g.pad = pad;
  if (weight.dim(1) != g.c_in) {
    throw DimensionError("conv2d: input has " + std::to_string(g.c_in) + " channels but weight " +
                         to_string(weight.shape()) + " expects " + std::to_string(weight.dim(1)));
  }
  if (g.h + 2 * pad < g.k || g.w + 2 * pad < g.k) throw DimensionError("conv2d: kernel larger than padded input");
  if (bias.defined() && bias.shape() != Shape{g.c_out}) {
    throw DimensionError("conv2d: bias " + to_string(bias.shape()) + " for " + std::to_string(g.c_out) + " filters");
  }
  g.h_out = g.h + 2 * pad - g.k + 1;
  g.w_out = g.w + 2 * pad - g.k + 1;
  const std::size_t hw = g.h_out * g.w_out;
  const std::size_t rk = g.c_in * g.k * g.k;

  std::vector<T> out(g.batch * g.c_out * hw);
  std::vector<T> col(rk * hw);
  const T* wv = weight.data().data();
  for (std::size_t n = 0; n < g.batch; ++n) {
    im2col(input.data().data() + n * g.c_in * g.h * g.w, g, col.data());
    T* dst = out.data() + n * g.c_out * hw;
    for (std::size_t o = 0; o < g.c_out; ++o) {
      T* row = dst + o * hw;
      std::fill_n(row, hw, bias.defined() ? bias.data()[o] : T(0));
      for (std::size_t r = 0; r < rk; ++r) {
        const T wr = wv[o * rk + r];
        const T* cr = col.data() + r * hw;
        for (std::size_t j = 0; j < hw; ++j) row[j] += wr * cr[j];
      }
    }
  }
  Shape out_shape = unbatched ? Shape{g.c_out, g.h_out, g.w_out} : Shape{g.batch, g.c_out, g.h_out, g.w_out};
  return make_result<T>(std::move(out_shape), std::move(out), {&input, &weight, &bias},
                        [g, hw, rk](TensorNode<T>& self) {
                          auto gx = parent_grad(self, 0);
                          auto gw = parent_grad(self, 1);
                          auto gb = parent_grad(self, 2);
                          const T* xv = self.parents[0]->value.data();
                          const T* wv = self.parents[1]->value.data();
                          std::vector<T> col(rk * hw);
                          std::vector<T> gcol(gx.empty() ? 0 : rk * hw);
                          for (std::size_t n = 0; n < g.batch; ++n) {
                            const T* go = self.grad.data() + n * g.c_out * hw;
                            if (!gw.empty()) im2col(xv + n * g.c_in * g.h * g.w, g, col.data());
                            if (!gcol.empty()) std::fill(gcol.begin(), gcol.end(), T(0));
                            for (std::size_t o = 0; o < g.c_out; ++o) {
                              const T* gr = go + o * hw;
                              if (!gb.empty()) {
                                T acc = 0;
                                for (std::size_t j = 0; j < hw; ++j) acc += gr[j];
                                gb[o] += acc;
                              }
                              for (std::size_t r = 0; r < rk; ++r) {
                                if (!gw.empty()) {
                                  const T* cr = col.data() + r * hw;
                                  T acc = 0;
                                  for (std::size_t j = 0; j < hw; ++j) acc += gr[j] * cr[j];
                                  gw[o * rk + r] += acc;
                                }
                                if (!gcol.empty()) {
                                  const T wr = wv[o * rk + r];
                                  T* gc = gcol.data() + r * hw;
                                  for (std::size_t j = 0; j < hw; ++j) gc[j] += wr * gr[j];
                                }
                              }
                            }
                            if (!gcol.empty()) col2im_add(gcol.data(), g, gx.data() + n * g.c_in * g.h * g.w);
                          }
                        });
}

template <typename T>
Tensor<T> conv3d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias, std::size_t pad_depth) {
  require_rank(input.shape(), {4, 5}, "conv3d");
  const bool unbatched = input.rank() == 4;
  const std::size_t off = unbatched ? 0 : 1;
  if (input.dim(off) != 1) throw DimensionError("conv3d: expected a single input channel, got " + to_string(input.shape()));
  if (weight.rank() != 5 || weight.dim(0) != 1 || weight.dim(1) != 1 || weight.dim(3) != 1 || weight.dim(4) != 1) {
    throw DimensionError("conv3d: weight must be [1, 1, k_d, 1, 1], got " + to_string(weight.shape()));
  }
  if (!bias.defined() || bias.size() != 1) throw DimensionError("conv3d: bias must hold one value");
  const std::size_t batch = unbatched ? 1 : input.dim(0);
  const std::size_t depth = input.dim(off + 1);
  const std::size_t plane = input.dim(off + 2) * input.dim(off + 3);
  const std::size_t kd = weight.dim(2);
  if (depth < 1 || depth + 2 * pad_depth < kd) throw DimensionError("conv3d: depth too short for kernel");
  const std::size_t d_out = depth + 2 * pad_depth - kd + 1;

  const T* xv = input.data().data();
  const T* wv = weight.data().data();
  const T b = bias.data()[0];
  std::vector<T> out(batch * d_out * plane, b);
  for (std::size_t n = 0; n < batch; ++n) {
    for (std::size_t s = 0; s < d_out; ++s) {
      T* dst = out.data() + (n * d_out + s) * plane;
      for (std::size_t t = 0; t < kd; ++t) {
        const long src_s = static_cast<long>(s + t) - static_cast<long>(pad_depth);
        if (src_s < 0 || src_s >= static_cast<long>(depth)) continue;
        const T* src = xv + (n * depth + src_s) * plane;
        for (std::size_t p = 0; p < plane; ++p) dst[p] += wv[t] * src[p];
      }
    }
  }
  Shape out_shape = input.shape();
  out_shape[off + 1] = d_out;
  return make_result<T>(std::move(out_shape), std::move(out), {&input, &weight, &bias},
                        [=](TensorNode<T>& self) {
                          auto gx = parent_grad(self, 0);
                          auto gw = parent_grad(self, 1);
                          auto gb = parent_grad(self, 2);
                          const T* xv = self.parents[0]->value.data();
                          const T* wv = self.parents[1]->value.data();
                          for (std::size_t n = 0; n < batch; ++n) {
                            for (std::size_t s = 0; s < d_out; ++s) {
                              const T* go = self.grad.data() + (n * d_out + s) * plane;
                              if (!gb.empty()) {
                                for (std::size_t p = 0; p < plane; ++p) gb[0] += go[p];
                              }
                              for (std::size_t t = 0; t < kd; ++t) {
                                const long src_s = static_cast<long>(s + t) - static_cast<long>(pad_depth);
                                if (src_s < 0 || src_s >= static_cast<long>(depth)) continue;
                                const std::size_t base = (n * depth + src_s) * plane;
                                if (!gw.empty()) {
                                  T acc = 0;
                                  for (std::size_t p = 0; p < plane; ++p) acc += go[p] * xv[base + p];
                                  gw[t] += acc;
                                }
                                if (!gx.empty()) {
                                  for (std::size_t p = 0; p < plane; ++p) gx[base + p] += wv[t] * go[p];
                                }
                              }
                            }
                          }
                        });
}

// ---------------------------------------------------------------------------
// Pooling

template <typename T>
Tensor<T> directional_pool(const Tensor<T>& input, PoolAxis axis, PoolMode mode) {
  require_rank(input.shape(), {3, 4}, "directional_pool");
  const bool unbatched = input.rank() == 3;
  const std::size_t off = unbatched ? 0 : 1;
  const std::size_t planes = (unbatched ? 1 : input.dim(0)) * input.dim(off);
  const std::size_t h = input.dim(off + 1), w = input.dim(off + 2);
  const bool horizontal = axis == PoolAxis::horizontal;
  const std::size_t keep = horizontal ? h : w;     // surviving positions
  const std::size_t reduce = horizontal ? w : h;   // reduced length
  // element (keep index i, reduce index j) lives at plane offset:
  const auto at = [=](std::size_t i, std::size_t j) { return horizontal ? i * w + j : j * w + i; };

  const T* xv = input.data().data();
  std::vector<T> out(planes * keep);
  std::vector<std::size_t> argmax(mode == PoolMode::max ? out.size() : 0);
  for (std::size_t p = 0; p < planes; ++p) {
    const T* src = xv + p * h * w;
    for (std::size_t i = 0; i < keep; ++i) {
      if (mode == PoolMode::avg) {
        T acc = 0;
        for (std::size_t j = 0; j < reduce; ++j) acc += src[at(i, j)];
        out[p * keep + i] = acc / static_cast<T>(reduce);
      } else {
        std::size_t best = at(i, 0);
        for (std::size_t j = 1; j < reduce; ++j) {
          if (src[at(i, j)] > src[best]) best = at(i, j);
        }
        out[p * keep + i] = src[best];
        argmax[p * keep + i] = p * h * w + best;
      }
    }
  }
  Shape out_shape = input.shape();
  out_shape.pop_back();
  out_shape.back() = keep;
  return make_result<T>(std::move(out_shape), std::move(out), {&input},
                        [=, argmax = std::move(argmax)](TensorNode<T>& self) {
                          auto gx = parent_grad(self, 0);
                          if (mode == PoolMode::max) {
                            for (std::size_t o = 0; o < argmax.size(); ++o) gx[argmax[o]] += self.grad[o];
                            return;
                          }
                          const T inv = T(1) / static_cast<T>(reduce);
                          for (std::size_t p = 0; p < planes; ++p) {
                            for (std::size_t i = 0; i < keep; ++i) {
                              const T g = self.grad[p * keep + i] * inv;
                              for (std::size_t j = 0; j < reduce; ++j) gx[p * h * w + at(i, j)] += g;
                            }
                          }
                        });
}

template <typename T>
Tensor<T> global_pool2d(const Tensor<T>& input, PoolMode mode) {
  require_rank(input.shape(), {3, 4}, "global_pool2d");
  const bool unbatched = input.rank() == 3;
  const std::size_t off = unbatched ? 0 : 1;
  const std::size_t planes = (unbatched ? 1 : input.dim(0)) * input.dim(off);
  const std::size_t area = input.dim(off + 1) * input.dim(off + 2);
  const T* xv = input.data().data();
  std::vector<T> out(planes);
  std::vector<std::size_t> argmax(mode == PoolMode::max ? planes : 0);
  for (std::size_t p = 0; p < planes; ++p) {
    const T* src = xv + p * area;
    if (mode == PoolMode::avg) {
      T acc = 0;
      for (std::size_t i = 0; i < area; ++i) acc += src[i];
      out[p] = acc / static_cast<T>(area);
    } else {
      const std::size_t best = static_cast<std::size_t>(std::max_element(src, src + area) - src);
      out[p] = src[best];
      argmax[p] = p * area + best;
    }
  }
  Shape out_shape(input.shape().begin(), input.shape().end() - 2);
  return make_result<T>(std::move(out_shape), std::move(out), {&input},
                        [=, argmax = std::move(argmax)](TensorNode<T>& self) {
                          auto gx = parent_grad(self, 0);
                          if (mode == PoolMode::max) {
                            for (std::size_t p = 0; p < planes; ++p) gx[argmax[p]] += self.grad[p];
                            return;
                          }
                          for (std::size_t p = 0; p < planes; ++p) {
                            const T g = self.grad[p] / static_cast<T>(area);
                            for (std::size_t i = 0; i < area; ++i) gx[p * area + i] += g;
                          }
                        });
}

// ---------------------------------------------------------------------------
// Normalization
//
// All three normalizers share one kernel: the tensor is viewed as
// [outer, channels, inner] and each statistics span is a set of
// (outer, channel-range) blocks. Affine parameters are per channel
// (layer norm: channels = last axis, inner = 1).

namespace {

struct NormLayout {
  std::size_t outer, channels, inner;
  // span s covers outer indices [o_begin, o_end) x channels [c_begin, c_end)
  struct Span {
    std::size_t o_begin, o_end, c_begin, c_end;
  };
  std::vector<Span> spans;
};

template <typename T>
void for_span(const NormLayout& l, const NormLayout::Span& s, auto&& f) {
  for (std::size_t o = s.o_begin; o < s.o_end; ++o) {
    for (std::size_t c = s.c_begin; c < s.c_end; ++c) {
      const std::size_t base = (o * l.channels + c) * l.inner;
      for (std::size_t i = 0; i < l.inner; ++i) f(base + i, c);
    }
  }
}

template <typename T>
std::pair<T, T> span_moments(const NormLayout& l, const NormLayout::Span& s, const T* x) {
  T total = 0;
  std::size_t count = 0;
  for_span<T>(l, s, [&](std::size_t i, std::size_t) { total += x[i]; ++count; });
  const T mu = total / static_cast<T>(count);
  T var = 0;
  for_span<T>(l, s, [&](std::size_t i, std::size_t) { var += (x[i] - mu) * (x[i] - mu); });
  return {mu, var / static_cast<T>(count)};
}

// Normalizes with supplied per-span (mean, inv_std), then applies the
// affine map; when `batch_stats` the backward pass differentiates through
// the statistics, otherwise they are treated as constants.
template <typename T>
Tensor<T> normalize_with(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& shift, NormLayout layout,
                         std::vector<T> means, std::vector<T> inv_std, bool batch_stats) {
  if (gain.size() != layout.channels || shift.size() != layout.channels) {
    throw DimensionError("normalize: affine parameters must have " + std::to_string(layout.channels) +
                         " entries, got " + to_string(gain.shape()) + " / " + to_string(shift.shape()));
  }
  const T* xv = x.data().data();
  const T* gv = gain.data().data();
  const T* bv = shift.data().data();
  std::vector<T> xhat(x.size());
  std::vector<T> out(x.size());
  for (std::size_t s = 0; s < layout.spans.size(); ++s) {
    for_span<T>(layout, layout.spans[s], [&](std::size_t i, std::size_t c) {
      xhat[i] = (xv[i] - means[s]) * inv_std[s];
      out[i] = xhat[i] * gv[c] + bv[c];
    });
  }
  return make_result<T>(x.shape(), std::move(out), {&x, &gain, &shift},
                        [layout = std::move(layout), xhat = std::move(xhat), inv_std = std::move(inv_std),
                         batch_stats](TensorNode<T>& self) {
                          auto gx = parent_grad(self, 0);
                          auto gg = parent_grad(self, 1);
                          auto gs = parent_grad(self, 2);
                          const T* gv = self.parents[1]->value.data();
                          const auto& gy = self.grad;
                          for (std::size_t s = 0; s < layout.spans.size(); ++s) {
                            const auto& span = layout.spans[s];
                            T mean_g = 0, mean_gx = 0;
                            std::size_t count = 0;
                            for_span<T>(layout, span, [&](std::size_t i, std::size_t c) {
                              if (!gg.empty()) gg[c] += gy[i] * xhat[i];
                              if (!gs.empty()) gs[c] += gy[i];
                              const T gh = gy[i] * gv[c];
                              mean_g += gh;
                              mean_gx += gh * xhat[i];
                              ++count;
                            });
                            if (gx.empty()) continue;
                            mean_g /= static_cast<T>(count);
                            mean_gx /= static_cast<T>(count);
                            for_span<T>(layout, span, [&](std::size_t i, std::size_t c) {
                              const T gh = gy[i] * gv[c];
                              gx[i] += batch_stats ? inv_std[s] * (gh - mean_g - xhat[i] * mean_gx) : inv_std[s] * gh;
                            });
                          }
                        });
}

template <typename T>
Tensor<T> normalize_batch_stats(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& shift,
                                NormLayout layout, T eps) {
  std::vector<T> means, inv_std;
  for (const auto& s : layout.spans) {
    auto [mu, var] = span_moments<T>(layout, s, x.data().data());
    means.push_back(mu);
    inv_std.push_back(T(1) / std::sqrt(var + eps));
  }
  return normalize_with<T>(x, gain, shift, std::move(layout), std::move(means), std::move(inv_std), true);
}

}  // namespace

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& shift, T eps) {
  if (x.rank() < 1) throw DimensionError("layer_norm needs at least one axis");
  NormLayout l{x.size() / x.shape().back(), x.shape().back(), 1, {}};
  for (std::size_t o = 0; o < l.outer; ++o) l.spans.push_back({o, o + 1, 0, l.channels});
  return normalize_batch_stats<T>(x, gain, shift, std::move(l), eps);
}

template <typename T>
Tensor<T> group_norm(const Tensor<T>& x, std::size_t groups, const Tensor<T>& gain, const Tensor<T>& shift, T eps) {
  if (x.rank() < 2) throw DimensionError("group_norm expects [N, C, ...], got " + to_string(x.shape()));
  const std::size_t channels = x.dim(1);
  if (groups == 0 || channels % groups != 0) {
    throw ConfigError("group_norm: " + std::to_string(channels) + " channels not divisible into " +
                      std::to_string(groups) + " groups");
  }
  NormLayout l{x.dim(0), channels, x.size() / (x.dim(0) * channels), {}};
  const std::size_t per = channels / groups;
  for (std::size_t o = 0; o < l.outer; ++o) {
    for (std::size_t g = 0; g < groups; ++g) l.spans.push_back({o, o + 1, g * per, (g + 1) * per});
  }
  return normalize_batch_stats<T>(x, gain, shift, std::move(l), eps);
}

template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& shift, Tensor<T>& running_mean,
                     Tensor<T>& running_var, bool training, T momentum, T eps) {
  if (x.rank() < 2) throw DimensionError("batch_norm expects [N, C, ...], got " + to_string(x.shape()));
  const std::size_t channels = x.dim(1);
  if (running_mean.size() != channels || running_var.size() != channels) {
    throw DimensionError("batch_norm: running statistics must have " + std::to_string(channels) + " entries");
  }
  NormLayout l{x.dim(0), channels, x.size() / (x.dim(0) * channels), {}};
  for (std::size_t c = 0; c < channels; ++c) l.spans.push_back({0, l.outer, c, c + 1});
  if (!training) {
    std::vector<T> means(running_mean.data().begin(), running_mean.data().end());
    std::vector<T> inv_std(channels);
    for (std::size_t c = 0; c < channels; ++c) inv_std[c] = T(1) / std::sqrt(running_var.data()[c] + eps);
    return normalize_with<T>(x, gain, shift, std::move(l), std::move(means), std::move(inv_std), false);
  }
  const std::size_t count = l.outer * l.inner;
  auto rm = running_mean.mutable_data();
  auto rv = running_var.mutable_data();
  for (std::size_t c = 0; c < channels; ++c) {
    auto [mu, var] = span_moments<T>(l, l.spans[c], x.data().data());
    const T unbiased = count > 1 ? var * static_cast<T>(count) / static_cast<T>(count - 1) : var;
    rm[c] = (T(1) - momentum) * rm[c] + momentum * mu;
    rv[c] = (T(1) - momentum) * rv[c] + momentum * unbiased;
  }
  return normalize_batch_stats<T>(x, gain, shift, std::move(l), eps);
}

// ---------------------------------------------------------------------------
// Attention

template <typename T>
Tensor<T> attention_core(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t heads,
                         std::vector<T>* weights) {
  require_rank(q.shape(), {2, 3}, "attention_core");
  if (q.shape() != k.shape() || q.shape() != v.shape()) {
    throw DimensionError("attention_core: Q " + to_string(q.shape()) + ", K " + to_string(k.shape()) + ", V " +
                         to_string(v.shape()) + " must match");
  }
  const bool unbatched = q.rank() == 2;
  const std::size_t batch = unbatched ? 1 : q.dim(0);
  const std::size_t tokens = q.dim(unbatched ? 0 : 1);
  const std::size_t width = q.shape().back();
  if (heads == 0 || width % heads != 0) {
    throw ConfigError("attention_core: width " + std::to_string(width) + " not divisible by " +
                      std::to_string(heads) + " heads");
  }
  const std::size_t dk = width / heads;
  const T inv_scale = T(1) / std::sqrt(static_cast<T>(dk));
  const T* qv = q.data().data();
  const T* kv = k.data().data();
  const T* vv = v.data().data();

  std::vector<T> probs(batch * heads * tokens * tokens);
  std::vector<T> out(q.size(), T(0));
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t col = h * dk;
      T* P = probs.data() + (b * heads + h) * tokens * tokens;
      for (std::size_t i = 0; i < tokens; ++i) {
        const T* qi = qv + (b * tokens + i) * width + col;
        T* row = P + i * tokens;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < tokens; ++j) {
          const T* kj = kv + (b * tokens + j) * width + col;
          T s = 0;
          for (std::size_t d = 0; d < dk; ++d) s += qi[d] * kj[d];
          row[j] = s * inv_scale;
          mx = std::max(mx, row[j]);
        }
        T total = 0;
        for (std::size_t j = 0; j < tokens; ++j) {
          row[j] = std::exp(row[j] - mx);
          total += row[j];
        }
        T* oi = out.data() + (b * tokens + i) * width + col;
        for (std::size_t j = 0; j < tokens; ++j) {
          row[j] /= total;
          const T* vj = vv + (b * tokens + j) * width + col;
          for (std::size_t d = 0; d < dk; ++d) oi[d] += row[j] * vj[d];
        }
      }
    }
  }
  if (weights != nullptr) *weights = probs;
  return make_result<T>(q.shape(), std::move(out), {&q, &k, &v},
                        [=, probs = std::move(probs)](TensorNode<T>& self) {
                          auto gq = parent_grad(self, 0);
                          auto gk = parent_grad(self, 1);
                          auto gv = parent_grad(self, 2);
                          const T* qv = self.parents[0]->value.data();
                          const T* kv = self.parents[1]->value.data();
                          const T* vv = self.parents[2]->value.data();
                          std::vector<T> dp(tokens);
                          for (std::size_t b = 0; b < batch; ++b) {
                            for (std::size_t h = 0; h < heads; ++h) {
                              const std::size_t col = h * dk;
                              const T* P = probs.data() + (b * heads + h) * tokens * tokens;
                              for (std::size_t i = 0; i < tokens; ++i) {
                                const T* go = self.grad.data() + (b * tokens + i) * width + col;
                                const T* row = P + i * tokens;
                                T dot = 0;
                                for (std::size_t j = 0; j < tokens; ++j) {
                                  const T* vj = vv + (b * tokens + j) * width + col;
                                  T s = 0;
                                  for (std::size_t d = 0; d < dk; ++d) s += go[d] * vj[d];
                                  dp[j] = s;
                                  dot += s * row[j];
                                  if (!gv.empty()) {
                                    T* gvj = gv.data() + (b * tokens + j) * width + col;
                                    for (std::size_t d = 0; d < dk; ++d) gvj[d] += row[j] * go[d];
                                  }
                                }
                                const T* qi = qv + (b * tokens + i) * width + col;
                                for (std::size_t j = 0; j < tokens; ++j) {
                                  const T ds = row[j] * (dp[j] - dot) * inv_scale;
                                  if (ds == T(0)) continue;
                                  const T* kj = kv + (b * tokens + j) * width + col;
                                  if (!gq.empty()) {
                                    T* gqi = gq.data() + (b * tokens + i) * width + col;
                                    for (std::size_t d = 0; d < dk; ++d) gqi[d] += ds * kj[d];
                                  }
                                  if (!gk.empty()) {
                                    T* gkj = gk.data() + (b * tokens + j) * width + col;
                                    for (std::size_t d = 0; d < dk; ++d) gkj[d] += ds * qi[d];
                                  }
                                }
                              }
                            }
                          }
                        });
}

// ---------------------------------------------------------------------------
// Misc

template <typename T>
Tensor<T> weighted_sum(const std::vector<Tensor<T>>& sources, const Tensor<T>& weights) {
  if (sources.empty() || weights.size() != sources.size()) {
    throw ConfigError("weighted_sum: " + std::to_string(sources.size()) + " sources but " +
                      std::to_string(weights.defined() ? weights.size() : 0) + " weights");
  }
  const Shape& shape = sources.front().shape();
  for (const auto& s : sources) {
    if (s.shape() != shape) {
      throw DimensionError("weighted_sum: source shapes differ: " + to_string(shape) + " vs " + to_string(s.shape()));
    }
  }
  const std::size_t L = sources.size();
  std::vector<T> out(numel(shape), T(0));
  for (std::size_t s = 0; s < L; ++s) {
    const T w = weights.data()[s];
    const auto src = sources[s].data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += w * src[i];
  }
  std::vector<const Tensor<T>*> inputs{&weights};
  for (const auto& s : sources) inputs.push_back(&s);
  return make_result<T>(shape, std::move(out), inputs, [L](TensorNode<T>& self) {
    auto gw = parent_grad(self, 0);
    const auto& w = self.parents[0]->value;
    for (std::size_t s = 0; s < L; ++s) {
      const auto& src = self.parents[s + 1]->value;
      if (!gw.empty()) {
        T acc = 0;
        for (std::size_t i = 0; i < src.size(); ++i) acc += self.grad[i] * src[i];
        gw[s] += acc;
      }
      if (auto gs = parent_grad(self, s + 1); !gs.empty()) {
        for (std::size_t i = 0; i < gs.size(); ++i) gs[i] += w[s] * self.grad[i];
      }
    }
  });
}

template <typename T>
Tensor<T> dropout(const Tensor<T>& x, T p, Rng& rng, bool training) {
  if (!training || p <= T(0)) return x;
  if (p >= T(1)) throw ConfigError("dropout probability must be below 1");
  const T keep_scale = T(1) / (T(1) - p);
  std::vector<T> mask(x.size());
  for (auto& m : mask) m = rng.uniform(0.0, 1.0) < static_cast<double>(p) ? T(0) : keep_scale;
  auto m = Tensor<T>(x.shape(), std::move(mask));
  return mul(x, m);
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> targets) {
  if (logits.rank() != 2 || logits.dim(0) != targets.size()) {
    throw DimensionError("cross_entropy: logits " + to_string(logits.shape()) + " vs " +
                         std::to_string(targets.size()) + " targets");
  }
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  const T* z = logits.data().data();
  std::vector<T> probs(n * k);
  T loss = 0;
  for (std::size_t r = 0; r < n; ++r) {
    const int t = targets[r];
    if (t < 0 || static_cast<std::size_t>(t) >= k) {
      throw DimensionError("cross_entropy: target " + std::to_string(t) + " outside [0, " + std::to_string(k) + ")");
    }
    const T* row = z + r * k;
    const T mx = *std::max_element(row, row + k);
    T total = 0;
    for (std::size_t j = 0; j < k; ++j) {
      probs[r * k + j] = std::exp(row[j] - mx);
      total += probs[r * k + j];
    }
    for (std::size_t j = 0; j < k; ++j) probs[r * k + j] /= total;
    loss += -(row[t] - mx - std::log(total));
  }
  loss /= static_cast<T>(n);
  std::vector<int> tgt(targets.begin(), targets.end());
  return make_result<T>(Shape{}, {loss}, {&logits},
                        [n, k, probs = std::move(probs), tgt = std::move(tgt)](TensorNode<T>& self) {
                          auto g = parent_grad(self, 0);
                          const T s = self.grad[0] / static_cast<T>(n);
                          for (std::size_t r = 0; r < n; ++r) {
                            for (std::size_t j = 0; j < k; ++j) {
                              const T onehot = static_cast<int>(j) == tgt[r] ? T(1) : T(0);
                              g[r * k + j] += s * (probs[r * k + j] - onehot);
                            }
                          }
                        });
}

// ---------------------------------------------------------------------------

#define HSINET_INSTANTIATE(T)                                                                                 \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                                 \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                                 \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                                 \
  template Tensor<T> scale(const Tensor<T>&, T);                                                              \
  template Tensor<T> relu(const Tensor<T>&);                                                                  \
  template Tensor<T> gelu(const Tensor<T>&);                                                                  \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                               \
  template Tensor<T> softmax(const Tensor<T>&);                                                               \
  template Tensor<T> sum(const Tensor<T>&);                                                                   \
  template Tensor<T> mean(const Tensor<T>&);                                                                  \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                                        \
  template Tensor<T> transpose(const Tensor<T>&, std::size_t, std::size_t);                                   \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, std::size_t);                                      \
  template Tensor<T> narrow(const Tensor<T>&, std::size_t, std::size_t, std::size_t);                         \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                            \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                              \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t);               \
  template Tensor<T> conv3d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t);               \
  template Tensor<T> directional_pool(const Tensor<T>&, PoolAxis, PoolMode);                                  \
  template Tensor<T> global_pool2d(const Tensor<T>&, PoolMode);                                               \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);                     \
  template Tensor<T> group_norm(const Tensor<T>&, std::size_t, const Tensor<T>&, const Tensor<T>&, T);        \
  template Tensor<T> batch_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Tensor<T>&, Tensor<T>&, \
                                bool, T, T);                                                                  \
  template Tensor<T> attention_core(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t,         \
                                    std::vector<T>*);                                                         \
  template Tensor<T> weighted_sum(const std::vector<Tensor<T>>&, const Tensor<T>&);                           \
  template Tensor<T> dropout(const Tensor<T>&, T, Rng&, bool);                                                \
  template Tensor<T> cross_entropy(const Tensor<T>&, std::span<const int>);

HSINET_INSTANTIATE(float)
HSINET_INSTANTIATE(double)

#undef HSINET_INSTANTIATE

}  // namespace hsinet
