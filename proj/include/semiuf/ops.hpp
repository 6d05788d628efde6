#pragma once

// Differentiable tensor operations. All rank-4 tensors are NCHW. Every op is
// explicitly instantiated for float (training) and double (gradient checks).

#include "semiuf/autograd.hpp"

namespace semiuf::ops {

template <class T>
void gemm(bool trans_a, bool trans_b, int m, int n, int k, T alpha, const T* a, int lda,
          const T* b, int ldb, T beta, T* c, int ldc);

template <class T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <class T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <class T> Var<T> mul(const Var<T>& a, const Var<T>& b);
template <class T> Var<T> scale(const Var<T>& a, T s);
template <class T> Var<T> sum(const Var<T>& a);
template <class T> Var<T> mean(const Var<T>& a);

template <class T> Var<T> relu(const Var<T>& a);
template <class T> Var<T> leaky_relu(const Var<T>& a, T slope);
template <class T> Var<T> gelu(const Var<T>& a);

// Clamps to [lo, hi]. Gradient is zero outside the range unless
// straight_through is set, in which case it passes unchanged.
template <class T> Var<T> clamp(const Var<T>& a, T lo, T hi, bool straight_through = false);

// 2-D convolution with zero padding. weight [Co, Ci, k, k], bias [Co] (may be undefined).
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, int stride, int pad);

// Layer normalization across channels at each pixel. gamma/beta [C].
template <class T>
Var<T> layer_norm_channels(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                           T eps = T(1e-5));

template <class T> Var<T> channel_slice(const Var<T>& x, int start, int count);
template <class T> Var<T> concat_channels(const Var<T>& a, const Var<T>& b);

// [B, C*r*r, H, W] -> [B, C, H*r, W*r].
template <class T> Var<T> pixel_shuffle(const Var<T>& x, int r);

// [B, C, H, W] -> [B, C]
template <class T> Var<T> global_avg_pool(const Var<T>& x);

// Windowed multi-head self-attention. qkv is [B, 3C, H, W] with query, key and
// value stacked along channels. rel_bias is [heads, (2*ws-1)^2]. With shift the
// windows are displaced by ws/2 cyclically (roll, attend, roll back).
template <class T>
Var<T> window_attention(const Var<T>& qkv, const Var<T>& rel_bias, int heads, int window,
                        bool shift);

}  // namespace semiuf::ops
