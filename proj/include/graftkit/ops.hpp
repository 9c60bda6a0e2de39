#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "graftkit/tensor.hpp"

// The closed primitive set. Every function validates shapes, rejects
// non-finite outputs, and records a node on the active tape when any input
// tracks gradients.
namespace graftkit::ops {

// a[..., K] x b[K, M] -> [..., M]
Tensor matmul(const Tensor& a, const Tensor& b);

// x[..., K] w[K, M] + b[M]; b may be undefined. Fused so the bias pass is free.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

// Columns [start, start + heads*head_dim) of x[B, N, C] as [B, heads, N, head_dim].
Tensor split_heads(const Tensor& x, std::int64_t start, std::int64_t heads, std::int64_t head_dim);
// [B, H, N, dh] -> [B, N, H*dh], the inverse layout of split_heads.
Tensor merge_heads(const Tensor& x);

// x[B, N, D] * (1 + scale[B, D]) + shift[B, D]
Tensor modulate(const Tensor& x, const Tensor& shift, const Tensor& scale);

// a[..., n, k] x b[..., k, m] -> [..., n, m] with identical leading dims.
// The transpose flags read the last two axes of the operand swapped.
Tensor batched_matmul(const Tensor& a, const Tensor& b, bool transpose_a = false,
                      bool transpose_b = false);

// x[B, S, C], filter[C, K], bias[C] (may be undefined):
// y[b,s,c] = sum_j filter[c,j] * x[b,s-j,c] + bias[c]  (zero padding on the left)
Tensor depthwise_causal_conv1d(const Tensor& x, const Tensor& filter, const Tensor& bias = {});

// Softmax over the last axis. With band >= 0 the input must be [..., N, M] and
// entries with |i - j| > band receive exactly zero weight.
Tensor row_softmax(const Tensor& x, std::int64_t band = -1);

// Normalises over the last axis without affine parameters.
Tensor layernorm(const Tensor& x, double eps = 1e-6);

// Exact erf form: x * 0.5 * (1 + erf(x / sqrt(2))).
Tensor gelu(const Tensor& x);
Tensor silu(const Tensor& x);

// Elementwise with numpy-style broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);

// Elementwise |x| and Huber(x; delta); used by the regression objectives.
Tensor abs(const Tensor& a);
Tensor huber(const Tensor& a, double delta);

// Full reductions to a scalar of shape [].
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

Tensor reshape(const Tensor& a, const Shape& shape);
Tensor transpose(const Tensor& a, int axis0, int axis1);
Tensor concat_last(const std::vector<Tensor>& parts);
// Columns [start, start + length) of the last axis.
Tensor slice_last(const Tensor& a, std::int64_t start, std::int64_t length);
// Rows [start, start + length) of the first axis.
Tensor slice_first(const Tensor& a, std::int64_t start, std::int64_t length);

// table[V, D] gathered at `indices` -> [indices.size(), D]
Tensor embedding(const Tensor& table, std::span<const std::int64_t> indices);

}  // namespace graftkit::ops
