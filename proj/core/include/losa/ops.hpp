#pragma once

#include <vector>

#include "losa/tensor.hpp"

namespace losa {

// Elementwise, same shape.
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

// Multiply by a compile-time-known constant.
Tensor scale(const Tensor& x, double c);

// Multiply by a single-element tensor (the gating primitive); both sides
// receive gradients.
Tensor mul_scalar(const Tensor& x, const Tensor& s);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

Tensor concat(std::int64_t axis, const std::vector<Tensor>& xs);
std::vector<Tensor> split(const Tensor& x, std::int64_t axis, const std::vector<std::int64_t>& sizes);

// Mean over the given axes (sorted, unique); reduced axes are dropped.
// Reducing every axis yields a scalar-shaped [1] tensor.
Tensor mean_axes(const Tensor& x, std::vector<std::int64_t> axes);
Tensor sum_all(const Tensor& x);

// x: [..., k] -> [..., n] with weight [k x n], bias [n].
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

// Normalizes the last axis; gamma/beta have that axis's extent.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

// Row-stabilized softmax over the last axis of a 2-D tensor.
Tensor softmax_rows(const Tensor& x);

Tensor gelu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor softplus(const Tensor& x);

// Same-padded, stride-1 convolutions. Layouts:
//   conv1d:   x [L x Ci],         w [k x Ci x Co],       b [Co]
//   conv2d:   x [T x H x W x Ci], w [kh x kw x Ci x Co], b [Co]   (T batches)
//   dwconv2d: x [T x H x W x C],  w [kh x kw x C],       b [C]
Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& b);
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b);
Tensor dwconv2d(const Tensor& x, const Tensor& w, const Tensor& b);

// Fused multi-head cross-attention: softmax(Q_h K_h^T / sqrt(d_h)) V_h per
// head, heads concatenated, then the output projection. One tape node.
Tensor multihead_cross_attention(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& wq,
                                 const Tensor& wk, const Tensor& wv, const Tensor& wo, std::int64_t heads);

// Returns per-query attention weights (heads stacked row-blocks), forward only.
Tensor attention_weights(const Tensor& q, const Tensor& k, const Tensor& wq, const Tensor& wk,
                         std::int64_t heads);

// y = sum_i gates[i] * xs[i]; all xs share one shape, gates are scalars.
Tensor scaled_sum(const std::vector<Tensor>& xs, const std::vector<Tensor>& gates);

// Mean sigmoid cross-entropy with logits; targets in [0,1], not differentiated.
Tensor bce_with_logits(const Tensor& logits, const Tensor& targets);

// Mean (1 - IoU) of anchored 1-D segments over rows where mask == 1.
// pred/target rows are nonnegative (start-distance, end-distance) pairs.
Tensor segment_iou_loss(const Tensor& pred, const Tensor& target, const Tensor& mask);

}  // namespace losa
