// Copyright (c) 2026, Conv-LoRA Desk Authors
// SPDX-License-Identifier: Apache-2.0
//
// Differentiable operations. Each op computes its output eagerly and, when a
// tape is active and any input requires grad, records a backward closure.
// Outputs containing NaN or Inf raise NumericError naming the op.

#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "convlora/tensor.hpp"

namespace convlora::ops {

// --- linear algebra -------------------------------------------------------

/// (m x k) . (k x n) -> (m x n).
Tensor matmul(const Tensor& a, const Tensor& b);

/// Batched product: (b x m x k) . (b x k x n) -> (b x m x n).
Tensor bmm(const Tensor& a, const Tensor& b);

/// Batched product with the second operand transposed:
/// (b x m x k) . (b x n x k)^T -> (b x m x n).
Tensor bmm_nt(const Tensor& a, const Tensor& b);

/// x[..., in] . W^T + bias, with W stored (out x in). bias may be undefined.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias = {});

/// Per-pixel channel map on NCHW: out[b,o,p] = sum_c W[o,c] x[b,c,p].
Tensor channel_linear(const Tensor& x, const Tensor& weight);

// --- spatial --------------------------------------------------------------

/// 3x3 convolution, stride 1, zero padding 1. kernel is (C' x C x 3 x 3).
Tensor conv3x3(const Tensor& x, const Tensor& kernel, const Tensor& bias);

/// Bilinear resampling with half-pixel centres and border clamping. Output
/// extents are ceil(scale * extent); the source coordinate of output pixel d
/// is (d + 0.5) / scale - 0.5.
Tensor interpolate_bilinear(const Tensor& x, double scale);

/// Bilinear resampling to explicit extents; the per-axis scale is out/in.
Tensor resize_bilinear(const Tensor& x, std::size_t out_h, std::size_t out_w);

/// NCHW -> (B x C) spatial mean.
Tensor global_avg_pool(const Tensor& x);

// --- elementwise and activations -------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
/// x + bias broadcast over the trailing axis; bias has the trailing extent.
Tensor add_bias_last(const Tensor& x, const Tensor& bias);
/// Every element of x multiplied by the single entry s[index].
Tensor scale_by_element(const Tensor& x, const Tensor& s, std::size_t index);

Tensor softplus(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor gelu(const Tensor& x);

double softplus_value(double x);
double sigmoid_value(double x);

// --- normalisation and reductions --------------------------------------------

/// Softmax along `axis`. -inf entries map to exactly 0. A slice with no
/// finite entry raises DegenerateGateError.
Tensor softmax_axis(const Tensor& x, std::size_t axis);

/// Layer norm over the trailing axis with affine gamma/beta.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// (rows x cols) -> (cols): column sums.
Tensor sum_rows(const Tensor& x);

/// Squared coefficient of variation (population std / mean)^2 of a vector.
/// Returns 0 for vectors with fewer than two entries or zero mean.
Tensor cv_squared(const Tensor& v);

// --- shape ------------------------------------------------------------------

Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& perm);
/// Concatenate along axis 0; trailing extents must agree.
Tensor concat0(const std::vector<Tensor>& parts);
/// Slice [index] along axis 0, keeping the axis with extent 1.
Tensor select0(const Tensor& x, std::size_t index);
/// (T x D) -> (B x T x D) by repetition.
Tensor broadcast_batch(const Tensor& x, std::size_t batch);
/// Flat gather: out[i] = x.flat[indices[i]].
Tensor gather(const Tensor& x, std::span<const std::size_t> indices);

/// Replace entries whose keep-flag is false by -inf (the only op allowed to
/// emit non-finite values). Gradient passes through kept entries.
Tensor mask_neg_inf(const Tensor& x, const std::vector<bool>& keep);

/// Smooth probability that each entry of `clean + noise * stddev` stays in
/// its row's top k when only its own noise is resampled (rows x n inputs,
/// n > k). `noise` is a fixed draw. The threshold for entry i is the k-th
/// largest noisy value of the other entries; gradients flow to clean and
/// stddev, including through the threshold entry.
Tensor topk_inclusion_probability(const Tensor& clean, const Tensor& stddev, const Tensor& noise, std::size_t k);

// --- losses -----------------------------------------------------------------

/// Mean binary cross-entropy with logits against constant targets in [0,1].
Tensor bce_with_logits(const Tensor& logits, std::span<const double> targets);

/// 1 - (2 sum(p t) + 1) / (sum p + sum t + 1) with p = sigmoid(logits).
Tensor dice_loss(const Tensor& logits, std::span<const double> targets);

/// Mean cross-entropy of (rows x classes) logits against integer targets.
Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> targets);

} // namespace convlora::ops
