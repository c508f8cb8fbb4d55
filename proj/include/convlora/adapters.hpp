// Copyright (c) 2026, Conv-LoRA Desk Authors
// SPDX-License-Identifier: Apache-2.0
//
// Low-rank adapters. A LoRA adapter adds W_d W_e x beside a frozen W0. A
// Conv-LoRA adapter routes the rank-r bottleneck W_e x through a sparse
// mixture of scale-specialised convolutional experts,
//
//   h = W0 x + W_d sum_i G(W_e x)_i E_i(W_e x),
//   E_i(z) = resize(conv3x3(interpolate(z, s_i)), back to z's extents),
//
// where G is a noisy top-k gate over the spatially pooled bottleneck.

#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "convlora/random.hpp"
#include "convlora/tensor.hpp"

namespace convlora {

enum class AdapterVariant { none, lora, conv_lora, multi_scale };

std::string to_string(AdapterVariant v);
AdapterVariant adapter_variant_from_string(const std::string& name);

struct LoRAWeights {
    Tensor encoder; // W_e: r x C_in
    Tensor decoder; // W_d: C_out x r
    std::size_t rank = 0;
};

struct ExpertParams {
    double scale = 1.0;
    Tensor kernel; // r x r x 3 x 3
    Tensor bias;   // r
};

struct GateParams {
    Tensor w_gate;  // r x n
    Tensor w_noise; // r x n
    std::size_t experts = 0;
    std::size_t top_k = 1;
    bool noise_enabled = false;
};

/// Per-sample routing of one adapter call.
struct GateDecision {
    Tensor gates;  // B x n, rows sum to 1, exactly k nonzeros
    Tensor scores; // B x n raw scores H before KeepTopK
    std::vector<std::vector<std::size_t>> active; // per sample, ascending
    // B x n smooth top-k inclusion probabilities; only for noisy gating with n > k.
    Tensor load;
    std::size_t top_k = 1;
};

/// Counts expert transforms evaluated (one per sample per expert call).
struct ExpertCounter {
    std::size_t evaluations = 0;
};

struct AdapterConfig {
    std::size_t c_in = 0;
    std::size_t c_out = 0;
    std::size_t rank = 3;
    std::size_t experts = 8;
    std::size_t top_k = 1;
    std::vector<double> scales; // empty: 1, 2, ..., experts
    bool noise = true;
};

/// Trainable state of one adapted projection.
struct AdapterBundle {
    AdapterVariant variant = AdapterVariant::conv_lora;
    LoRAWeights lora;
    std::vector<ExpertParams> experts;
    GateParams gate;

    /// (name suffix, tensor) pairs of every trainable array, in fixed order.
    std::vector<std::pair<std::string, Tensor>> parameters() const;
    std::size_t parameter_count() const;
};

struct ConvLoRAOutput {
    Tensor output;
    GateDecision decision;
};

/// W_e Gaussian (std 1/sqrt(C_in)), W_d zero, expert kernels a centre delta
/// plus Gaussian noise (std 0.1/(3 sqrt(r))), expert biases zero, W_g and
/// W_noise zero.
AdapterBundle init_adapter(const AdapterConfig& cfg, AdapterVariant variant, std::uint64_t seed);

/// Trainable-array count of an adapter with the given shape, by formula.
std::size_t adapter_parameter_count(AdapterVariant variant, std::size_t c_in, std::size_t c_out, std::size_t rank,
                                    std::size_t experts);

// Map-layout forward passes; x is B x C_in x H x W, W0 is C_out x C_in.
Tensor lora_forward(const Tensor& x, const Tensor& w0, const LoRAWeights& lw);
Tensor expert_forward(const Tensor& z, const ExpertParams& e);
/// Noisy top-k gate. When g.noise_enabled, rng must be non-null.
GateDecision gate_scores(const Tensor& z, const GateParams& g, Rng* rng);
ConvLoRAOutput conv_lora_forward(const Tensor& x, const Tensor& w0, const LoRAWeights& lw,
                                 const std::vector<ExpertParams>& experts, const GateParams& g, Rng* rng,
                                 ExpertCounter* counter = nullptr);
Tensor multiscale_forward(const Tensor& x, const Tensor& w0, const LoRAWeights& lw,
                          const std::vector<ExpertParams>& experts, ExpertCounter* counter = nullptr);

// Bottleneck-level mixtures shared by the map- and token-layout adapters.
ConvLoRAOutput moe_bottleneck(const Tensor& z, const std::vector<ExpertParams>& experts, const GateParams& g,
                              Rng* rng, ExpertCounter* counter = nullptr);
Tensor multiscale_bottleneck(const Tensor& z, const std::vector<ExpertParams>& experts,
                             ExpertCounter* counter = nullptr);

/// weight * CV^2 of per-expert importance (gate mass summed over samples and
/// decisions). Zero for an empty list.
Tensor moe_balance_loss(const std::vector<GateDecision>& decisions, double weight);

/// weight * CV^2 of per-expert load (smooth top-k inclusion probability summed
/// over samples and decisions). Decisions without a load estimate are skipped.
Tensor moe_load_loss(const std::vector<GateDecision>& decisions, double weight);

} // namespace convlora
