// Copyright (c) 2026, Conv-LoRA Desk Authors
// SPDX-License-Identifier: Apache-2.0
//
// Miniature plain ViT (pre-norm blocks, GELU MLP, learned positions, no class
// token) whose q, k and v projections can each carry an adapter.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "convlora/adapters.hpp"
#include "convlora/parameters.hpp"
#include "convlora/random.hpp"
#include "convlora/tensor.hpp"

namespace convlora {

struct EncoderConfig {
    std::size_t image_size = 64;
    std::size_t patch_size = 8;
    std::size_t in_channels = 3;
    std::size_t dim = 32;
    std::size_t depth = 4;
    std::size_t heads = 4;
    std::size_t mlp_ratio = 2;

    AdapterVariant variant = AdapterVariant::none;
    std::size_t rank = 3;
    std::size_t experts = 8;
    std::size_t top_k = 1;
    std::vector<double> scales; // empty: 1, 2, ..., experts
    bool gate_noise = true;

    /// Raises ConfigError on inconsistent extents.
    void validate() const;
    std::size_t grid() const { return image_size / patch_size; }
    std::size_t tokens() const { return grid() * grid(); }
};

/// Runtime switches and sinks shared by one forward pass.
struct ForwardContext {
    bool training = false; // enables gate noise
    Rng* rng = nullptr;
    std::vector<GateDecision>* decisions = nullptr; // one entry per Conv-LoRA projection call
    ExpertCounter* counter = nullptr;
    bool keep_attention = false;
    bool keep_block_features = false;
};

struct EncoderOutput {
    Tensor features;                  // B x d x G x G
    std::vector<Tensor> attention;    // per block, B x heads x L x L (detached)
    std::vector<Tensor> block_features; // per block, B x d x G x G (detached)
};

/// A frozen base weight W0 (C_out x C_in) with an optional adapter.
struct AdaptedProjection {
    Tensor w0;
    AdapterBundle adapter;
};

/// Applies W0 and the adapter to a B x L x C token sequence laid out on a
/// square grid of side `grid`. Conv-LoRA and multi-scale adapters run their
/// bottleneck on the B x r x grid x grid map.
Tensor project_tokens(const AdaptedProjection& p, const Tensor& tokens, std::size_t grid, const ForwardContext& ctx);

/// B x L x C <-> B x C x G x G with L = G * G in row-major grid order.
Tensor tokens_to_map(const Tensor& tokens, std::size_t grid);
Tensor map_to_tokens(const Tensor& map);

/// Multi-head scaled dot-product attention over already-projected inputs
/// (B x Lq x D queries, B x Lk x D keys/values). When `weights` is non-null
/// it receives a detached B x heads x Lq x Lk copy of the attention map.
Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                            Tensor* weights = nullptr);

class VitEncoder {
public:
    /// Base weights depend only on the seed, so encoders that differ only in
    /// adapter variant share identical frozen weights.
    VitEncoder(EncoderConfig cfg, std::uint64_t seed);

    const EncoderConfig& config() const noexcept { return cfg_; }

    /// images: B x in_channels x S x S.
    EncoderOutput forward(const Tensor& images, const ForwardContext& ctx) const;

    /// Adds every parameter under `prefix` (default "encoder.").
    void collect_parameters(ParameterMap& out, const std::string& prefix = "encoder.") const;

private:
    struct Block {
        Tensor norm1_gamma, norm1_beta;
        AdaptedProjection q, k, v;
        Tensor out_weight, out_bias;
        Tensor norm2_gamma, norm2_beta;
        Tensor fc1_weight, fc1_bias, fc2_weight, fc2_bias;
    };

    EncoderConfig cfg_;
    Tensor patch_weight_, patch_bias_, pos_;
    std::vector<Block> blocks_;
    Tensor norm_gamma_, norm_beta_;
};

} // namespace convlora
