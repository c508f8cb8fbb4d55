// Copyright (c) 2026, Conv-LoRA Desk Authors
// SPDX-License-Identifier: Apache-2.0
//

#include "convlora/encoder.hpp"

#include <cmath>
#include <fmt/format.h>

#include "convlora/ops.hpp"

namespace convlora {

void EncoderConfig::validate() const {
    if (patch_size == 0 || image_size == 0 || image_size % patch_size != 0) {
        throw ConfigError(fmt::format("image size {} is not divisible by patch size {}", image_size, patch_size));
    }
    if (heads == 0 || dim % heads != 0) {
        throw ConfigError(fmt::format("embed dim {} is not divisible by {} heads", dim, heads));
    }
    if (depth == 0 || mlp_ratio == 0 || in_channels == 0) throw ConfigError("encoder extents must be positive");
}

Tensor tokens_to_map(const Tensor& tokens, std::size_t grid) {
    if (tokens.rank() != 3 || tokens.dim(1) != grid * grid) {
        throw DimensionError(fmt::format("tokens {} do not fill a {}x{} grid", shape_str(tokens.shape()), grid, grid));
    }
    const std::size_t bs = tokens.dim(0), c = tokens.dim(2);
    return ops::permute(ops::reshape(tokens, {bs, grid, grid, c}), {0, 3, 1, 2});
}

Tensor map_to_tokens(const Tensor& map) {
    if (map.rank() != 4) throw DimensionError("feature map must be B x C x H x W");
    const std::size_t bs = map.dim(0), c = map.dim(1), l = map.dim(2) * map.dim(3);
    return ops::reshape(ops::permute(map, {0, 2, 3, 1}), {bs, l, c});
}

Tensor project_tokens(const AdaptedProjection& p, const Tensor& tokens, std::size_t grid, const ForwardContext& ctx) {
    const Tensor base = ops::linear(tokens, p.w0);
    const AdapterBundle& a = p.adapter;
    switch (a.variant) {
    case AdapterVariant::none: return base;
    case AdapterVariant::lora:
        return ops::add(base, ops::linear(ops::linear(tokens, a.lora.encoder), a.lora.decoder));
    case AdapterVariant::conv_lora: {
        const Tensor z = tokens_to_map(ops::linear(tokens, a.lora.encoder), grid);
        GateParams gate = a.gate;
        gate.noise_enabled = a.gate.noise_enabled && ctx.training;
        ConvLoRAOutput mix = moe_bottleneck(z, a.experts, gate, ctx.rng, ctx.counter);
        if (ctx.decisions) ctx.decisions->push_back(std::move(mix.decision));
        return ops::add(base, ops::linear(map_to_tokens(mix.output), a.lora.decoder));
    }
    case AdapterVariant::multi_scale: {
        const Tensor z = tokens_to_map(ops::linear(tokens, a.lora.encoder), grid);
        const Tensor y = multiscale_bottleneck(z, a.experts, ctx.counter);
        return ops::add(base, ops::linear(map_to_tokens(y), a.lora.decoder));
    }
    }
    return base;
}

Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads, Tensor* weights) {
    if (q.rank() != 3 || k.rank() != 3 || v.shape() != k.shape() || q.dim(0) != k.dim(0) || q.dim(2) != k.dim(2)) {
        throw DimensionError(fmt::format("attention inputs {} / {} / {}", shape_str(q.shape()), shape_str(k.shape()),
                                         shape_str(v.shape())));
    }
    const std::size_t bs = q.dim(0), lq = q.dim(1), lk = k.dim(1), d = q.dim(2);
    if (heads == 0 || d % heads != 0) throw ConfigError(fmt::format("{} heads for width {}", heads, d));
    const std::size_t dh = d / heads;
    auto split = [&](const Tensor& t, std::size_t len) {
        return ops::reshape(ops::permute(ops::reshape(t, {bs, len, heads, dh}), {0, 2, 1, 3}), {bs * heads, len, dh});
    };
    const Tensor scores = ops::scale(ops::bmm_nt(split(q, lq), split(k, lk)), 1.0 / std::sqrt(static_cast<double>(dh)));
    const Tensor attn = ops::softmax_axis(scores, 2);
    if (weights) *weights = ops::reshape(attn.detach(), {bs, heads, lq, lk});
    const Tensor mixed = ops::bmm(attn, split(v, lk));
    return ops::reshape(ops::permute(ops::reshape(mixed, {bs, heads, lq, dh}), {0, 2, 1, 3}), {bs, lq, d});
}

VitEncoder::VitEncoder(EncoderConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    const std::size_t d = cfg_.dim, hidden = d * cfg_.mlp_ratio;
    const std::size_t patch_in = cfg_.in_channels * cfg_.patch_size * cfg_.patch_size;
    Rng rng(derive_seed(seed, "encoder.base"));
    auto dense = [&](std::size_t out, std::size_t in) {
        return randn({out, in}, rng, 1.0 / std::sqrt(static_cast<double>(in)));
    };
    patch_weight_ = dense(d, patch_in);
    patch_bias_ = Tensor::zeros({d});
    pos_ = randn({cfg_.tokens(), d}, rng, 0.1);

    AdapterConfig acfg;
    acfg.c_in = d;
    acfg.c_out = d;
    acfg.rank = cfg_.rank;
    acfg.experts = cfg_.experts;
    acfg.top_k = cfg_.top_k;
    acfg.scales = cfg_.scales;
    acfg.noise = cfg_.gate_noise;
    for (std::size_t i = 0; i < cfg_.depth; ++i) {
        Block b;
        b.norm1_gamma = Tensor::full({d}, 1.0);
        b.norm1_beta = Tensor::zeros({d});
        AdaptedProjection* projections[] = {&b.q, &b.k, &b.v};
        for (std::size_t j = 0; j < 3; ++j) {
            projections[j]->w0 = dense(d, d);
            const std::uint64_t adapter_seed = derive_seed(seed, fmt::format("encoder.block{}.adapter{}", i, j));
            projections[j]->adapter = init_adapter(acfg, cfg_.variant, adapter_seed);
        }
        b.out_weight = dense(d, d);
        b.out_bias = Tensor::zeros({d});
        b.norm2_gamma = Tensor::full({d}, 1.0);
        b.norm2_beta = Tensor::zeros({d});
        b.fc1_weight = dense(hidden, d);
        b.fc1_bias = Tensor::zeros({hidden});
        b.fc2_weight = dense(d, hidden);
        b.fc2_bias = Tensor::zeros({d});
        blocks_.push_back(std::move(b));
    }
    norm_gamma_ = Tensor::full({d}, 1.0);
    norm_beta_ = Tensor::zeros({d});
}

EncoderOutput VitEncoder::forward(const Tensor& images, const ForwardContext& ctx) const {
    const std::size_t s = cfg_.image_size, p = cfg_.patch_size, g = cfg_.grid(), c = cfg_.in_channels;
    if (images.rank() != 4 || images.dim(1) != c || images.dim(2) != s || images.dim(3) != s) {
        throw ConfigError(fmt::format("encoder expects B x {} x {} x {} images, got {}", c, s, s,
                                      shape_str(images.shape())));
    }
    const std::size_t bs = images.dim(0);
    const Tensor patches = ops::reshape(ops::permute(ops::reshape(images, {bs, c, g, p, g, p}), {0, 2, 4, 1, 3, 5}),
                                        {bs, g * g, c * p * p});
    Tensor x = ops::add(ops::linear(patches, patch_weight_, patch_bias_), ops::broadcast_batch(pos_, bs));

    EncoderOutput out;
    for (const Block& b : blocks_) {
        const Tensor h = ops::layer_norm(x, b.norm1_gamma, b.norm1_beta);
        const Tensor q = project_tokens(b.q, h, g, ctx);
        const Tensor k = project_tokens(b.k, h, g, ctx);
        const Tensor v = project_tokens(b.v, h, g, ctx);
        Tensor weights;
        const Tensor attn = multi_head_attention(q, k, v, cfg_.heads, ctx.keep_attention ? &weights : nullptr);
        if (ctx.keep_attention) out.attention.push_back(weights);
        x = ops::add(x, ops::linear(attn, b.out_weight, b.out_bias));
        const Tensor m = ops::layer_norm(x, b.norm2_gamma, b.norm2_beta);
        x = ops::add(x, ops::linear(ops::gelu(ops::linear(m, b.fc1_weight, b.fc1_bias)), b.fc2_weight, b.fc2_bias));
        if (ctx.keep_block_features) out.block_features.push_back(tokens_to_map(x.detach(), g));
    }
    out.features = tokens_to_map(ops::layer_norm(x, norm_gamma_, norm_beta_), g);
    return out;
}

void VitEncoder::collect_parameters(ParameterMap& out, const std::string& prefix) const {
    out[prefix + "patch.weight"] = patch_weight_;
    out[prefix + "patch.bias"] = patch_bias_;
    out[prefix + "pos"] = pos_;
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
        const Block& b = blocks_[i];
        const std::string bp = fmt::format("{}block{}.", prefix, i);
        out[bp + "norm1.gamma"] = b.norm1_gamma;
        out[bp + "norm1.beta"] = b.norm1_beta;
        const std::pair<const char*, const AdaptedProjection*> projections[] = {{"q", &b.q}, {"k", &b.k}, {"v", &b.v}};
        for (const auto& [name, proj] : projections) {
            const std::string pp = fmt::format("{}attn.{}.", bp, name);
            out[pp + "weight"] = proj->w0;
            for (const auto& [suffix, t] : proj->adapter.parameters()) out[pp + "adapter." + suffix] = t;
        }
        out[bp + "attn.out.weight"] = b.out_weight;
        out[bp + "attn.out.bias"] = b.out_bias;
        out[bp + "norm2.gamma"] = b.norm2_gamma;
        out[bp + "norm2.beta"] = b.norm2_beta;
        out[bp + "mlp.fc1.weight"] = b.fc1_weight;
        out[bp + "mlp.fc1.bias"] = b.fc1_bias;
        out[bp + "mlp.fc2.weight"] = b.fc2_weight;
        out[bp + "mlp.fc2.bias"] = b.fc2_bias;
    }
    out[prefix + "norm.gamma"] = norm_gamma_;
    out[prefix + "norm.beta"] = norm_beta_;
}

} // namespace convlora
