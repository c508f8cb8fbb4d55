// Copyright (c) 2026, Conv-LoRA Desk Authors
// SPDX-License-Identifier: Apache-2.0
//

#include "convlora/adapters.hpp"

#include <algorithm>
#include <cmath>
#include <fmt/format.h>
#include <numeric>

#include "convlora/ops.hpp"

namespace convlora {

std::string to_string(AdapterVariant v) {
    switch (v) {
    case AdapterVariant::none: return "none";
    case AdapterVariant::lora: return "lora";
    case AdapterVariant::conv_lora: return "conv-lora";
    case AdapterVariant::multi_scale: return "multi-scale";
    }
    return "unknown";
}

AdapterVariant adapter_variant_from_string(const std::string& name) {
    if (name == "none") return AdapterVariant::none;
    if (name == "lora") return AdapterVariant::lora;
    if (name == "conv-lora") return AdapterVariant::conv_lora;
    if (name == "multi-scale") return AdapterVariant::multi_scale;
    throw ConfigError(fmt::format("unknown adapter variant '{}'", name));
}

namespace {

void check_rank(std::size_t rank, std::size_t c_in, std::size_t c_out) {
    if (rank == 0 || rank >= std::min(c_in, c_out)) {
        throw ConfigError(fmt::format("adapter rank {} must satisfy 0 < r < min({}, {})", rank, c_in, c_out));
    }
}

void check_lora(const Tensor& x, const Tensor& w0, const LoRAWeights& lw) {
    if (x.rank() != 4) throw DimensionError("adapter input must be B x C x H x W");
    const std::size_t c_in = w0.dim(1), c_out = w0.dim(0);
    check_rank(lw.rank, c_in, c_out);
    if (lw.encoder.shape() != Shape{lw.rank, c_in} || lw.decoder.shape() != Shape{c_out, lw.rank}) {
        throw DimensionError(fmt::format("LoRA weights {} / {} do not match W0 {} at rank {}",
                                         shape_str(lw.encoder.shape()), shape_str(lw.decoder.shape()),
                                         shape_str(w0.shape()), lw.rank));
    }
}

// Row-wise KeepTopK mask, ties resolved toward the lower index.
std::vector<bool> top_k_mask(std::span<const double> scores, std::size_t rows, std::size_t n, std::size_t k,
                             std::vector<std::vector<std::size_t>>& active) {
    std::vector<bool> keep(rows * n, false);
    active.assign(rows, {});
    std::vector<std::size_t> order(n);
    for (std::size_t r = 0; r < rows; ++r) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::stable_sort(order.begin(), order.end(),
                         [&](std::size_t a, std::size_t b) { return scores[r * n + a] > scores[r * n + b]; });
        for (std::size_t p = 0; p < k; ++p) keep[r * n + order[p]] = true;
        for (std::size_t i = 0; i < n; ++i)
            if (keep[r * n + i]) active[r].push_back(i);
    }
    return keep;
}

} // namespace

std::vector<std::pair<std::string, Tensor>> AdapterBundle::parameters() const {
    std::vector<std::pair<std::string, Tensor>> out;
    if (variant == AdapterVariant::none) return out;
    out.emplace_back("lora_e", lora.encoder);
    out.emplace_back("lora_d", lora.decoder);
    if (variant == AdapterVariant::lora) return out;
    for (std::size_t i = 0; i < experts.size(); ++i) {
        out.emplace_back(fmt::format("expert{}.kernel", i), experts[i].kernel);
        out.emplace_back(fmt::format("expert{}.bias", i), experts[i].bias);
    }
    if (variant == AdapterVariant::conv_lora) {
        out.emplace_back("gate.w_gate", gate.w_gate);
        out.emplace_back("gate.w_noise", gate.w_noise);
    }
    return out;
}

std::size_t AdapterBundle::parameter_count() const {
    std::size_t total = 0;
    for (const auto& [name, t] : parameters()) total += t.numel();
    return total;
}

std::size_t adapter_parameter_count(AdapterVariant variant, std::size_t c_in, std::size_t c_out, std::size_t rank,
                                    std::size_t experts) {
    const std::size_t lora = rank * (c_in + c_out);
    const std::size_t conv = experts * (9 * rank * rank + rank);
    switch (variant) {
    case AdapterVariant::none: return 0;
    case AdapterVariant::lora: return lora;
    case AdapterVariant::multi_scale: return lora + conv;
    case AdapterVariant::conv_lora: return lora + conv + 2 * rank * experts;
    }
    return 0;
}

AdapterBundle init_adapter(const AdapterConfig& cfg, AdapterVariant variant, std::uint64_t seed) {
    check_rank(cfg.rank, cfg.c_in, cfg.c_out);
    AdapterBundle a;
    a.variant = variant;
    if (variant == AdapterVariant::none) return a;
    Rng rng(seed);
    const std::size_t r = cfg.rank;
    a.lora.rank = r;
    a.lora.encoder = randn({r, cfg.c_in}, rng, 1.0 / std::sqrt(static_cast<double>(cfg.c_in)));
    a.lora.decoder = Tensor::zeros({cfg.c_out, r});
    if (variant == AdapterVariant::lora) return a;

    if (cfg.experts == 0) throw ConfigError("Conv-LoRA needs at least one expert");
    if (cfg.top_k == 0 || cfg.top_k > cfg.experts) {
        throw ConfigError(fmt::format("top-k {} must lie in [1, {}]", cfg.top_k, cfg.experts));
    }
    std::vector<double> scales = cfg.scales;
    if (scales.empty()) {
        for (std::size_t i = 0; i < cfg.experts; ++i) scales.push_back(static_cast<double>(i + 1));
    }
    if (scales.size() != cfg.experts) {
        throw ConfigError(fmt::format("{} expert scales for {} experts", scales.size(), cfg.experts));
    }
    const double kstd = 0.1 / (3.0 * std::sqrt(static_cast<double>(r)));
    for (double s : scales) {
        if (!(s > 0.0)) throw ConfigError(fmt::format("expert scale must be positive, got {}", s));
        // Delta kernel plus noise: each expert starts close to the identity map.
        Tensor kernel = randn({r, r, 3, 3}, rng, kstd);
        auto kd = kernel.mutable_data();
        for (std::size_t c = 0; c < r; ++c) kd[(c * r + c) * 9 + 4] += 1.0;
        a.experts.push_back({s, kernel, Tensor::zeros({r})});
    }
    a.gate.w_gate = Tensor::zeros({r, cfg.experts});
    a.gate.w_noise = Tensor::zeros({r, cfg.experts});
    a.gate.experts = cfg.experts;
    a.gate.top_k = variant == AdapterVariant::conv_lora ? cfg.top_k : cfg.experts;
    a.gate.noise_enabled = cfg.noise;
    return a;
}

Tensor lora_forward(const Tensor& x, const Tensor& w0, const LoRAWeights& lw) {
    check_lora(x, w0, lw);
    const Tensor base = ops::channel_linear(x, w0);
    const Tensor low = ops::channel_linear(ops::channel_linear(x, lw.encoder), lw.decoder);
    return ops::add(base, low);
}

Tensor expert_forward(const Tensor& z, const ExpertParams& e) {
    if (z.rank() != 4) throw DimensionError("expert input must be B x r x H x W");
    const Tensor up = ops::interpolate_bilinear(z, e.scale);
    const Tensor conv = ops::conv3x3(up, e.kernel, e.bias);
    return ops::resize_bilinear(conv, z.dim(2), z.dim(3));
}

GateDecision gate_scores(const Tensor& z, const GateParams& g, Rng* rng) {
    if (g.top_k == 0 || g.top_k > g.experts) {
        throw ConfigError(fmt::format("top-k {} must lie in [1, {}]", g.top_k, g.experts));
    }
    if (g.w_gate.shape() != Shape{z.dim(1), g.experts}) {
        throw DimensionError(fmt::format("gate weight {} for bottleneck {}", shape_str(g.w_gate.shape()),
                                         shape_str(z.shape())));
    }
    if (g.noise_enabled && rng == nullptr) throw ArgumentError("noisy gating requires a random stream");

    const std::size_t bs = z.dim(0), n = g.experts;
    const Tensor pooled = ops::global_avg_pool(z); // B x r
    const Tensor clean = ops::matmul(pooled, g.w_gate);
    GateDecision d;
    d.top_k = g.top_k;
    if (g.noise_enabled) {
        const Tensor stddev = ops::softplus(ops::matmul(pooled, g.w_noise));
        const Tensor noise = randn({bs, n}, *rng);
        d.scores = ops::add(clean, ops::mul(noise, stddev));
        if (n > g.top_k) d.load = ops::topk_inclusion_probability(clean, stddev, noise, g.top_k);
    } else {
        d.scores = clean;
    }
    const std::vector<bool> keep = top_k_mask(d.scores.data(), bs, n, g.top_k, d.active);
    d.gates = ops::softmax_axis(ops::mask_neg_inf(d.scores, keep), 1);
    return d;
}

ConvLoRAOutput moe_bottleneck(const Tensor& z, const std::vector<ExpertParams>& experts, const GateParams& g,
                              Rng* rng, ExpertCounter* counter) {
    if (experts.empty()) throw ConfigError("Conv-LoRA needs at least one expert");
    if (experts.size() != g.experts) {
        throw ConfigError(fmt::format("{} experts but gate over {}", experts.size(), g.experts));
    }
    ConvLoRAOutput out;
    out.decision = gate_scores(z, g, rng);
    const std::size_t bs = z.dim(0), n = g.experts;
    std::vector<Tensor> per_sample;
    per_sample.reserve(bs);
    for (std::size_t b = 0; b < bs; ++b) {
        const Tensor zb = bs == 1 ? z : ops::select0(z, b);
        Tensor acc;
        // Experts with zero gate are skipped entirely.
        for (std::size_t i : out.decision.active[b]) {
            const Tensor term = ops::scale_by_element(expert_forward(zb, experts[i]), out.decision.gates, b * n + i);
            if (counter) ++counter->evaluations;
            acc = acc.defined() ? ops::add(acc, term) : term;
        }
        per_sample.push_back(acc);
    }
    out.output = bs == 1 ? per_sample.front() : ops::concat0(per_sample);
    return out;
}

Tensor multiscale_bottleneck(const Tensor& z, const std::vector<ExpertParams>& experts, ExpertCounter* counter) {
    if (experts.empty()) throw ConfigError("multi-scale adapter needs at least one expert");
    Tensor acc;
    for (const auto& e : experts) {
        const Tensor y = expert_forward(z, e);
        if (counter) counter->evaluations += z.dim(0);
        acc = acc.defined() ? ops::add(acc, y) : y;
    }
    return experts.size() == 1 ? acc : ops::scale(acc, 1.0 / static_cast<double>(experts.size()));
}

ConvLoRAOutput conv_lora_forward(const Tensor& x, const Tensor& w0, const LoRAWeights& lw,
                                 const std::vector<ExpertParams>& experts, const GateParams& g, Rng* rng,
                                 ExpertCounter* counter) {
    check_lora(x, w0, lw);
    if (experts.empty()) throw ConfigError("Conv-LoRA needs at least one expert");
    const Tensor base = ops::channel_linear(x, w0);
    const Tensor z = ops::channel_linear(x, lw.encoder);
    ConvLoRAOutput mix = moe_bottleneck(z, experts, g, rng, counter);
    mix.output = ops::add(base, ops::channel_linear(mix.output, lw.decoder));
    return mix;
}

Tensor multiscale_forward(const Tensor& x, const Tensor& w0, const LoRAWeights& lw,
                          const std::vector<ExpertParams>& experts, ExpertCounter* counter) {
    check_lora(x, w0, lw);
    const Tensor base = ops::channel_linear(x, w0);
    const Tensor z = ops::channel_linear(x, lw.encoder);
    return ops::add(base, ops::channel_linear(multiscale_bottleneck(z, experts, counter), lw.decoder));
}

namespace {
Tensor summed_cv2(const std::vector<GateDecision>& decisions, double weight, bool use_load) {
    Tensor total;
    for (const auto& d : decisions) {
        const Tensor& src = use_load ? d.load : d.gates;
        if (!src.defined()) continue;
        const Tensor per_expert = ops::sum_rows(src);
        if (total.defined() && total.numel() != per_expert.numel()) {
            throw DimensionError("balance loss over decisions with different expert counts");
        }
        total = total.defined() ? ops::add(total, per_expert) : per_expert;
    }
    if (!total.defined()) return Tensor::scalar(0.0);
    return ops::scale(ops::cv_squared(total), weight);
}
} // namespace

Tensor moe_balance_loss(const std::vector<GateDecision>& decisions, double weight) {
    return summed_cv2(decisions, weight, false);
}

Tensor moe_load_loss(const std::vector<GateDecision>& decisions, double weight) {
    return summed_cv2(decisions, weight, true);
}

} // namespace convlora
