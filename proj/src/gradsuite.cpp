// Copyright (c) 2026, Conv-LoRA Desk Authors
// SPDX-License-Identifier: Apache-2.0
//

#include "convlora/gradsuite.hpp"

#include <algorithm>
#include <functional>
#include <map>

#include "convlora/adapters.hpp"
#include "convlora/gradcheck.hpp"
#include "convlora/ops.hpp"
#include "convlora/random.hpp"
#include "convlora/seg_model.hpp"

namespace convlora {

namespace {

Tensor normal(Shape shape, std::uint64_t seed, double stddev = 1.0) {
    Rng rng(seed);
    return randn(std::move(shape), rng, stddev);
}

} // namespace

std::vector<OpCheck> gradient_suite(std::uint64_t first_seed, std::size_t seeds) {
    std::map<std::string, OpCheck> worst;
    std::vector<std::string> order;
    for (std::uint64_t s = first_seed; s < first_seed + seeds; ++s) {
        Rng shape_rng(derive_seed(s, "gradsuite.shapes"));
        auto ext = [&](std::size_t lo, std::size_t hi) {
            return std::uniform_int_distribution<std::size_t>(lo, hi)(shape_rng);
        };
        std::uint64_t stream = 0;
        auto rnd = [&](Shape shape, double sd = 1.0) { return normal(std::move(shape), derive_seed(s, ++stream), sd); };
        // The probe is centred on the unperturbed output so that rounding in
        // the scalar reduction scales with the perturbation, not with |y|.
        auto check = [&](const std::string& name, const std::function<Tensor()>& op, std::vector<Tensor> in) {
            const Tensor ref = op().detach();
            const Tensor w = normal(ref.shape(), derive_seed(s, "gradsuite.probe"));
            const auto r = finite_diff_check([&] { return ops::sum(ops::mul(ops::sub(op(), ref), w)); }, std::move(in));
            auto [it, fresh] = worst.try_emplace(name, OpCheck{name, 0.0, 0});
            if (fresh) order.push_back(name);
            it->second.max_rel_err = std::max(it->second.max_rel_err, r.max_rel_err);
            ++it->second.seeds;
        };

        const std::size_t B = ext(1, 2), C = ext(1, 3), H = ext(2, 5), W = ext(2, 5), O = ext(1, 3);
        Tensor x = rnd({B, C, H, W}), k = rnd({O, C, 3, 3}), bias = rnd({O});
        check("conv3x3", [&] { return ops::conv3x3(x, k, bias); }, {x, k, bias});
        const double sc = 0.5 + 0.25 * static_cast<double>(ext(0, 10));
        check("interpolate_bilinear", [&] { return ops::interpolate_bilinear(x, sc); }, {x});
        check("resize_bilinear", [&] { return ops::resize_bilinear(x, H + 1, W + 2); }, {x});
        check("global_avg_pool", [&] { return ops::global_avg_pool(x); }, {x});
        Tensor wc = rnd({O, C});
        check("channel_linear", [&] { return ops::channel_linear(x, wc); }, {x, wc});

        Tensor a = rnd({H, W}), b = rnd({W, O}), a2 = rnd({H, W});
        check("matmul", [&] { return ops::matmul(a, b); }, {a, b});
        check("add", [&] { return ops::add(a, a2); }, {a, a2});
        check("sub", [&] { return ops::sub(a, a2); }, {a, a2});
        check("mul", [&] { return ops::mul(a, a2); }, {a, a2});
        check("scale", [&] { return ops::scale(a, -1.75); }, {a});
        check("sum", [&] { return ops::sum(ops::mul(a, a2)); }, {a, a2});
        check("mean", [&] { return ops::mean(ops::mul(a, a2)); }, {a, a2});
        check("reshape", [&] { return ops::reshape(a, {W, H}); }, {a});
        check("concat0", [&] { return ops::concat0({a, a2}); }, {a, a2});
        check("select0", [&] { return ops::select0(a, H - 1); }, {a});
        check("broadcast_batch", [&] { return ops::broadcast_batch(a, 3); }, {a});
        std::vector<std::size_t> idx;
        for (std::size_t i = 0; i < 2 * a.numel(); ++i) idx.push_back((i * 5 + s) % a.numel());
        check("gather", [&] { return ops::gather(a, idx); }, {a});
        Tensor row_bias = rnd({W});
        check("add_bias_last", [&] { return ops::add_bias_last(a, row_bias); }, {a, row_bias});

        Tensor ba = rnd({B, H, W}), bb = rnd({B, W, O}), bt = rnd({B, O, W});
        check("bmm", [&] { return ops::bmm(ba, bb); }, {ba, bb});
        check("bmm_nt", [&] { return ops::bmm_nt(ba, bt); }, {ba, bt});
        Tensor lw = rnd({O, W}), lb = rnd({O});
        check("linear", [&] { return ops::linear(ba, lw, lb); }, {ba, lw, lb});

        Tensor v = rnd({H, W}, 2.0);
        check("softmax", [&] { return ops::softmax_axis(v, 1); }, {v});
        check("softplus", [&] { return ops::softplus(v); }, {v});
        check("sigmoid", [&] { return ops::sigmoid(v); }, {v});
        check("gelu", [&] { return ops::gelu(v); }, {v});
        const std::size_t wn = ext(3, 6);
        Tensor vn = rnd({H, wn}, 2.0), g = rnd({wn}), be = rnd({wn});
        check("layer_norm", [&] { return ops::layer_norm(vn, g, be); }, {vn, g, be});
        check("permute", [&] { return ops::permute(x, {2, 0, 3, 1}); }, {x});
        check("sum_rows", [&] { return ops::sum_rows(v); }, {v});
        Tensor pos = rand_uniform({W}, shape_rng, 0.5, 2.0);
        check("cv_squared", [&] { return ops::cv_squared(pos); }, {pos});
        Tensor sel = rnd({3});
        check("scale_by_element", [&] { return ops::scale_by_element(x, sel, 1); }, {x, sel});
        std::vector<double> t(v.numel());
        for (std::size_t i = 0; i < t.size(); ++i) t[i] = (i * 7 + s) % 3 == 0 ? 1.0 : 0.0;
        check("bce_with_logits", [&] { return ops::bce_with_logits(v, t); }, {v});
        check("dice_loss", [&] { return ops::dice_loss(v, t); }, {v});
        std::vector<std::size_t> cls(H);
        for (std::size_t i = 0; i < H; ++i) cls[i] = (i + s) % W;
        check("cross_entropy", [&] { return ops::cross_entropy(v, cls); }, {v});

        const std::size_t n = ext(3, 6);
        Tensor clean = rnd({B, n}), sd = rand_uniform({B, n}, shape_rng, 0.5, 1.5);
        const Tensor noise = rnd({B, n});
        check("topk_inclusion_probability", [&] { return ops::topk_inclusion_probability(clean, sd, noise, 2); },
              {clean, sd});

        Tensor sl = rnd({B, 1, H + 3, W + 3});
        std::vector<double> st(sl.numel());
        for (std::size_t i = 0; i < st.size(); ++i) st[i] = (i * 3 + s) % 4 == 0 ? 1.0 : 0.0;
        check("structure_loss", [&] { return structure_loss(sl, st); }, {sl});

        // Adapter layers on a B x C x H x W map, gate noise off.
        const std::size_t r = ext(1, 3), experts = ext(2, 4);
        const std::size_t top_k = ext(1, experts - 1);
        const std::size_t ca = r + ext(1, 2);
        Tensor xa = rnd({B, ca, H, W}), w0 = rnd({ca + 1, ca});
        LoRAWeights lora{rnd({r, ca}), rnd({ca + 1, r}), r};
        std::vector<ExpertParams> ex;
        for (std::size_t e = 0; e < experts; ++e) {
            ex.push_back({static_cast<double>(e + 1), rnd({r, r, 3, 3}, 0.5), rnd({r}, 0.5)});
        }
        GateParams gate{rnd({r, experts}), rnd({r, experts}), experts, top_k, false};
        check("lora", [&] { return lora_forward(xa, w0, lora); }, {xa, lora.encoder, lora.decoder});
        std::vector<Tensor> conv_inputs{xa, lora.encoder, lora.decoder, gate.w_gate};
        for (const auto& e : ex) {
            conv_inputs.push_back(e.kernel);
            conv_inputs.push_back(e.bias);
        }
        check("conv_lora", [&] { return conv_lora_forward(xa, w0, lora, ex, gate, nullptr).output; }, conv_inputs);
        std::vector<Tensor> ms_inputs(conv_inputs);
        ms_inputs.erase(ms_inputs.begin() + 3);
        check("multi_scale", [&] { return multiscale_forward(xa, w0, lora, ex); }, ms_inputs);
        const Tensor z = rnd({B + 2, r, H, W});
        GateParams noisy = gate;
        noisy.noise_enabled = true;
        check("moe_balance_loss", [&] { return moe_balance_loss({gate_scores(z, gate, nullptr)}, 1.0); },
              {gate.w_gate});
        check("moe_load_loss", [&] {
            Rng rng(derive_seed(s, "gradsuite.noise"));
            return moe_load_loss({gate_scores(z, noisy, &rng)}, 1.0);
        }, {gate.w_gate, gate.w_noise});
    }
    std::vector<OpCheck> out;
    for (const auto& name : order) out.push_back(worst.at(name));
    return out;
}

} // namespace convlora
