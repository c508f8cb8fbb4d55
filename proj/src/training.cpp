// Copyright (c) 2026, Conv-LoRA Desk Authors
// SPDX-License-Identifier: Apache-2.0
//

#include "convlora/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fmt/format.h>
#include <fstream>
#include <numeric>

#include "convlora/ops.hpp"

namespace convlora {

SegModel build_model(const RunConfig& cfg) {
    SegModel model(cfg.encoder_config(), cfg.decoder_config(), cfg.seed);
    if (!cfg.base.empty()) load_base_weights(cfg.base, model.parameters());
    return model;
}

std::size_t load_base_weights(const std::filesystem::path& path, const ParameterMap& params) {
    const ParameterMap stored = read_checkpoint(path);
    std::size_t copied = 0;
    for (const auto& [name, t] : params) {
        if (name.find(kAdapterInfix) != std::string::npos) continue;
        const auto it = stored.find(name);
        const bool decoder = name.rfind(kDecoderPrefix, 0) == 0;
        if (it == stored.end() || it->second.shape() != t.shape()) {
            if (decoder) continue;
            throw CheckpointError(fmt::format("{}: pretrained weights lack a matching '{}' ({})", path.string(), name,
                                              shape_str(t.shape())));
        }
        auto src = it->second.data();
        std::copy(src.begin(), src.end(), t.mutable_data().begin());
        ++copied;
    }
    return copied;
}

Batch make_batch(const Dataset& d, std::span<const std::size_t> items, const std::vector<bool>& flip) {
    const std::size_t s = d.image_size, hw = s * s, bs = items.size();
    std::vector<double> img(bs * 3 * hw);
    Batch b;
    b.masks.resize(bs * hw);
    if (!d.labels.empty()) b.labels.resize(bs * hw);
    for (std::size_t i = 0; i < bs; ++i) {
        const std::size_t src = items[i];
        const bool f = !flip.empty() && flip[i];
        for (std::size_t y = 0; y < s; ++y)
            for (std::size_t x = 0; x < s; ++x) {
                const std::size_t from = y * s + (f ? s - 1 - x : x), to = y * s + x;
                for (std::size_t c = 0; c < 3; ++c) img[(i * 3 + c) * hw + to] = d.images[(src * 3 + c) * hw + from];
                b.masks[i * hw + to] = d.masks[src * hw + from];
                if (!d.labels.empty()) b.labels[i * hw + to] = d.labels[src * hw + from];
            }
    }
    b.images = Tensor::from({bs, 3, s, s}, std::move(img));
    return b;
}

std::string primary_metric(const Dataset& d) { return d.num_classes > 0 ? "miou" : "iou"; }

Metrics evaluate_model(const SegModel& model, const Dataset& data, std::size_t batch, std::vector<GateDecision>* gates,
                       ExpertCounter* counter) {
    MetricAccumulator acc;
    const std::size_t hw = data.pixels();
    for (std::size_t start = 0; start < data.size; start += batch) {
        const std::size_t n = std::min(batch, data.size - start);
        std::vector<std::size_t> items(n);
        std::iota(items.begin(), items.end(), start);
        const Batch b = make_batch(data, items, {});
        ForwardContext ctx;
        ctx.decisions = gates;
        ctx.counter = counter;
        const MaskDecoderOutput out = model.forward(b.images, ctx);
        if (data.num_classes > 0) {
            const auto pred = semantic_inference(out);
            acc.add_labels(pred, b.labels, data.num_classes);
        } else {
            std::vector<double> prob(hw);
            auto logits = out.mask_logits.data();
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t p = 0; p < hw; ++p) prob[p] = ops::sigmoid_value(logits[i * hw + p]);
                acc.add_binary(prob, std::span<const double>(b.masks).subspan(i * hw, hw));
            }
        }
    }
    return acc.result();
}

namespace {

std::vector<std::vector<double>> snapshot(const ParameterMap& params) {
    std::vector<std::vector<double>> out;
    out.reserve(params.size());
    for (const auto& [name, t] : params) out.emplace_back(t.data().begin(), t.data().end());
    return out;
}

void restore(const ParameterMap& params, const std::vector<std::vector<double>>& values) {
    std::size_t i = 0;
    for (const auto& [name, t] : params) {
        std::copy(values[i].begin(), values[i].end(), t.mutable_data().begin());
        ++i;
    }
}

Tensor step_loss(const RunConfig& cfg, const Dataset& data, const MaskDecoderOutput& out, const Batch& b,
                 const std::vector<GateDecision>& decisions, Rng& point_rng) {
    Tensor moe;
    if (!decisions.empty() && cfg.loss.moe > 0.0) {
        moe = ops::add(moe_balance_loss(decisions, 1.0), moe_load_loss(decisions, 1.0));
    }
    if (data.num_classes == 0) {
        Tensor loss = structure_loss(out.mask_logits, b.masks);
        if (moe.defined()) loss = ops::add(loss, ops::scale(moe, cfg.loss.moe));
        return loss;
    }
    const std::size_t hw = data.pixels(), bs = out.mask_logits.dim(0), slots = out.mask_logits.dim(1);
    std::vector<std::size_t> points(hw);
    std::iota(points.begin(), points.end(), 0);
    if (cfg.points > 0 && cfg.points < hw) {
        for (std::size_t i = 0; i < cfg.points; ++i) {
            std::uniform_int_distribution<std::size_t> pick(i, hw - 1);
            std::swap(points[i], points[pick(point_rng)]);
        }
        points.resize(cfg.points);
        std::sort(points.begin(), points.end());
    }
    std::vector<std::vector<GtSegment>> gt(bs);
    std::vector<Matching> matchings(bs);
    for (std::size_t i = 0; i < bs; ++i) {
        gt[i] = segments_from_labels(std::span<const std::size_t>(b.labels).subspan(i * hw, hw), data.num_classes);
        const auto cost = match_cost(out, i, gt[i], points, cfg.loss);
        matchings[i] = hungarian_match(cost, slots, gt[i].size());
    }
    return multiclass_loss(out, gt, matchings, points, cfg.loss, moe);
}

void write_rows(std::ostream& os, const std::string& run, std::size_t epoch, const std::string& split,
                const Metrics& m) {
    for (const auto& [name, value] : m) write_metric_row(os, {run, epoch, split, name, value});
}

} // namespace

RunResult train(const RunConfig& cfg) {
    cfg.validate();
    const Dataset train_set = gen_synthetic(cfg.data, cfg.seed, Split::train);
    const Dataset val_set = gen_synthetic(cfg.data, cfg.seed, Split::val);
    const Dataset test_set = gen_synthetic(cfg.data, cfg.seed, Split::test);

    const SegModel model = build_model(cfg);
    const ParameterMap params = model.parameters();
    const FreezeMask mask = apply_freeze(params, freeze_policy_of(cfg.variant));
    Adam adam(params, mask, cfg.adam);

    RunResult result;
    result.params = count_params(params, mask);
    result.frozen_checksum_before = parameter_checksum(params, mask, false);
    result.trainable_checksum_before = parameter_checksum(params, mask, true);
    const auto initial = snapshot(params);
    auto best = initial;

    std::ofstream metrics_csv;
    if (!cfg.out.empty()) {
        std::filesystem::create_directories(cfg.out);
        std::ofstream(cfg.out / "config.txt") << config_to_text(cfg);
        metrics_csv.open(cfg.out / "metrics.csv");
        if (!metrics_csv) throw ConfigError(fmt::format("cannot write to {}", cfg.out.string()));
        write_metrics_header(metrics_csv);
    }

    Rng shuffle_rng(derive_seed(cfg.seed, "train.shuffle"));
    Rng augment_rng(derive_seed(cfg.seed, "train.augment"));
    Rng gate_rng(derive_seed(cfg.seed, "train.gate"));
    Rng point_rng(derive_seed(cfg.seed, "train.points"));
    std::bernoulli_distribution coin(0.5);
    ExpertCounter counter;
    const std::string key = primary_metric(train_set);
    double best_score = -1.0;
    bool stop = false;

    for (std::size_t epoch = 1; epoch <= cfg.epochs && !stop; ++epoch) {
        std::vector<std::size_t> order(train_set.size);
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        double loss_sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            if (cfg.max_steps > 0 && result.steps >= cfg.max_steps) {
                stop = true;
                break;
            }
            const std::size_t n = std::min(cfg.batch_size, order.size() - start);
            const std::span<const std::size_t> items(order.data() + start, n);
            std::vector<bool> flip(n, false);
            if (cfg.hflip)
                for (std::size_t i = 0; i < n; ++i) flip[i] = coin(augment_rng);

            const auto t0 = std::chrono::steady_clock::now();
            const Batch b = make_batch(train_set, items, flip);
            adam.zero_grad();
            double value = 0.0;
            try {
                Tape tape;
                TapeScope scope(tape);
                std::vector<GateDecision> decisions;
                ForwardContext ctx;
                ctx.training = true;
                ctx.rng = &gate_rng;
                ctx.decisions = &decisions;
                ctx.counter = &counter;
                const MaskDecoderOutput out = model.forward(b.images, ctx);
                const Tensor loss = step_loss(cfg, train_set, out, b, decisions, point_rng);
                value = loss.item();
                if (!std::isfinite(value)) throw NumericError("non-finite loss");
                backward(tape, loss);
            } catch (const NumericError& e) {
                throw NumericError(fmt::format("training diverged at epoch {} step {}: {}", epoch, result.steps + 1,
                                               e.what()));
            }
            adam.step();
            const auto t1 = std::chrono::steady_clock::now();
            result.step_ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
            ++result.steps;
            loss_sum += value;
            ++batches;
        }
        if (batches == 0) break;
        result.epoch_loss.push_back(loss_sum / static_cast<double>(batches));
        const Metrics val = evaluate_model(model, val_set, cfg.eval_batch);
        result.epoch_val.push_back(val);
        if (metrics_csv.is_open()) {
            write_metric_row(metrics_csv, {cfg.run_id, epoch, "train", "loss", result.epoch_loss.back()});
            write_rows(metrics_csv, cfg.run_id, epoch, "val", val);
            metrics_csv.flush();
        }
        if (val.at(key) > best_score) {
            best_score = val.at(key);
            result.best_epoch = epoch;
            result.best_val = val;
            best = snapshot(params);
        }
    }

    restore(params, best);
    result.expert_evaluations = counter.evaluations;
    result.frozen_checksum_after = parameter_checksum(params, mask, false);
    result.trainable_checksum_after = parameter_checksum(params, mask, true);
    {
        std::size_t i = 0;
        for (const auto& [name, t] : params) {
            if (!std::equal(initial[i].begin(), initial[i].end(), t.data().begin())) result.changed.push_back(name);
            ++i;
        }
    }
    if (!result.step_ms.empty()) {
        std::vector<double> sorted = result.step_ms;
        std::sort(sorted.begin(), sorted.end());
        result.median_step_ms = sorted[sorted.size() / 2];
    }
    result.test = evaluate_model(model, test_set, cfg.eval_batch, &result.test_gates);

    if (!cfg.out.empty()) {
        write_rows(metrics_csv, cfg.run_id, result.best_epoch, "test", result.test);
        save_checkpoint(cfg.out / "best.ckpt", params, mask);
        std::ofstream timing(cfg.out / "timing.csv");
        timing << "step,ms\n";
        for (std::size_t i = 0; i < result.step_ms.size(); ++i) timing << fmt::format("{},{:.6f}\n", i + 1, result.step_ms[i]);
        if (cfg.log_gates && !result.test_gates.empty()) {
            std::ofstream gate_log(cfg.out / "gate_log.csv");
            write_gate_log(gate_log, result.test_gates, 3 * cfg.depth);
        }
    }
    return result;
}

Metrics evaluate(const RunConfig& cfg, const std::filesystem::path& checkpoint, Split split,
                 std::vector<GateDecision>* gates) {
    cfg.validate();
    const SegModel model(cfg.encoder_config(), cfg.decoder_config(), cfg.seed);
    load_checkpoint(checkpoint, model.parameters());
    const Dataset data = gen_synthetic(cfg.data, cfg.seed, split);
    return evaluate_model(model, data, cfg.eval_batch, gates);
}

void write_gate_log(std::ostream& os, const std::vector<GateDecision>& gates, std::size_t layers) {
    if (layers == 0) throw ArgumentError("write_gate_log: layer count must be positive");
    os << "layer,step,sample,expert,gate\n";
    std::size_t offset = 0;
    for (std::size_t i = 0; i < gates.size(); ++i) {
        const GateDecision& d = gates[i];
        if (i > 0 && i % layers == 0) offset += gates[i - 1].active.size();
        const std::size_t n = d.gates.dim(1);
        for (std::size_t s = 0; s < d.active.size(); ++s)
            for (std::size_t e : d.active[s])
                os << fmt::format("{},{},{},{},{:.17g}\n", i % layers, i / layers, offset + s, e, d.gates.at(s * n + e));
    }
}

} // namespace convlora
