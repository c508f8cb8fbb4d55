// Copyright (c) 2026, Conv-LoRA Desk Authors
// SPDX-License-Identifier: Apache-2.0
//
// Training and evaluation loops.

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "convlora/config.hpp"
#include "convlora/data.hpp"
#include "convlora/parameters.hpp"
#include "convlora/seg_model.hpp"

namespace convlora {

using Metrics = std::map<std::string, double>;

/// Model for a run config, with pretrained weights loaded when cfg.base is set.
SegModel build_model(const RunConfig& cfg);

/// Copies pretrained weights into `params`. Encoder base weights must all be
/// present with matching shapes; adapter weights are never loaded; decoder
/// arrays are copied when name and shape match. Returns the number copied.
std::size_t load_base_weights(const std::filesystem::path& path, const ParameterMap& params);

/// Builds a B x 3 x S x S batch from dataset items, mirroring horizontally
/// where `flip[i]` is set. Masks and labels are mirrored alike.
struct Batch {
    Tensor images;
    std::vector<double> masks;
    std::vector<std::size_t> labels;
};
Batch make_batch(const Dataset& d, std::span<const std::size_t> items, const std::vector<bool>& flip);

/// Noise-free forward over a dataset split; appends gate decisions to `gates`
/// (one entry per Conv-LoRA projection per batch) when given.
Metrics evaluate_model(const SegModel& model, const Dataset& data, std::size_t batch,
                       std::vector<GateDecision>* gates = nullptr, ExpertCounter* counter = nullptr);

/// Primary selection metric: iou (binary) or miou (multi-class).
std::string primary_metric(const Dataset& d);

struct RunResult {
    std::size_t best_epoch = 0;
    Metrics best_val;
    Metrics test;
    std::vector<double> epoch_loss;
    std::vector<Metrics> epoch_val;
    ParamCount params;
    std::uint64_t frozen_checksum_before = 0, frozen_checksum_after = 0;
    std::uint64_t trainable_checksum_before = 0, trainable_checksum_after = 0;
    std::vector<std::string> changed; // parameters whose values moved during training
    std::size_t steps = 0;
    std::size_t expert_evaluations = 0; // during training
    double median_step_ms = 0.0;
    std::vector<double> step_ms;
    std::vector<GateDecision> test_gates;
};

/// Trains per cfg, keeps the best-on-validation weights, and evaluates them
/// on the test split. With cfg.out set, writes config.txt, metrics.csv,
/// timing.csv, gate_log.csv and best.ckpt (+ manifest) there.
RunResult train(const RunConfig& cfg);

/// Loads a checkpoint written by train() into the model for cfg and scores a split.
Metrics evaluate(const RunConfig& cfg, const std::filesystem::path& checkpoint, Split split,
                 std::vector<GateDecision>* gates = nullptr);

/// Gate log rows: layer, step, sample, expert, gate.
void write_gate_log(std::ostream& os, const std::vector<GateDecision>& gates, std::size_t layers);

} // namespace convlora
