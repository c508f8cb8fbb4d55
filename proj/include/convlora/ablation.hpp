// Copyright (c) 2026, Conv-LoRA Desk Authors
// SPDX-License-Identifier: Apache-2.0
//
// Ablation drivers: MoE vs multi-scale, single-expert scale sweep, rank sweep.

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "convlora/config.hpp"

namespace convlora {

enum class AblationSuite { moe_vs_multiscale, scale_sweep, rank_sweep };
std::string to_string(AblationSuite s);
AblationSuite ablation_suite_from_string(const std::string& name);

struct AblationOptions {
    RunConfig base;                      // shared settings; variant, scale and rank are overridden
    std::vector<std::uint64_t> seeds{0, 1, 2};
    std::filesystem::path out;           // per-run artifacts under out/<suite>/<run>; empty: none
    std::vector<std::string> datasets{"small-objects", "large-objects"}; // scale sweep
    std::vector<double> scales{1, 2, 4, 8};                              // scale sweep
    std::vector<std::size_t> ranks{3, 6, 12, 24};                        // rank sweep
};

struct SpeedRow {
    std::string variant;
    std::uint64_t seed = 0;
    std::size_t trainable = 0;
    std::size_t steps = 0;
    std::size_t expert_evaluations = 0;
    double median_step_ms = 0.0;
    double iter_per_s = 0.0;
    double test_metric = 0.0;
};

struct SpeedComparison {
    std::vector<SpeedRow> rows;
    std::string metric;
    /// Median over seeds of each variant's median step time.
    double moe_ms = 0.0, multiscale_ms = 0.0;
    std::size_t moe_evaluations = 0, multiscale_evaluations = 0; // summed over seeds
};

struct ScaleRow {
    std::string dataset;
    double scale = 1.0;
    std::uint64_t seed = 0;
    double val_metric = 0.0;
    double test_metric = 0.0;
};

struct ScaleSweep {
    std::vector<ScaleRow> rows;
    std::string metric;
    /// dataset -> best scale per seed (by test metric, ties to the smaller scale)
    std::map<std::string, std::vector<double>> argmax;
    /// dataset -> the scale chosen by a strict majority of seeds, if any
    std::map<std::string, std::optional<double>> majority;
};

struct RankRow {
    std::size_t rank = 0;
    std::string variant;
    std::size_t trainable = 0;
    std::size_t total = 0;
    double ratio = 0.0;
};

SpeedComparison run_moe_vs_multiscale(const AblationOptions& opts);
ScaleSweep run_scale_sweep(const AblationOptions& opts);
/// Trainable-parameter counts of LoRA and Conv-LoRA per rank; no training.
std::vector<RankRow> run_rank_sweep(const AblationOptions& opts);

void write_csv(std::ostream& os, const SpeedComparison& r);
void write_csv(std::ostream& os, const ScaleSweep& r);
void write_csv(std::ostream& os, const std::vector<RankRow>& r);

/// Runs a suite and writes its table to out/<suite>.csv (or to `os` when out is empty).
void run_ablation(AblationSuite suite, const AblationOptions& opts, std::ostream& os);

} // namespace convlora
