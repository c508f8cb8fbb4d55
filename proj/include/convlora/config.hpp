// Copyright (c) 2026, Conv-LoRA Desk Authors
// SPDX-License-Identifier: Apache-2.0
//
// Run configuration and its structured-text form: `section.key = value`
// lines, or `key = value` lines under a `[section]` header. `#` starts a
// comment.

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "convlora/data.hpp"
#include "convlora/encoder.hpp"
#include "convlora/optim.hpp"
#include "convlora/parameters.hpp"
#include "convlora/seg_model.hpp"

namespace convlora {

enum class RunVariant { decoder_only, lora, conv_lora, multi_scale, single_expert, full, from_scratch };

std::string to_string(RunVariant v);
RunVariant run_variant_from_string(const std::string& name);
AdapterVariant adapter_variant_of(RunVariant v);
FreezePolicy freeze_policy_of(RunVariant v);

struct RunConfig {
    std::string run_id = "run";
    std::uint64_t seed = 0;
    RunVariant variant = RunVariant::conv_lora;
    std::filesystem::path out;  // empty: no artifacts written
    std::filesystem::path base; // pretrained weights; empty: random frozen base

    // Model.
    std::size_t dim = 32, depth = 4, heads = 4, patch = 8, mlp_ratio = 2;
    std::size_t rank = 3, experts = 8, top_k = 1;
    std::vector<double> scales; // empty: 1..experts
    double single_scale = 1.0;  // the one expert of the single-expert variant
    bool gate_noise = true;
    std::size_t decoder_dim = 128, decoder_depth = 2, decoder_heads = 4;
    std::size_t mask_tokens = 16; // multi-class slots; binary tasks use one

    // Optimisation.
    AdamConfig adam;
    std::size_t batch_size = 4;
    std::size_t epochs = 30;
    std::size_t max_steps = 0; // 0: no cap
    bool hflip = true;
    std::size_t points = 1024; // sampled mask points per slot (multi-class); 0: all
    std::size_t eval_batch = 16;
    LossWeights loss;
    bool log_gates = true;

    DatasetSpec data;

    void validate() const;
    EncoderConfig encoder_config() const;
    DecoderConfig decoder_config() const;
};

/// Applies one `section.key = value` setting. Unknown keys and malformed
/// values raise ConfigError.
void apply_setting(RunConfig& cfg, const std::string& key, const std::string& value);

/// Parses structured text into ordered (key, value) pairs.
std::vector<std::pair<std::string, std::string>> parse_config_text(const std::string& text);

/// Applies every setting of a config file, in file order.
void load_config_file(const std::filesystem::path& path, RunConfig& cfg);

/// Canonical text form; round-trips through apply_setting.
std::string config_to_text(const RunConfig& cfg);

} // namespace convlora
