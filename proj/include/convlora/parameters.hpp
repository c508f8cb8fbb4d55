// Copyright (c) 2026, Conv-LoRA Desk Authors
// SPDX-License-Identifier: Apache-2.0
//
// Named parameter registry, freeze policies, parameter accounting and the
// checkpoint format (flat binary of named arrays plus a text manifest).

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include "convlora/tensor.hpp"

namespace convlora {

/// Parameters keyed by dotted name. Name order is the checkpoint order.
using ParameterMap = std::map<std::string, Tensor>;

/// Per-parameter trainable flag, keyed like ParameterMap.
using FreezeMask = std::map<std::string, bool>;

enum class FreezePolicy { decoder_only, peft, full, from_scratch };

std::string to_string(FreezePolicy p);
FreezePolicy freeze_policy_from_string(const std::string& name);

/// Names containing this infix belong to adapters.
inline constexpr const char* kAdapterInfix = ".adapter.";
/// Decoder parameters start with this prefix.
inline constexpr const char* kDecoderPrefix = "decoder.";

bool is_adapter(const std::string& name);
bool is_decoder(const std::string& name);

/// Builds the mask for `policy` and sets requires_grad on every parameter to
/// match. peft trains adapters and the decoder; full and from-scratch train
/// everything; decoder-only trains the decoder.
FreezeMask apply_freeze(const ParameterMap& params, FreezePolicy policy);

struct ParamCount {
    std::size_t trainable = 0;
    std::size_t total = 0;
    double ratio = 0.0;
};

ParamCount count_params(const ParameterMap& params, const FreezeMask& mask);

/// FNV-1a over the raw bytes of the selected parameters, in name order.
std::uint64_t parameter_checksum(const ParameterMap& params, const FreezeMask& mask, bool trainable);

/// Writes `path` (binary) and `path` + ".manifest" (one line per array:
/// name, shape, trainable flag).
void save_checkpoint(const std::filesystem::path& path, const ParameterMap& params, const FreezeMask& mask);

/// Loads values into existing parameters. Names and shapes must match the
/// file exactly; any mismatch raises CheckpointError.
void load_checkpoint(const std::filesystem::path& path, const ParameterMap& params);

/// Reads every array of a checkpoint into fresh tensors.
ParameterMap read_checkpoint(const std::filesystem::path& path);

/// Copies values between parameter maps with identical names and shapes.
void copy_parameters(const ParameterMap& from, const ParameterMap& to);

} // namespace convlora
