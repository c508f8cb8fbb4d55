// Copyright (c) 2026, Conv-LoRA Desk Authors
// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end: train, eval, analyze, ablate, gradcheck, gen-data.

#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace convlora {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

/// Runs one command line (args exclude the program name). Returns the exit code.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

} // namespace convlora
