// Copyright (c) 2026, Conv-LoRA Desk Authors
// SPDX-License-Identifier: Apache-2.0
//
// Finite-difference sweep over every differentiable op and the adapter layers.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace convlora {

struct OpCheck {
    std::string op;
    double max_rel_err = 0.0;
    std::size_t seeds = 0;
};

/// Checks each op on random extents and values for seeds
/// [first_seed, first_seed + seeds). Reports the worst relative error per op.
std::vector<OpCheck> gradient_suite(std::uint64_t first_seed, std::size_t seeds);

} // namespace convlora
