// Copyright (c) 2026, Conv-LoRA Desk Authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <cstdint>
#include <random>
#include <string_view>

#include "convlora/tensor.hpp"

namespace convlora {

using Rng = std::mt19937_64;

/// Counter-based stream splitting: a fixed mix of (seed, stream) so that
/// sibling streams derived from one run seed are decorrelated.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);
std::uint64_t derive_seed(std::uint64_t seed, std::string_view stream);

Tensor randn(Shape shape, Rng& rng, double stddev = 1.0);
Tensor rand_uniform(Shape shape, Rng& rng, double lo, double hi);

} // namespace convlora
