// Copyright (c) 2026, Conv-LoRA Desk Authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <functional>
#include <vector>

#include "convlora/tensor.hpp"

namespace convlora {

struct GradCheckResult {
    double max_rel_err = 0.0;
    double max_abs_analytic = 0.0;
    double max_abs_numeric = 0.0;
    std::size_t coordinates = 0;
    // Coordinate attaining max_rel_err.
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
};

/// Compares reverse-mode gradients of a scalar function against central
/// differences (f(x+h) - f(x-h)) / 2h for every coordinate of every input.
/// The relative error per coordinate is |a - n| / max(|a|, |n|, 1e-8).
/// `f` must rebuild its graph from the current input values on each call;
/// two unequal evaluations at the same point raise OracleInvalidError.
GradCheckResult finite_diff_check(const std::function<Tensor()>& f, std::vector<Tensor> inputs, double h = 1e-5);

} // namespace convlora
