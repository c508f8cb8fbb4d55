// Copyright (c) 2026, Conv-LoRA Desk Authors
// SPDX-License-Identifier: Apache-2.0
//

#include "convlora/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <fmt/format.h>

namespace convlora {

namespace {
double eval_scalar(const std::function<Tensor()>& f) {
    const Tensor v = f();
    if (v.numel() != 1) throw ArgumentError("finite_diff_check: function must return a scalar");
    return v.item();
}
} // namespace

GradCheckResult finite_diff_check(const std::function<Tensor()>& f, std::vector<Tensor> inputs, double h) {
    if (!(h > 0.0)) throw ArgumentError("finite_diff_check: step must be positive");

    const double f0 = eval_scalar(f);
    const double f1 = eval_scalar(f);
    if (f0 != f1) {
        throw OracleInvalidError(fmt::format("finite_diff_check: f is not deterministic ({} vs {})", f0, f1));
    }

    std::vector<bool> had_flag;
    had_flag.reserve(inputs.size());
    for (auto& t : inputs) {
        had_flag.push_back(t.requires_grad());
        t.set_requires_grad(true);
        t.drop_grad();
    }

    std::vector<std::vector<double>> analytic;
    {
        Tape tape;
        TapeScope scope(tape);
        const Tensor loss = f();
        backward(tape, loss);
    }
    for (auto& t : inputs) {
        if (t.has_grad()) {
            analytic.emplace_back(t.grad().begin(), t.grad().end());
        } else {
            analytic.emplace_back(t.numel(), 0.0);
        }
    }

    GradCheckResult result;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        auto values = inputs[k].mutable_data();
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double saved = values[i];
            values[i] = saved + h;
            const double fp = eval_scalar(f);
            values[i] = saved - h;
            const double fm = eval_scalar(f);
            values[i] = saved;
            const double numeric = (fp - fm) / (2.0 * h);
            const double a = analytic[k][i];
            const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
            const double rel = std::abs(a - numeric) / denom;
            if (rel > result.max_rel_err) {
                result.max_rel_err = rel;
                result.worst_analytic = a;
                result.worst_numeric = numeric;
            }
            result.max_abs_analytic = std::max(result.max_abs_analytic, std::abs(a));
            result.max_abs_numeric = std::max(result.max_abs_numeric, std::abs(numeric));
            ++result.coordinates;
        }
    }

    for (std::size_t k = 0; k < inputs.size(); ++k) {
        inputs[k].set_requires_grad(had_flag[k]);
        inputs[k].drop_grad();
    }
    return result;
}

} // namespace convlora
