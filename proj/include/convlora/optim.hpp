// Copyright (c) 2026, Conv-LoRA Desk Authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <vector>

#include "convlora/parameters.hpp"
#include "convlora/tensor.hpp"

namespace convlora {

struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-4; // L2 added to the gradient
    double adapter_lr_scale = 1.0; // adapter parameters step with lr * adapter_lr_scale
};

/// Adam over the trainable subset of a parameter map. Frozen parameters are
/// never touched.
class Adam {
public:
    Adam(const ParameterMap& params, const FreezeMask& mask, AdamConfig cfg);

    void zero_grad() const;
    void step();
    std::size_t steps() const noexcept { return t_; }
    const AdamConfig& config() const noexcept { return cfg_; }

private:
    AdamConfig cfg_;
    std::vector<Tensor> params_;
    std::vector<double> lr_;
    std::vector<std::vector<double>> m_, v_;
    std::size_t t_ = 0;
};

} // namespace convlora
