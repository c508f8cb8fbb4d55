// Copyright (c) 2026, Conv-LoRA Desk Authors
// SPDX-License-Identifier: Apache-2.0
//

#include "convlora/optim.hpp"

#include <cmath>

namespace convlora {

Adam::Adam(const ParameterMap& params, const FreezeMask& mask, AdamConfig cfg) : cfg_(cfg) {
    for (const auto& [name, t] : params) {
        const auto it = mask.find(name);
        if (it == mask.end() || !it->second) continue;
        params_.push_back(t);
        lr_.push_back(is_adapter(name) ? cfg_.lr * cfg_.adapter_lr_scale : cfg_.lr);
        m_.emplace_back(t.numel(), 0.0);
        v_.emplace_back(t.numel(), 0.0);
    }
}

void Adam::zero_grad() const {
    for (const Tensor& p : params_) p.zero_grad();
}

void Adam::step() {
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        auto x = params_[i].mutable_data();
        auto g = params_[i].grad();
        auto& m = m_[i];
        auto& v = v_[i];
        const double lr = lr_[i];
        for (std::size_t j = 0; j < x.size(); ++j) {
            const double gj = (g.empty() ? 0.0 : g[j]) + cfg_.weight_decay * x[j];
            m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * gj;
            v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * gj * gj;
            x[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + cfg_.eps);
        }
    }
}

} // namespace convlora
