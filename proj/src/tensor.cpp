// Copyright (c) 2026, Conv-LoRA Desk Authors
// SPDX-License-Identifier: Apache-2.0
//

#include "convlora/tensor.hpp"

#include <algorithm>
#include <fmt/format.h>
#include <numeric>

namespace convlora {

std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
    std::string out = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(shape[i]);
    }
    return out + "]";
}

Tensor Tensor::zeros(Shape shape) {
    auto impl = std::make_shared<Impl>();
    impl->data.assign(shape_numel(shape), 0.0);
    impl->shape = std::move(shape);
    return Tensor(std::move(impl));
}

Tensor Tensor::full(Shape shape, double value) {
    auto impl = std::make_shared<Impl>();
    impl->data.assign(shape_numel(shape), value);
    impl->shape = std::move(shape);
    return Tensor(std::move(impl));
}

Tensor Tensor::from(Shape shape, std::vector<double> values) {
    if (values.size() != shape_numel(shape)) {
        throw DimensionError(fmt::format("Tensor::from: {} values for shape {}", values.size(), shape_str(shape)));
    }
    auto impl = std::make_shared<Impl>();
    impl->shape = std::move(shape);
    impl->data = std::move(values);
    return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value) { return from({1}, {value}); }

Tensor::Impl& Tensor::impl() const {
    if (!impl_) throw ArgumentError("use of undefined tensor");
    return *impl_;
}

const Shape& Tensor::shape() const { return impl().shape; }

std::size_t Tensor::dim(std::size_t axis) const {
    const auto& s = shape();
    if (axis >= s.size()) {
        throw DimensionError(fmt::format("axis {} out of range for shape {}", axis, shape_str(s)));
    }
    return s[axis];
}

std::size_t Tensor::numel() const { return impl().data.size(); }

std::span<const double> Tensor::data() const { return impl().data; }
std::span<double> Tensor::mutable_data() const { return impl().data; }

double Tensor::item() const {
    if (numel() != 1) throw ArgumentError(fmt::format("item() on tensor of shape {}", shape_str(shape())));
    return impl().data[0];
}

bool Tensor::requires_grad() const { return impl().requires_grad; }

const Tensor& Tensor::set_requires_grad(bool flag) const {
    impl().requires_grad = flag;
    if (!flag) impl().grad.clear();
    return *this;
}

bool Tensor::has_grad() const { return !impl().grad.empty(); }
std::span<const double> Tensor::grad() const { return impl().grad; }

std::span<double> Tensor::mutable_grad() const {
    auto& im = impl();
    if (im.grad.empty()) im.grad.assign(im.data.size(), 0.0);
    return im.grad;
}

void Tensor::zero_grad() const {
    auto& im = impl();
    if (!im.grad.empty()) std::fill(im.grad.begin(), im.grad.end(), 0.0);
}

void Tensor::drop_grad() const { impl().grad.clear(); }

Tensor Tensor::detach() const {
    const auto& im = impl();
    return from(im.shape, im.data);
}

namespace {
thread_local Tape* g_active_tape = nullptr;
}

Tape* Tape::active() noexcept { return g_active_tape; }

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

void backward(const Tape& tape, const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1) {
        throw ArgumentError("backward: loss must be a scalar tensor");
    }
    if (!loss.requires_grad()) return;
    Tensor seed = loss;
    seed.mutable_grad()[0] += 1.0;
    const auto& entries = tape.entries();
    for (auto it = entries.rbegin(); it != entries.rend(); ++it) {
        if (it->output.has_grad()) it->backward();
    }
}

} // namespace convlora
