// Copyright (c) 2026, Conv-LoRA Desk Authors
// SPDX-License-Identifier: Apache-2.0
//
// Dense double-precision tensors with an optional gradient slot, and the
// tape that records differentiable ops for reverse-mode accumulation.

#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "convlora/errors.hpp"

namespace convlora {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Reference-counted handle to a dense row-major array. Copies share storage.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape);
    static Tensor full(Shape shape, double value);
    static Tensor from(Shape shape, std::vector<double> values);
    static Tensor scalar(double value);

    bool defined() const noexcept { return impl_ != nullptr; }
    const Shape& shape() const;
    std::size_t dim(std::size_t axis) const;
    std::size_t rank() const { return shape().size(); }
    std::size_t numel() const;

    std::span<const double> data() const;
    // Direct write access; only parameter updates and data loaders use it.
    std::span<double> mutable_data() const;
    double item() const;
    double at(std::size_t flat_index) const { return data()[flat_index]; }

    bool requires_grad() const;
    const Tensor& set_requires_grad(bool flag) const;

    bool has_grad() const;
    std::span<const double> grad() const;
    std::span<double> mutable_grad() const; // allocates a zero grad if absent
    void zero_grad() const;
    void drop_grad() const;

    /// Deep copy of the values; the copy has no grad and does not require it.
    Tensor detach() const;

    bool same_storage(const Tensor& other) const noexcept { return impl_ == other.impl_; }

private:
    struct Impl {
        Shape shape;
        std::vector<double> data;
        std::vector<double> grad;
        bool requires_grad = false;
    };
    explicit Tensor(std::shared_ptr<Impl> impl) : impl_(std::move(impl)) {}
    Impl& impl() const;

    std::shared_ptr<Impl> impl_;
};

/// Ordered record of executed differentiable ops. Entries are appended in
/// execution order, so every entry's inputs were produced by earlier entries
/// (or are leaves).
class Tape {
public:
    struct Entry {
        std::string op;
        std::vector<Tensor> inputs;
        Tensor output;
        std::function<void()> backward;
    };

    void record(Entry entry) { entries_.push_back(std::move(entry)); }
    std::size_t size() const noexcept { return entries_.size(); }
    const std::vector<Entry>& entries() const noexcept { return entries_; }
    void clear() noexcept { entries_.clear(); }

    /// Tape that ops currently record into, or nullptr.
    static Tape* active() noexcept;

private:
    friend class TapeScope;
    std::vector<Entry> entries_;
};

/// RAII activation of a tape for the current thread.
class TapeScope {
public:
    explicit TapeScope(Tape& tape);
    ~TapeScope();
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape* previous_;
};

/// Seeds d(loss)/d(loss) = 1 and runs the tape in reverse. Gradients add
/// into existing grad buffers, so callers zero parameters between steps.
void backward(const Tape& tape, const Tensor& loss);

} // namespace convlora
