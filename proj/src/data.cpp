// Copyright (c) 2026, Conv-LoRA Desk Authors
// SPDX-License-Identifier: Apache-2.0
//

#include "convlora/data.hpp"

#include <algorithm>
#include <cmath>
#include <fmt/format.h>

#include "convlora/errors.hpp"

namespace convlora {

void DatasetSpec::validate() const {
    if (image_size < 8) throw ConfigError(fmt::format("image size {} is too small", image_size));
    if (!(radius_min > 0.0) || radius_max < radius_min) {
        throw ConfigError(fmt::format("radius range [{}, {}] is invalid", radius_min, radius_max));
    }
    if (2.0 * radius_max >= static_cast<double>(image_size)) {
        throw ConfigError(fmt::format("radius {} does not fit a {} px canvas", radius_max, image_size));
    }
    if (objects_min == 0 || objects_max < objects_min) throw ConfigError("object count range is invalid");
    if (task == TaskKind::multiclass && (shape_classes < 1 || shape_classes > 3)) {
        throw ConfigError(fmt::format("{} shape classes requested; 1 to 3 shapes exist", shape_classes));
    }
    if (background_corr < 0.0 || object_corr < 0.0 || texture_amplitude < 0.0) {
        throw ConfigError("texture parameters must be non-negative");
    }
    if (train_size == 0) throw ConfigError("training split is empty");
}

DatasetSpec dataset_preset(const std::string& name) {
    DatasetSpec s;
    s.name = name;
    if (name == "scale-varied") return s;
    if (name == "small-objects") {
        s.radius_min = 4.0;
        s.radius_max = 10.0;
        return s;
    }
    if (name == "large-objects") {
        s.radius_min = 12.0;
        s.radius_max = 24.0;
        return s;
    }
    if (name == "pretrain") {
        s.radius_min = 4.0;
        s.radius_max = 20.0;
        s.contrast = 1.2;
        s.object_corr = s.background_corr;
        return s;
    }
    if (name == "multiclass") {
        s.task = TaskKind::multiclass;
        s.radius_min = 4.0;
        s.radius_max = 16.0;
        s.objects_min = 1;
        s.objects_max = 3;
        return s;
    }
    throw ConfigError(fmt::format("unknown dataset preset '{}'", name));
}

std::string to_string(Split s) {
    switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
    }
    return "?";
}

Split split_from_string(const std::string& name) {
    if (name == "train") return Split::train;
    if (name == "val") return Split::val;
    if (name == "test") return Split::test;
    throw ConfigError(fmt::format("unknown split '{}'", name));
}

double radius_cdf(const DatasetSpec& spec, double r) {
    if (r <= spec.radius_min) return 0.0;
    if (r >= spec.radius_max) return 1.0;
    if (spec.radius_max == spec.radius_min) return 1.0;
    if (spec.radius_dist == RadiusDistribution::uniform) return (r - spec.radius_min) / (spec.radius_max - spec.radius_min);
    return std::log(r / spec.radius_min) / std::log(spec.radius_max / spec.radius_min);
}

std::vector<double> correlated_noise(std::size_t size, double corr, Rng& rng) {
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<double> a(size * size);
    for (double& v : a) v = normal(rng);
    const auto k = static_cast<std::ptrdiff_t>(std::lround(corr));
    if (k > 0) {
        const auto n = static_cast<std::ptrdiff_t>(size);
        std::vector<double> b(a.size());
        auto wrap = [n](std::ptrdiff_t i) { return ((i % n) + n) % n; };
        for (int pass = 0; pass < 2; ++pass) {
            for (std::ptrdiff_t y = 0; y < n; ++y)
                for (std::ptrdiff_t x = 0; x < n; ++x) {
                    double s = 0.0;
                    for (std::ptrdiff_t d = -k; d <= k; ++d) s += a[y * n + wrap(x + d)];
                    b[y * n + x] = s;
                }
            for (std::ptrdiff_t y = 0; y < n; ++y)
                for (std::ptrdiff_t x = 0; x < n; ++x) {
                    double s = 0.0;
                    for (std::ptrdiff_t d = -k; d <= k; ++d) s += b[wrap(y + d) * n + x];
                    a[y * n + x] = s;
                }
        }
    }
    double mean = 0.0, var = 0.0;
    for (double v : a) mean += v;
    mean /= static_cast<double>(a.size());
    for (double v : a) var += (v - mean) * (v - mean);
    const double sd = std::sqrt(var / static_cast<double>(a.size()));
    for (double& v : a) v = sd > 0.0 ? (v - mean) / sd : 0.0;
    return a;
}

namespace {

std::uint64_t split_seed(std::uint64_t seed, Split split) { return derive_seed(seed, "data." + to_string(split)); }

std::vector<ObjectLayout> sample_layout(const DatasetSpec& spec, Rng& rng) {
    std::uniform_int_distribution<std::size_t> count(spec.objects_min, spec.objects_max);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const std::size_t shapes = spec.task == TaskKind::multiclass ? spec.shape_classes : 3;
    std::uniform_int_distribution<std::size_t> shape(0, shapes - 1);
    const std::size_t n = count(rng);
    std::vector<ObjectLayout> out;
    for (std::size_t i = 0; i < n; ++i) {
        ObjectLayout o;
        const double u = unit(rng);
        o.radius = spec.radius_dist == RadiusDistribution::uniform
                       ? spec.radius_min + u * (spec.radius_max - spec.radius_min)
                       : spec.radius_min * std::pow(spec.radius_max / spec.radius_min, u);
        const double lo = o.radius, hi = static_cast<double>(spec.image_size) - 1.0 - o.radius;
        o.cy = lo + unit(rng) * (hi - lo);
        o.cx = lo + unit(rng) * (hi - lo);
        o.shape = static_cast<ShapeKind>(shape(rng));
        o.category = static_cast<std::size_t>(o.shape) + 1;
        out.push_back(o);
    }
    return out;
}

bool inside(const ObjectLayout& o, double y, double x) {
    const double dy = y - o.cy, dx = x - o.cx;
    switch (o.shape) {
    case ShapeKind::disc: return dy * dy + dx * dx <= o.radius * o.radius;
    case ShapeKind::square: return std::abs(dy) <= o.radius * 0.8 && std::abs(dx) <= o.radius * 0.8;
    case ShapeKind::triangle: {
        // Upward equilateral triangle with circumradius r: apex above, base below.
        const double r = o.radius;
        if (dy > r / 2.0 || dy < -r) return false;
        const double half_width = (dy + r) / std::sqrt(3.0);
        return std::abs(dx) <= half_width;
    }
    }
    return false;
}

} // namespace

std::vector<std::vector<ObjectLayout>> dataset_layouts(const DatasetSpec& spec, std::uint64_t seed, Split split,
                                                       std::size_t count) {
    spec.validate();
    const std::uint64_t base = split_seed(seed, split);
    std::vector<std::vector<ObjectLayout>> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        Rng rng(derive_seed(derive_seed(base, i), "layout"));
        out.push_back(sample_layout(spec, rng));
    }
    return out;
}

Dataset gen_synthetic(const DatasetSpec& spec, std::uint64_t seed, Split split) {
    spec.validate();
    const std::size_t n = split == Split::train ? spec.train_size : split == Split::val ? spec.val_size : spec.test_size;
    const std::size_t s = spec.image_size, hw = s * s;
    Dataset d;
    d.size = n;
    d.image_size = s;
    d.num_classes = spec.task == TaskKind::multiclass ? spec.shape_classes + 1 : 0;
    d.images.assign(n * 3 * hw, 0.0);
    d.masks.assign(n * hw, 0.0);
    if (spec.task == TaskKind::multiclass) d.labels.assign(n * hw, 0);
    d.objects = dataset_layouts(spec, seed, split, n);

    const std::uint64_t base = split_seed(seed, split);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::bernoulli_distribution coin(0.5);
    for (std::size_t i = 0; i < n; ++i) {
        Rng rng(derive_seed(derive_seed(base, i), "appearance"));
        double bg_color[3], fg_color[3];
        for (int c = 0; c < 3; ++c) bg_color[c] = 0.3 * normal(rng);
        std::vector<std::vector<double>> fg_colors;
        for (std::size_t o = 0; o < d.objects[i].size(); ++o) {
            for (int c = 0; c < 3; ++c) fg_color[c] = bg_color[c] + (coin(rng) ? spec.contrast : -spec.contrast);
            fg_colors.emplace_back(fg_color, fg_color + 3);
        }
        std::vector<std::vector<double>> bg_tex, fg_tex;
        for (int c = 0; c < 3; ++c) bg_tex.push_back(correlated_noise(s, spec.background_corr, rng));
        for (int c = 0; c < 3; ++c) fg_tex.push_back(correlated_noise(s, spec.object_corr, rng));

        // Later objects are drawn over earlier ones.
        std::vector<int> owner(hw, -1);
        for (std::size_t o = 0; o < d.objects[i].size(); ++o)
            for (std::size_t y = 0; y < s; ++y)
                for (std::size_t x = 0; x < s; ++x)
                    if (inside(d.objects[i][o], static_cast<double>(y), static_cast<double>(x)))
                        owner[y * s + x] = static_cast<int>(o);

        for (std::size_t p = 0; p < hw; ++p) {
            const int o = owner[p];
            for (int c = 0; c < 3; ++c) {
                const double v = o < 0 ? bg_color[c] + spec.texture_amplitude * bg_tex[c][p]
                                       : fg_colors[o][c] + spec.texture_amplitude * fg_tex[c][p];
                d.images[(i * 3 + c) * hw + p] = v;
            }
            d.masks[i * hw + p] = o < 0 ? 0.0 : 1.0;
            if (spec.task == TaskKind::multiclass) d.labels[i * hw + p] = o < 0 ? 0 : d.objects[i][o].category;
        }
    }
    return d;
}

} // namespace convlora
