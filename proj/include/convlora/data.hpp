// Copyright (c) 2026, Conv-LoRA Desk Authors
// SPDX-License-Identifier: Apache-2.0
//
// Synthetic segmentation tasks: textured backgrounds with geometric objects
// at configurable scales, in binary and multi-class flavours.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "convlora/random.hpp"

namespace convlora {

enum class TaskKind { binary, multiclass };
enum class RadiusDistribution { log_uniform, uniform };

enum class ShapeKind : std::size_t { disc = 0, square = 1, triangle = 2 };

struct DatasetSpec {
    std::string name = "scale-varied";
    TaskKind task = TaskKind::binary;
    std::size_t image_size = 64;
    double radius_min = 2.0;
    double radius_max = 24.0;
    RadiusDistribution radius_dist = RadiusDistribution::log_uniform;
    std::size_t objects_min = 1;
    std::size_t objects_max = 1;
    std::size_t shape_classes = 3; // object categories for multiclass (labels 1..K)
    // Appearance: per-channel colour offset of objects against the
    // background, and correlation lengths (px) of the two noise textures.
    double contrast = 0.6;
    double background_corr = 3.0;
    double object_corr = 1.0;
    double texture_amplitude = 0.5;
    std::size_t train_size = 128;
    std::size_t val_size = 32;
    std::size_t test_size = 64;

    void validate() const;
};

/// Named presets: scale-varied, small-objects, large-objects, pretrain, multiclass.
DatasetSpec dataset_preset(const std::string& name);

struct ObjectLayout {
    ShapeKind shape = ShapeKind::disc;
    double cy = 0.0, cx = 0.0, radius = 0.0;
    std::size_t category = 1;
};

enum class Split { train, val, test };
std::string to_string(Split s);
Split split_from_string(const std::string& name);

struct Dataset {
    std::size_t size = 0;
    std::size_t image_size = 0;
    std::size_t num_classes = 0;      // categories including background; 0 for binary
    std::vector<double> images;       // N x 3 x S x S
    std::vector<double> masks;        // N x S x S, binary foreground
    std::vector<std::size_t> labels;  // N x S x S, multiclass only
    std::vector<std::vector<ObjectLayout>> objects;

    std::size_t pixels() const { return image_size * image_size; }
};

/// Object placements for `count` images of a split, drawn from the same
/// per-image streams that gen_synthetic renders from.
std::vector<std::vector<ObjectLayout>> dataset_layouts(const DatasetSpec& spec, std::uint64_t seed, Split split,
                                                       std::size_t count);

/// Deterministic function of (spec, seed, split). Splits use disjoint
/// seed streams.
Dataset gen_synthetic(const DatasetSpec& spec, std::uint64_t seed, Split split);

/// Correlated noise: white noise smoothed by two box passes of radius
/// round(corr), rescaled to unit variance.
std::vector<double> correlated_noise(std::size_t size, double corr, Rng& rng);

/// CDF of the configured radius distribution.
double radius_cdf(const DatasetSpec& spec, double r);

} // namespace convlora
