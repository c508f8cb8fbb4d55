// Copyright (c) 2026, Conv-LoRA Desk Authors
// SPDX-License-Identifier: Apache-2.0
//
// Inspection instruments: attention locality, feature-map spectra and expert
// utilization, plus CSV and PGM writers for their reports.

#pragma once

#include <filesystem>
#include <ostream>
#include <span>
#include <vector>

#include "convlora/adapters.hpp"
#include "convlora/tensor.hpp"

namespace convlora {

/// distance[layer][head], in patch-grid units.
struct AttnDistanceReport {
    std::vector<std::vector<double>> distance;
};

/// Per-head attention-weighted distance from each query patch to its keys,
/// averaged over queries and images. `attn` is B x h x L x L with L = grid^2.
std::vector<double> mean_attention_distance(const Tensor& attn, std::size_t grid);

AttnDistanceReport attention_distance_report(const std::vector<Tensor>& layers, std::size_t grid);

/// Radial spectrum of one feature map. Bin b spans normalized radii
/// (b * width, (b + 1) * width] with width = r_max / bins.
struct SpectrumReport {
    std::vector<double> radius;        // bin centres
    std::vector<double> relative;      // log(amp + eps) - log(amp_dc + eps)
    std::vector<double> log_amplitude; // log(amp + eps)
    std::vector<double> energy;        // sum of squared amplitudes, mean over channels and samples
    std::vector<std::size_t> counts;   // frequencies per bin (per channel and sample)
    double dc_log_amplitude = 0.0;
};

inline constexpr double kSpectrumEps = 1e-12;

/// 2-D DFT per channel of B x C x H x W features, binned into ceil(min(H, W) / 2)
/// radial bins and averaged over channels and samples.
SpectrumReport fourier_log_amplitude(const Tensor& features);

/// Direct 2-D DFT amplitude |F(u, v)| of one H x W plane, row-major over (u, v).
std::vector<double> dft_amplitude(std::span<const double> plane, std::size_t h, std::size_t w);

struct UtilizationHistogram {
    std::size_t experts = 0;
    std::vector<std::vector<std::size_t>> per_layer; // [layer][expert]
    std::vector<std::size_t> total;                  // summed over layers

    std::size_t decisions() const;
    std::vector<double> frequencies() const;
};

/// Tallies active experts from a gate log. Decisions are in call order, so
/// entry i belongs to layer i % layers.
UtilizationHistogram expert_utilization(const std::vector<GateDecision>& decisions, std::size_t layers);

/// Coefficient of variation (population std over mean) of expert counts.
double utilization_cv(std::span<const std::size_t> counts);

struct ChiSquareResult {
    double statistic = 0.0;
    std::size_t dof = 0;
    double p_value = 1.0;
};

/// Pearson chi-square test of homogeneity for two count vectors over the same
/// categories. Categories empty in both are dropped.
ChiSquareResult chi_square_homogeneity(std::span<const std::size_t> a, std::span<const std::size_t> b);

void write_attention_csv(std::ostream& os, const AttnDistanceReport& report);
void write_spectrum_csv(std::ostream& os, const std::vector<SpectrumReport>& layers);
void write_utilization_csv(std::ostream& os, const UtilizationHistogram& hist);

/// Binary PGM (P5), min-max scaled to 0..255. A constant image maps to 0.
void write_pgm(const std::filesystem::path& path, std::span<const double> values, std::size_t h, std::size_t w);

} // namespace convlora
