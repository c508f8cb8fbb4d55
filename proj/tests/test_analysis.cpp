// Copyright (c) 2026, Conv-LoRA Desk Authors
// SPDX-License-Identifier: Apache-2.0
//

#include <gtest/gtest.h>

#include <cmath>
#include <complex>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>

#include "convlora/analysis.hpp"
#include "convlora/ops.hpp"
#include "test_util.hpp"

using namespace convlora;
using convlora::testing::random_tensor;

namespace {

Tensor uniform_attention(std::size_t bs, std::size_t heads, std::size_t l) {
    return Tensor::full({bs, heads, l, l}, 1.0 / static_cast<double>(l));
}

Tensor random_attention(std::size_t bs, std::size_t heads, std::size_t l, std::uint64_t seed) {
    return ops::softmax_axis(random_tensor({bs, heads, l, l}, seed, 2.0), 3);
}

// All-pairs average distance between cell centres of a g x g grid.
double all_pairs_mean(std::size_t g) {
    double s = 0.0;
    for (std::size_t y1 = 0; y1 < g; ++y1)
        for (std::size_t x1 = 0; x1 < g; ++x1)
            for (std::size_t y2 = 0; y2 < g; ++y2)
                for (std::size_t x2 = 0; x2 < g; ++x2)
                    s += std::hypot(static_cast<double>(y1) - static_cast<double>(y2),
                                    static_cast<double>(x1) - static_cast<double>(x2));
    return s / static_cast<double>(g * g * g * g);
}

std::vector<double> naive_dft_amplitude(const std::vector<double>& plane, std::size_t h, std::size_t w) {
    std::vector<double> out(h * w);
    for (std::size_t u = 0; u < h; ++u)
        for (std::size_t v = 0; v < w; ++v) {
            std::complex<double> acc = 0.0;
            for (std::size_t y = 0; y < h; ++y)
                for (std::size_t x = 0; x < w; ++x) {
                    const double angle = -2.0 * std::numbers::pi *
                                         (static_cast<double>(u * y) / static_cast<double>(h) +
                                          static_cast<double>(v * x) / static_cast<double>(w));
                    acc += plane[y * w + x] * std::polar(1.0, angle);
                }
            out[u * w + v] = std::abs(acc);
        }
    return out;
}

GateDecision decision_with(std::vector<std::vector<std::size_t>> active, std::size_t experts) {
    GateDecision d;
    d.gates = Tensor::zeros({active.size(), experts});
    for (std::size_t b = 0; b < active.size(); ++b)
        for (std::size_t e : active[b]) d.gates.mutable_data()[b * experts + e] = 1.0 / active[b].size();
    d.active = std::move(active);
    return d;
}

} // namespace

// --- attention distance ------------------------------------------------------------------

TEST(AttentionDistance, IdentityAttentionIsZero) {
    std::vector<double> eye(2 * 3 * 9 * 9, 0.0);
    for (std::size_t m = 0; m < 2 * 3; ++m)
        for (std::size_t q = 0; q < 9; ++q) eye[(m * 9 + q) * 9 + q] = 1.0;
    for (double d : mean_attention_distance(Tensor::from({2, 3, 9, 9}, eye), 3)) EXPECT_EQ(d, 0.0);
}

TEST(AttentionDistance, SinglePatchGridIsZero) {
    for (double d : mean_attention_distance(Tensor::full({2, 4, 1, 1}, 1.0), 1)) EXPECT_EQ(d, 0.0);
}

TEST(AttentionDistance, UniformTwoByTwoMatchesEnumeration) {
    const auto d = mean_attention_distance(uniform_attention(3, 2, 4), 2);
    for (double v : d) {
        EXPECT_NEAR(v, (0.0 + 1.0 + 1.0 + std::sqrt(2.0)) / 4.0, 1e-12);
        EXPECT_NEAR(v, all_pairs_mean(2), 1e-12);
    }
}

TEST(AttentionDistance, UniformMatchesAllPairsOnAnyGrid) {
    for (std::size_t g = 1; g <= 7; ++g) {
        const auto d = mean_attention_distance(uniform_attention(1, 1, g * g), g);
        EXPECT_NEAR(d[0], all_pairs_mean(g), 1e-9) << "grid " << g;
    }
}

TEST(AttentionDistance, HeadAndBatchPermutationInvariance) {
    const Tensor a = random_attention(3, 4, 16, 1);
    const auto base = mean_attention_distance(a, 4);
    const std::size_t plane = 16 * 16;
    const std::vector<std::size_t> head_perm{2, 0, 3, 1}, batch_perm{1, 2, 0};
    std::vector<double> permuted(a.numel());
    for (std::size_t b = 0; b < 3; ++b)
        for (std::size_t h = 0; h < 4; ++h)
            for (std::size_t i = 0; i < plane; ++i)
                permuted[(b * 4 + h) * plane + i] = a.at((batch_perm[b] * 4 + head_perm[h]) * plane + i);
    const auto d = mean_attention_distance(Tensor::from(a.shape(), permuted), 4);
    for (std::size_t h = 0; h < 4; ++h) EXPECT_NEAR(d[h], base[head_perm[h]], 1e-12);
}

TEST(AttentionDistance, BoundedByGridDiameter) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        for (double d : mean_attention_distance(random_attention(2, 3, 25, seed + 10), 5)) {
            EXPECT_GE(d, 0.0);
            EXPECT_LE(d, std::sqrt(32.0));
        }
    }
}

TEST(AttentionDistance, Errors) {
    Tensor a = uniform_attention(1, 1, 4);
    a.mutable_data()[5] += 1e-5;
    EXPECT_THROW(mean_attention_distance(a, 2), DataError);
    EXPECT_THROW(mean_attention_distance(uniform_attention(1, 1, 4), 3), DimensionError);
}

TEST(AttentionDistance, ReportHasOneRowPerLayer) {
    const auto r = attention_distance_report({random_attention(1, 2, 9, 3), uniform_attention(1, 2, 9)}, 3);
    ASSERT_EQ(r.distance.size(), 2u);
    EXPECT_NEAR(r.distance[1][0], all_pairs_mean(3), 1e-12);
}

// --- spectrum -----------------------------------------------------------------------------

TEST(Spectrum, DftMatchesNaiveOracle) {
    for (auto [h, w] : {std::pair<std::size_t, std::size_t>{8, 8}, {5, 7}, {6, 4}, {2, 3}}) {
        const Tensor t = random_tensor({h, w}, h * 10 + w);
        const std::vector<double> plane(t.data().begin(), t.data().end());
        const auto got = dft_amplitude(plane, h, w);
        const auto ref = naive_dft_amplitude(plane, h, w);
        for (std::size_t i = 0; i < h * w; ++i) EXPECT_NEAR(got[i], ref[i], 1e-9) << h << "x" << w << " @" << i;
    }
}

TEST(Spectrum, BinCountAndCoverage) {
    const auto r = fourier_log_amplitude(random_tensor({1, 2, 8, 6}, 4));
    ASSERT_EQ(r.relative.size(), 3u);
    std::size_t n = 0;
    for (std::size_t c : r.counts) n += c;
    EXPECT_EQ(n, 2u * (8 * 6 - 1));
    for (std::size_t b = 1; b < r.radius.size(); ++b) EXPECT_GT(r.radius[b], r.radius[b - 1]);
}

TEST(Spectrum, ConstantMapSitsAtTheFloor) {
    for (double c : {1.0, -3.5, 0.25}) {
        const auto r = fourier_log_amplitude(Tensor::full({2, 3, 8, 8}, c));
        const double floor = std::log(kSpectrumEps) - std::log(std::abs(c) * 64.0 + kSpectrumEps);
        for (double v : r.relative) EXPECT_NEAR(v, floor, 1e-6) << "constant " << c;
        for (double v : r.relative) EXPECT_NEAR(v, r.relative[0], 1e-6);
    }
}

TEST(Spectrum, ImpulseIsFlat) {
    for (std::size_t pos : {0u, 9u, 27u}) {
        std::vector<double> x(64, 0.0);
        x[pos] = 1.0;
        const auto r = fourier_log_amplitude(Tensor::from({1, 1, 8, 8}, x));
        for (double v : r.relative) EXPECT_NEAR(v, 0.0, 1e-9) << "impulse at " << pos;
    }
}

TEST(Spectrum, CheckerboardConcentratesAtMaximalRadius) {
    for (std::size_t n : {4u, 8u}) {
        std::vector<double> x(n * n);
        for (std::size_t y = 0; y < n; ++y)
            for (std::size_t c = 0; c < n; ++c) x[y * n + c] = (y + c) % 2 ? -1.0 : 1.0;
        const auto ref = naive_dft_amplitude(x, n, n);
        for (std::size_t i = 0; i < n * n; ++i)
            EXPECT_NEAR(ref[i], i == (n / 2) * n + n / 2 ? static_cast<double>(n * n) : 0.0, 1e-9);
        const auto r = fourier_log_amplitude(Tensor::from({1, 1, n, n}, x));
        const std::size_t last = r.energy.size() - 1;
        double total = 0.0;
        for (double e : r.energy) total += e;
        EXPECT_NEAR(r.energy[last] / total, 1.0, 1e-12);
        EXPECT_NEAR(total, static_cast<double>(n * n * n * n), 1e-6);
        for (std::size_t b = 0; b < last; ++b) EXPECT_NEAR(r.log_amplitude[b], std::log(kSpectrumEps), 1e-6);
    }
}

TEST(Spectrum, AddingConstantOnlyMovesDc) {
    const Tensor x = random_tensor({2, 3, 8, 8}, 5);
    std::vector<double> shifted(x.data().begin(), x.data().end());
    for (double& v : shifted) v += 2.75;
    const auto a = fourier_log_amplitude(x), b = fourier_log_amplitude(Tensor::from(x.shape(), shifted));
    for (std::size_t i = 0; i < a.log_amplitude.size(); ++i) EXPECT_NEAR(a.log_amplitude[i], b.log_amplitude[i], 1e-9);
    EXPECT_GT(std::abs(a.dc_log_amplitude - b.dc_log_amplitude), 0.1);
}

TEST(Spectrum, RejectsTinyMaps) {
    EXPECT_THROW(fourier_log_amplitude(Tensor::zeros({1, 1, 1, 4})), DimensionError);
}

// --- expert utilization ---------------------------------------------------------------------

TEST(Utilization, CountsConservedAndAssignedToLayers) {
    std::vector<GateDecision> log;
    for (std::size_t step = 0; step < 4; ++step)
        for (std::size_t layer = 0; layer < 3; ++layer)
            log.push_back(decision_with({{layer}, {(layer + step) % 5, 4}}, 5));
    const auto h = expert_utilization(log, 3);
    EXPECT_EQ(h.experts, 5u);
    EXPECT_EQ(h.decisions(), 4u * 3u * 3u);
    EXPECT_EQ(h.per_layer[1][1], 4u + 1u);
    double f = 0.0;
    for (double v : h.frequencies()) f += v;
    EXPECT_NEAR(f, 1.0, 1e-15);
}

TEST(Utilization, ForcedGateConcentratesOnOneExpert) {
    AdapterConfig cfg{6, 6, 3, 8, 1};
    cfg.noise = false;
    AdapterBundle a = init_adapter(cfg, AdapterVariant::conv_lora, 7);
    for (std::size_t i = 0; i < 3; ++i) a.gate.w_gate.mutable_data()[i * 8 + 5] = 1e3;
    std::vector<GateDecision> log;
    for (std::uint64_t s = 0; s < 6; ++s) {
        const Tensor z = ops::add(random_tensor({4, 3, 4, 4}, s + 20, 0.1), Tensor::full({4, 3, 4, 4}, 1.0));
        log.push_back(gate_scores(z, a.gate, nullptr));
    }
    const auto h = expert_utilization(log, 2);
    EXPECT_EQ(h.total[5], 24u);
    EXPECT_EQ(h.decisions(), 24u);
}

TEST(Utilization, CoefficientOfVariation) {
    const std::vector<std::size_t> flat{3, 3, 3, 3}, one_hot{8, 0, 0, 0, 0, 0, 0, 0};
    EXPECT_EQ(utilization_cv(flat), 0.0);
    EXPECT_NEAR(utilization_cv(one_hot), std::sqrt(7.0), 1e-12);
}

TEST(ChiSquare, HandComputedTable) {
    const std::vector<std::size_t> a{10, 20, 30}, b{30, 20, 10};
    const auto r = chi_square_homogeneity(a, b);
    EXPECT_NEAR(r.statistic, 20.0, 1e-12);
    EXPECT_EQ(r.dof, 2u);
    EXPECT_NEAR(r.p_value, std::exp(-10.0), 1e-15);
}

TEST(ChiSquare, IdenticalProportionsAndEmptyColumns) {
    const std::vector<std::size_t> a{5, 0, 10}, b{10, 0, 20};
    const auto r = chi_square_homogeneity(a, b);
    EXPECT_NEAR(r.statistic, 0.0, 1e-12);
    EXPECT_EQ(r.dof, 1u);
    EXPECT_NEAR(r.p_value, 1.0, 1e-12);
}

// --- writers -----------------------------------------------------------------------------------

TEST(Writers, CsvHeaders) {
    std::ostringstream a, s, u;
    write_attention_csv(a, {{{0.5, 1.5}}});
    EXPECT_EQ(a.str(), "layer,head,mean_distance\n0,0,0.5\n0,1,1.5\n");
    write_spectrum_csv(s, {fourier_log_amplitude(random_tensor({1, 1, 4, 4}, 1))});
    EXPECT_EQ(s.str().substr(0, s.str().find('\n')), "layer,radius,relative_log_amplitude,log_amplitude");
    UtilizationHistogram h;
    h.experts = 2;
    h.per_layer = {{1, 3}};
    h.total = {1, 3};
    write_utilization_csv(u, h);
    EXPECT_EQ(u.str(), "layer,expert,count,frequency\n0,0,1,0.25\n0,1,3,0.75\nall,0,1,0.25\nall,1,3,0.75\n");
}

TEST(Writers, PgmScalesToByteRange) {
    const auto path = std::filesystem::temp_directory_path() / "convlora_test.pgm";
    write_pgm(path, std::vector<double>{-1.0, 0.0, 1.0, 0.5, 0.0, -1.0}, 2, 3);
    std::ifstream is(path, std::ios::binary);
    const std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    const std::string header = "P5\n3 2\n255\n";
    ASSERT_EQ(bytes.size(), header.size() + 6);
    EXPECT_EQ(bytes.substr(0, header.size()), header);
    const std::vector<unsigned char> px(bytes.begin() + header.size(), bytes.end());
    EXPECT_EQ(px, (std::vector<unsigned char>{0, 128, 255, 191, 128, 0}));
    std::filesystem::remove(path);
}
