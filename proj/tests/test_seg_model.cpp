// Copyright (c) 2026, Conv-LoRA Desk Authors
// SPDX-License-Identifier: Apache-2.0
//

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "convlora/gradcheck.hpp"
#include "convlora/ops.hpp"
#include "convlora/seg_model.hpp"
#include "test_util.hpp"

using namespace convlora;
using convlora::testing::bitwise_equal;
using convlora::testing::max_abs_diff;
using convlora::testing::random_tensor;

namespace {

DecoderConfig small_decoder(std::size_t classes = 0, std::size_t tokens = 1) {
    DecoderConfig d;
    d.feature_dim = 8;
    d.grid = 4;
    d.image_size = 16;
    d.dim = 16;
    d.heads = 2;
    d.mask_tokens = tokens;
    d.num_classes = classes;
    return d;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

double bce_ref(double x, double t) {
    const double p = sigmoid(x);
    return -(t * std::log(p) + (1.0 - t) * std::log(1.0 - p));
}

std::vector<double> softmax_ref(std::vector<double> row) {
    double z = 0.0;
    for (double& v : row) z += v = std::exp(v);
    for (double& v : row) v /= z;
    return row;
}

MaskDecoderOutput make_output(std::size_t bs, std::size_t n, std::size_t side, std::size_t k1, std::uint64_t seed) {
    MaskDecoderOutput out;
    out.mask_logits = random_tensor({bs, n, side, side}, seed, 2.0);
    if (k1 > 0) out.class_logits = random_tensor({bs, n, k1}, seed + 1);
    return out;
}

std::vector<double> random_binary(std::size_t size, std::uint64_t seed, double fraction = 0.5) {
    Rng rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<double> out(size);
    for (double& v : out) v = u(rng) < fraction ? 1.0 : 0.0;
    return out;
}

} // namespace

// --- decoder -------------------------------------------------------------------------

TEST(PixelShuffle, PlacesChannelsOnSubpixelGrid) {
    const Tensor x = random_tensor({2, 8, 3, 3}, 1);
    const Tensor y = pixel_shuffle2(x);
    ASSERT_EQ(y.shape(), (Shape{2, 2, 6, 6}));
    for (std::size_t b = 0; b < 2; ++b)
        for (std::size_t c = 0; c < 2; ++c)
            for (std::size_t i = 0; i < 2; ++i)
                for (std::size_t j = 0; j < 2; ++j)
                    for (std::size_t h = 0; h < 3; ++h)
                        for (std::size_t w = 0; w < 3; ++w)
                            EXPECT_EQ(y.at(((b * 2 + c) * 6 + 2 * h + i) * 6 + 2 * w + j),
                                      x.at(((b * 8 + c * 4 + i * 2 + j) * 3 + h) * 3 + w));
    EXPECT_THROW(pixel_shuffle2(random_tensor({1, 6, 2, 2}, 2)), DimensionError);
}

TEST(Decoder, OutputShapes) {
    const MaskDecoder binary(small_decoder(), 3);
    const auto out = binary.forward(random_tensor({2, 8, 4, 4}, 4));
    EXPECT_EQ(out.mask_logits.shape(), (Shape{2, 1, 16, 16}));
    EXPECT_FALSE(out.class_logits.defined());

    const MaskDecoder multi(small_decoder(3, 5), 3);
    const auto mo = multi.forward(random_tensor({2, 8, 4, 4}, 4));
    EXPECT_EQ(mo.mask_logits.shape(), (Shape{2, 5, 16, 16}));
    EXPECT_EQ(mo.class_logits.shape(), (Shape{2, 5, 4}));
}

TEST(Decoder, ConfigAndExtentErrors) {
    DecoderConfig c = small_decoder();
    c.mask_tokens = 0;
    EXPECT_THROW(MaskDecoder(c, 1), ConfigError);
    c = small_decoder(1);
    EXPECT_THROW(MaskDecoder(c, 1), ConfigError);
    const MaskDecoder d(small_decoder(), 1);
    EXPECT_THROW(d.forward(random_tensor({1, 8, 5, 5}, 1)), DimensionError);
}

TEST(Decoder, ZeroFeaturesAndZeroTokensGiveZeroMasks) {
    const MaskDecoder d(small_decoder(), 5);
    std::fill(d.mask_tokens().mutable_data().begin(), d.mask_tokens().mutable_data().end(), 0.0);
    std::fill(d.prompt_tokens().mutable_data().begin(), d.prompt_tokens().mutable_data().end(), 0.0);
    const auto out = d.forward(Tensor::zeros({1, 8, 4, 4}));
    for (double v : out.mask_logits.data()) EXPECT_EQ(v, 0.0);
}

TEST(Decoder, MasksRespondToOutputTokens) {
    const MaskDecoder d(small_decoder(), 6);
    const Tensor features = random_tensor({1, 8, 4, 4}, 7);
    const Tensor before = d.forward(features).mask_logits.detach();
    d.mask_tokens().mutable_data()[0] += 1e-3;
    const Tensor after = d.forward(features).mask_logits;
    EXPECT_GT(max_abs_diff(before, after), 1e-7);
}

TEST(Decoder, ParametersReachAllTrainableArrays) {
    const MaskDecoder d(small_decoder(3, 2), 8);
    ParameterMap params;
    d.collect_parameters(params);
    for (auto& [name, t] : params) {
        t.zero_grad();
        t.set_requires_grad(true);
    }
    Tape tape;
    {
        TapeScope scope(tape);
        const auto out = d.forward(random_tensor({2, 8, 4, 4}, 9));
        const Tensor loss = ops::add(convlora::testing::probe(out.mask_logits),
                                     convlora::testing::probe(out.class_logits, 100));
        backward(tape, loss);
    }
    for (const auto& [name, t] : params) {
        double mag = 0.0;
        for (double g : t.grad()) mag += std::abs(g);
        EXPECT_GT(mag, 0.0) << name;
    }
    EXPECT_EQ(params.count("decoder.class_head.fc3.weight"), 1u);
}

// --- matching ------------------------------------------------------------------------

TEST(Segments, OnePerPresentCategory) {
    const std::vector<std::size_t> labels{0, 2, 2, 0, 2, 0};
    const auto segs = segments_from_labels(labels, 4);
    ASSERT_EQ(segs.size(), 2u);
    EXPECT_EQ(segs[0].category, 0u);
    EXPECT_EQ(segs[1].category, 2u);
    EXPECT_EQ(segs[1].mask, (std::vector<double>{0, 1, 1, 0, 1, 0}));
    const std::vector<std::size_t> bad{0, 4};
    EXPECT_THROW(segments_from_labels(bad, 4), DataError);
}

TEST(MatchCost, MatchesFullMaskOracle) {
    const std::size_t side = 6, hw = side * side, n = 3;
    const auto pred = make_output(2, n, side, 4, 10);
    std::vector<GtSegment> gt{{1, random_binary(hw, 11)}, {3, random_binary(hw, 12, 0.2)}};
    std::vector<std::size_t> all(hw);
    std::iota(all.begin(), all.end(), 0);
    const LossWeights w{1.0, 2.0, 1.0, 5.0, 5.0};
    const auto cost = match_cost(pred, 1, gt, all, w);
    ASSERT_EQ(cost.size(), n * gt.size());
    for (std::size_t j = 0; j < n; ++j) {
        std::vector<double> row(4);
        for (std::size_t c = 0; c < 4; ++c) row[c] = pred.class_logits.at((n + j) * 4 + c);
        const auto prob = softmax_ref(row);
        for (std::size_t i = 0; i < gt.size(); ++i) {
            double bce = 0.0, inter = 0.0, psum = 0.0, tsum = 0.0;
            for (std::size_t p = 0; p < hw; ++p) {
                const double x = pred.mask_logits.at((n + j) * hw + p), t = gt[i].mask[p];
                bce += bce_ref(x, t);
                inter += sigmoid(x) * t;
                psum += sigmoid(x);
                tsum += t;
            }
            const double dice = 1.0 - (2.0 * inter + 1.0) / (psum + tsum + 1.0);
            const double expected = 5.0 * bce / hw + 5.0 * dice - 2.0 * prob[gt[i].category];
            EXPECT_NEAR(cost[j * gt.size() + i], expected, 1e-12);
        }
    }
}

TEST(MatchCost, TooManySegmentsIsCapacityError) {
    const auto pred = make_output(1, 1, 4, 3, 13);
    std::vector<GtSegment> gt{{0, std::vector<double>(16, 0.0)}, {1, std::vector<double>(16, 1.0)}};
    const std::vector<std::size_t> pts{0, 5};
    EXPECT_THROW(match_cost(pred, 0, gt, pts, {}), CapacityError);
}

TEST(Hungarian, SmallExamples) {
    const std::vector<double> anti{1, 2, 2, 1};
    auto m = hungarian_match(anti, 2, 2);
    EXPECT_EQ(m.gt_to_pred, (std::vector<std::size_t>{0, 1}));
    EXPECT_EQ(m.total_cost, 2.0);

    const std::vector<double> cross{5, 1, 1, 5};
    m = hungarian_match(cross, 2, 2);
    EXPECT_EQ(m.gt_to_pred, (std::vector<std::size_t>{1, 0}));
    EXPECT_EQ(m.total_cost, 2.0);

    // Three predictions, one ground truth: the cheapest row wins.
    const std::vector<double> column{3, -1, 2};
    m = hungarian_match(column, 3, 1);
    EXPECT_EQ(m.gt_to_pred, (std::vector<std::size_t>{1}));

    EXPECT_TRUE(hungarian_match({}, 4, 0).gt_to_pred.empty());
}

TEST(Hungarian, TiesGiveAValidMinimalAssignment) {
    const std::vector<double> flat(12, 0.5);
    const auto m = hungarian_match(flat, 4, 3);
    std::vector<std::size_t> used = m.gt_to_pred;
    std::sort(used.begin(), used.end());
    EXPECT_EQ(std::unique(used.begin(), used.end()), used.end());
    EXPECT_DOUBLE_EQ(m.total_cost, 1.5);
}

TEST(Hungarian, Errors) {
    const std::vector<double> c{1, 2};
    EXPECT_THROW(hungarian_match(c, 1, 2), CapacityError);
    const std::vector<double> nan{1, std::numeric_limits<double>::quiet_NaN()};
    EXPECT_THROW(hungarian_match(nan, 2, 1), ArgumentError);
    EXPECT_THROW(hungarian_match(c, 3, 1), DimensionError);
}

TEST(Hungarian, AgreesWithBruteForceOnRandomProblems) {
    Rng rng(14);
    std::uniform_int_distribution<std::size_t> size(1, 6);
    std::uniform_real_distribution<double> value(-3.0, 3.0);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t rows = size(rng);
        std::uniform_int_distribution<std::size_t> csize(1, rows);
        const std::size_t cols = csize(rng);
        std::vector<double> cost(rows * cols);
        for (double& c : cost) c = trial % 5 == 0 ? std::round(value(rng)) : value(rng);

        // Enumerate every injective map by permuting rows and reading the first `cols`.
        std::vector<std::size_t> perm(rows);
        std::iota(perm.begin(), perm.end(), 0);
        double best = std::numeric_limits<double>::infinity();
        do {
            double s = 0.0;
            for (std::size_t i = 0; i < cols; ++i) s += cost[perm[i] * cols + i];
            best = std::min(best, s);
        } while (std::next_permutation(perm.begin(), perm.end()));

        const auto m = hungarian_match(cost, rows, cols);
        double s = 0.0;
        std::vector<bool> seen(rows, false);
        for (std::size_t i = 0; i < cols; ++i) {
            ASSERT_LT(m.gt_to_pred[i], rows);
            ASSERT_FALSE(seen[m.gt_to_pred[i]]);
            seen[m.gt_to_pred[i]] = true;
            s += cost[m.gt_to_pred[i] * cols + i];
        }
        EXPECT_NEAR(s, best, 1e-9) << "trial " << trial;
        EXPECT_NEAR(m.total_cost, best, 1e-9);
    }
}

// --- multi-class loss ------------------------------------------------------------------

TEST(MulticlassLoss, UniformClassesWithoutSegmentsIsLogOfClassCount) {
    MaskDecoderOutput out;
    out.mask_logits = random_tensor({2, 3, 4, 4}, 15);
    out.class_logits = Tensor::zeros({2, 3, 4});
    const std::vector<std::size_t> pts{0, 3, 7};
    LossWeights w;
    w.cls = 1.0;
    const Tensor loss = multiclass_loss(out, {{}, {}}, {Matching{}, Matching{}}, pts, w);
    EXPECT_NEAR(loss.item(), std::log(4.0), 1e-14);
}

TEST(MulticlassLoss, PerfectPredictionIsNearZero) {
    const std::size_t hw = 16;
    MaskDecoderOutput out;
    const auto gt_mask = random_binary(hw, 16);
    std::vector<double> logits(2 * hw), classes(2 * 3, 0.0);
    for (std::size_t p = 0; p < hw; ++p) {
        logits[p] = gt_mask[p] > 0.5 ? 50.0 : -50.0;
        logits[hw + p] = -50.0;
    }
    classes[1] = 60.0; // slot 0 -> category 1
    classes[5] = 60.0; // slot 1 -> no object
    out.mask_logits = Tensor::from({1, 2, 4, 4}, logits);
    out.class_logits = Tensor::from({1, 2, 3}, classes);
    std::vector<std::size_t> pts(hw);
    std::iota(pts.begin(), pts.end(), 0);
    const Tensor loss = multiclass_loss(out, {{{1, gt_mask}}}, {Matching{{0}, 0.0}}, pts, {});
    EXPECT_LT(loss.item(), 1e-12);
}

TEST(MulticlassLoss, TwoSlotOracleAndMoeTerm) {
    const std::size_t hw = 9;
    const auto out = make_output(1, 2, 3, 3, 17);
    const auto gt_mask = random_binary(hw, 18);
    const std::vector<std::size_t> pts{0, 2, 4, 8};
    const LossWeights w{1.5, 2.0, 0.5, 5.0, 5.0};
    const Tensor moe = Tensor::scalar(0.3);
    const Tensor loss = multiclass_loss(out, {{{0, gt_mask}}}, {Matching{{1}, 0.0}}, pts, w, moe);

    auto ce = [&](std::size_t slot, std::size_t target) {
        std::vector<double> row(3);
        for (std::size_t c = 0; c < 3; ++c) row[c] = out.class_logits.at(slot * 3 + c);
        return -std::log(softmax_ref(row)[target]);
    };
    const double cls = 0.5 * (ce(0, 2) + ce(1, 0));
    double bce = 0.0, inter = 0.0, psum = 0.0, tsum = 0.0;
    for (std::size_t p : pts) {
        const double x = out.mask_logits.at(hw + p), t = gt_mask[p];
        bce += bce_ref(x, t) / pts.size();
        inter += sigmoid(x) * t;
        psum += sigmoid(x);
        tsum += t;
    }
    const double dice = 1.0 - (2.0 * inter + 1.0) / (psum + tsum + 1.0);
    const double expected = 2.0 * cls + 1.5 * (5.0 * bce + 5.0 * dice) + 0.5 * 0.3;
    EXPECT_NEAR(loss.item(), expected, 1e-12);
}

TEST(MulticlassLoss, InvariantToSlotPermutation) {
    const std::size_t n = 4, hw = 16, k1 = 4;
    const auto out = make_output(1, n, 4, k1, 19);
    const std::vector<GtSegment> gt{{0, random_binary(hw, 20)}, {2, random_binary(hw, 21)}};
    const std::vector<std::size_t> pts{1, 5, 9, 12, 15};
    const Matching m{{3, 1}, 0.0};
    const double base = multiclass_loss(out, {gt}, {m}, pts, {}).item();

    const std::vector<std::size_t> perm{2, 0, 3, 1}; // new slot s holds old slot perm[s]
    std::vector<double> masks(n * hw), classes(n * k1);
    for (std::size_t s = 0; s < n; ++s) {
        for (std::size_t p = 0; p < hw; ++p) masks[s * hw + p] = out.mask_logits.at(perm[s] * hw + p);
        for (std::size_t c = 0; c < k1; ++c) classes[s * k1 + c] = out.class_logits.at(perm[s] * k1 + c);
    }
    MaskDecoderOutput shuffled{Tensor::from({1, n, 4, 4}, masks), Tensor::from({1, n, k1}, classes)};
    const Matching pm{{2, 3}, 0.0};
    EXPECT_NEAR(multiclass_loss(shuffled, {gt}, {pm}, pts, {}).item(), base, 1e-12);
}

TEST(MulticlassLoss, NeedsClassHead) {
    MaskDecoderOutput out;
    out.mask_logits = random_tensor({1, 1, 2, 2}, 22);
    const std::vector<std::size_t> pts{0};
    EXPECT_THROW(multiclass_loss(out, {{}}, {Matching{}}, pts, {}), ConfigError);
}

TEST(MulticlassLoss, GradientMatchesFiniteDifferences) {
    const auto out = make_output(2, 3, 3, 3, 23);
    const std::vector<std::vector<GtSegment>> gt{{{1, random_binary(9, 24)}}, {{0, random_binary(9, 25)}, {1, random_binary(9, 26)}}};
    const std::vector<Matching> m{Matching{{2}, 0.0}, Matching{{0, 1}, 0.0}};
    const std::vector<std::size_t> pts{0, 1, 4, 6, 8};
    const auto r = finite_diff_check([&] { return multiclass_loss(out, gt, m, pts, {}); },
                                     {out.mask_logits, out.class_logits});
    EXPECT_LT(r.max_rel_err, 1e-5);
}

// --- structure loss ---------------------------------------------------------------------

namespace {

std::vector<double> weights_oracle(const std::vector<double>& gt, std::size_t h, std::size_t w) {
    std::vector<double> out(h * w);
    for (long y = 0; y < static_cast<long>(h); ++y)
        for (long x = 0; x < static_cast<long>(w); ++x) {
            double s = 0.0, count = 0.0;
            for (long dy = -7; dy <= 7; ++dy)
                for (long dx = -7; dx <= 7; ++dx) {
                    const long yy = y + dy, xx = x + dx;
                    if (yy < 0 || xx < 0 || yy >= static_cast<long>(h) || xx >= static_cast<long>(w)) continue;
                    s += gt[yy * w + xx];
                    count += 1.0;
                }
            out[y * w + x] = 1.0 + 5.0 * std::abs(s / count - gt[y * w + x]);
        }
    return out;
}

} // namespace

TEST(StructureLoss, ConstantTargetsGiveUnitWeights) {
    for (double v : {0.0, 1.0}) {
        const std::vector<double> gt(20 * 17, v);
        for (double w : structure_weights(gt, 20, 17)) EXPECT_DOUBLE_EQ(w, 1.0);
    }
}

TEST(StructureLoss, WeightsMatchDirectWindowOracle) {
    const std::size_t h = 23, w = 19;
    const auto gt = random_binary(h * w, 27, 0.3);
    const auto got = structure_weights(gt, h, w);
    const auto ref = weights_oracle(gt, h, w);
    for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], ref[i], 1e-12);
}

TEST(StructureLoss, ValueMatchesOracle) {
    const std::size_t bs = 2, h = 18, w = 18, hw = h * w;
    const Tensor logits = random_tensor({bs, 1, h, w}, 28, 2.0);
    const auto gt = random_binary(bs * hw, 29, 0.4);
    double total = 0.0;
    for (std::size_t b = 0; b < bs; ++b) {
        const std::vector<double> g(gt.begin() + b * hw, gt.begin() + (b + 1) * hw);
        const auto wt = weights_oracle(g, h, w);
        double wsum = 0.0, wbce = 0.0, inter = 0.0, uni = 0.0;
        for (std::size_t i = 0; i < hw; ++i) {
            const double x = logits.at(b * hw + i), p = sigmoid(x);
            wsum += wt[i];
            wbce += wt[i] * bce_ref(x, g[i]);
            inter += wt[i] * p * g[i];
            uni += wt[i] * (p + g[i]);
        }
        total += wbce / wsum + 1.0 - (inter + 1.0) / (uni - inter + 1.0);
    }
    EXPECT_NEAR(structure_loss(logits, gt).item(), total / bs, 1e-12);
}

TEST(StructureLoss, SaturatedCorrectLogitsGiveZero) {
    const std::size_t hw = 16 * 16;
    const auto gt = random_binary(hw, 30);
    std::vector<double> x(hw);
    for (std::size_t i = 0; i < hw; ++i) x[i] = gt[i] > 0.5 ? 40.0 : -40.0;
    EXPECT_LT(structure_loss(Tensor::from({1, 1, 16, 16}, x), gt).item(), 1e-12);
}

TEST(StructureLoss, GradientMatchesFiniteDifferences) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const Tensor logits = random_tensor({2, 1, 9, 9}, seed + 31);
        const auto gt = random_binary(2 * 81, seed + 32, 0.4);
        const auto r = finite_diff_check([&] { return structure_loss(logits, gt); }, {logits});
        EXPECT_LT(r.max_rel_err, 1e-5) << "seed " << seed;
    }
}

TEST(StructureLoss, RejectsNonBinaryTargetsAndBadShapes) {
    std::vector<double> gt(16, 0.0);
    gt[3] = 0.5;
    EXPECT_THROW(structure_loss(Tensor::zeros({1, 1, 4, 4}), gt), DataError);
    EXPECT_THROW(structure_loss(Tensor::zeros({1, 2, 4, 2}), std::vector<double>(16, 0.0)), DimensionError);
}

// --- inference -------------------------------------------------------------------------

TEST(SemanticInference, PicksConfidentSlotCategory) {
    MaskDecoderOutput out;
    std::vector<double> masks(2 * 4);
    for (std::size_t p = 0; p < 4; ++p) {
        masks[p] = p < 2 ? 20.0 : -20.0;     // slot 0 covers the top row
        masks[4 + p] = p < 2 ? -20.0 : 20.0; // slot 1 covers the bottom row
    }
    out.mask_logits = Tensor::from({1, 2, 2, 2}, masks);
    out.class_logits = Tensor::from({1, 2, 4}, {0, 0, 9, 0, 0, 9, 0, 0});
    EXPECT_EQ(semantic_inference(out), (std::vector<std::size_t>{2, 2, 1, 1}));
}

TEST(SemanticInference, NoObjectConfidenceDoesNotWin) {
    MaskDecoderOutput out;
    out.mask_logits = Tensor::full({1, 1, 2, 2}, 5.0);
    out.class_logits = Tensor::from({1, 1, 3}, {0.0, 1.0, 30.0});
    EXPECT_EQ(semantic_inference(out), (std::vector<std::size_t>{1, 1, 1, 1}));
}

TEST(SemanticInference, InvariantToClassLogitShift) {
    const auto out = make_output(2, 3, 5, 4, 33);
    const auto labels = semantic_inference(out);
    std::vector<double> shifted(out.class_logits.data().begin(), out.class_logits.data().end());
    for (std::size_t i = 0; i < shifted.size(); ++i) shifted[i] += static_cast<double>(i / 4) * 3.0;
    MaskDecoderOutput s{out.mask_logits, Tensor::from(out.class_logits.shape(), shifted)};
    EXPECT_EQ(semantic_inference(s), labels);
}

// --- metrics -----------------------------------------------------------------------------

TEST(Metrics, DiceIouIdentityOnRandomPairs) {
    for (std::uint64_t seed = 0; seed < 1000; ++seed) {
        const auto pred = random_binary(50, 2 * seed + 100, 0.1 + 0.8 * (seed % 7) / 7.0);
        const auto gt = random_binary(50, 2 * seed + 101, 0.3);
        const auto s = binary_scores(pred, gt);
        EXPECT_NEAR(s.dice, 2.0 * s.iou / (1.0 + s.iou), 1e-12);
        EXPECT_GE(s.iou, 0.0);
        EXPECT_LE(s.dice, 1.0);
    }
}

TEST(Metrics, ClosedFormCases) {
    const std::vector<double> gt{1, 1, 0, 0, 0, 0};
    auto s = binary_scores(gt, gt);
    EXPECT_EQ(s.iou, 1.0);
    EXPECT_EQ(s.dice, 1.0);
    EXPECT_EQ(s.acc, 1.0);
    EXPECT_EQ(s.mae, 0.0);
    EXPECT_EQ(s.ber, 0.0);

    const std::vector<double> disjoint{0, 0, 1, 1, 0, 0};
    s = binary_scores(disjoint, gt);
    EXPECT_EQ(s.iou, 0.0);
    EXPECT_EQ(s.dice, 0.0);
    EXPECT_DOUBLE_EQ(s.ber, 50.0 * (1.0 + 0.5));

    const std::vector<double> superset{1, 1, 1, 1, 0, 0};
    s = binary_scores(superset, gt);
    EXPECT_DOUBLE_EQ(s.iou, 0.5);
    EXPECT_DOUBLE_EQ(s.dice, 2.0 / 3.0);
    EXPECT_DOUBLE_EQ(s.acc, 4.0 / 6.0);

    const std::vector<double> empty(6, 0.0);
    s = binary_scores(empty, empty);
    EXPECT_EQ(s.iou, 1.0);
    EXPECT_EQ(s.dice, 1.0);
    EXPECT_EQ(s.ber, 0.0);

    const std::vector<double> soft{0.75, 0.25};
    const std::vector<double> t{1, 0};
    EXPECT_DOUBLE_EQ(binary_scores(soft, t).mae, 0.25);
    EXPECT_THROW(binary_scores(soft, gt), DimensionError);
}

TEST(Metrics, DatasetLevelMeanIou) {
    MetricAccumulator acc;
    const std::vector<std::size_t> p1{0, 0, 1, 1}, g1{0, 1, 1, 1};
    const std::vector<std::size_t> p2{2, 2, 0, 0}, g2{2, 0, 0, 0};
    acc.add_labels(p1, g1, 4);
    acc.add_labels(p2, g2, 4);
    // class 0: I = 1 + 2, U = 2 + 3; class 1: I = 2, U = 3; class 2: I = 1, U = 2; class 3 absent.
    const auto r = acc.result();
    EXPECT_DOUBLE_EQ(r.at("miou"), (3.0 / 5.0 + 2.0 / 3.0 + 1.0 / 2.0) / 3.0);
    EXPECT_DOUBLE_EQ(r.at("acc"), 6.0 / 8.0);
}

TEST(Metrics, BinaryAccumulatorAveragesImages) {
    MetricAccumulator acc;
    const std::vector<double> gt{1, 0}, good{0.9, 0.1}, bad{0.1, 0.9};
    acc.add_binary(good, gt);
    acc.add_binary(bad, gt);
    const auto r = acc.result();
    EXPECT_DOUBLE_EQ(r.at("iou"), 0.5);
    EXPECT_DOUBLE_EQ(r.at("ber"), 50.0);
    EXPECT_DOUBLE_EQ(r.at("mae"), 0.5);
}

TEST(Metrics, CsvRowsRoundTripExactly) {
    std::ostringstream os;
    write_metrics_header(os);
    const double v = 0.1 + 0.2;
    write_metric_row(os, {"run-a", 3, "val", "iou", v});
    std::istringstream is(os.str());
    std::string header, row;
    std::getline(is, header);
    std::getline(is, row);
    EXPECT_EQ(header, "run_id,epoch,split,metric,value");
    EXPECT_EQ(row.substr(0, row.rfind(',') + 1), "run-a,3,val,iou,");
    EXPECT_EQ(std::stod(row.substr(row.rfind(',') + 1)), v);
}
