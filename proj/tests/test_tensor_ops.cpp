// Copyright (c) 2026, Conv-LoRA Desk Authors
// SPDX-License-Identifier: Apache-2.0
//

#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <numbers>

#include "convlora/gradcheck.hpp"
#include "convlora/ops.hpp"
#include "test_util.hpp"

using namespace convlora;
using convlora::testing::bitwise_equal;
using convlora::testing::max_abs_diff;
using convlora::testing::probe;
using convlora::testing::random_tensor;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

Tensor naive_matmul(const Tensor& a, const Tensor& b) {
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<double> out(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j)
            for (std::size_t p = 0; p < k; ++p) out[i * n + j] += a.at(i * k + p) * b.at(p * n + j);
    return Tensor::from({m, n}, out);
}

Tensor direct_conv(const Tensor& x, const Tensor& k, const Tensor& bias) {
    const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3), O = k.dim(0);
    std::vector<double> out(B * O * H * W, 0.0);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t o = 0; o < O; ++o)
            for (std::size_t y = 0; y < H; ++y)
                for (std::size_t xx = 0; xx < W; ++xx) {
                    double s = bias.at(o);
                    for (std::size_t c = 0; c < C; ++c)
                        for (int dy = 0; dy < 3; ++dy)
                            for (int dx = 0; dx < 3; ++dx) {
                                const long sy = static_cast<long>(y) + dy - 1, sx = static_cast<long>(xx) + dx - 1;
                                if (sy < 0 || sx < 0 || sy >= static_cast<long>(H) || sx >= static_cast<long>(W)) continue;
                                s += k.at(((o * C + c) * 3 + dy) * 3 + dx) * x.at(((b * C + c) * H + sy) * W + sx);
                            }
                    out[((b * O + o) * H + y) * W + xx] = s;
                }
    return Tensor::from({B, O, H, W}, out);
}

Tensor delta_kernel(std::size_t channels) {
    Tensor k = Tensor::zeros({channels, channels, 3, 3});
    for (std::size_t c = 0; c < channels; ++c) k.mutable_data()[((c * channels + c) * 3 + 1) * 3 + 1] = 1.0;
    return k;
}

} // namespace

// --- matmul --------------------------------------------------------------------

TEST(Matmul, IdentityLeavesOperandUnchanged) {
    Tensor eye = Tensor::zeros({3, 3});
    for (std::size_t i = 0; i < 3; ++i) eye.mutable_data()[i * 4] = 1.0;
    const Tensor x = random_tensor({3, 4}, 1);
    EXPECT_TRUE(bitwise_equal(ops::matmul(eye, x), x));
}

TEST(Matmul, ZerosAnnihilate) {
    const Tensor y = ops::matmul(Tensor::zeros({2, 3}), random_tensor({3, 5}, 2));
    for (double v : y.data()) EXPECT_EQ(v, 0.0);
    EXPECT_EQ(y.shape(), (Shape{2, 5}));
}

TEST(Matmul, MatchesTripleLoopOracle) {
    const Tensor a = random_tensor({2, 3}, 3), b = random_tensor({3, 2}, 4);
    EXPECT_LT(max_abs_diff(ops::matmul(a, b), naive_matmul(a, b)), 1e-12);
}

TEST(Matmul, ShapeMismatchIsDimensionError) {
    EXPECT_THROW(ops::matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), DimensionError);
}

// --- conv3x3 -------------------------------------------------------------------

TEST(Conv3x3, DeltaKernelIsIdentity) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const Tensor x = random_tensor({2, 3, 5, 4}, seed);
        EXPECT_TRUE(bitwise_equal(ops::conv3x3(x, delta_kernel(3), Tensor::zeros({3})), x));
    }
}

TEST(Conv3x3, TapCountingUnderZeroPadding) {
    const Tensor y = ops::conv3x3(Tensor::full({1, 1, 4, 4}, 1.0), Tensor::full({1, 1, 3, 3}, 1.0), Tensor::zeros({1}));
    const double expected[16] = {4, 6, 6, 4, 6, 9, 9, 6, 6, 9, 9, 6, 4, 6, 6, 4};
    for (std::size_t i = 0; i < 16; ++i) EXPECT_EQ(y.at(i), expected[i]) << i;
}

TEST(Conv3x3, MatchesDirectOracle) {
    const Tensor x = random_tensor({2, 3, 5, 6}, 5), k = random_tensor({4, 3, 3, 3}, 6), b = random_tensor({4}, 7);
    EXPECT_LT(max_abs_diff(ops::conv3x3(x, k, b), direct_conv(x, k, b)), 1e-12);
}

TEST(Conv3x3, ChannelMismatchIsDimensionError) {
    EXPECT_THROW(ops::conv3x3(Tensor::zeros({1, 2, 4, 4}), Tensor::zeros({1, 3, 3, 3}), Tensor::zeros({1})),
                 DimensionError);
}

// --- interpolation ----------------------------------------------------------------

TEST(Interpolate, UnitScaleIsExactIdentity) {
    const Tensor x = random_tensor({2, 3, 7, 5}, 8);
    EXPECT_TRUE(bitwise_equal(ops::interpolate_bilinear(x, 1.0), x));
}

TEST(Interpolate, ConstantsArePreserved) {
    const Tensor x = Tensor::full({1, 2, 5, 3}, 0.7318);
    for (double s : {0.5, 1.5, 2.0, 3.7, 8.0}) {
        const Tensor y = ops::interpolate_bilinear(x, s);
        for (double v : y.data()) EXPECT_EQ(v, 0.7318) << "scale " << s;
    }
}

TEST(Interpolate, RampUpscaleMatchesClosedForm) {
    // value(y, x) = 2y + x; bilinear reproduces affine functions inside the
    // clamped source square.
    const Tensor x = Tensor::from({1, 1, 2, 2}, {0, 1, 2, 3});
    const Tensor y = ops::interpolate_bilinear(x, 2.0);
    ASSERT_EQ(y.shape(), (Shape{1, 1, 4, 4}));
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 4; ++j) {
            const double sy = std::clamp(static_cast<double>(i) / 2.0 - 0.25, 0.0, 1.0);
            const double sx = std::clamp(static_cast<double>(j) / 2.0 - 0.25, 0.0, 1.0);
            EXPECT_NEAR(y.at(i * 4 + j), 2.0 * sy + sx, 1e-12);
        }
}

TEST(Interpolate, CeilExtentsRoundTripIntegerScale) {
    const Tensor x = random_tensor({1, 1, 5, 3}, 9);
    const Tensor up = ops::interpolate_bilinear(x, 3.0);
    EXPECT_EQ(up.shape(), (Shape{1, 1, 15, 9}));
    EXPECT_EQ(ops::interpolate_bilinear(up, 1.0 / 3.0).shape(), x.shape());
    EXPECT_EQ(ops::interpolate_bilinear(x, 1.5).shape(), (Shape{1, 1, 8, 5}));
}

TEST(Interpolate, NonPositiveScaleIsArgumentError) {
    EXPECT_THROW(ops::interpolate_bilinear(Tensor::zeros({1, 1, 2, 2}), 0.0), ArgumentError);
    EXPECT_THROW(ops::interpolate_bilinear(Tensor::zeros({1, 1, 2, 2}), -1.0), ArgumentError);
}

// --- softmax ----------------------------------------------------------------------

TEST(Softmax, SingleFiniteEntryTakesAllMass) {
    const Tensor y = ops::softmax_axis(Tensor::from({3}, {3.0, -kInf, -kInf}), 0);
    EXPECT_EQ(y.at(0), 1.0);
    EXPECT_EQ(y.at(1), 0.0);
    EXPECT_EQ(y.at(2), 0.0);
}

TEST(Softmax, UniformInputGivesUniformOutput) {
    const Tensor y = ops::softmax_axis(Tensor::full({1, 5}, 2.5), 1);
    for (double v : y.data()) EXPECT_NEAR(v, 0.2, 1e-15);
}

TEST(Softmax, MatchesExpNormalizeOracle) {
    const Tensor y = ops::softmax_axis(Tensor::from({3}, {1, 2, 3}), 0);
    const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
    for (int i = 0; i < 3; ++i) EXPECT_NEAR(y.at(i), std::exp(i + 1.0) / z, 1e-12);
}

TEST(Softmax, AllNegInfIsDegenerate) {
    EXPECT_THROW(ops::softmax_axis(Tensor::from({1, 2}, {-kInf, -kInf}), 1), DegenerateGateError);
}

TEST(Softmax, RowsSumToOneAndShiftInvariant) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const Tensor x = random_tensor({3, 7, 4}, seed, 3.0);
        for (std::size_t axis = 0; axis < 3; ++axis) {
            const Tensor y = ops::softmax_axis(x, axis);
            const Tensor shifted = ops::softmax_axis(ops::add(x, Tensor::full(x.shape(), 11.25)), axis);
            EXPECT_LT(max_abs_diff(y, shifted), 1e-12);
        }
        const Tensor y = ops::softmax_axis(x, 1);
        for (std::size_t a = 0; a < 3; ++a)
            for (std::size_t c = 0; c < 4; ++c) {
                double s = 0.0;
                for (std::size_t j = 0; j < 7; ++j) s += y.at((a * 7 + j) * 4 + c);
                EXPECT_NEAR(s, 1.0, 1e-12);
            }
    }
}

// --- activations -----------------------------------------------------------------

TEST(Activations, ClosedForms) {
    EXPECT_DOUBLE_EQ(ops::softplus(Tensor::scalar(0.0)).item(), std::numbers::ln2);
    EXPECT_EQ(ops::sigmoid(Tensor::scalar(0.0)).item(), 0.5);
    EXPECT_EQ(ops::gelu(Tensor::scalar(0.0)).item(), 0.0);
}

TEST(Activations, SoftplusExtremesMatchExtendedPrecision) {
    for (double x : {50.0, -50.0}) {
        const long double ref = std::log1p(std::exp(static_cast<long double>(x)));
        const double got = ops::softplus(Tensor::scalar(x)).item();
        EXPECT_TRUE(std::isfinite(got));
        EXPECT_LT(std::abs(static_cast<long double>(got) - ref) / ref, 1e-10L) << x;
    }
}

// --- pooling -------------------------------------------------------------------

TEST(GlobalAvgPool, ConstantAndArithmeticMean) {
    EXPECT_EQ(ops::global_avg_pool(Tensor::full({1, 1, 3, 3}, 4.5)).item(), 4.5);
    EXPECT_EQ(ops::global_avg_pool(Tensor::from({1, 1, 2, 2}, {1, 2, 3, 4})).item(), 2.5);
}

TEST(GlobalAvgPool, MatchesSummationOracle) {
    const Tensor x = random_tensor({2, 3, 4, 5}, 10);
    const Tensor y = ops::global_avg_pool(x);
    ASSERT_EQ(y.shape(), (Shape{2, 3}));
    for (std::size_t i = 0; i < 6; ++i) {
        double s = 0.0;
        for (std::size_t p = 0; p < 20; ++p) s += x.at(i * 20 + p);
        EXPECT_NEAR(y.at(i), s / 20.0, 1e-12);
    }
}

// --- backward ------------------------------------------------------------------

TEST(Backward, SumGivesOnes) {
    Tensor x = random_tensor({3, 4}, 11);
    x.set_requires_grad(true);
    Tape tape;
    {
        TapeScope scope(tape);
        backward(tape, ops::sum(x));
    }
    for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, NonScalarLossIsArgumentError) {
    Tape tape;
    EXPECT_THROW(backward(tape, Tensor::zeros({2})), ArgumentError);
}

TEST(Backward, FanOutAccumulatesLikeScaledSingleUse) {
    for (std::size_t fan = 1; fan <= 4; ++fan) {
        Tensor x = random_tensor({2, 3}, 12);
        Tensor w = random_tensor({3, 2}, 13);
        x.set_requires_grad(true);
        Tape tape;
        {
            TapeScope scope(tape);
            Tensor acc;
            for (std::size_t i = 0; i < fan; ++i) {
                const Tensor y = probe(ops::matmul(x, w));
                acc = acc.defined() ? ops::add(acc, y) : y;
            }
            backward(tape, acc);
        }
        Tensor x2 = x.detach();
        x2.set_requires_grad(true);
        Tape tape2;
        {
            TapeScope scope(tape2);
            backward(tape2, ops::scale(probe(ops::matmul(x2, w)), static_cast<double>(fan)));
        }
        for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(x.grad()[i], x2.grad()[i], 1e-12);
    }
}

TEST(Backward, MatmulMatchesFiniteDifferences) {
    Tensor a = random_tensor({3, 4}, 14), b = random_tensor({4, 2}, 15);
    const auto r = finite_diff_check([&] { return probe(ops::matmul(a, b)); }, {a, b});
    EXPECT_LT(r.max_rel_err, 1e-4);
}

TEST(Backward, NumericErrorOnNonFiniteOutput) {
    EXPECT_THROW(ops::scale(Tensor::scalar(1e308), 10.0), NumericError);
}

// --- finite_diff_check ----------------------------------------------------------

TEST(FiniteDiff, QuadraticClosedForm) {
    Tensor x = Tensor::full({5}, 1.0);
    const auto r = finite_diff_check([&] { return ops::sum(ops::mul(x, x)); }, {x});
    EXPECT_LT(r.max_rel_err, 1e-6);
    EXPECT_NEAR(r.max_abs_analytic, 2.0, 1e-12);
}

TEST(FiniteDiff, ConstantFunctionHasZeroGradients) {
    Tensor x = random_tensor({4}, 16);
    const auto r = finite_diff_check([&] { return Tensor::scalar(3.0); }, {x});
    EXPECT_EQ(r.max_abs_analytic, 0.0);
    EXPECT_LT(r.max_abs_numeric, 1e-8);
}

TEST(FiniteDiff, NonDeterministicFunctionIsRejected) {
    Tensor x = random_tensor({2}, 17);
    int calls = 0;
    EXPECT_THROW(finite_diff_check([&] { return ops::scale(ops::sum(x), 1.0 + ++calls); }, {x}), OracleInvalidError);
}

// --- gradient property sweep: every differentiable op, 20 seeds --------------------

class OpGradients : public ::testing::TestWithParam<std::uint64_t> {};

TEST_P(OpGradients, MatchCentralDifferences) {
    const std::uint64_t s = GetParam();
    Rng shape_rng(s);
    auto ext = [&](std::size_t lo, std::size_t hi) {
        return std::uniform_int_distribution<std::size_t>(lo, hi)(shape_rng);
    };
    const std::size_t B = ext(1, 2), C = ext(1, 3), H = ext(2, 5), W = ext(2, 5), O = ext(1, 3);
    // The probe is centred on the unperturbed output so that rounding in the
    // scalar reduction scales with the perturbation, not with |y|.
    auto check = [&](const char* name, const std::function<Tensor()>& op, std::vector<Tensor> in) {
        const Tensor ref = op().detach();
        const Tensor w = random_tensor(ref.shape(), 99);
        const auto f = [&] { return ops::sum(ops::mul(ops::sub(op(), ref), w)); };
        const auto r = finite_diff_check(f, std::move(in));
        EXPECT_LT(r.max_rel_err, 1e-4) << name << " seed " << s << " analytic " << r.worst_analytic
                                        << " numeric " << r.worst_numeric;
    };
    Tensor x = random_tensor({B, C, H, W}, s * 31 + 1);
    Tensor k = random_tensor({O, C, 3, 3}, s * 31 + 2);
    Tensor bias = random_tensor({O}, s * 31 + 3);
    check("conv3x3", [&] { return ops::conv3x3(x, k, bias); }, {x, k, bias});
    const double sc = 0.5 + 0.25 * static_cast<double>(ext(0, 10));
    check("interpolate", [&] { return ops::interpolate_bilinear(x, sc); }, {x});
    check("resize", [&] { return ops::resize_bilinear(x, H + 1, W + 2); }, {x});
    check("global_avg_pool", [&] { return ops::global_avg_pool(x); }, {x});
    Tensor wc = random_tensor({O, C}, s * 31 + 4);
    check("channel_linear", [&] { return ops::channel_linear(x, wc); }, {x, wc});

    Tensor a = random_tensor({H, W}, s * 31 + 5), b = random_tensor({W, O}, s * 31 + 6);
    check("matmul", [&] { return ops::matmul(a, b); }, {a, b});
    Tensor ba = random_tensor({B, H, W}, s * 31 + 7), bb = random_tensor({B, W, O}, s * 31 + 8);
    Tensor bt = random_tensor({B, O, W}, s * 31 + 9);
    check("bmm", [&] { return ops::bmm(ba, bb); }, {ba, bb});
    check("bmm_nt", [&] { return ops::bmm_nt(ba, bt); }, {ba, bt});
    Tensor lw = random_tensor({O, W}, s * 31 + 10), lb = random_tensor({O}, s * 31 + 11);
    check("linear", [&] { return ops::linear(ba, lw, lb); }, {ba, lw, lb});

    Tensor v = random_tensor({H, W}, s * 31 + 12, 2.0);
    check("softmax", [&] { return ops::softmax_axis(v, 1); }, {v});
    check("softmax_axis0", [&] { return ops::softmax_axis(v, 0); }, {v});
    check("softplus", [&] { return ops::softplus(v); }, {v});
    check("sigmoid", [&] { return ops::sigmoid(v); }, {v});
    check("gelu", [&] { return ops::gelu(v); }, {v});
    // Two-wide rows normalise to +-1 regardless of input, leaving gradients at
    // the eps-regularisation scale, below what differences can resolve.
    const std::size_t wn = ext(3, 6);
    Tensor vn = random_tensor({H, wn}, s * 31 + 18, 2.0);
    Tensor g = random_tensor({wn}, s * 31 + 13), be = random_tensor({wn}, s * 31 + 14);
    check("layer_norm", [&] { return ops::layer_norm(vn, g, be); }, {vn, g, be});
    check("permute", [&] { return ops::permute(x, {2, 0, 3, 1}); }, {x});
    check("sum_rows", [&] { return ops::sum_rows(v); }, {v});
    Tensor pos = rand_uniform({W}, shape_rng, 0.5, 2.0);
    check("cv_squared", [&] { return ops::cv_squared(pos); }, {pos});
    Tensor sel = random_tensor({3}, s * 31 + 15);
    check("scale_by_element", [&] { return ops::scale_by_element(x, sel, 1); }, {x, sel});
    std::vector<double> t(v.numel());
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = (i * 7 + s) % 3 == 0 ? 1.0 : 0.0;
    check("bce", [&] { return ops::bce_with_logits(v, t); }, {v});
    check("dice", [&] { return ops::dice_loss(v, t); }, {v});
    std::vector<std::size_t> cls(H);
    for (std::size_t i = 0; i < H; ++i) cls[i] = (i + s) % W;
    check("cross_entropy", [&] { return ops::cross_entropy(v, cls); }, {v});

    // Smooth top-k inclusion probability with a fixed noise draw.
    const std::size_t n = ext(3, 6);
    Tensor clean = random_tensor({B, n}, s * 31 + 16);
    Tensor sd = rand_uniform({B, n}, shape_rng, 0.5, 1.5);
    const Tensor noise = random_tensor({B, n}, s * 31 + 17);
    check("topk_inclusion", [&] { return ops::topk_inclusion_probability(clean, sd, noise, 2); }, {clean, sd});
}

INSTANTIATE_TEST_SUITE_P(Seeds, OpGradients, ::testing::Range<std::uint64_t>(0, 20));
