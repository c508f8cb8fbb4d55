// Copyright (c) 2026, Conv-LoRA Desk Authors
// SPDX-License-Identifier: Apache-2.0
//

#include "convlora/ops.hpp"

#include <algorithm>
#include <cmath>
#include <fmt/format.h>
#include <limits>
#include <numbers>
#include <numeric>

namespace convlora::ops {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

bool recording(std::initializer_list<const Tensor*> inputs) {
    if (Tape::active() == nullptr) return false;
    for (const Tensor* t : inputs) {
        if (t->defined() && t->requires_grad()) return true;
    }
    return false;
}

bool recording(const std::vector<Tensor>& inputs) {
    if (Tape::active() == nullptr) return false;
    return std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
}

void check_finite(const Tensor& out, const char* op) {
    for (double v : out.data()) {
        if (!std::isfinite(v)) {
            throw NumericError(fmt::format("{}: non-finite value in output of shape {}", op, shape_str(out.shape())));
        }
    }
}

void record(const char* op, std::vector<Tensor> inputs, Tensor& out, std::function<void()> fn) {
    out.set_requires_grad(true);
    Tape::active()->record({op, std::move(inputs), out, std::move(fn)});
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
    if (t.rank() != rank) {
        throw DimensionError(fmt::format("{}: expected rank {}, got shape {}", op, rank, shape_str(t.shape())));
    }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(fmt::format("{}: shape mismatch {} vs {}", op, shape_str(a.shape()), shape_str(b.shape())));
    }
}

// Inner kernels. Four partial sums keep the dot product vectorisable while
// fixing the summation order, so results stay bitwise reproducible.
inline double dot(const double* __restrict a, const double* __restrict b, std::size_t n) {
    double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
    }
    for (; i < n; ++i) s0 += a[i] * b[i];
    return (s0 + s1) + (s2 + s3);
}

inline void axpy(double alpha, const double* __restrict x, double* __restrict y, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

// y += sum_q alpha[q] * x_q for four source rows spaced `stride` apart.
inline void axpy4(const double* alpha, const double* __restrict x, std::size_t stride, double* __restrict y,
                  std::size_t n) {
    const double a0 = alpha[0], a1 = alpha[1], a2 = alpha[2], a3 = alpha[3];
    const double* x0 = x;
    const double* x1 = x + stride;
    const double* x2 = x + 2 * stride;
    const double* x3 = x + 3 * stride;
    for (std::size_t i = 0; i < n; ++i) y[i] += ((a0 * x0[i] + a1 * x1[i]) + (a2 * x2[i] + a3 * x3[i]));
}

// Gradient helper: accumulate only into inputs that track gradients.
template <typename F>
void if_grad(const Tensor& t, F&& fn) {
    if (t.defined() && t.requires_grad()) fn(t.mutable_grad());
}

struct AxisTable {
    std::vector<std::size_t> i0, i1;
    std::vector<double> w1;
};

AxisTable axis_table(std::size_t in, std::size_t out, double scale) {
    AxisTable t;
    t.i0.resize(out);
    t.i1.resize(out);
    t.w1.resize(out);
    const double hi = static_cast<double>(in - 1);
    for (std::size_t d = 0; d < out; ++d) {
        double src = (static_cast<double>(d) + 0.5) / scale - 0.5;
        src = std::clamp(src, 0.0, hi);
        const auto lo = static_cast<std::size_t>(std::floor(src));
        t.i0[d] = lo;
        t.i1[d] = std::min(lo + 1, in - 1);
        t.w1[d] = src - static_cast<double>(lo);
    }
    return t;
}

Tensor resample(const Tensor& x, std::size_t oh, std::size_t ow, double sh, double sw, const char* op) {
    require_rank(x, 4, op);
    const std::size_t nc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
    if (h == 0 || w == 0 || oh == 0 || ow == 0) throw ArgumentError(fmt::format("{}: empty extent", op));
    const AxisTable ty = axis_table(h, oh, sh);
    const AxisTable tx = axis_table(w, ow, sw);
    Tensor out = Tensor::zeros({x.dim(0), x.dim(1), oh, ow});
    auto xd = x.data();
    auto od = out.mutable_data();
    for (std::size_t c = 0; c < nc; ++c) {
        const double* src = xd.data() + c * h * w;
        double* dst = od.data() + c * oh * ow;
        for (std::size_t y = 0; y < oh; ++y) {
            const double* r0 = src + ty.i0[y] * w;
            const double* r1 = src + ty.i1[y] * w;
            const double wy = ty.w1[y];
            for (std::size_t xx = 0; xx < ow; ++xx) {
                const std::size_t a = tx.i0[xx], b = tx.i1[xx];
                const double wx = tx.w1[xx];
                const double top = r0[a] + wx * (r0[b] - r0[a]);
                const double bot = r1[a] + wx * (r1[b] - r1[a]);
                dst[y * ow + xx] = top + wy * (bot - top);
            }
        }
    }
    check_finite(out, op);
    if (recording({&x})) {
        record(op, {x}, out, [x, out, ty, tx, nc, h, w, oh, ow]() mutable {
            auto g = out.grad();
            auto gx = x.mutable_grad();
            for (std::size_t c = 0; c < nc; ++c) {
                const double* gs = g.data() + c * oh * ow;
                double* gd = gx.data() + c * h * w;
                for (std::size_t y = 0; y < oh; ++y) {
                    const double wy1 = ty.w1[y], wy0 = 1.0 - wy1;
                    double* r0 = gd + ty.i0[y] * w;
                    double* r1 = gd + ty.i1[y] * w;
                    for (std::size_t xx = 0; xx < ow; ++xx) {
                        const double gv = gs[y * ow + xx];
                        const double wx1 = tx.w1[xx], wx0 = 1.0 - wx1;
                        r0[tx.i0[xx]] += gv * wy0 * wx0;
                        r0[tx.i1[xx]] += gv * wy0 * wx1;
                        r1[tx.i0[xx]] += gv * wy1 * wx0;
                        r1[tx.i1[xx]] += gv * wy1 * wx1;
                    }
                }
            }
        });
    }
    return out;
}

template <typename Fwd, typename Deriv>
Tensor unary(const Tensor& x, const char* op, Fwd fwd, Deriv deriv) {
    Tensor out = Tensor::zeros(x.shape());
    auto xd = x.data();
    auto od = out.mutable_data();
    for (std::size_t i = 0; i < xd.size(); ++i) od[i] = fwd(xd[i]);
    check_finite(out, op);
    if (recording({&x})) {
        record(op, {x}, out, [x, out, deriv]() mutable {
            auto g = out.grad();
            auto xs = x.data();
            auto gx = x.mutable_grad();
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * deriv(xs[i]);
        });
    }
    return out;
}

double gelu_value(double v) { return 0.5 * v * std::erfc(-v * std::numbers::sqrt2 / 2.0); }

double gelu_deriv(double v) {
    const double cdf = 0.5 * std::erfc(-v * std::numbers::sqrt2 / 2.0);
    const double pdf = std::exp(-0.5 * v * v) / std::sqrt(2.0 * std::numbers::pi);
    return cdf + v * pdf;
}

} // namespace

double softplus_value(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

double sigmoid_value(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

// --- linear algebra -----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_rank(a, 2, "matmul");
    require_rank(b, 2, "matmul");
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k) {
        throw DimensionError(fmt::format("matmul: inner extents differ {} vs {}", shape_str(a.shape()), shape_str(b.shape())));
    }
    Tensor out = Tensor::zeros({m, n});
    auto ad = a.data(), bd = b.data();
    auto od = out.mutable_data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
            axpy(ad[i * k + p], bd.data() + p * n, od.data() + i * n, n);
        }
    check_finite(out, "matmul");
    if (recording({&a, &b})) {
        record("matmul", {a, b}, out, [a, b, out, m, k, n]() mutable {
            auto g = out.grad();
            if_grad(a, [&](std::span<double> ga) {
                auto bd = b.data();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t p = 0; p < k; ++p) ga[i * k + p] += dot(g.data() + i * n, bd.data() + p * n, n);
            });
            if_grad(b, [&](std::span<double> gb) {
                auto ad = a.data();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t p = 0; p < k; ++p) axpy(ad[i * k + p], g.data() + i * n, gb.data() + p * n, n);
            });
        });
    }
    return out;
}

Tensor bmm(const Tensor& a, const Tensor& b) {
    require_rank(a, 3, "bmm");
    require_rank(b, 3, "bmm");
    const std::size_t bs = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
    if (b.dim(0) != bs || b.dim(1) != k) {
        throw DimensionError(fmt::format("bmm: {} vs {}", shape_str(a.shape()), shape_str(b.shape())));
    }
    Tensor out = Tensor::zeros({bs, m, n});
    auto ad = a.data(), bd = b.data();
    auto od = out.mutable_data();
    for (std::size_t q = 0; q < bs; ++q) {
        const double* A = ad.data() + q * m * k;
        const double* B = bd.data() + q * k * n;
        double* O = od.data() + q * m * n;
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) axpy(A[i * k + p], B + p * n, O + i * n, n);
    }
    check_finite(out, "bmm");
    if (recording({&a, &b})) {
        record("bmm", {a, b}, out, [a, b, out, bs, m, k, n]() mutable {
            auto g = out.grad();
            if_grad(a, [&](std::span<double> ga) {
                auto bd = b.data();
                for (std::size_t q = 0; q < bs; ++q) {
                    const double* B = bd.data() + q * k * n;
                    const double* G = g.data() + q * m * n;
                    double* GA = ga.data() + q * m * k;
                    for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t p = 0; p < k; ++p) GA[i * k + p] += dot(G + i * n, B + p * n, n);
                }
            });
            if_grad(b, [&](std::span<double> gb) {
                auto ad = a.data();
                for (std::size_t q = 0; q < bs; ++q) {
                    const double* A = ad.data() + q * m * k;
                    const double* G = g.data() + q * m * n;
                    double* GB = gb.data() + q * k * n;
                    for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t p = 0; p < k; ++p) axpy(A[i * k + p], G + i * n, GB + p * n, n);
                }
            });
        });
    }
    return out;
}

Tensor bmm_nt(const Tensor& a, const Tensor& b) {
    require_rank(a, 3, "bmm_nt");
    require_rank(b, 3, "bmm_nt");
    const std::size_t bs = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(1);
    if (b.dim(0) != bs || b.dim(2) != k) {
        throw DimensionError(fmt::format("bmm_nt: {} vs {}", shape_str(a.shape()), shape_str(b.shape())));
    }
    Tensor out = Tensor::zeros({bs, m, n});
    auto ad = a.data(), bd = b.data();
    auto od = out.mutable_data();
    for (std::size_t q = 0; q < bs; ++q) {
        const double* A = ad.data() + q * m * k;
        const double* B = bd.data() + q * n * k;
        double* O = od.data() + q * m * n;
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) O[i * n + j] = dot(A + i * k, B + j * k, k);
    }
    check_finite(out, "bmm_nt");
    if (recording({&a, &b})) {
        record("bmm_nt", {a, b}, out, [a, b, out, bs, m, k, n]() mutable {
            auto g = out.grad();
            if_grad(a, [&](std::span<double> ga) {
                auto bd = b.data();
                for (std::size_t q = 0; q < bs; ++q) {
                    const double* B = bd.data() + q * n * k;
                    const double* G = g.data() + q * m * n;
                    double* GA = ga.data() + q * m * k;
                    for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t j = 0; j < n; ++j) axpy(G[i * n + j], B + j * k, GA + i * k, k);
                }
            });
            if_grad(b, [&](std::span<double> gb) {
                auto ad = a.data();
                for (std::size_t q = 0; q < bs; ++q) {
                    const double* A = ad.data() + q * m * k;
                    const double* G = g.data() + q * m * n;
                    double* GB = gb.data() + q * n * k;
                    for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t j = 0; j < n; ++j) axpy(G[i * n + j], A + i * k, GB + j * k, k);
                }
            });
        });
    }
    return out;
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    require_rank(weight, 2, "linear");
    const std::size_t out_f = weight.dim(0), in_f = weight.dim(1);
    if (x.rank() == 0 || x.shape().back() != in_f) {
        throw DimensionError(fmt::format("linear: input {} vs weight {}", shape_str(x.shape()), shape_str(weight.shape())));
    }
    if (bias.defined() && bias.numel() != out_f) {
        throw DimensionError(fmt::format("linear: bias {} for {} outputs", shape_str(bias.shape()), out_f));
    }
    const std::size_t rows = x.numel() / in_f;
    Shape os = x.shape();
    os.back() = out_f;
    Tensor out = Tensor::zeros(os);
    auto xd = x.data(), wd = weight.data();
    auto od = out.mutable_data();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = xd.data() + r * in_f;
        for (std::size_t o = 0; o < out_f; ++o) {
            od[r * out_f + o] = dot(xr, wd.data() + o * in_f, in_f);
        }
    }
    if (bias.defined()) {
        auto bd = bias.data();
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t o = 0; o < out_f; ++o) od[r * out_f + o] += bd[o];
    }
    check_finite(out, "linear");
    if (recording({&x, &weight, &bias})) {
        std::vector<Tensor> ins{x, weight};
        if (bias.defined()) ins.push_back(bias);
        record("linear", std::move(ins), out, [x, weight, bias, out, rows, in_f, out_f]() mutable {
            auto g = out.grad();
            if_grad(x, [&](std::span<double> gx) {
                auto wd = weight.data();
                for (std::size_t r = 0; r < rows; ++r) {
                    const double* gr = g.data() + r * out_f;
                    double* dst = gx.data() + r * in_f;
                    std::size_t o = 0;
                    for (; o + 4 <= out_f; o += 4) {
                        axpy4(gr + o, wd.data() + o * in_f, in_f, dst, in_f);
                    }
                    for (; o < out_f; ++o) axpy(gr[o], wd.data() + o * in_f, dst, in_f);
                }
            });
            if_grad(weight, [&](std::span<double> gw) {
                auto xd = x.data();
                std::vector<double> coef(4);
                for (std::size_t o = 0; o < out_f; ++o) {
                    double* dst = gw.data() + o * in_f;
                    std::size_t r = 0;
                    for (; r + 4 <= rows; r += 4) {
                        for (std::size_t q = 0; q < 4; ++q) coef[q] = g[(r + q) * out_f + o];
                        axpy4(coef.data(), xd.data() + r * in_f, in_f, dst, in_f);
                    }
                    for (; r < rows; ++r) axpy(g[r * out_f + o], xd.data() + r * in_f, dst, in_f);
                }
            });
            if_grad(bias, [&](std::span<double> gb) {
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t o = 0; o < out_f; ++o) gb[o] += g[r * out_f + o];
            });
        });
    }
    return out;
}

Tensor channel_linear(const Tensor& x, const Tensor& weight) {
    require_rank(x, 4, "channel_linear");
    require_rank(weight, 2, "channel_linear");
    const std::size_t bs = x.dim(0), c_in = x.dim(1), hw = x.dim(2) * x.dim(3);
    const std::size_t c_out = weight.dim(0);
    if (weight.dim(1) != c_in) {
        throw DimensionError(fmt::format("channel_linear: input {} vs weight {}", shape_str(x.shape()), shape_str(weight.shape())));
    }
    Tensor out = Tensor::zeros({bs, c_out, x.dim(2), x.dim(3)});
    auto xd = x.data(), wd = weight.data();
    auto od = out.mutable_data();
    for (std::size_t b = 0; b < bs; ++b)
        for (std::size_t o = 0; o < c_out; ++o) {
            double* dst = od.data() + (b * c_out + o) * hw;
            for (std::size_t c = 0; c < c_in; ++c) {
                axpy(wd[o * c_in + c], xd.data() + (b * c_in + c) * hw, dst, hw);
            }
        }
    check_finite(out, "channel_linear");
    if (recording({&x, &weight})) {
        record("channel_linear", {x, weight}, out, [x, weight, out, bs, c_in, c_out, hw]() mutable {
            auto g = out.grad();
            if_grad(x, [&](std::span<double> gx) {
                auto wd = weight.data();
                for (std::size_t b = 0; b < bs; ++b)
                    for (std::size_t o = 0; o < c_out; ++o) {
                        const double* gs = g.data() + (b * c_out + o) * hw;
                        for (std::size_t c = 0; c < c_in; ++c) {
                            axpy(wd[o * c_in + c], gs, gx.data() + (b * c_in + c) * hw, hw);
                        }
                    }
            });
            if_grad(weight, [&](std::span<double> gw) {
                auto xd = x.data();
                for (std::size_t b = 0; b < bs; ++b)
                    for (std::size_t o = 0; o < c_out; ++o) {
                        const double* gs = g.data() + (b * c_out + o) * hw;
                        for (std::size_t c = 0; c < c_in; ++c) {
                            gw[o * c_in + c] += dot(gs, xd.data() + (b * c_in + c) * hw, hw);
                        }
                    }
            });
        });
    }
    return out;
}

// --- spatial ----------------------------------------------------------------------

Tensor conv3x3(const Tensor& x, const Tensor& kernel, const Tensor& bias) {
    require_rank(x, 4, "conv3x3");
    require_rank(kernel, 4, "conv3x3");
    const std::size_t bs = x.dim(0), ci = x.dim(1), co = kernel.dim(0);
    if (kernel.dim(1) != ci || kernel.dim(2) != 3 || kernel.dim(3) != 3) {
        throw DimensionError(fmt::format("conv3x3: input {} vs kernel {}", shape_str(x.shape()), shape_str(kernel.shape())));
    }
    if (bias.defined() && bias.numel() != co) {
        throw DimensionError(fmt::format("conv3x3: bias {} for {} channels", shape_str(bias.shape()), co));
    }
    if (x.dim(2) == 0 || x.dim(3) == 0) throw ArgumentError("conv3x3: empty spatial extent");
    const auto h = static_cast<std::ptrdiff_t>(x.dim(2)), w = static_cast<std::ptrdiff_t>(x.dim(3));
    const std::ptrdiff_t plane = h * w;
    Tensor out = Tensor::zeros({bs, co, x.dim(2), x.dim(3)});
    auto xd = x.data(), kd = kernel.data();
    auto od = out.mutable_data();
    // Output rows/cols where tap offset d in {-1,0,1} stays inside the input: [lo, hi).
    auto lo = [](std::ptrdiff_t d) -> std::ptrdiff_t { return d < 0 ? 1 : 0; };
    auto hi = [](std::ptrdiff_t d, std::ptrdiff_t n) -> std::ptrdiff_t { return d > 0 ? n - 1 : n; };
    for (std::size_t b = 0; b < bs; ++b)
        for (std::size_t o = 0; o < co; ++o) {
            double* dst = od.data() + static_cast<std::ptrdiff_t>(b * co + o) * plane;
            if (bias.defined()) std::fill(dst, dst + plane, bias.data()[o]);
            for (std::size_t c = 0; c < ci; ++c) {
                const double* src = xd.data() + static_cast<std::ptrdiff_t>(b * ci + c) * plane;
                for (std::ptrdiff_t ky = -1; ky <= 1; ++ky)
                    for (std::ptrdiff_t kx = -1; kx <= 1; ++kx) {
                        const double kv = kd[((o * ci + c) * 3 + static_cast<std::size_t>(ky + 1)) * 3 + static_cast<std::size_t>(kx + 1)];
                        if (kv == 0.0) continue;
                        for (std::ptrdiff_t y = lo(ky); y < hi(ky, h); ++y) {
                            const double* srow = src + (y + ky) * w;
                            double* drow = dst + y * w;
                            for (std::ptrdiff_t xx = lo(kx); xx < hi(kx, w); ++xx) drow[xx] += kv * srow[xx + kx];
                        }
                    }
            }
        }
    check_finite(out, "conv3x3");
    if (recording({&x, &kernel, &bias})) {
        std::vector<Tensor> ins{x, kernel};
        if (bias.defined()) ins.push_back(bias);
        record("conv3x3", std::move(ins), out, [x, kernel, bias, out, bs, ci, co, h, w, plane, lo, hi]() mutable {
            auto g = out.grad();
            auto xd = x.data(), kd = kernel.data();
            const bool want_x = x.requires_grad(), want_k = kernel.requires_grad();
            std::span<double> gx, gk;
            if (want_x) gx = x.mutable_grad();
            if (want_k) gk = kernel.mutable_grad();
            for (std::size_t b = 0; b < bs; ++b)
                for (std::size_t o = 0; o < co; ++o) {
                    const double* gs = g.data() + static_cast<std::ptrdiff_t>(b * co + o) * plane;
                    for (std::size_t c = 0; c < ci; ++c) {
                        const std::ptrdiff_t in_off = static_cast<std::ptrdiff_t>(b * ci + c) * plane;
                        const double* src = xd.data() + in_off;
                        for (std::ptrdiff_t ky = -1; ky <= 1; ++ky)
                            for (std::ptrdiff_t kx = -1; kx <= 1; ++kx) {
                                const std::size_t kidx =
                                    ((o * ci + c) * 3 + static_cast<std::size_t>(ky + 1)) * 3 + static_cast<std::size_t>(kx + 1);
                                const double kv = kd[kidx];
                                double acc = 0.0;
                                for (std::ptrdiff_t y = lo(ky); y < hi(ky, h); ++y) {
                                    const double* grow = gs + y * w;
                                    if (want_k) {
                                        const double* srow = src + (y + ky) * w;
                                        for (std::ptrdiff_t xx = lo(kx); xx < hi(kx, w); ++xx) acc += grow[xx] * srow[xx + kx];
                                    }
                                    if (want_x && kv != 0.0) {
                                        double* gxr = gx.data() + in_off + (y + ky) * w;
                                        for (std::ptrdiff_t xx = lo(kx); xx < hi(kx, w); ++xx) gxr[xx + kx] += kv * grow[xx];
                                    }
                                }
                                if (want_k) gk[kidx] += acc;
                            }
                    }
                }
            if_grad(bias, [&](std::span<double> gb) {
                for (std::size_t b = 0; b < bs; ++b)
                    for (std::size_t o = 0; o < co; ++o) {
                        const double* gs = g.data() + static_cast<std::ptrdiff_t>(b * co + o) * plane;
                        double s = 0.0;
                        for (std::ptrdiff_t p = 0; p < plane; ++p) s += gs[p];
                        gb[o] += s;
                    }
            });
        });
    }
    return out;
}

Tensor interpolate_bilinear(const Tensor& x, double scale) {
    if (!(scale > 0.0) || !std::isfinite(scale)) {
        throw ArgumentError(fmt::format("interpolate_bilinear: scale must be positive, got {}", scale));
    }
    require_rank(x, 4, "interpolate_bilinear");
    auto extent = [scale](std::size_t n) {
        const double v = std::ceil(scale * static_cast<double>(n) - 1e-9);
        return std::max<std::size_t>(1, static_cast<std::size_t>(v));
    };
    return resample(x, extent(x.dim(2)), extent(x.dim(3)), scale, scale, "interpolate_bilinear");
}

Tensor resize_bilinear(const Tensor& x, std::size_t out_h, std::size_t out_w) {
    require_rank(x, 4, "resize_bilinear");
    if (out_h == 0 || out_w == 0) throw ArgumentError("resize_bilinear: output extents must be positive");
    const double sh = static_cast<double>(out_h) / static_cast<double>(x.dim(2));
    const double sw = static_cast<double>(out_w) / static_cast<double>(x.dim(3));
    return resample(x, out_h, out_w, sh, sw, "resize_bilinear");
}

Tensor global_avg_pool(const Tensor& x) {
    require_rank(x, 4, "global_avg_pool");
    const std::size_t bs = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    if (hw == 0) throw ArgumentError("global_avg_pool: empty spatial extent");
    Tensor out = Tensor::zeros({bs, c});
    auto xd = x.data();
    auto od = out.mutable_data();
    for (std::size_t i = 0; i < bs * c; ++i) {
        double s = 0.0;
        for (std::size_t p = 0; p < hw; ++p) s += xd[i * hw + p];
        od[i] = s / static_cast<double>(hw);
    }
    check_finite(out, "global_avg_pool");
    if (recording({&x})) {
        record("global_avg_pool", {x}, out, [x, out, bs, c, hw]() mutable {
            auto g = out.grad();
            auto gx = x.mutable_grad();
            const double inv = 1.0 / static_cast<double>(hw);
            for (std::size_t i = 0; i < bs * c; ++i)
                for (std::size_t p = 0; p < hw; ++p) gx[i * hw + p] += g[i] * inv;
        });
    }
    return out;
}

// --- elementwise ---------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    Tensor out = Tensor::zeros(a.shape());
    auto ad = a.data(), bd = b.data();
    auto od = out.mutable_data();
    for (std::size_t i = 0; i < od.size(); ++i) od[i] = ad[i] + bd[i];
    check_finite(out, "add");
    if (recording({&a, &b})) {
        record("add", {a, b}, out, [a, b, out]() mutable {
            auto g = out.grad();
            if_grad(a, [&](std::span<double> ga) { for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i]; });
            if_grad(b, [&](std::span<double> gb) { for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i]; });
        });
    }
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    Tensor out = Tensor::zeros(a.shape());
    auto ad = a.data(), bd = b.data();
    auto od = out.mutable_data();
    for (std::size_t i = 0; i < od.size(); ++i) od[i] = ad[i] - bd[i];
    check_finite(out, "sub");
    if (recording({&a, &b})) {
        record("sub", {a, b}, out, [a, b, out]() mutable {
            auto g = out.grad();
            if_grad(a, [&](std::span<double> ga) { for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i]; });
            if_grad(b, [&](std::span<double> gb) { for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i]; });
        });
    }
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    Tensor out = Tensor::zeros(a.shape());
    auto ad = a.data(), bd = b.data();
    auto od = out.mutable_data();
    for (std::size_t i = 0; i < od.size(); ++i) od[i] = ad[i] * bd[i];
    check_finite(out, "mul");
    if (recording({&a, &b})) {
        record("mul", {a, b}, out, [a, b, out]() mutable {
            auto g = out.grad();
            if_grad(a, [&](std::span<double> ga) {
                auto bd = b.data();
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bd[i];
            });
            if_grad(b, [&](std::span<double> gb) {
                auto ad = a.data();
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * ad[i];
            });
        });
    }
    return out;
}

Tensor scale(const Tensor& x, double factor) {
    return unary(x, "scale", [factor](double v) { return v * factor; }, [factor](double) { return factor; });
}

Tensor add_bias_last(const Tensor& x, const Tensor& bias) {
    const std::size_t n = bias.numel();
    if (x.rank() == 0 || x.shape().back() != n) {
        throw DimensionError(fmt::format("add_bias_last: {} vs bias {}", shape_str(x.shape()), shape_str(bias.shape())));
    }
    Tensor out = Tensor::zeros(x.shape());
    auto xd = x.data(), bd = bias.data();
    auto od = out.mutable_data();
    for (std::size_t i = 0; i < od.size(); ++i) od[i] = xd[i] + bd[i % n];
    check_finite(out, "add_bias_last");
    if (recording({&x, &bias})) {
        record("add_bias_last", {x, bias}, out, [x, bias, out, n]() mutable {
            auto g = out.grad();
            if_grad(x, [&](std::span<double> gx) { for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i]; });
            if_grad(bias, [&](std::span<double> gb) { for (std::size_t i = 0; i < g.size(); ++i) gb[i % n] += g[i]; });
        });
    }
    return out;
}

Tensor scale_by_element(const Tensor& x, const Tensor& s, std::size_t index) {
    if (index >= s.numel()) throw DimensionError("scale_by_element: index out of range");
    const double factor = s.data()[index];
    Tensor out = Tensor::zeros(x.shape());
    auto xd = x.data();
    auto od = out.mutable_data();
    for (std::size_t i = 0; i < od.size(); ++i) od[i] = xd[i] * factor;
    check_finite(out, "scale_by_element");
    if (recording({&x, &s})) {
        record("scale_by_element", {x, s}, out, [x, s, out, index, factor]() mutable {
            auto g = out.grad();
            if_grad(x, [&](std::span<double> gx) { for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * factor; });
            if_grad(s, [&](std::span<double> gs) {
                auto xd = x.data();
                double acc = 0.0;
                for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * xd[i];
                gs[index] += acc;
            });
        });
    }
    return out;
}

Tensor softplus(const Tensor& x) { return unary(x, "softplus", softplus_value, sigmoid_value); }

Tensor sigmoid(const Tensor& x) {
    return unary(x, "sigmoid", sigmoid_value, [](double v) {
        const double s = sigmoid_value(v);
        return s * (1.0 - s);
    });
}

Tensor gelu(const Tensor& x) { return unary(x, "gelu", gelu_value, gelu_deriv); }

// --- normalisation and reductions ---------------------------------------------------

Tensor softmax_axis(const Tensor& x, std::size_t axis) {
    const auto& s = x.shape();
    if (axis >= s.size()) throw DimensionError("softmax_axis: axis out of range");
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
    const std::size_t n = s[axis];
    Tensor out = Tensor::zeros(s);
    auto xd = x.data();
    auto od = out.mutable_data();
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * n * inner + in;
            double mx = kNegInf;
            for (std::size_t j = 0; j < n; ++j) {
                const double v = xd[base + j * inner];
                if (std::isnan(v) || v == std::numeric_limits<double>::infinity()) {
                    throw NumericError("softmax_axis: NaN or +inf input");
                }
                mx = std::max(mx, v);
            }
            if (mx == kNegInf) throw DegenerateGateError("softmax_axis: every entry along the axis is -inf");
            double z = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                const double e = std::exp(xd[base + j * inner] - mx);
                od[base + j * inner] = e;
                z += e;
            }
            for (std::size_t j = 0; j < n; ++j) od[base + j * inner] /= z;
        }
    check_finite(out, "softmax_axis");
    if (recording({&x})) {
        record("softmax_axis", {x}, out, [x, out, outer, inner, n]() mutable {
            auto g = out.grad();
            auto y = out.data();
            auto gx = x.mutable_grad();
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t in = 0; in < inner; ++in) {
                    const std::size_t base = o * n * inner + in;
                    double dot = 0.0;
                    for (std::size_t j = 0; j < n; ++j) dot += g[base + j * inner] * y[base + j * inner];
                    for (std::size_t j = 0; j < n; ++j) {
                        const std::size_t idx = base + j * inner;
                        gx[idx] += y[idx] * (g[idx] - dot);
                    }
                }
        });
    }
    return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    const std::size_t d = gamma.numel();
    if (x.rank() == 0 || x.shape().back() != d || beta.numel() != d) {
        throw DimensionError(fmt::format("layer_norm: input {} vs gamma {}", shape_str(x.shape()), shape_str(gamma.shape())));
    }
    const std::size_t rows = x.numel() / d;
    Tensor out = Tensor::zeros(x.shape());
    std::vector<double> xhat(x.numel()), inv_std(rows);
    auto xd = x.data(), gd = gamma.data(), bd = beta.data();
    auto od = out.mutable_data();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = xd.data() + r * d;
        double m = 0.0;
        for (std::size_t i = 0; i < d; ++i) m += xr[i];
        m /= static_cast<double>(d);
        double v = 0.0;
        for (std::size_t i = 0; i < d; ++i) v += (xr[i] - m) * (xr[i] - m);
        v /= static_cast<double>(d);
        const double is = 1.0 / std::sqrt(v + eps);
        inv_std[r] = is;
        for (std::size_t i = 0; i < d; ++i) {
            const double xh = (xr[i] - m) * is;
            xhat[r * d + i] = xh;
            od[r * d + i] = xh * gd[i] + bd[i];
        }
    }
    check_finite(out, "layer_norm");
    if (recording({&x, &gamma, &beta})) {
        record("layer_norm", {x, gamma, beta}, out,
               [x, gamma, beta, out, xhat = std::move(xhat), inv_std = std::move(inv_std), rows, d]() mutable {
                   auto g = out.grad();
                   auto gd = gamma.data();
                   if_grad(gamma, [&](std::span<double> gg) {
                       for (std::size_t r = 0; r < rows; ++r)
                           for (std::size_t i = 0; i < d; ++i) gg[i] += g[r * d + i] * xhat[r * d + i];
                   });
                   if_grad(beta, [&](std::span<double> gb) {
                       for (std::size_t r = 0; r < rows; ++r)
                           for (std::size_t i = 0; i < d; ++i) gb[i] += g[r * d + i];
                   });
                   if_grad(x, [&](std::span<double> gx) {
                       const double dd = static_cast<double>(d);
                       for (std::size_t r = 0; r < rows; ++r) {
                           double m1 = 0.0, m2 = 0.0;
                           for (std::size_t i = 0; i < d; ++i) {
                               const double gh = g[r * d + i] * gd[i];
                               m1 += gh;
                               m2 += gh * xhat[r * d + i];
                           }
                           m1 /= dd;
                           m2 /= dd;
                           for (std::size_t i = 0; i < d; ++i) {
                               const double gh = g[r * d + i] * gd[i];
                               gx[r * d + i] += inv_std[r] * (gh - m1 - xhat[r * d + i] * m2);
                           }
                       }
                   });
               });
    }
    return out;
}

Tensor sum(const Tensor& x) {
    double s = 0.0;
    for (double v : x.data()) s += v;
    Tensor out = Tensor::scalar(s);
    check_finite(out, "sum");
    if (recording({&x})) {
        record("sum", {x}, out, [x, out]() mutable {
            const double g = out.grad()[0];
            for (double& v : x.mutable_grad()) v += g;
        });
    }
    return out;
}

Tensor mean(const Tensor& x) {
    if (x.numel() == 0) throw ArgumentError("mean of empty tensor");
    return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor sum_rows(const Tensor& x) {
    require_rank(x, 2, "sum_rows");
    const std::size_t rows = x.dim(0), cols = x.dim(1);
    Tensor out = Tensor::zeros({cols});
    auto xd = x.data();
    auto od = out.mutable_data();
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) od[c] += xd[r * cols + c];
    check_finite(out, "sum_rows");
    if (recording({&x})) {
        record("sum_rows", {x}, out, [x, out, rows, cols]() mutable {
            auto g = out.grad();
            auto gx = x.mutable_grad();
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < cols; ++c) gx[r * cols + c] += g[c];
        });
    }
    return out;
}

Tensor cv_squared(const Tensor& v) {
    const std::size_t n = v.numel();
    auto vd = v.data();
    double m = 0.0;
    for (double e : vd) m += e;
    m = n ? m / static_cast<double>(n) : 0.0;
    double var = 0.0;
    for (double e : vd) var += (e - m) * (e - m);
    var = n ? var / static_cast<double>(n) : 0.0;
    const bool degenerate = n < 2 || m == 0.0;
    Tensor out = Tensor::scalar(degenerate ? 0.0 : var / (m * m));
    check_finite(out, "cv_squared");
    if (!degenerate && recording({&v})) {
        record("cv_squared", {v}, out, [v, out, n, m, var]() mutable {
            const double g = out.grad()[0];
            auto vd = v.data();
            auto gv = v.mutable_grad();
            const double dn = static_cast<double>(n);
            for (std::size_t i = 0; i < n; ++i) {
                const double dvar = 2.0 * (vd[i] - m) / dn;
                gv[i] += g * (dvar / (m * m) - 2.0 * var / (dn * m * m * m));
            }
        });
    }
    return out;
}

// --- shape ---------------------------------------------------------------------

Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.numel()) {
        throw DimensionError(fmt::format("reshape: {} to {}", shape_str(x.shape()), shape_str(shape)));
    }
    Tensor out = Tensor::from(std::move(shape), std::vector<double>(x.data().begin(), x.data().end()));
    if (recording({&x})) {
        record("reshape", {x}, out, [x, out]() mutable {
            auto g = out.grad();
            auto gx = x.mutable_grad();
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        });
    }
    return out;
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& perm) {
    const auto& s = x.shape();
    const std::size_t r = s.size();
    if (perm.size() != r) throw DimensionError("permute: rank mismatch");
    std::vector<bool> seen(r, false);
    Shape os(r);
    for (std::size_t i = 0; i < r; ++i) {
        if (perm[i] >= r || seen[perm[i]]) throw ArgumentError("permute: not a permutation");
        seen[perm[i]] = true;
        os[i] = s[perm[i]];
    }
    std::vector<std::size_t> in_stride(r, 1);
    for (std::size_t i = r; i-- > 1;) in_stride[i - 1] = in_stride[i] * s[i];
    // Stride in the input for each output axis.
    std::vector<std::size_t> src_stride(r);
    for (std::size_t i = 0; i < r; ++i) src_stride[i] = in_stride[perm[i]];
    std::vector<std::size_t> map(x.numel());
    std::vector<std::size_t> idx(r, 0);
    for (std::size_t flat = 0; flat < map.size(); ++flat) {
        std::size_t off = 0;
        for (std::size_t i = 0; i < r; ++i) off += idx[i] * src_stride[i];
        map[flat] = off;
        for (std::size_t i = r; i-- > 0;) {
            if (++idx[i] < os[i]) break;
            idx[i] = 0;
        }
    }
    Tensor out = Tensor::zeros(os);
    auto xd = x.data();
    auto od = out.mutable_data();
    for (std::size_t i = 0; i < map.size(); ++i) od[i] = xd[map[i]];
    if (recording({&x})) {
        record("permute", {x}, out, [x, out, map = std::move(map)]() mutable {
            auto g = out.grad();
            auto gx = x.mutable_grad();
            for (std::size_t i = 0; i < map.size(); ++i) gx[map[i]] += g[i];
        });
    }
    return out;
}

Tensor concat0(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ArgumentError("concat0: no inputs");
    Shape s = parts.front().shape();
    if (s.empty()) throw DimensionError("concat0: rank-0 input");
    std::size_t rows = 0;
    for (const auto& p : parts) {
        if (p.rank() != s.size() || !std::equal(s.begin() + 1, s.end(), p.shape().begin() + 1)) {
            throw DimensionError(fmt::format("concat0: {} vs {}", shape_str(s), shape_str(p.shape())));
        }
        rows += p.dim(0);
    }
    s[0] = rows;
    Tensor out = Tensor::zeros(s);
    auto od = out.mutable_data();
    std::size_t off = 0;
    for (const auto& p : parts) {
        std::copy(p.data().begin(), p.data().end(), od.begin() + static_cast<std::ptrdiff_t>(off));
        off += p.numel();
    }
    if (recording(parts)) {
        record("concat0", parts, out, [parts, out]() mutable {
            auto g = out.grad();
            std::size_t off = 0;
            for (auto& p : parts) {
                if (p.requires_grad()) {
                    auto gp = p.mutable_grad();
                    for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g[off + i];
                }
                off += p.numel();
            }
        });
    }
    return out;
}

Tensor select0(const Tensor& x, std::size_t index) {
    if (x.rank() == 0 || index >= x.dim(0)) throw DimensionError("select0: index out of range");
    Shape s = x.shape();
    s[0] = 1;
    const std::size_t n = shape_numel(s);
    auto xd = x.data().subspan(index * n, n);
    Tensor out = Tensor::from(s, std::vector<double>(xd.begin(), xd.end()));
    if (recording({&x})) {
        record("select0", {x}, out, [x, out, index, n]() mutable {
            auto g = out.grad();
            auto gx = x.mutable_grad();
            for (std::size_t i = 0; i < n; ++i) gx[index * n + i] += g[i];
        });
    }
    return out;
}

Tensor broadcast_batch(const Tensor& x, std::size_t batch) {
    Shape s{batch};
    s.insert(s.end(), x.shape().begin(), x.shape().end());
    const std::size_t n = x.numel();
    Tensor out = Tensor::zeros(s);
    auto od = out.mutable_data();
    for (std::size_t b = 0; b < batch; ++b) std::copy(x.data().begin(), x.data().end(), od.begin() + static_cast<std::ptrdiff_t>(b * n));
    if (recording({&x})) {
        record("broadcast_batch", {x}, out, [x, out, batch, n]() mutable {
            auto g = out.grad();
            auto gx = x.mutable_grad();
            for (std::size_t b = 0; b < batch; ++b)
                for (std::size_t i = 0; i < n; ++i) gx[i] += g[b * n + i];
        });
    }
    return out;
}

Tensor gather(const Tensor& x, std::span<const std::size_t> indices) {
    std::vector<std::size_t> idx(indices.begin(), indices.end());
    Tensor out = Tensor::zeros({idx.size()});
    auto xd = x.data();
    auto od = out.mutable_data();
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] >= xd.size()) throw DimensionError("gather: index out of range");
        od[i] = xd[idx[i]];
    }
    if (recording({&x})) {
        record("gather", {x}, out, [x, out, idx = std::move(idx)]() mutable {
            auto g = out.grad();
            auto gx = x.mutable_grad();
            for (std::size_t i = 0; i < idx.size(); ++i) gx[idx[i]] += g[i];
        });
    }
    return out;
}

Tensor mask_neg_inf(const Tensor& x, const std::vector<bool>& keep) {
    if (keep.size() != x.numel()) throw DimensionError("mask_neg_inf: mask size mismatch");
    Tensor out = Tensor::zeros(x.shape());
    auto xd = x.data();
    auto od = out.mutable_data();
    for (std::size_t i = 0; i < od.size(); ++i) od[i] = keep[i] ? xd[i] : kNegInf;
    if (recording({&x})) {
        record("mask_neg_inf", {x}, out, [x, out, keep]() mutable {
            auto g = out.grad();
            auto gx = x.mutable_grad();
            for (std::size_t i = 0; i < g.size(); ++i)
                if (keep[i]) gx[i] += g[i];
        });
    }
    return out;
}

Tensor topk_inclusion_probability(const Tensor& clean, const Tensor& stddev, const Tensor& noise, std::size_t k) {
    require_rank(clean, 2, "topk_inclusion_probability");
    require_same_shape(clean, stddev, "topk_inclusion_probability");
    require_same_shape(clean, noise, "topk_inclusion_probability");
    const std::size_t rows = clean.dim(0), n = clean.dim(1);
    if (k == 0 || k >= n) throw ConfigError("topk_inclusion_probability: requires 0 < k < n");
    auto cd = clean.data(), sd = stddev.data(), nd = noise.data();
    Tensor out = Tensor::zeros({rows, n});
    auto od = out.mutable_data();
    // Per entry: the index whose noisy value forms its threshold, and z.
    std::vector<std::size_t> thr_index(rows * n);
    std::vector<double> zval(rows * n);
    std::vector<std::size_t> order(n);
    std::vector<double> noisy(n);
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < n; ++j) noisy[j] = cd[r * n + j] + nd[r * n + j] * sd[r * n + j];
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return noisy[a] > noisy[b]; });
        std::vector<std::size_t> rank(n);
        for (std::size_t p = 0; p < n; ++p) rank[order[p]] = p;
        for (std::size_t i = 0; i < n; ++i) {
            // Entries inside the top k compete with the (k+1)-th; others with the k-th.
            const std::size_t j = rank[i] < k ? order[k] : order[k - 1];
            const std::size_t idx = r * n + i;
            thr_index[idx] = r * n + j;
            const double z = (cd[idx] - noisy[j]) / sd[idx];
            zval[idx] = z;
            od[idx] = 0.5 * std::erfc(-z / std::numbers::sqrt2);
        }
    }
    check_finite(out, "topk_inclusion_probability");
    if (recording({&clean, &stddev})) {
        record("topk_inclusion_probability", {clean, stddev}, out,
               [clean, stddev, noise, out, thr_index = std::move(thr_index), zval = std::move(zval)]() mutable {
                   auto g = out.grad();
                   auto sd = stddev.data(), nd = noise.data();
                   const bool want_c = clean.requires_grad(), want_s = stddev.requires_grad();
                   std::span<double> gc, gs;
                   if (want_c) gc = clean.mutable_grad();
                   if (want_s) gs = stddev.mutable_grad();
                   for (std::size_t idx = 0; idx < g.size(); ++idx) {
                       const double z = zval[idx];
                       const double pdf = std::exp(-0.5 * z * z) / std::sqrt(2.0 * std::numbers::pi);
                       const double dz = g[idx] * pdf;
                       const double inv = 1.0 / sd[idx];
                       const std::size_t j = thr_index[idx];
                       if (want_c) {
                           gc[idx] += dz * inv;
                           gc[j] -= dz * inv;
                       }
                       if (want_s) {
                           gs[idx] -= dz * z * inv;
                           gs[j] -= dz * inv * nd[j];
                       }
                   }
               });
    }
    return out;
}

// --- losses ----------------------------------------------------------------------

Tensor bce_with_logits(const Tensor& logits, std::span<const double> targets) {
    if (targets.size() != logits.numel()) throw DimensionError("bce_with_logits: target size mismatch");
    const std::size_t n = targets.size();
    if (n == 0) throw ArgumentError("bce_with_logits: empty input");
    auto xd = logits.data();
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double v = xd[i];
        s += std::max(v, 0.0) - v * targets[i] + std::log1p(std::exp(-std::abs(v)));
    }
    Tensor out = Tensor::scalar(s / static_cast<double>(n));
    check_finite(out, "bce_with_logits");
    if (recording({&logits})) {
        std::vector<double> t(targets.begin(), targets.end());
        record("bce_with_logits", {logits}, out, [logits, out, t = std::move(t)]() mutable {
            const double g = out.grad()[0] / static_cast<double>(t.size());
            auto xd = logits.data();
            auto gx = logits.mutable_grad();
            for (std::size_t i = 0; i < t.size(); ++i) gx[i] += g * (sigmoid_value(xd[i]) - t[i]);
        });
    }
    return out;
}

Tensor dice_loss(const Tensor& logits, std::span<const double> targets) {
    if (targets.size() != logits.numel()) throw DimensionError("dice_loss: target size mismatch");
    auto xd = logits.data();
    double pt = 0.0, ps = 0.0, ts = 0.0;
    for (std::size_t i = 0; i < targets.size(); ++i) {
        const double p = sigmoid_value(xd[i]);
        pt += p * targets[i];
        ps += p;
        ts += targets[i];
    }
    const double num = 2.0 * pt + 1.0, den = ps + ts + 1.0;
    Tensor out = Tensor::scalar(1.0 - num / den);
    check_finite(out, "dice_loss");
    if (recording({&logits})) {
        std::vector<double> t(targets.begin(), targets.end());
        record("dice_loss", {logits}, out, [logits, out, t = std::move(t), num, den]() mutable {
            const double g = out.grad()[0];
            auto xd = logits.data();
            auto gx = logits.mutable_grad();
            for (std::size_t i = 0; i < t.size(); ++i) {
                const double p = sigmoid_value(xd[i]);
                const double dp = -(2.0 * t[i] * den - num) / (den * den);
                gx[i] += g * dp * p * (1.0 - p);
            }
        });
    }
    return out;
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> targets) {
    require_rank(logits, 2, "cross_entropy");
    const std::size_t rows = logits.dim(0), cols = logits.dim(1);
    if (targets.size() != rows) throw DimensionError("cross_entropy: target count mismatch");
    if (rows == 0) throw ArgumentError("cross_entropy: empty input");
    auto xd = logits.data();
    std::vector<double> probs(rows * cols);
    double s = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
        if (targets[r] >= cols) throw DimensionError("cross_entropy: target class out of range");
        const double* xr = xd.data() + r * cols;
        const double mx = *std::max_element(xr, xr + cols);
        double z = 0.0;
        for (std::size_t c = 0; c < cols; ++c) z += std::exp(xr[c] - mx);
        for (std::size_t c = 0; c < cols; ++c) probs[r * cols + c] = std::exp(xr[c] - mx) / z;
        s += mx + std::log(z) - xr[targets[r]];
    }
    Tensor out = Tensor::scalar(s / static_cast<double>(rows));
    check_finite(out, "cross_entropy");
    if (recording({&logits})) {
        std::vector<std::size_t> t(targets.begin(), targets.end());
        record("cross_entropy", {logits}, out, [logits, out, t = std::move(t), probs = std::move(probs), cols]() mutable {
            const double g = out.grad()[0] / static_cast<double>(t.size());
            auto gx = logits.mutable_grad();
            for (std::size_t r = 0; r < t.size(); ++r)
                for (std::size_t c = 0; c < cols; ++c)
                    gx[r * cols + c] += g * (probs[r * cols + c] - (c == t[r] ? 1.0 : 0.0));
        });
    }
    return out;
}

} // namespace convlora::ops
