// Copyright (c) 2026, Conv-LoRA Desk Authors
// SPDX-License-Identifier: Apache-2.0
//

#include "convlora/analysis.hpp"

#include <algorithm>
#include <boost/math/distributions/chi_squared.hpp>
#include <cmath>
#include <fmt/format.h>
#include <fstream>
#include <limits>
#include <numbers>

namespace convlora {

std::vector<double> mean_attention_distance(const Tensor& attn, std::size_t grid) {
    if (attn.rank() != 4 || attn.dim(2) != grid * grid || attn.dim(3) != grid * grid) {
        throw DimensionError(fmt::format("attention {} does not match a {}x{} grid", shape_str(attn.shape()), grid, grid));
    }
    const std::size_t bs = attn.dim(0), heads = attn.dim(1), l = grid * grid;
    std::vector<double> dist(l * l);
    for (std::size_t q = 0; q < l; ++q)
        for (std::size_t k = 0; k < l; ++k) {
            const double dy = static_cast<double>(q / grid) - static_cast<double>(k / grid);
            const double dx = static_cast<double>(q % grid) - static_cast<double>(k % grid);
            dist[q * l + k] = std::sqrt(dy * dy + dx * dx);
        }
    auto a = attn.data();
    std::vector<double> out(heads, 0.0);
    for (std::size_t b = 0; b < bs; ++b)
        for (std::size_t h = 0; h < heads; ++h)
            for (std::size_t q = 0; q < l; ++q) {
                const double* row = a.data() + ((b * heads + h) * l + q) * l;
                double s = 0.0, d = 0.0;
                for (std::size_t k = 0; k < l; ++k) {
                    s += row[k];
                    d += row[k] * dist[q * l + k];
                }
                if (std::abs(s - 1.0) > 1e-6) {
                    throw DataError(fmt::format("attention row (sample {}, head {}, query {}) sums to {}", b, h, q, s));
                }
                out[h] += d;
            }
    for (double& v : out) v /= static_cast<double>(bs * l);
    return out;
}

AttnDistanceReport attention_distance_report(const std::vector<Tensor>& layers, std::size_t grid) {
    AttnDistanceReport r;
    for (const Tensor& a : layers) r.distance.push_back(mean_attention_distance(a, grid));
    return r;
}

namespace {

struct Twiddles {
    std::vector<long double> re, im;
};

// exp(-2 pi i k / n) with the circle's symmetries imposed exactly, so that
// sums over full periods cancel to long-double roundoff.
Twiddles twiddles(std::size_t n) {
    Twiddles t{std::vector<long double>(n), std::vector<long double>(n)};
    const long double two_pi = 2.0L * std::numbers::pi_v<long double>;
    for (std::size_t k = 0; k < n; ++k) {
        std::size_t m = k;
        long double sign_im = -1.0L;
        if (2 * k > n) {
            m = n - k;
            sign_im = 1.0L;
        }
        long double c = 0, s = 0;
        if (m == 0) {
            c = 1;
        } else if (2 * m == n) {
            c = -1;
        } else if (4 * m == n) {
            s = 1;
        } else if (4 * m > n) {
            // Reflect about the quarter turn: cos(pi - x) = -cos(x).
            const long double x = two_pi * static_cast<long double>(n - 2 * m) / (2.0L * static_cast<long double>(n));
            c = -std::cos(x);
            s = std::sin(x);
        } else {
            const long double x = two_pi * static_cast<long double>(2 * m) / (2.0L * static_cast<long double>(n));
            c = std::cos(x);
            s = std::sin(x);
        }
        t.re[k] = c;
        t.im[k] = sign_im * s;
    }
    return t;
}

} // namespace

std::vector<double> dft_amplitude(std::span<const double> plane, std::size_t h, std::size_t w) {
    if (plane.size() != h * w) throw DimensionError("dft_amplitude: extent mismatch");
    const Twiddles th = twiddles(h), tw = twiddles(w);
    // Row transforms, then column transforms.
    std::vector<long double> rr(h * w, 0.0L), ri(h * w, 0.0L);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t v = 0; v < w; ++v) {
            long double sr = 0.0L, si = 0.0L;
            for (std::size_t x = 0; x < w; ++x) {
                const std::size_t k = (v * x) % w;
                sr += plane[y * w + x] * tw.re[k];
                si += plane[y * w + x] * tw.im[k];
            }
            rr[y * w + v] = sr;
            ri[y * w + v] = si;
        }
    std::vector<double> amp(h * w);
    for (std::size_t u = 0; u < h; ++u)
        for (std::size_t v = 0; v < w; ++v) {
            long double sr = 0.0L, si = 0.0L;
            for (std::size_t y = 0; y < h; ++y) {
                const std::size_t k = (u * y) % h;
                sr += rr[y * w + v] * th.re[k] - ri[y * w + v] * th.im[k];
                si += rr[y * w + v] * th.im[k] + ri[y * w + v] * th.re[k];
            }
            amp[u * w + v] = static_cast<double>(std::sqrt(sr * sr + si * si));
        }
    return amp;
}

SpectrumReport fourier_log_amplitude(const Tensor& features) {
    if (features.rank() != 4 || features.dim(2) < 2 || features.dim(3) < 2) {
        throw DimensionError(fmt::format("spectrum needs B x C x H x W with H, W >= 2, got {}",
                                         shape_str(features.shape())));
    }
    const std::size_t bs = features.dim(0), ch = features.dim(1), h = features.dim(2), w = features.dim(3);
    const std::size_t bins = (std::min(h, w) + 1) / 2;

    std::vector<double> radius(h * w);
    double r_max = 0.0;
    for (std::size_t u = 0; u < h; ++u)
        for (std::size_t v = 0; v < w; ++v) {
            const double fu = static_cast<double>(2 * u <= h ? u : h - u) / static_cast<double>(h);
            const double fv = static_cast<double>(2 * v <= w ? v : w - v) / static_cast<double>(w);
            radius[u * w + v] = std::hypot(fu, fv);
            r_max = std::max(r_max, radius[u * w + v]);
        }
    const double width = r_max / static_cast<double>(bins);
    std::vector<std::size_t> bin_of(h * w, 0);
    for (std::size_t i = 1; i < h * w; ++i) {
        const double pos = std::ceil(radius[i] / width) - 1.0;
        bin_of[i] = std::min(bins - 1, static_cast<std::size_t>(std::max(0.0, pos)));
    }

    SpectrumReport rep;
    rep.relative.assign(bins, 0.0);
    rep.log_amplitude.assign(bins, 0.0);
    rep.energy.assign(bins, 0.0);
    rep.counts.assign(bins, 0);
    for (std::size_t b = 0; b < bins; ++b) rep.radius.push_back((static_cast<double>(b) + 0.5) * width);

    auto data = features.data();
    for (std::size_t s = 0; s < bs; ++s)
        for (std::size_t c = 0; c < ch; ++c) {
            const auto amp = dft_amplitude(data.subspan((s * ch + c) * h * w, h * w), h, w);
            const double dc = std::log(amp[0] + kSpectrumEps);
            rep.dc_log_amplitude += dc;
            for (std::size_t i = 1; i < h * w; ++i) {
                const double la = std::log(amp[i] + kSpectrumEps);
                rep.log_amplitude[bin_of[i]] += la;
                rep.relative[bin_of[i]] += la - dc;
                rep.energy[bin_of[i]] += amp[i] * amp[i];
                ++rep.counts[bin_of[i]];
            }
        }
    rep.dc_log_amplitude /= static_cast<double>(bs * ch);
    for (std::size_t b = 0; b < bins; ++b) {
        rep.energy[b] /= static_cast<double>(bs * ch);
        const double n = static_cast<double>(rep.counts[b]);
        rep.relative[b] = rep.counts[b] ? rep.relative[b] / n : std::numeric_limits<double>::quiet_NaN();
        rep.log_amplitude[b] = rep.counts[b] ? rep.log_amplitude[b] / n : std::numeric_limits<double>::quiet_NaN();
    }
    return rep;
}

std::size_t UtilizationHistogram::decisions() const {
    std::size_t s = 0;
    for (std::size_t c : total) s += c;
    return s;
}

std::vector<double> UtilizationHistogram::frequencies() const {
    const double n = static_cast<double>(decisions());
    std::vector<double> f(total.size(), 0.0);
    if (n > 0)
        for (std::size_t i = 0; i < total.size(); ++i) f[i] = static_cast<double>(total[i]) / n;
    return f;
}

UtilizationHistogram expert_utilization(const std::vector<GateDecision>& decisions, std::size_t layers) {
    if (layers == 0) throw ArgumentError("expert_utilization: layer count must be positive");
    UtilizationHistogram hist;
    for (std::size_t i = 0; i < decisions.size(); ++i) {
        const GateDecision& d = decisions[i];
        const std::size_t n = d.gates.dim(1);
        if (hist.experts == 0) {
            hist.experts = n;
            hist.per_layer.assign(layers, std::vector<std::size_t>(n, 0));
            hist.total.assign(n, 0);
        } else if (hist.experts != n) {
            throw DimensionError(fmt::format("gate log mixes {} and {} experts", hist.experts, n));
        }
        for (const auto& sample : d.active)
            for (std::size_t e : sample) {
                ++hist.per_layer[i % layers][e];
                ++hist.total[e];
            }
    }
    return hist;
}

double utilization_cv(std::span<const std::size_t> counts) {
    if (counts.empty()) return 0.0;
    double mean = 0.0;
    for (std::size_t c : counts) mean += static_cast<double>(c);
    mean /= static_cast<double>(counts.size());
    if (mean == 0.0) return 0.0;
    double var = 0.0;
    for (std::size_t c : counts) var += (static_cast<double>(c) - mean) * (static_cast<double>(c) - mean);
    return std::sqrt(var / static_cast<double>(counts.size())) / mean;
}

ChiSquareResult chi_square_homogeneity(std::span<const std::size_t> a, std::span<const std::size_t> b) {
    if (a.size() != b.size()) throw DimensionError("chi_square_homogeneity: category count mismatch");
    double na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        na += static_cast<double>(a[i]);
        nb += static_cast<double>(b[i]);
    }
    ChiSquareResult r;
    if (na == 0.0 || nb == 0.0) return r;
    const double n = na + nb;
    std::size_t used = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double col = static_cast<double>(a[i] + b[i]);
        if (col == 0.0) continue;
        ++used;
        const double ea = na * col / n, eb = nb * col / n;
        r.statistic += (static_cast<double>(a[i]) - ea) * (static_cast<double>(a[i]) - ea) / ea +
                       (static_cast<double>(b[i]) - eb) * (static_cast<double>(b[i]) - eb) / eb;
    }
    if (used < 2) return r;
    r.dof = used - 1;
    boost::math::chi_squared dist(static_cast<double>(r.dof));
    r.p_value = boost::math::cdf(boost::math::complement(dist, r.statistic));
    return r;
}

void write_attention_csv(std::ostream& os, const AttnDistanceReport& report) {
    os << "layer,head,mean_distance\n";
    for (std::size_t l = 0; l < report.distance.size(); ++l)
        for (std::size_t h = 0; h < report.distance[l].size(); ++h)
            os << fmt::format("{},{},{:.17g}\n", l, h, report.distance[l][h]);
}

void write_spectrum_csv(std::ostream& os, const std::vector<SpectrumReport>& layers) {
    os << "layer,radius,relative_log_amplitude,log_amplitude\n";
    for (std::size_t l = 0; l < layers.size(); ++l)
        for (std::size_t b = 0; b < layers[l].radius.size(); ++b)
            os << fmt::format("{},{:.17g},{:.17g},{:.17g}\n", l, layers[l].radius[b], layers[l].relative[b],
                              layers[l].log_amplitude[b]);
}

void write_utilization_csv(std::ostream& os, const UtilizationHistogram& hist) {
    os << "layer,expert,count,frequency\n";
    auto emit = [&](const std::string& layer, const std::vector<std::size_t>& counts) {
        double n = 0.0;
        for (std::size_t c : counts) n += static_cast<double>(c);
        for (std::size_t e = 0; e < counts.size(); ++e)
            os << fmt::format("{},{},{},{:.17g}\n", layer, e, counts[e], n > 0 ? static_cast<double>(counts[e]) / n : 0.0);
    };
    for (std::size_t l = 0; l < hist.per_layer.size(); ++l) emit(std::to_string(l), hist.per_layer[l]);
    emit("all", hist.total);
}

void write_pgm(const std::filesystem::path& path, std::span<const double> values, std::size_t h, std::size_t w) {
    if (values.size() != h * w) throw DimensionError("write_pgm: extent mismatch");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ArgumentError(fmt::format("cannot open {} for writing", path.string()));
    const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
    const double span = *hi - *lo;
    os << "P5\n" << w << ' ' << h << "\n255\n";
    for (double v : values) {
        const double t = span > 0.0 ? (v - *lo) / span : 0.0;
        os.put(static_cast<char>(static_cast<unsigned char>(std::lround(t * 255.0))));
    }
}

} // namespace convlora
