// Copyright (c) 2026, Conv-LoRA Desk Authors
// SPDX-License-Identifier: Apache-2.0
//

#include "convlora/seg_model.hpp"

#include <algorithm>
#include <cmath>
#include <fmt/format.h>
#include <limits>
#include <numeric>

#include "convlora/ops.hpp"

namespace convlora {

void DecoderConfig::validate() const {
    if (mask_tokens < 1) throw ConfigError("mask decoder needs at least one output token");
    if (heads == 0 || dim % heads != 0) throw ConfigError(fmt::format("decoder width {} vs {} heads", dim, heads));
    if (dim % 8 != 0) throw ConfigError(fmt::format("decoder width {} must be divisible by 8", dim));
    if (grid == 0 || feature_dim == 0 || image_size == 0) throw ConfigError("decoder extents must be positive");
    if (num_classes == 1) throw ConfigError("a class head needs at least two categories");
}

Tensor pixel_shuffle2(const Tensor& x) {
    if (x.rank() != 4 || x.dim(1) % 4 != 0) {
        throw DimensionError(fmt::format("pixel shuffle input {}", shape_str(x.shape())));
    }
    const std::size_t bs = x.dim(0), c = x.dim(1) / 4, h = x.dim(2), w = x.dim(3);
    const Tensor t = ops::permute(ops::reshape(x, {bs, c, 2, 2, h, w}), {0, 1, 4, 2, 5, 3});
    return ops::reshape(t, {bs, c, 2 * h, 2 * w});
}

MaskDecoder::MaskDecoder(DecoderConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng(derive_seed(seed, "decoder"));
    const std::size_t d = cfg_.dim, hidden = d * cfg_.mlp_ratio, c1 = d / 4, c2 = d / 8;
    auto dense = [&](std::size_t out, std::size_t in) {
        return randn({out, in}, rng, 1.0 / std::sqrt(static_cast<double>(in)));
    };
    auto attention = [&] {
        return AttentionWeights{dense(d, d), dense(d, d), dense(d, d), dense(d, d), Tensor::zeros({d})};
    };
    neck_weight_ = dense(d, cfg_.feature_dim);
    neck_gamma_ = Tensor::full({d}, 1.0);
    neck_beta_ = Tensor::zeros({d});
    image_pos_ = randn({cfg_.grid * cfg_.grid, d}, rng, 0.1);
    prompt_tokens_ = randn({cfg_.prompt_tokens, d}, rng);
    mask_tokens_ = randn({cfg_.mask_tokens, d}, rng);
    for (std::size_t i = 0; i < cfg_.depth; ++i) {
        Block b;
        b.norm_self_gamma = Tensor::full({d}, 1.0);
        b.norm_self_beta = Tensor::zeros({d});
        b.self_attn = attention();
        b.norm_cross_gamma = Tensor::full({d}, 1.0);
        b.norm_cross_beta = Tensor::zeros({d});
        b.token_to_image = attention();
        b.norm_mlp_gamma = Tensor::full({d}, 1.0);
        b.norm_mlp_beta = Tensor::zeros({d});
        b.fc1_weight = dense(hidden, d);
        b.fc1_bias = Tensor::zeros({hidden});
        b.fc2_weight = dense(d, hidden);
        b.fc2_bias = Tensor::zeros({d});
        b.norm_image_gamma = Tensor::full({d}, 1.0);
        b.norm_image_beta = Tensor::zeros({d});
        b.image_to_token = attention();
        blocks_.push_back(std::move(b));
    }
    final_gamma_ = Tensor::full({d}, 1.0);
    final_beta_ = Tensor::zeros({d});
    up1_weight_ = dense(4 * c1, d);
    up2_weight_ = dense(4 * c2, c1);
    hyper_ = {dense(d, d), Tensor::zeros({d}), dense(d, d), Tensor::zeros({d}), dense(c2, d), Tensor::zeros({c2})};
    if (cfg_.num_classes > 0) {
        const std::size_t k1 = cfg_.num_classes + 1;
        class_head_ = {dense(d, d), Tensor::zeros({d}), dense(d, d), Tensor::zeros({d}), dense(k1, d),
                       Tensor::zeros({k1})};
    }
}

Tensor MaskDecoder::attend(const AttentionWeights& w, const Tensor& q_in, const Tensor& k_in,
                           const Tensor& v_in) const {
    const Tensor mixed =
        multi_head_attention(ops::linear(q_in, w.wq), ops::linear(k_in, w.wk), ops::linear(v_in, w.wv), cfg_.heads);
    return ops::linear(mixed, w.wo, w.bo);
}

Tensor MaskDecoder::mlp3(const Mlp3& m, const Tensor& x) {
    const Tensor h1 = ops::gelu(ops::linear(x, m.w1, m.b1));
    const Tensor h2 = ops::gelu(ops::linear(h1, m.w2, m.b2));
    return ops::linear(h2, m.w3, m.b3);
}

MaskDecoderOutput MaskDecoder::forward(const Tensor& features) const {
    const std::size_t g = cfg_.grid;
    if (features.rank() != 4 || features.dim(1) != cfg_.feature_dim || features.dim(2) != g || features.dim(3) != g) {
        throw DimensionError(fmt::format("decoder expects B x {} x {} x {} features, got {}", cfg_.feature_dim, g, g,
                                         shape_str(features.shape())));
    }
    const std::size_t bs = features.dim(0), p = cfg_.prompt_tokens, n = cfg_.mask_tokens, d = cfg_.dim;

    Tensor image = ops::layer_norm(ops::linear(map_to_tokens(features), neck_weight_), neck_gamma_, neck_beta_);
    const Tensor pos = ops::broadcast_batch(image_pos_, bs);
    const Tensor all_tokens = p > 0 ? ops::concat0({prompt_tokens_, mask_tokens_}) : mask_tokens_;
    Tensor tokens = ops::broadcast_batch(all_tokens, bs);

    for (const Block& b : blocks_) {
        const Tensor s = ops::layer_norm(tokens, b.norm_self_gamma, b.norm_self_beta);
        tokens = ops::add(tokens, attend(b.self_attn, s, s, s));
        const Tensor c = ops::layer_norm(tokens, b.norm_cross_gamma, b.norm_cross_beta);
        tokens = ops::add(tokens, attend(b.token_to_image, c, ops::add(image, pos), image));
        const Tensor m = ops::layer_norm(tokens, b.norm_mlp_gamma, b.norm_mlp_beta);
        tokens = ops::add(tokens,
                          ops::linear(ops::gelu(ops::linear(m, b.fc1_weight, b.fc1_bias)), b.fc2_weight, b.fc2_bias));
        const Tensor im = ops::layer_norm(image, b.norm_image_gamma, b.norm_image_beta);
        image = ops::add(image, attend(b.image_to_token, ops::add(im, pos), tokens, tokens));
    }
    tokens = ops::layer_norm(tokens, final_gamma_, final_beta_);

    std::vector<std::size_t> slot_index;
    slot_index.reserve(bs * n * d);
    for (std::size_t bi = 0; bi < bs; ++bi)
        for (std::size_t j = 0; j < n; ++j)
            for (std::size_t e = 0; e < d; ++e) slot_index.push_back((bi * (p + n) + p + j) * d + e);
    const Tensor slots = ops::reshape(ops::gather(tokens, slot_index), {bs, n, d});

    const Tensor up1 = ops::gelu(pixel_shuffle2(ops::channel_linear(tokens_to_map(image, g), up1_weight_)));
    const Tensor up2 = ops::gelu(pixel_shuffle2(ops::channel_linear(up1, up2_weight_)));
    const std::size_t c2 = up2.dim(1), side = up2.dim(2);
    const Tensor hyper = mlp3(hyper_, slots); // B x N x c2
    const Tensor low = ops::reshape(ops::bmm(hyper, ops::reshape(up2, {bs, c2, side * side})), {bs, n, side, side});

    MaskDecoderOutput out;
    out.mask_logits = side == cfg_.image_size ? low : ops::resize_bilinear(low, cfg_.image_size, cfg_.image_size);
    if (cfg_.num_classes > 0) out.class_logits = mlp3(class_head_, slots);
    return out;
}

void MaskDecoder::collect_parameters(ParameterMap& out, const std::string& prefix) const {
    out[prefix + "neck.weight"] = neck_weight_;
    out[prefix + "neck.gamma"] = neck_gamma_;
    out[prefix + "neck.beta"] = neck_beta_;
    out[prefix + "image_pos"] = image_pos_;
    out[prefix + "mask_tokens"] = mask_tokens_;
    auto put_attention = [&](const std::string& base, const AttentionWeights& w) {
        out[base + ".wq"] = w.wq;
        out[base + ".wk"] = w.wk;
        out[base + ".wv"] = w.wv;
        out[base + ".wo"] = w.wo;
        out[base + ".bo"] = w.bo;
    };
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
        const Block& b = blocks_[i];
        const std::string bp = fmt::format("{}block{}.", prefix, i);
        out[bp + "norm_self.gamma"] = b.norm_self_gamma;
        out[bp + "norm_self.beta"] = b.norm_self_beta;
        put_attention(bp + "self_attn", b.self_attn);
        out[bp + "norm_cross.gamma"] = b.norm_cross_gamma;
        out[bp + "norm_cross.beta"] = b.norm_cross_beta;
        put_attention(bp + "token_to_image", b.token_to_image);
        out[bp + "norm_mlp.gamma"] = b.norm_mlp_gamma;
        out[bp + "norm_mlp.beta"] = b.norm_mlp_beta;
        out[bp + "mlp.fc1.weight"] = b.fc1_weight;
        out[bp + "mlp.fc1.bias"] = b.fc1_bias;
        out[bp + "mlp.fc2.weight"] = b.fc2_weight;
        out[bp + "mlp.fc2.bias"] = b.fc2_bias;
        out[bp + "norm_image.gamma"] = b.norm_image_gamma;
        out[bp + "norm_image.beta"] = b.norm_image_beta;
        put_attention(bp + "image_to_token", b.image_to_token);
    }
    out[prefix + "final.gamma"] = final_gamma_;
    out[prefix + "final.beta"] = final_beta_;
    out[prefix + "upscale1.weight"] = up1_weight_;
    out[prefix + "upscale2.weight"] = up2_weight_;
    auto put_mlp = [&](const std::string& base, const Mlp3& m) {
        out[base + ".fc1.weight"] = m.w1;
        out[base + ".fc1.bias"] = m.b1;
        out[base + ".fc2.weight"] = m.w2;
        out[base + ".fc2.bias"] = m.b2;
        out[base + ".fc3.weight"] = m.w3;
        out[base + ".fc3.bias"] = m.b3;
    };
    put_mlp(prefix + "hyper", hyper_);
    if (cfg_.num_classes > 0) put_mlp(prefix + "class_head", class_head_);
}

SegModel::SegModel(const EncoderConfig& ecfg, const DecoderConfig& dcfg, std::uint64_t seed)
    : encoder(ecfg, seed), decoder(dcfg, seed) {
    if (dcfg.feature_dim != ecfg.dim || dcfg.grid != ecfg.grid() || dcfg.image_size != ecfg.image_size) {
        throw ConfigError("decoder extents do not match the encoder");
    }
}

MaskDecoderOutput SegModel::forward(const Tensor& images, const ForwardContext& ctx, EncoderOutput* enc) const {
    EncoderOutput e = encoder.forward(images, ctx);
    MaskDecoderOutput out = decoder.forward(e.features);
    if (enc) *enc = std::move(e);
    return out;
}

ParameterMap SegModel::parameters() const {
    ParameterMap p;
    encoder.collect_parameters(p);
    decoder.collect_parameters(p);
    return p;
}

// --- losses --------------------------------------------------------------------

std::vector<GtSegment> segments_from_labels(std::span<const std::size_t> labels, std::size_t num_classes) {
    std::vector<GtSegment> out;
    for (std::size_t c = 0; c < num_classes; ++c) {
        GtSegment s{c, std::vector<double>(labels.size(), 0.0)};
        bool any = false;
        for (std::size_t i = 0; i < labels.size(); ++i) {
            if (labels[i] >= num_classes) throw DataError(fmt::format("label {} outside [0, {})", labels[i], num_classes));
            if (labels[i] == c) {
                s.mask[i] = 1.0;
                any = true;
            }
        }
        if (any) out.push_back(std::move(s));
    }
    return out;
}

namespace {

double bce_value(double x, double t) { return std::max(x, 0.0) - x * t + std::log1p(std::exp(-std::abs(x))); }

void softmax_row(std::span<const double> row, std::vector<double>& out) {
    out.resize(row.size());
    const double m = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (std::size_t i = 0; i < row.size(); ++i) z += out[i] = std::exp(row[i] - m);
    for (double& v : out) v /= z;
}

} // namespace

std::vector<double> match_cost(const MaskDecoderOutput& pred, std::size_t image, const std::vector<GtSegment>& gt,
                               std::span<const std::size_t> points, const LossWeights& w) {
    const Tensor& masks = pred.mask_logits;
    const std::size_t n = masks.dim(1), hw = masks.dim(2) * masks.dim(3), m = gt.size();
    if (m > n) throw CapacityError(fmt::format("{} ground-truth segments exceed {} prediction slots", m, n));
    const bool with_class = pred.class_logits.defined();
    const std::size_t k1 = with_class ? pred.class_logits.dim(2) : 0;
    std::vector<double> cost(n * m, 0.0), prob;
    const double np = static_cast<double>(points.size());
    for (std::size_t j = 0; j < n; ++j) {
        const double* logit = masks.data().data() + (image * n + j) * hw;
        if (with_class) softmax_row(pred.class_logits.data().subspan((image * n + j) * k1, k1), prob);
        for (std::size_t i = 0; i < m; ++i) {
            double bce = 0.0, inter = 0.0, psum = 0.0, tsum = 0.0;
            for (std::size_t pt : points) {
                const double x = logit[pt], t = gt[i].mask[pt];
                const double p = ops::sigmoid_value(x);
                bce += bce_value(x, t);
                inter += p * t;
                psum += p;
                tsum += t;
            }
            const double dice = 1.0 - (2.0 * inter + 1.0) / (psum + tsum + 1.0);
            double c = w.ce * bce / np + w.dice * dice;
            if (with_class) c -= w.cls * prob[gt[i].category];
            cost[j * m + i] = c;
        }
    }
    return cost;
}

Matching hungarian_match(std::span<const double> cost, std::size_t rows, std::size_t cols) {
    if (cost.size() != rows * cols) throw DimensionError("hungarian_match: cost size mismatch");
    if (cols > rows) throw CapacityError(fmt::format("{} ground truths exceed {} predictions", cols, rows));
    for (double c : cost)
        if (!std::isfinite(c)) throw ArgumentError("hungarian_match: non-finite cost");
    Matching result;
    if (cols == 0) return result;

    // Potentials method on the transposed problem: each of the `cols` ground
    // truths (workers) is assigned one of the `rows` predictions (jobs).
    const std::size_t nw = cols, nj = rows;
    const double inf = std::numeric_limits<double>::infinity();
    auto a = [&](std::size_t worker, std::size_t job) { return cost[(job - 1) * cols + (worker - 1)]; };
    std::vector<double> u(nw + 1, 0.0), v(nj + 1, 0.0);
    std::vector<std::size_t> owner(nj + 1, 0), way(nj + 1, 0);
    for (std::size_t i = 1; i <= nw; ++i) {
        owner[0] = i;
        std::size_t j0 = 0;
        std::vector<double> minv(nj + 1, inf);
        std::vector<bool> used(nj + 1, false);
        do {
            used[j0] = true;
            const std::size_t i0 = owner[j0];
            double delta = inf;
            std::size_t j1 = 0;
            for (std::size_t j = 1; j <= nj; ++j) {
                if (used[j]) continue;
                const double cur = a(i0, j) - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (std::size_t j = 0; j <= nj; ++j) {
                if (used[j]) {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (owner[j0] != 0);
        do {
            const std::size_t j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
        } while (j0 != 0);
    }
    result.gt_to_pred.assign(cols, 0);
    for (std::size_t j = 1; j <= nj; ++j) {
        if (owner[j] != 0) result.gt_to_pred[owner[j] - 1] = j - 1;
    }
    for (std::size_t i = 0; i < cols; ++i) result.total_cost += cost[result.gt_to_pred[i] * cols + i];
    return result;
}

Tensor multiclass_loss(const MaskDecoderOutput& pred, const std::vector<std::vector<GtSegment>>& gt,
                       const std::vector<Matching>& matchings, std::span<const std::size_t> points,
                       const LossWeights& w, const Tensor& moe_loss) {
    const Tensor& masks = pred.mask_logits;
    if (!pred.class_logits.defined()) throw ConfigError("multi-class loss needs a class head");
    const std::size_t bs = masks.dim(0), n = masks.dim(1), hw = masks.dim(2) * masks.dim(3);
    const std::size_t k1 = pred.class_logits.dim(2);
    if (gt.size() != bs || matchings.size() != bs) throw DimensionError("multiclass_loss: batch size mismatch");

    std::vector<std::size_t> targets(bs * n, k1 - 1);
    Tensor mask_total;
    std::size_t matched = 0;
    for (std::size_t b = 0; b < bs; ++b) {
        if (matchings[b].gt_to_pred.size() != gt[b].size()) throw DimensionError("matching does not cover gt");
        for (std::size_t i = 0; i < gt[b].size(); ++i) {
            const std::size_t slot = matchings[b].gt_to_pred[i];
            targets[b * n + slot] = gt[b][i].category;
            std::vector<std::size_t> idx(points.size());
            std::vector<double> tgt(points.size());
            for (std::size_t q = 0; q < points.size(); ++q) {
                idx[q] = (b * n + slot) * hw + points[q];
                tgt[q] = gt[b][i].mask[points[q]];
            }
            const Tensor sampled = ops::gather(masks, idx);
            const Tensor term = ops::add(ops::scale(ops::bce_with_logits(sampled, tgt), w.ce),
                                         ops::scale(ops::dice_loss(sampled, tgt), w.dice));
            mask_total = mask_total.defined() ? ops::add(mask_total, term) : term;
            ++matched;
        }
    }
    const Tensor class_rows = ops::reshape(pred.class_logits, {bs * n, k1});
    Tensor loss = ops::scale(ops::cross_entropy(class_rows, targets), w.cls);
    if (matched > 0) loss = ops::add(loss, ops::scale(mask_total, w.mask / static_cast<double>(matched)));
    if (moe_loss.defined()) loss = ops::add(loss, ops::scale(moe_loss, w.moe));
    return loss;
}

std::vector<double> structure_weights(std::span<const double> gt, std::size_t h, std::size_t w) {
    if (gt.size() != h * w) throw DimensionError("structure_weights: extent mismatch");
    // Summed-area table for 15 x 15 window means over valid pixels.
    std::vector<double> sat((h + 1) * (w + 1), 0.0);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
            sat[(y + 1) * (w + 1) + x + 1] =
                gt[y * w + x] + sat[y * (w + 1) + x + 1] + sat[(y + 1) * (w + 1) + x] - sat[y * (w + 1) + x];
    constexpr std::size_t r = 7;
    std::vector<double> out(h * w);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
            const std::size_t y0 = y >= r ? y - r : 0, y1 = std::min(h, y + r + 1);
            const std::size_t x0 = x >= r ? x - r : 0, x1 = std::min(w, x + r + 1);
            const double s = sat[y1 * (w + 1) + x1] - sat[y0 * (w + 1) + x1] - sat[y1 * (w + 1) + x0] +
                             sat[y0 * (w + 1) + x0];
            const double mean = s / static_cast<double>((y1 - y0) * (x1 - x0));
            out[y * w + x] = 1.0 + 5.0 * std::abs(mean - gt[y * w + x]);
        }
    return out;
}

Tensor structure_loss(const Tensor& logits, std::span<const double> gt) {
    if (logits.rank() != 4 || logits.dim(1) != 1) {
        throw DimensionError(fmt::format("structure_loss expects B x 1 x H x W logits, got {}", shape_str(logits.shape())));
    }
    if (gt.size() != logits.numel()) throw DimensionError("structure_loss: gt size mismatch");
    for (double t : gt)
        if (t != 0.0 && t != 1.0) throw DataError("structure_loss: ground truth must be binary");
    const std::size_t bs = logits.dim(0), h = logits.dim(2), w = logits.dim(3), hw = h * w;
    std::vector<double> weights(logits.numel());
    for (std::size_t b = 0; b < bs; ++b) {
        const auto wb = structure_weights(gt.subspan(b * hw, hw), h, w);
        std::copy(wb.begin(), wb.end(), weights.begin() + static_cast<std::ptrdiff_t>(b * hw));
    }

    struct ImageStats {
        double wsum = 0.0, wbce = 0.0, inter = 0.0, uni = 0.0;
    };
    std::vector<ImageStats> stats(bs);
    auto x = logits.data();
    double total = 0.0;
    for (std::size_t b = 0; b < bs; ++b) {
        ImageStats& s = stats[b];
        for (std::size_t i = b * hw; i < (b + 1) * hw; ++i) {
            const double p = ops::sigmoid_value(x[i]);
            s.wsum += weights[i];
            s.wbce += weights[i] * bce_value(x[i], gt[i]);
            s.inter += weights[i] * p * gt[i];
            s.uni += weights[i] * (p + gt[i]);
        }
        total += s.wbce / s.wsum + 1.0 - (s.inter + 1.0) / (s.uni - s.inter + 1.0);
    }
    Tensor out = Tensor::scalar(total / static_cast<double>(bs));
    if (!std::isfinite(out.item())) throw NumericError("structure_loss produced a non-finite value");

    Tape* tape = Tape::active();
    if (tape && logits.requires_grad()) {
        out.set_requires_grad(true);
        std::vector<double> gcopy(gt.begin(), gt.end());
        tape->record({"structure_loss", {logits}, out,
                      [logits, out, gcopy = std::move(gcopy), weights = std::move(weights), stats, bs, hw]() {
                          const double go = out.grad()[0] / static_cast<double>(bs);
                          auto xs = logits.data();
                          auto gx = logits.mutable_grad();
                          for (std::size_t b = 0; b < bs; ++b) {
                              const ImageStats& s = stats[b];
                              const double a = s.inter + 1.0, den = s.uni - s.inter + 1.0;
                              for (std::size_t i = b * hw; i < (b + 1) * hw; ++i) {
                                  const double p = ops::sigmoid_value(xs[i]), t = gcopy[i], wi = weights[i];
                                  const double d_bce = wi * (p - t) / s.wsum;
                                  const double d_iou_dp = -(wi * t * den - a * wi * (1.0 - t)) / (den * den);
                                  gx[i] += go * (d_bce + d_iou_dp * p * (1.0 - p));
                              }
                          }
                      }});
    }
    return out;
}

// --- inference and metrics ----------------------------------------------------------

std::vector<std::size_t> semantic_inference(const MaskDecoderOutput& out) {
    if (!out.class_logits.defined()) throw ConfigError("semantic inference needs a class head");
    const Tensor& masks = out.mask_logits;
    const std::size_t bs = masks.dim(0), n = masks.dim(1), hw = masks.dim(2) * masks.dim(3);
    const std::size_t k1 = out.class_logits.dim(2), k = k1 - 1;
    std::vector<std::size_t> labels(bs * hw, 0);
    std::vector<double> prob, score(k * hw);
    for (std::size_t b = 0; b < bs; ++b) {
        std::fill(score.begin(), score.end(), 0.0);
        for (std::size_t j = 0; j < n; ++j) {
            softmax_row(out.class_logits.data().subspan((b * n + j) * k1, k1), prob);
            const double* m = masks.data().data() + (b * n + j) * hw;
            for (std::size_t c = 0; c < k; ++c)
                for (std::size_t p = 0; p < hw; ++p) score[c * hw + p] += ops::sigmoid_value(m[p]) * prob[c];
        }
        for (std::size_t p = 0; p < hw; ++p) {
            std::size_t best = 0;
            for (std::size_t c = 1; c < k; ++c)
                if (score[c * hw + p] > score[best * hw + p]) best = c;
            labels[b * hw + p] = best;
        }
    }
    return labels;
}

BinaryScores binary_scores(std::span<const double> prob, std::span<const double> gt) {
    if (prob.size() != gt.size() || prob.empty()) throw DimensionError("binary_scores: extent mismatch");
    double tp = 0, fp = 0, fn = 0, tn = 0, abs_err = 0;
    for (std::size_t i = 0; i < prob.size(); ++i) {
        const bool p = prob[i] >= 0.5, t = gt[i] >= 0.5;
        tp += p && t;
        fp += p && !t;
        fn += !p && t;
        tn += !p && !t;
        abs_err += std::abs(prob[i] - gt[i]);
    }
    BinaryScores s;
    const double uni = tp + fp + fn;
    s.iou = uni == 0 ? 1.0 : tp / uni;
    s.dice = uni == 0 ? 1.0 : 2.0 * tp / (2.0 * tp + fp + fn);
    s.acc = (tp + tn) / static_cast<double>(prob.size());
    s.mae = abs_err / static_cast<double>(prob.size());
    const double fnr = tp + fn == 0 ? 0.0 : fn / (tp + fn);
    const double fpr = tn + fp == 0 ? 0.0 : fp / (tn + fp);
    s.ber = 50.0 * (fnr + fpr);
    return s;
}

void MetricAccumulator::add_binary(std::span<const double> prob, std::span<const double> gt) {
    const BinaryScores s = binary_scores(prob, gt);
    sum_.iou += s.iou;
    sum_.dice += s.dice;
    sum_.acc += s.acc;
    sum_.mae += s.mae;
    sum_.ber += s.ber;
    ++images_;
}

void MetricAccumulator::add_labels(std::span<const std::size_t> pred, std::span<const std::size_t> gt,
                                   std::size_t num_classes) {
    if (pred.size() != gt.size()) throw DimensionError("add_labels: extent mismatch");
    if (inter_.size() < num_classes) {
        inter_.resize(num_classes, 0.0);
        uni_.resize(num_classes, 0.0);
    }
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (pred[i] >= num_classes || gt[i] >= num_classes) throw DataError("label outside category range");
        if (pred[i] == gt[i]) {
            inter_[gt[i]] += 1.0;
            uni_[gt[i]] += 1.0;
            ++label_correct_;
        } else {
            uni_[gt[i]] += 1.0;
            uni_[pred[i]] += 1.0;
        }
    }
    label_pixels_ += pred.size();
}

std::map<std::string, double> MetricAccumulator::result() const {
    std::map<std::string, double> r;
    if (images_ > 0) {
        const double n = static_cast<double>(images_);
        r["iou"] = sum_.iou / n;
        r["dice"] = sum_.dice / n;
        r["acc"] = sum_.acc / n;
        r["mae"] = sum_.mae / n;
        r["ber"] = sum_.ber / n;
    }
    if (label_pixels_ > 0) {
        double total = 0.0;
        std::size_t present = 0;
        for (std::size_t c = 0; c < uni_.size(); ++c) {
            if (uni_[c] == 0.0) continue;
            total += inter_[c] / uni_[c];
            ++present;
        }
        r["miou"] = present == 0 ? 1.0 : total / static_cast<double>(present);
        r["acc"] = static_cast<double>(label_correct_) / static_cast<double>(label_pixels_);
    }
    return r;
}

void write_metrics_header(std::ostream& os) { os << "run_id,epoch,split,metric,value\n"; }

void write_metric_row(std::ostream& os, const MetricRow& row) {
    os << fmt::format("{},{},{},{},{:.17g}\n", row.run_id, row.epoch, row.split, row.metric, row.value);
}

} // namespace convlora
