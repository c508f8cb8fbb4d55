// Copyright (c) 2026, Conv-LoRA Desk Authors
// SPDX-License-Identifier: Apache-2.0
//
// Mask decoder with a per-token classification branch, bipartite matching,
// binary and multi-class losses, semantic inference and evaluation metrics.

#pragma once

#include <cstdint>
#include <map>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "convlora/encoder.hpp"
#include "convlora/parameters.hpp"
#include "convlora/tensor.hpp"

namespace convlora {

struct DecoderConfig {
    std::size_t feature_dim = 32; // encoder width
    std::size_t grid = 8;         // encoder grid side
    std::size_t image_size = 64;
    std::size_t dim = 128;
    std::size_t heads = 4;
    std::size_t depth = 2;
    std::size_t mlp_ratio = 2;
    std::size_t prompt_tokens = 2;
    std::size_t mask_tokens = 1;
    // Semantic categories (background included). 0 disables the class head.
    std::size_t num_classes = 0;

    void validate() const;
};

struct MaskDecoderOutput {
    Tensor mask_logits;  // B x N x S x S
    Tensor class_logits; // B x N x (K + 1); index K is "no object". Undefined without a class head.
};

class MaskDecoder {
public:
    MaskDecoder(DecoderConfig cfg, std::uint64_t seed);

    const DecoderConfig& config() const noexcept { return cfg_; }
    MaskDecoderOutput forward(const Tensor& features) const;
    /// Trainable parameters only; the prompt tokens are seed-derived constants.
    void collect_parameters(ParameterMap& out, const std::string& prefix = "decoder.") const;

    const Tensor& mask_tokens() const noexcept { return mask_tokens_; }
    const Tensor& prompt_tokens() const noexcept { return prompt_tokens_; }

private:
    struct AttentionWeights {
        Tensor wq, wk, wv, wo, bo;
    };
    struct Block {
        Tensor norm_self_gamma, norm_self_beta;
        AttentionWeights self_attn;
        Tensor norm_cross_gamma, norm_cross_beta;
        AttentionWeights token_to_image;
        Tensor norm_mlp_gamma, norm_mlp_beta;
        Tensor fc1_weight, fc1_bias, fc2_weight, fc2_bias;
        Tensor norm_image_gamma, norm_image_beta;
        AttentionWeights image_to_token;
    };
    struct Mlp3 {
        Tensor w1, b1, w2, b2, w3, b3;
    };

    Tensor attend(const AttentionWeights& w, const Tensor& q_in, const Tensor& k_in, const Tensor& v_in) const;
    static Tensor mlp3(const Mlp3& m, const Tensor& x);

    DecoderConfig cfg_;
    Tensor neck_weight_, neck_gamma_, neck_beta_, image_pos_;
    Tensor prompt_tokens_, mask_tokens_;
    std::vector<Block> blocks_;
    Tensor final_gamma_, final_beta_;
    Tensor up1_weight_, up2_weight_;
    Mlp3 hyper_, class_head_;
};

/// Full model: encoder, decoder and the combined parameter registry.
struct SegModel {
    VitEncoder encoder;
    MaskDecoder decoder;

    SegModel(const EncoderConfig& ecfg, const DecoderConfig& dcfg, std::uint64_t seed);
    MaskDecoderOutput forward(const Tensor& images, const ForwardContext& ctx, EncoderOutput* enc = nullptr) const;
    ParameterMap parameters() const;
};

/// 2x pixel shuffle: B x 4C x H x W -> B x C x 2H x 2W.
Tensor pixel_shuffle2(const Tensor& x);

// --- losses --------------------------------------------------------------------

struct LossWeights {
    double mask = 1.0;
    double cls = 2.0;
    double moe = 1.0;
    double ce = 5.0;
    double dice = 5.0;
};

/// One ground-truth segment: a category and its binary S x S mask.
struct GtSegment {
    std::size_t category = 0;
    std::vector<double> mask;
};

/// One segment per category present in a label map, in category order.
std::vector<GtSegment> segments_from_labels(std::span<const std::size_t> labels, std::size_t num_classes);

/// Per-image N x M cost (row-major, prediction-major):
/// ce * BCE(mask_j, gt_i) + dice * Dice(mask_j, gt_i) - cls * softmax(class_j)[category_i],
/// with mask terms evaluated at the flat pixel indices `points`.
std::vector<double> match_cost(const MaskDecoderOutput& pred, std::size_t image, const std::vector<GtSegment>& gt,
                               std::span<const std::size_t> points, const LossWeights& w);

struct Matching {
    std::vector<std::size_t> gt_to_pred; // injective
    double total_cost = 0.0;
};

/// Minimal-cost assignment of every column (gt) to a distinct row (prediction)
/// of an rows x cols cost matrix.
Matching hungarian_match(std::span<const double> cost, std::size_t rows, std::size_t cols);

/// Matched slots incur ce*BCE + dice*Dice at `points` (averaged over matched
/// slots, scaled by the mask weight); every slot incurs cross-entropy toward
/// its matched category or "no object" (scaled by the class weight);
/// `moe_loss`, when defined, is added scaled by the MoE weight.
Tensor multiclass_loss(const MaskDecoderOutput& pred, const std::vector<std::vector<GtSegment>>& gt,
                       const std::vector<Matching>& matchings, std::span<const std::size_t> points,
                       const LossWeights& w, const Tensor& moe_loss = {});

/// Per-pixel weights 1 + 5 |meanpool15(gt) - gt| with border windows averaged
/// over their valid pixels, for one S x S mask.
std::vector<double> structure_weights(std::span<const double> gt, std::size_t h, std::size_t w);

/// Weighted BCE plus weighted IoU loss on B x 1 x H x W logits against binary
/// gt (same layout), averaged over the batch.
Tensor structure_loss(const Tensor& logits, std::span<const double> gt);

// --- inference and metrics ----------------------------------------------------------

/// B x S x S labels: argmax over real categories of sum_j sigmoid(mask_j) softmax(class_j)[c].
std::vector<std::size_t> semantic_inference(const MaskDecoderOutput& out);

struct BinaryScores {
    double iou = 0.0, dice = 0.0, acc = 0.0, mae = 0.0, ber = 0.0;
};

/// Scores one predicted probability map (thresholded at 0.5) against a
/// binary gt. An empty union scores IoU = Dice = 1.
BinaryScores binary_scores(std::span<const double> prob, std::span<const double> gt);

/// Accumulates per-image binary scores and per-category intersections and
/// unions over a split.
class MetricAccumulator {
public:
    void add_binary(std::span<const double> prob, std::span<const double> gt);
    void add_labels(std::span<const std::size_t> pred, std::span<const std::size_t> gt, std::size_t num_classes);
    /// Metric name -> value. Binary: iou, dice, acc, mae, ber. Labels: miou, acc.
    std::map<std::string, double> result() const;

private:
    std::size_t images_ = 0;
    BinaryScores sum_;
    std::vector<double> inter_, uni_;
    std::size_t label_pixels_ = 0, label_correct_ = 0;
};

struct MetricRow {
    std::string run_id;
    std::size_t epoch = 0;
    std::string split;
    std::string metric;
    double value = 0.0;
};

void write_metrics_header(std::ostream& os);
void write_metric_row(std::ostream& os, const MetricRow& row);

} // namespace convlora
