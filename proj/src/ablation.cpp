// Copyright (c) 2026, Conv-LoRA Desk Authors
// SPDX-License-Identifier: Apache-2.0
//

#include "convlora/ablation.hpp"

#include <algorithm>
#include <fstream>

#include <fmt/format.h>

#include "convlora/errors.hpp"
#include "convlora/training.hpp"

namespace convlora {

namespace {

double median(std::vector<double> v) {
    if (v.empty()) return 0.0;
    std::sort(v.begin(), v.end());
    const std::size_t m = v.size() / 2;
    return v.size() % 2 == 1 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

std::filesystem::path run_dir(const AblationOptions& opts, AblationSuite suite, const std::string& run) {
    if (opts.out.empty()) return {};
    return opts.out / to_string(suite) / run;
}

std::string scale_tag(double s) { return fmt::format("{:g}", s); }

} // namespace

std::string to_string(AblationSuite s) {
    switch (s) {
    case AblationSuite::moe_vs_multiscale: return "moe-vs-multiscale";
    case AblationSuite::scale_sweep: return "scale-sweep";
    case AblationSuite::rank_sweep: return "rank-sweep";
    }
    return "?";
}

AblationSuite ablation_suite_from_string(const std::string& name) {
    for (auto s : {AblationSuite::moe_vs_multiscale, AblationSuite::scale_sweep, AblationSuite::rank_sweep})
        if (to_string(s) == name) return s;
    throw ConfigError(fmt::format("unknown ablation suite '{}'", name));
}

SpeedComparison run_moe_vs_multiscale(const AblationOptions& opts) {
    SpeedComparison out;
    std::vector<double> moe_ms, ms_ms;
    for (std::uint64_t seed : opts.seeds) {
        for (auto v : {RunVariant::conv_lora, RunVariant::multi_scale}) {
            RunConfig cfg = opts.base;
            cfg.variant = v;
            cfg.seed = seed;
            cfg.run_id = fmt::format("{}-s{}", to_string(v), seed);
            cfg.out = run_dir(opts, AblationSuite::moe_vs_multiscale, cfg.run_id);
            const RunResult r = train(cfg);
            SpeedRow row;
            row.variant = to_string(v);
            row.seed = seed;
            row.trainable = r.params.trainable;
            row.steps = r.steps;
            row.expert_evaluations = r.expert_evaluations;
            row.median_step_ms = r.median_step_ms;
            row.iter_per_s = r.median_step_ms > 0.0 ? 1000.0 / r.median_step_ms : 0.0;
            out.metric = r.best_val.count("miou") ? "miou" : "iou";
            row.test_metric = r.test.at(out.metric);
            if (v == RunVariant::conv_lora) {
                moe_ms.push_back(r.median_step_ms);
                out.moe_evaluations += r.expert_evaluations;
            } else {
                ms_ms.push_back(r.median_step_ms);
                out.multiscale_evaluations += r.expert_evaluations;
            }
            out.rows.push_back(row);
        }
    }
    out.moe_ms = median(moe_ms);
    out.multiscale_ms = median(ms_ms);
    return out;
}

ScaleSweep run_scale_sweep(const AblationOptions& opts) {
    ScaleSweep out;
    for (const auto& name : opts.datasets) {
        for (std::uint64_t seed : opts.seeds) {
            double best_scale = 0.0, best = -1.0;
            for (double s : opts.scales) {
                RunConfig cfg = opts.base;
                const DatasetSpec sizes = cfg.data;
                cfg.data = dataset_preset(name);
                cfg.data.train_size = sizes.train_size;
                cfg.data.val_size = sizes.val_size;
                cfg.data.test_size = sizes.test_size;
                cfg.data.image_size = sizes.image_size;
                cfg.variant = RunVariant::single_expert;
                cfg.single_scale = s;
                cfg.seed = seed;
                cfg.run_id = fmt::format("{}-x{}-s{}", name, scale_tag(s), seed);
                cfg.out = run_dir(opts, AblationSuite::scale_sweep, cfg.run_id);
                const RunResult r = train(cfg);
                out.metric = r.best_val.count("miou") ? "miou" : "iou";
                ScaleRow row{name, s, seed, r.best_val.at(out.metric), r.test.at(out.metric)};
                if (row.test_metric > best) {
                    best = row.test_metric;
                    best_scale = s;
                }
                out.rows.push_back(row);
            }
            out.argmax[name].push_back(best_scale);
        }
        const auto& picks = out.argmax[name];
        out.majority[name] = std::nullopt;
        for (double s : opts.scales) {
            const auto votes = static_cast<std::size_t>(std::count(picks.begin(), picks.end(), s));
            if (2 * votes > picks.size()) out.majority[name] = s;
        }
    }
    return out;
}

std::vector<RankRow> run_rank_sweep(const AblationOptions& opts) {
    std::vector<RankRow> rows;
    for (std::size_t r : opts.ranks) {
        for (auto v : {RunVariant::lora, RunVariant::conv_lora}) {
            RunConfig cfg = opts.base;
            cfg.base.clear();
            cfg.variant = v;
            cfg.rank = r;
            cfg.validate();
            const SegModel model(cfg.encoder_config(), cfg.decoder_config(), cfg.seed);
            const ParameterMap params = model.parameters();
            const ParamCount c = count_params(params, apply_freeze(params, freeze_policy_of(v)));
            rows.push_back({r, to_string(v), c.trainable, c.total, c.ratio});
        }
    }
    return rows;
}

void write_csv(std::ostream& os, const SpeedComparison& r) {
    os << fmt::format("variant,seed,trainable,steps,expert_evaluations,median_step_ms,iter_per_s,test_{}\n", r.metric);
    for (const auto& row : r.rows) {
        os << fmt::format("{},{},{},{},{},{:.6f},{:.6f},{:.17g}\n", row.variant, row.seed, row.trainable, row.steps,
                          row.expert_evaluations, row.median_step_ms, row.iter_per_s, row.test_metric);
    }
}

void write_csv(std::ostream& os, const ScaleSweep& r) {
    os << fmt::format("dataset,scale,seed,val_{0},test_{0}\n", r.metric);
    for (const auto& row : r.rows) {
        os << fmt::format("{},{:g},{},{:.17g},{:.17g}\n", row.dataset, row.scale, row.seed, row.val_metric,
                          row.test_metric);
    }
}

void write_csv(std::ostream& os, const std::vector<RankRow>& rows) {
    os << "rank,variant,trainable,total,ratio\n";
    for (const auto& row : rows)
        os << fmt::format("{},{},{},{},{:.17g}\n", row.rank, row.variant, row.trainable, row.total, row.ratio);
}

void run_ablation(AblationSuite suite, const AblationOptions& opts, std::ostream& os) {
    std::ofstream file;
    std::ostream* sink = &os;
    if (!opts.out.empty()) {
        std::filesystem::create_directories(opts.out);
        file.open(opts.out / (to_string(suite) + ".csv"));
        if (!file) throw ConfigError(fmt::format("cannot write to {}", opts.out.string()));
        sink = &file;
    }
    switch (suite) {
    case AblationSuite::moe_vs_multiscale: {
        const auto r = run_moe_vs_multiscale(opts);
        write_csv(*sink, r);
        os << fmt::format("median step ms: moe {:.3f}, multi-scale {:.3f}; expert evaluations {} vs {}\n", r.moe_ms,
                          r.multiscale_ms, r.moe_evaluations, r.multiscale_evaluations);
        break;
    }
    case AblationSuite::scale_sweep: {
        const auto r = run_scale_sweep(opts);
        write_csv(*sink, r);
        for (const auto& [name, pick] : r.majority) {
            os << fmt::format("{}: best scale per seed [{}], majority {}\n", name, fmt::join(r.argmax.at(name), ", "),
                              pick ? scale_tag(*pick) : std::string("none"));
        }
        break;
    }
    case AblationSuite::rank_sweep: write_csv(*sink, run_rank_sweep(opts)); break;
    }
}

} // namespace convlora
