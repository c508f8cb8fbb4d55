// Copyright (c) 2026, Conv-LoRA Desk Authors
// SPDX-License-Identifier: Apache-2.0
//

#include "convlora/cli.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <optional>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "convlora/ablation.hpp"
#include "convlora/analysis.hpp"
#include "convlora/errors.hpp"
#include "convlora/gradsuite.hpp"
#include "convlora/ops.hpp"
#include "convlora/training.hpp"

namespace convlora {

namespace {

struct ConfigFlags {
    std::string config;
    std::vector<std::string> sets;
    std::string variant, out, base, preset;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> epochs;
    std::optional<double> lr;

    void attach(CLI::App* app) {
        app->add_option("--config", config, "structured-text config file")->check(CLI::ExistingFile);
        app->add_option("--set", sets, "override one setting, section.key=value")->allow_extra_args(false);
        app->add_option("--variant", variant, "run.variant");
        app->add_option("--seed", seed, "run.seed");
        app->add_option("--out", out, "output directory");
        app->add_option("--base", base, "pretrained weights (run.base)");
        app->add_option("--preset", preset, "data.preset");
        app->add_option("--epochs", epochs, "train.epochs");
        app->add_option("--lr", lr, "train.lr");
    }

    RunConfig resolve() const {
        RunConfig cfg;
        if (!config.empty()) load_config_file(config, cfg);
        for (const auto& s : sets) {
            const auto eq = s.find('=');
            if (eq == std::string::npos) throw ConfigError(fmt::format("--set expects key=value, got '{}'", s));
            std::string key = s.substr(0, eq), value = s.substr(eq + 1);
            auto trim = [](std::string& t) {
                t.erase(0, t.find_first_not_of(" \t"));
                t.erase(t.find_last_not_of(" \t") + 1);
            };
            trim(key);
            trim(value);
            apply_setting(cfg, key, value);
        }
        if (!variant.empty()) apply_setting(cfg, "run.variant", variant);
        if (seed) cfg.seed = *seed;
        if (!out.empty()) cfg.out = out;
        if (!base.empty()) cfg.base = base;
        if (!preset.empty()) apply_setting(cfg, "data.preset", preset);
        if (epochs) cfg.epochs = *epochs;
        if (lr) cfg.adam.lr = *lr;
        cfg.validate();
        return cfg;
    }
};

void print_metrics(std::ostream& os, const std::string& label, const Metrics& m) {
    os << label;
    for (const auto& [k, v] : m) os << fmt::format(" {}={:.4f}", k, v);
    os << "\n";
}

std::filesystem::path require_dir(const std::string& out) {
    if (out.empty()) throw ConfigError("--out is required");
    std::filesystem::create_directories(out);
    return out;
}

int cmd_train(const ConfigFlags& flags, std::ostream& os) {
    const RunConfig cfg = flags.resolve();
    const RunResult r = train(cfg);
    os << fmt::format("{} ({}): {} steps, trainable {} / {} ({:.4f}%), median step {:.2f} ms\n", cfg.run_id,
                      to_string(cfg.variant), r.steps, r.params.trainable, r.params.total, 100.0 * r.params.ratio,
                      r.median_step_ms);
    print_metrics(os, fmt::format("best val (epoch {}):", r.best_epoch), r.best_val);
    print_metrics(os, "test:", r.test);
    if (!cfg.out.empty()) os << "artifacts in " << cfg.out.string() << "\n";
    return kExitOk;
}

// Loads cfg + checkpoint and runs the first `count` images of a split.
struct Inspection {
    Dataset data;
    MaskDecoderOutput out;
    EncoderOutput enc;
    std::vector<GateDecision> gates;
};

Inspection inspect(const RunConfig& cfg, const std::string& checkpoint, Split split, std::size_t count,
                   bool keep_internals) {
    const SegModel model(cfg.encoder_config(), cfg.decoder_config(), cfg.seed);
    load_checkpoint(checkpoint, model.parameters());
    Inspection ins;
    ins.data = gen_synthetic(cfg.data, cfg.seed, split);
    count = std::min(count, ins.data.size);
    std::vector<std::size_t> items(count);
    std::iota(items.begin(), items.end(), 0);
    const Batch b = make_batch(ins.data, items, {});
    ForwardContext ctx;
    ctx.decisions = &ins.gates;
    ctx.keep_attention = keep_internals;
    ctx.keep_block_features = keep_internals;
    ins.out = model.forward(b.images, ctx, &ins.enc);
    return ins;
}

void dump_masks(const std::filesystem::path& dir, const Inspection& ins) {
    std::filesystem::create_directories(dir);
    const std::size_t s = ins.data.image_size, hw = s * s, n = ins.out.mask_logits.dim(0);
    if (ins.data.num_classes > 0) {
        const auto labels = semantic_inference(ins.out);
        for (std::size_t i = 0; i < n; ++i) {
            std::vector<double> v(labels.begin() + i * hw, labels.begin() + (i + 1) * hw);
            write_pgm(dir / fmt::format("pred_{:03}.pgm", i), v, s, s);
        }
    } else {
        auto logits = ins.out.mask_logits.data();
        for (std::size_t i = 0; i < n; ++i) {
            std::vector<double> v(hw);
            for (std::size_t p = 0; p < hw; ++p) v[p] = ops::sigmoid_value(logits[i * hw + p]);
            write_pgm(dir / fmt::format("pred_{:03}.pgm", i), v, s, s);
        }
    }
    for (std::size_t i = 0; i < n; ++i)
        write_pgm(dir / fmt::format("gt_{:03}.pgm", i), std::span<const double>(ins.data.masks).subspan(i * hw, hw), s, s);
}

int cmd_eval(const ConfigFlags& flags, const std::string& checkpoint, const std::string& split_name, std::size_t dump,
             std::ostream& os) {
    const RunConfig cfg = flags.resolve();
    const Split split = split_from_string(split_name);
    std::vector<GateDecision> gates;
    const Metrics m = evaluate(cfg, checkpoint, split, &gates);
    print_metrics(os, fmt::format("{}:", split_name), m);
    if (!cfg.out.empty()) {
        std::filesystem::create_directories(cfg.out);
        std::ofstream csv(cfg.out / "eval_metrics.csv");
        write_metrics_header(csv);
        for (const auto& [k, v] : m) write_metric_row(csv, {cfg.run_id, 0, split_name, k, v});
        if (!gates.empty()) {
            std::ofstream log(cfg.out / "eval_gate_log.csv");
            write_gate_log(log, gates, 3 * cfg.depth);
        }
        if (dump > 0) dump_masks(cfg.out / "masks", inspect(cfg, checkpoint, split, dump, false));
    }
    return kExitOk;
}

int cmd_analyze(const ConfigFlags& flags, const std::string& checkpoint, const std::string& split_name,
                std::size_t images, std::ostream& os) {
    const RunConfig cfg = flags.resolve();
    const auto dir = require_dir(cfg.out.string());
    const Inspection ins = inspect(cfg, checkpoint, split_from_string(split_name), images, true);
    const std::size_t grid = cfg.data.image_size / cfg.patch;

    const AttnDistanceReport attn = attention_distance_report(ins.enc.attention, grid);
    {
        std::ofstream a(dir / "attention_distance.csv");
        write_attention_csv(a, attn);
    }
    std::vector<SpectrumReport> spectra;
    for (const auto& f : ins.enc.block_features) spectra.push_back(fourier_log_amplitude(f));
    {
        std::ofstream s(dir / "spectrum.csv");
        write_spectrum_csv(s, spectra);
    }
    for (std::size_t l = 0; l < attn.distance.size(); ++l) {
        double mean = 0.0;
        for (double d : attn.distance[l]) mean += d;
        mean /= static_cast<double>(attn.distance[l].size());
        os << fmt::format("block {}: mean attention distance {:.4f} patches, highest-band relative log amplitude {:.4f}\n",
                          l, mean, spectra[l].relative.back());
    }
    if (!ins.gates.empty()) {
        const UtilizationHistogram h = expert_utilization(ins.gates, 3 * cfg.depth);
        std::ofstream u(dir / "utilization.csv");
        write_utilization_csv(u, h);
        os << fmt::format("expert utilization over {} decisions: [{}], cv {:.4f}\n", h.decisions(),
                          fmt::join(h.total, ", "), utilization_cv(h.total));
    }
    dump_masks(dir / "masks", ins);
    os << "analysis written to " << dir.string() << "\n";
    return kExitOk;
}

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
    std::vector<std::uint64_t> seeds;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            std::size_t used = 0;
            seeds.push_back(std::stoull(item, &used));
            if (used != item.size()) throw std::invalid_argument(item);
        } catch (const std::exception&) {
            throw ConfigError(fmt::format("bad seed list '{}'", text));
        }
    }
    if (seeds.empty()) throw ConfigError("empty seed list");
    return seeds;
}

int cmd_ablate(const ConfigFlags& flags, const std::string& suite, const std::string& seeds, std::size_t max_steps,
               std::ostream& os) {
    AblationOptions opts;
    opts.base = flags.resolve();
    opts.out = opts.base.out;
    opts.base.out.clear();
    if (max_steps > 0) opts.base.max_steps = max_steps;
    opts.seeds = parse_seeds(seeds);
    run_ablation(ablation_suite_from_string(suite), opts, os);
    return kExitOk;
}

int cmd_gradcheck(std::uint64_t seed, std::size_t seeds, double tol, std::ostream& os) {
    const auto checks = gradient_suite(seed, seeds);
    bool ok = true;
    for (const auto& c : checks) {
        const bool pass = c.max_rel_err < tol;
        ok = ok && pass;
        os << fmt::format("{:<28} max rel err {:.3e} over {} seeds {}\n", c.op, c.max_rel_err, c.seeds,
                          pass ? "ok" : "FAIL");
    }
    return ok ? kExitOk : kExitFailure;
}

int cmd_gen_data(const ConfigFlags& flags, const std::string& split_name, std::size_t count, std::ostream& os) {
    const RunConfig cfg = flags.resolve();
    const auto dir = require_dir(cfg.out.string());
    const Split split = split_from_string(split_name);
    const Dataset d = gen_synthetic(cfg.data, cfg.seed, split);
    count = std::min(count, d.size);
    const std::size_t s = d.image_size, hw = d.pixels();
    std::ofstream objects(dir / "objects.csv");
    objects << "image,shape,category,cy,cx,radius\n";
    for (std::size_t i = 0; i < count; ++i) {
        std::vector<double> gray(hw, 0.0);
        for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t p = 0; p < hw; ++p) gray[p] += d.images[(i * 3 + c) * hw + p] / 3.0;
        write_pgm(dir / fmt::format("image_{:03}.pgm", i), gray, s, s);
        if (d.num_classes > 0) {
            std::vector<double> lab(d.labels.begin() + i * hw, d.labels.begin() + (i + 1) * hw);
            write_pgm(dir / fmt::format("labels_{:03}.pgm", i), lab, s, s);
        } else {
            write_pgm(dir / fmt::format("mask_{:03}.pgm", i), std::span<const double>(d.masks).subspan(i * hw, hw), s, s);
        }
        for (const auto& o : d.objects[i])
            objects << fmt::format("{},{},{},{:.6f},{:.6f},{:.6f}\n", i, static_cast<std::size_t>(o.shape), o.category,
                                   o.cy, o.cx, o.radius);
    }
    os << fmt::format("{} {} images of '{}' written to {}\n", count, split_name, cfg.data.name, dir.string());
    return kExitOk;
}

} // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app("Conv-LoRA desk-scale segmentation toolkit", "convlora");
    app.require_subcommand(1, 1);

    ConfigFlags train_flags, eval_flags, analyze_flags, ablate_flags, data_flags;
    std::string checkpoint, split = "test", suite;
    std::string seeds = "0,1,2";
    std::size_t dump = 4, images = 16, max_steps = 0, count = 16, grad_seeds = 20;
    std::uint64_t grad_seed = 0;
    double tol = 1e-4;

    auto* train_cmd = app.add_subcommand("train", "train one run");
    train_flags.attach(train_cmd);

    auto* eval_cmd = app.add_subcommand("eval", "score a checkpoint on a split");
    eval_flags.attach(eval_cmd);
    eval_cmd->add_option("--checkpoint", checkpoint, "best.ckpt from a train run")->required();
    eval_cmd->add_option("--split", split, "train, val or test");
    eval_cmd->add_option("--dump", dump, "predicted masks to write as PGM");

    auto* analyze_cmd = app.add_subcommand("analyze", "attention distance, spectra and expert utilization");
    analyze_flags.attach(analyze_cmd);
    analyze_cmd->add_option("--checkpoint", checkpoint, "best.ckpt from a train run")->required();
    analyze_cmd->add_option("--split", split, "train, val or test");
    analyze_cmd->add_option("--images", images, "images to analyse");

    auto* ablate_cmd = app.add_subcommand("ablate", "run an ablation suite");
    ablate_flags.attach(ablate_cmd);
    ablate_cmd->add_option("--suite", suite, "moe-vs-multiscale, scale-sweep or rank-sweep")->required();
    ablate_cmd->add_option("--seeds", seeds, "comma-separated seeds");
    ablate_cmd->add_option("--max-steps", max_steps, "cap optimizer steps per run");

    auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference check of every op");
    grad_cmd->add_option("--seed", grad_seed, "first seed");
    grad_cmd->add_option("--seeds", grad_seeds, "number of seeds")->check(CLI::PositiveNumber);
    grad_cmd->add_option("--tol", tol, "relative error bound");

    auto* data_cmd = app.add_subcommand("gen-data", "write synthetic images and masks");
    data_flags.attach(data_cmd);
    data_cmd->add_option("--split", split, "train, val or test");
    data_cmd->add_option("--count", count, "images to write");

    std::vector<std::string> argv(args.rbegin(), args.rend());
    try {
        app.parse(argv);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        err << "usage error: " << e.what() << "\n" << app.help();
        return kExitUsage;
    }

    try {
        if (*train_cmd) return cmd_train(train_flags, out);
        if (*eval_cmd) return cmd_eval(eval_flags, checkpoint, split, dump, out);
        if (*analyze_cmd) return cmd_analyze(analyze_flags, checkpoint, split, images, out);
        if (*ablate_cmd) return cmd_ablate(ablate_flags, suite, seeds, max_steps, out);
        if (*grad_cmd) return cmd_gradcheck(grad_seed, grad_seeds, tol, out);
        if (*data_cmd) return cmd_gen_data(data_flags, split, count, out);
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitFailure;
    }
    return kExitUsage;
}

} // namespace convlora
