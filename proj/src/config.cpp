// Copyright (c) 2026, Conv-LoRA Desk Authors
// SPDX-License-Identifier: Apache-2.0
//

#include "convlora/config.hpp"

#include <charconv>
#include <fmt/format.h>
#include <fstream>
#include <functional>
#include <sstream>

namespace convlora {

std::string to_string(RunVariant v) {
    switch (v) {
    case RunVariant::decoder_only: return "decoder-only";
    case RunVariant::lora: return "lora";
    case RunVariant::conv_lora: return "conv-lora";
    case RunVariant::multi_scale: return "multi-scale";
    case RunVariant::single_expert: return "single-expert";
    case RunVariant::full: return "full";
    case RunVariant::from_scratch: return "from-scratch";
    }
    return "?";
}

RunVariant run_variant_from_string(const std::string& name) {
    for (auto v : {RunVariant::decoder_only, RunVariant::lora, RunVariant::conv_lora, RunVariant::multi_scale,
                   RunVariant::single_expert, RunVariant::full, RunVariant::from_scratch}) {
        if (to_string(v) == name) return v;
    }
    throw ConfigError(fmt::format("unknown variant '{}'", name));
}

AdapterVariant adapter_variant_of(RunVariant v) {
    switch (v) {
    case RunVariant::lora: return AdapterVariant::lora;
    case RunVariant::conv_lora: return AdapterVariant::conv_lora;
    case RunVariant::multi_scale:
    case RunVariant::single_expert: return AdapterVariant::multi_scale;
    default: return AdapterVariant::none;
    }
}

FreezePolicy freeze_policy_of(RunVariant v) {
    switch (v) {
    case RunVariant::decoder_only: return FreezePolicy::decoder_only;
    case RunVariant::full: return FreezePolicy::full;
    case RunVariant::from_scratch: return FreezePolicy::from_scratch;
    default: return FreezePolicy::peft;
    }
}

void RunConfig::validate() const {
    data.validate();
    encoder_config().validate();
    decoder_config().validate();
    if (batch_size == 0 || eval_batch == 0) throw ConfigError("batch sizes must be positive");
    if (epochs == 0) throw ConfigError("epochs must be positive");
    if (!(adam.lr > 0.0) || adam.weight_decay < 0.0) throw ConfigError("learning rate must be positive");
    if (!(adam.adapter_lr_scale > 0.0)) throw ConfigError("adapter learning-rate scale must be positive");
    if (variant == RunVariant::conv_lora && (top_k == 0 || top_k > experts)) {
        throw ConfigError(fmt::format("top-k {} outside [1, {}]", top_k, experts));
    }
    if (!scales.empty() && scales.size() != experts) {
        throw ConfigError(fmt::format("{} scales given for {} experts", scales.size(), experts));
    }
    if (variant == RunVariant::from_scratch && !base.empty()) {
        throw ConfigError("the from-scratch variant does not load pretrained weights");
    }
}

EncoderConfig RunConfig::encoder_config() const {
    EncoderConfig e;
    e.image_size = data.image_size;
    e.patch_size = patch;
    e.dim = dim;
    e.depth = depth;
    e.heads = heads;
    e.mlp_ratio = mlp_ratio;
    e.variant = adapter_variant_of(variant);
    e.rank = rank;
    e.top_k = top_k;
    e.gate_noise = gate_noise;
    if (variant == RunVariant::single_expert) {
        e.experts = 1;
        e.scales = {single_scale};
    } else {
        e.experts = experts;
        e.scales = scales;
    }
    return e;
}

DecoderConfig RunConfig::decoder_config() const {
    DecoderConfig d;
    d.feature_dim = dim;
    d.grid = patch == 0 ? 0 : data.image_size / patch;
    d.image_size = data.image_size;
    d.dim = decoder_dim;
    d.depth = decoder_depth;
    d.heads = decoder_heads;
    if (data.task == TaskKind::multiclass) {
        d.mask_tokens = mask_tokens;
        d.num_classes = data.shape_classes + 1;
    } else {
        d.mask_tokens = 1;
        d.num_classes = 0;
    }
    return d;
}

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
    T out{};
    const char* first = value.data();
    const char* last = value.data() + value.size();
    const auto [ptr, ec] = std::from_chars(first, last, out);
    if (ec != std::errc() || ptr != last) throw ConfigError(fmt::format("{}: '{}' is not a valid number", key, value));
    return out;
}

double parse_double(const std::string& key, const std::string& value) {
    try {
        std::size_t used = 0;
        const double v = std::stod(value, &used);
        if (used != value.size()) throw std::invalid_argument(value);
        return v;
    } catch (const std::exception&) {
        throw ConfigError(fmt::format("{}: '{}' is not a valid number", key, value));
    }
}

bool parse_bool(const std::string& key, const std::string& value) {
    if (value == "true" || value == "1" || value == "yes" || value == "on") return true;
    if (value == "false" || value == "0" || value == "no" || value == "off") return false;
    throw ConfigError(fmt::format("{}: '{}' is not a boolean", key, value));
}

std::vector<double> parse_list(const std::string& key, const std::string& value) {
    std::vector<double> out;
    std::stringstream ss(value);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(parse_double(key, item));
    }
    return out;
}

using Setter = std::function<void(RunConfig&, const std::string&, const std::string&)>;

const std::map<std::string, Setter>& setters() {
    static const std::map<std::string, Setter> table = [] {
        std::map<std::string, Setter> t;
        auto size = [&t](const std::string& k, std::size_t RunConfig::*field) {
            t[k] = [field](RunConfig& c, const std::string& key, const std::string& v) {
                c.*field = parse_number<std::size_t>(key, v);
            };
        };
        auto data_size = [&t](const std::string& k, std::size_t DatasetSpec::*field) {
            t[k] = [field](RunConfig& c, const std::string& key, const std::string& v) {
                c.data.*field = parse_number<std::size_t>(key, v);
            };
        };
        auto data_real = [&t](const std::string& k, double DatasetSpec::*field) {
            t[k] = [field](RunConfig& c, const std::string& key, const std::string& v) {
                c.data.*field = parse_double(key, v);
            };
        };
        auto loss = [&t](const std::string& k, double LossWeights::*field) {
            t[k] = [field](RunConfig& c, const std::string& key, const std::string& v) {
                c.loss.*field = parse_double(key, v);
            };
        };
        t["run.id"] = [](RunConfig& c, const std::string&, const std::string& v) { c.run_id = v; };
        t["run.seed"] = [](RunConfig& c, const std::string& k, const std::string& v) {
            c.seed = parse_number<std::uint64_t>(k, v);
        };
        t["run.variant"] = [](RunConfig& c, const std::string&, const std::string& v) {
            c.variant = run_variant_from_string(v);
        };
        t["run.out"] = [](RunConfig& c, const std::string&, const std::string& v) { c.out = v; };
        t["run.base"] = [](RunConfig& c, const std::string&, const std::string& v) { c.base = v; };

        size("model.dim", &RunConfig::dim);
        size("model.depth", &RunConfig::depth);
        size("model.heads", &RunConfig::heads);
        size("model.patch", &RunConfig::patch);
        size("model.mlp_ratio", &RunConfig::mlp_ratio);
        size("model.rank", &RunConfig::rank);
        size("model.experts", &RunConfig::experts);
        size("model.top_k", &RunConfig::top_k);
        size("model.decoder_dim", &RunConfig::decoder_dim);
        size("model.decoder_depth", &RunConfig::decoder_depth);
        size("model.decoder_heads", &RunConfig::decoder_heads);
        size("model.mask_tokens", &RunConfig::mask_tokens);
        t["model.scales"] = [](RunConfig& c, const std::string& k, const std::string& v) { c.scales = parse_list(k, v); };
        t["model.scale"] = [](RunConfig& c, const std::string& k, const std::string& v) {
            c.single_scale = parse_double(k, v);
        };
        t["model.gate_noise"] = [](RunConfig& c, const std::string& k, const std::string& v) {
            c.gate_noise = parse_bool(k, v);
        };

        t["train.lr"] = [](RunConfig& c, const std::string& k, const std::string& v) { c.adam.lr = parse_double(k, v); };
        t["train.adapter_lr_scale"] = [](RunConfig& c, const std::string& k, const std::string& v) {
            c.adam.adapter_lr_scale = parse_double(k, v);
        };
        t["train.weight_decay"] = [](RunConfig& c, const std::string& k, const std::string& v) {
            c.adam.weight_decay = parse_double(k, v);
        };
        size("train.batch_size", &RunConfig::batch_size);
        size("train.epochs", &RunConfig::epochs);
        size("train.max_steps", &RunConfig::max_steps);
        size("train.points", &RunConfig::points);
        size("train.eval_batch", &RunConfig::eval_batch);
        t["train.hflip"] = [](RunConfig& c, const std::string& k, const std::string& v) { c.hflip = parse_bool(k, v); };
        t["train.log_gates"] = [](RunConfig& c, const std::string& k, const std::string& v) {
            c.log_gates = parse_bool(k, v);
        };

        loss("loss.mask", &LossWeights::mask);
        loss("loss.cls", &LossWeights::cls);
        loss("loss.moe", &LossWeights::moe);
        loss("loss.ce", &LossWeights::ce);
        loss("loss.dice", &LossWeights::dice);

        t["data.preset"] = [](RunConfig& c, const std::string&, const std::string& v) {
            const DatasetSpec old = c.data;
            c.data = dataset_preset(v);
            c.data.train_size = old.train_size;
            c.data.val_size = old.val_size;
            c.data.test_size = old.test_size;
        };
        t["data.task"] = [](RunConfig& c, const std::string& k, const std::string& v) {
            if (v == "binary") c.data.task = TaskKind::binary;
            else if (v == "multiclass") c.data.task = TaskKind::multiclass;
            else throw ConfigError(fmt::format("{}: unknown task '{}'", k, v));
        };
        t["data.radius_dist"] = [](RunConfig& c, const std::string& k, const std::string& v) {
            if (v == "log-uniform") c.data.radius_dist = RadiusDistribution::log_uniform;
            else if (v == "uniform") c.data.radius_dist = RadiusDistribution::uniform;
            else throw ConfigError(fmt::format("{}: unknown distribution '{}'", k, v));
        };
        data_size("data.image_size", &DatasetSpec::image_size);
        data_size("data.objects_min", &DatasetSpec::objects_min);
        data_size("data.objects_max", &DatasetSpec::objects_max);
        data_size("data.classes", &DatasetSpec::shape_classes);
        data_size("data.train", &DatasetSpec::train_size);
        data_size("data.val", &DatasetSpec::val_size);
        data_size("data.test", &DatasetSpec::test_size);
        data_real("data.radius_min", &DatasetSpec::radius_min);
        data_real("data.radius_max", &DatasetSpec::radius_max);
        data_real("data.contrast", &DatasetSpec::contrast);
        data_real("data.background_corr", &DatasetSpec::background_corr);
        data_real("data.object_corr", &DatasetSpec::object_corr);
        data_real("data.texture_amplitude", &DatasetSpec::texture_amplitude);
        return t;
    }();
    return table;
}

} // namespace

void apply_setting(RunConfig& cfg, const std::string& key, const std::string& value) {
    const auto& table = setters();
    const auto it = table.find(key);
    if (it == table.end()) throw ConfigError(fmt::format("unknown setting '{}'", key));
    it->second(cfg, key, value);
}

std::vector<std::pair<std::string, std::string>> parse_config_text(const std::string& text) {
    std::vector<std::pair<std::string, std::string>> out;
    std::stringstream ss(text);
    std::string line, section;
    std::size_t lineno = 0;
    while (std::getline(ss, line)) {
        ++lineno;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']' || line.size() < 3) throw ConfigError(fmt::format("line {}: bad section header", lineno));
            section = trim(line.substr(1, line.size() - 2));
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError(fmt::format("line {}: expected key = value", lineno));
        std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty()) throw ConfigError(fmt::format("line {}: empty key", lineno));
        if (!section.empty() && key.find('.') == std::string::npos) key = section + "." + key;
        out.emplace_back(key, value);
    }
    return out;
}

void load_config_file(const std::filesystem::path& path, RunConfig& cfg) {
    std::ifstream is(path);
    if (!is) throw ConfigError(fmt::format("cannot read config file {}", path.string()));
    std::stringstream buf;
    buf << is.rdbuf();
    for (const auto& [k, v] : parse_config_text(buf.str())) apply_setting(cfg, k, v);
}

std::string config_to_text(const RunConfig& c) {
    std::string s;
    auto put = [&s](const std::string& k, const std::string& v) { s += k + " = " + v + "\n"; };
    auto real = [](double v) { return fmt::format("{:.17g}", v); };
    put("run.id", c.run_id);
    put("run.seed", std::to_string(c.seed));
    put("run.variant", to_string(c.variant));
    if (!c.out.empty()) put("run.out", c.out.string());
    if (!c.base.empty()) put("run.base", c.base.string());
    put("model.dim", std::to_string(c.dim));
    put("model.depth", std::to_string(c.depth));
    put("model.heads", std::to_string(c.heads));
    put("model.patch", std::to_string(c.patch));
    put("model.mlp_ratio", std::to_string(c.mlp_ratio));
    put("model.rank", std::to_string(c.rank));
    put("model.experts", std::to_string(c.experts));
    put("model.top_k", std::to_string(c.top_k));
    if (!c.scales.empty()) {
        std::string list;
        for (std::size_t i = 0; i < c.scales.size(); ++i) list += (i ? "," : "") + real(c.scales[i]);
        put("model.scales", list);
    }
    put("model.scale", real(c.single_scale));
    put("model.gate_noise", c.gate_noise ? "true" : "false");
    put("model.decoder_dim", std::to_string(c.decoder_dim));
    put("model.decoder_depth", std::to_string(c.decoder_depth));
    put("model.decoder_heads", std::to_string(c.decoder_heads));
    put("model.mask_tokens", std::to_string(c.mask_tokens));
    put("train.lr", real(c.adam.lr));
    put("train.weight_decay", real(c.adam.weight_decay));
    put("train.adapter_lr_scale", real(c.adam.adapter_lr_scale));
    put("train.batch_size", std::to_string(c.batch_size));
    put("train.epochs", std::to_string(c.epochs));
    put("train.max_steps", std::to_string(c.max_steps));
    put("train.points", std::to_string(c.points));
    put("train.eval_batch", std::to_string(c.eval_batch));
    put("train.hflip", c.hflip ? "true" : "false");
    put("train.log_gates", c.log_gates ? "true" : "false");
    put("loss.mask", real(c.loss.mask));
    put("loss.cls", real(c.loss.cls));
    put("loss.moe", real(c.loss.moe));
    put("loss.ce", real(c.loss.ce));
    put("loss.dice", real(c.loss.dice));
    const DatasetSpec& d = c.data;
    put("data.preset", d.name);
    put("data.task", d.task == TaskKind::binary ? "binary" : "multiclass");
    put("data.image_size", std::to_string(d.image_size));
    put("data.radius_min", real(d.radius_min));
    put("data.radius_max", real(d.radius_max));
    put("data.radius_dist", d.radius_dist == RadiusDistribution::uniform ? "uniform" : "log-uniform");
    put("data.objects_min", std::to_string(d.objects_min));
    put("data.objects_max", std::to_string(d.objects_max));
    put("data.classes", std::to_string(d.shape_classes));
    put("data.contrast", real(d.contrast));
    put("data.background_corr", real(d.background_corr));
    put("data.object_corr", real(d.object_corr));
    put("data.texture_amplitude", real(d.texture_amplitude));
    put("data.train", std::to_string(d.train_size));
    put("data.val", std::to_string(d.val_size));
    put("data.test", std::to_string(d.test_size));
    return s;
}

} // namespace convlora
