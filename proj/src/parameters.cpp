// Copyright (c) 2026, Conv-LoRA Desk Authors
// SPDX-License-Identifier: Apache-2.0
//

#include "convlora/parameters.hpp"

#include <cstring>
#include <fmt/format.h>
#include <fstream>

namespace convlora {

namespace {

constexpr char kMagic[8] = {'C', 'L', 'O', 'R', 'A', 'C', 'K', '1'};

template <typename T>
void write_pod(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is, const std::filesystem::path& path) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw CheckpointError(fmt::format("{}: truncated checkpoint", path.string()));
    return v;
}

} // namespace

bool is_adapter(const std::string& name) { return name.find(kAdapterInfix) != std::string::npos; }
bool is_decoder(const std::string& name) { return name.rfind(kDecoderPrefix, 0) == 0; }

std::string to_string(FreezePolicy p) {
    switch (p) {
    case FreezePolicy::decoder_only: return "decoder-only";
    case FreezePolicy::peft: return "peft";
    case FreezePolicy::full: return "full";
    case FreezePolicy::from_scratch: return "from-scratch";
    }
    return "unknown";
}

FreezePolicy freeze_policy_from_string(const std::string& name) {
    if (name == "decoder-only") return FreezePolicy::decoder_only;
    if (name == "peft") return FreezePolicy::peft;
    if (name == "full") return FreezePolicy::full;
    if (name == "from-scratch") return FreezePolicy::from_scratch;
    throw ConfigError(fmt::format("unknown freeze policy '{}'", name));
}

FreezeMask apply_freeze(const ParameterMap& params, FreezePolicy policy) {
    FreezeMask mask;
    for (const auto& [name, t] : params) {
        bool train = false;
        switch (policy) {
        case FreezePolicy::decoder_only: train = is_decoder(name); break;
        case FreezePolicy::peft: train = is_decoder(name) || is_adapter(name); break;
        case FreezePolicy::full:
        case FreezePolicy::from_scratch: train = true; break;
        }
        mask[name] = train;
        t.set_requires_grad(train);
    }
    return mask;
}

ParamCount count_params(const ParameterMap& params, const FreezeMask& mask) {
    ParamCount c;
    for (const auto& [name, t] : params) {
        c.total += t.numel();
        const auto it = mask.find(name);
        if (it != mask.end() && it->second) c.trainable += t.numel();
    }
    c.ratio = c.total == 0 ? 0.0 : static_cast<double>(c.trainable) / static_cast<double>(c.total);
    return c;
}

std::uint64_t parameter_checksum(const ParameterMap& params, const FreezeMask& mask, bool trainable) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& [name, t] : params) {
        const auto it = mask.find(name);
        const bool flag = it != mask.end() && it->second;
        if (flag != trainable) continue;
        for (double v : t.data()) {
            unsigned char bytes[sizeof(double)];
            std::memcpy(bytes, &v, sizeof(double));
            for (unsigned char b : bytes) {
                h ^= b;
                h *= 0x100000001b3ULL;
            }
        }
    }
    return h;
}

void save_checkpoint(const std::filesystem::path& path, const ParameterMap& params, const FreezeMask& mask) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::binary);
    if (!os) throw CheckpointError(fmt::format("cannot write {}", path.string()));
    std::ofstream manifest(path.string() + ".manifest");
    if (!manifest) throw CheckpointError(fmt::format("cannot write {}.manifest", path.string()));

    os.write(kMagic, sizeof(kMagic));
    write_pod(os, static_cast<std::uint64_t>(params.size()));
    for (const auto& [name, t] : params) {
        write_pod(os, static_cast<std::uint64_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_pod(os, static_cast<std::uint64_t>(t.rank()));
        for (std::size_t d : t.shape()) write_pod(os, static_cast<std::uint64_t>(d));
        os.write(reinterpret_cast<const char*>(t.data().data()),
                 static_cast<std::streamsize>(t.numel() * sizeof(double)));
        const auto it = mask.find(name);
        manifest << name << ' ' << shape_str(t.shape()) << ' ' << (it != mask.end() && it->second ? 1 : 0) << '\n';
    }
    if (!os || !manifest) throw CheckpointError(fmt::format("write failed for {}", path.string()));
}

ParameterMap read_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw CheckpointError(fmt::format("cannot open {}", path.string()));
    char magic[sizeof(kMagic)];
    is.read(magic, sizeof(magic));
    if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
        throw CheckpointError(fmt::format("{}: not a checkpoint", path.string()));
    }
    const auto count = read_pod<std::uint64_t>(is, path);
    ParameterMap out;
    for (std::uint64_t i = 0; i < count; ++i) {
        const auto len = read_pod<std::uint64_t>(is, path);
        if (len > 4096) throw CheckpointError(fmt::format("{}: corrupt name length", path.string()));
        std::string name(len, '\0');
        is.read(name.data(), static_cast<std::streamsize>(len));
        if (!is) throw CheckpointError(fmt::format("{}: truncated name", path.string()));
        const auto rank = read_pod<std::uint64_t>(is, path);
        if (rank > 8) throw CheckpointError(fmt::format("{}: corrupt rank for '{}'", path.string(), name));
        Shape shape(rank);
        std::size_t numel = 1;
        for (auto& d : shape) {
            d = read_pod<std::uint64_t>(is, path);
            numel *= d;
        }
        if (numel > (std::size_t{1} << 32)) throw CheckpointError(fmt::format("{}: corrupt shape for '{}'", path.string(), name));
        std::vector<double> values(numel);
        is.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(double)));
        if (!is) throw CheckpointError(fmt::format("{}: truncated data for '{}'", path.string(), name));
        if (!out.emplace(name, Tensor::from(std::move(shape), std::move(values))).second) {
            throw CheckpointError(fmt::format("{}: duplicate array '{}'", path.string(), name));
        }
    }
    return out;
}

void load_checkpoint(const std::filesystem::path& path, const ParameterMap& params) {
    // Everything is validated before any parameter is overwritten.
    const ParameterMap stored = read_checkpoint(path);
    if (stored.size() != params.size()) {
        throw CheckpointError(fmt::format("{}: {} arrays, model has {}", path.string(), stored.size(), params.size()));
    }
    for (const auto& [name, t] : stored) {
        const auto it = params.find(name);
        if (it == params.end()) throw CheckpointError(fmt::format("{}: unexpected array '{}'", path.string(), name));
        if (t.shape() != it->second.shape()) {
            throw CheckpointError(fmt::format("{}: '{}' has shape {}, model expects {}", path.string(), name,
                                              shape_str(t.shape()), shape_str(it->second.shape())));
        }
    }
    copy_parameters(stored, params);
}

void copy_parameters(const ParameterMap& from, const ParameterMap& to) {
    for (const auto& [name, t] : to) {
        const auto it = from.find(name);
        if (it == from.end() || it->second.shape() != t.shape()) {
            throw CheckpointError(fmt::format("cannot copy parameter '{}'", name));
        }
        auto src = it->second.data();
        std::copy(src.begin(), src.end(), t.mutable_data().begin());
    }
}

} // namespace convlora
