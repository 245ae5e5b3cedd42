// SPDX-License-Identifier: Apache-2.0
//
// Binary checkpoints of named tensors.
//
// Layout (little-endian): "PEFT", u32 version, u32 entry count, then per
// entry u32 name length, name bytes, u8 dtype (0 = f32, 1 = f64), u32 rank,
// u32 extents, raw values. Two f64 meta entries describe the model:
//   meta.config = [n_enc, n_dec, d_model, n_heads, d_ff, vocab, max_seq_len,
//                  seed_lo32, seed_hi32]
//   meta.peft   = [kind, r, activation, injected]
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "peftlab/peft.hpp"

namespace peftlab {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr char kCheckpointMagic[4] = {'P', 'E', 'F', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <class T>
constexpr std::uint8_t dtype_tag() {
    static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
    return std::is_same_v<T, float> ? 0 : 1;
}

/// One stored tensor with its values kept as raw bytes.
struct RawEntry {
    std::string name;
    std::uint8_t dtype = 0;
    Shape shape;
    std::vector<char> bytes;

    template <class T>
    std::vector<T> values() const {
        if (dtype != dtype_tag<T>()) {
            throw schema_error("entry '" + name + "' has dtype " + std::to_string(dtype) + ", expected " +
                               std::to_string(dtype_tag<T>()));
        }
        std::vector<T> out(bytes.size() / sizeof(T));
        std::memcpy(out.data(), bytes.data(), bytes.size());
        return out;
    }

    template <class T>
    static RawEntry from(std::string name, const Shape& shape, std::span<const T> data) {
        RawEntry e{std::move(name), dtype_tag<T>(), shape, std::vector<char>(data.size_bytes())};
        std::memcpy(e.bytes.data(), data.data(), data.size_bytes());
        return e;
    }
};

namespace detail {
template <class U>
void put(std::ostream& out, U v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class U>
U take(std::istream& in, const std::string& path) {
    U v{};
    if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) {
        throw schema_error(path + ": truncated checkpoint");
    }
    return v;
}

/// Writes through a sibling temp file so `path` is either complete or absent.
template <class Fn>
void write_atomically(const std::filesystem::path& path, Fn&& body) {
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw io_error("cannot write " + tmp.string());
        }
        try {
            body(out);
        } catch (...) {
            out.close();
            std::filesystem::remove(tmp);
            throw;
        }
        out.flush();
        if (!out) {
            out.close();
            std::filesystem::remove(tmp);
            throw io_error("failed writing " + tmp.string());
        }
    }
    std::filesystem::rename(tmp, path);
}
}  // namespace detail

inline void write_checkpoint(const std::filesystem::path& path, const std::vector<RawEntry>& entries) {
    detail::write_atomically(path, [&](std::ostream& out) {
        out.write(kCheckpointMagic, 4);
        detail::put<std::uint32_t>(out, kCheckpointVersion);
        detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(entries.size()));
        for (const auto& e : entries) {
            detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(e.name.size()));
            out.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
            detail::put<std::uint8_t>(out, e.dtype);
            detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(e.shape.size()));
            for (auto x : e.shape) {
                detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(x));
            }
            out.write(e.bytes.data(), static_cast<std::streamsize>(e.bytes.size()));
        }
    });
}

inline std::vector<RawEntry> read_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw io_error("cannot read checkpoint " + path.string());
    }
    const auto where = path.string();
    char magic[4] = {};
    if (!in.read(magic, 4) || std::memcmp(magic, kCheckpointMagic, 4) != 0) {
        throw schema_error(where + ": not a checkpoint (bad magic)");
    }
    const auto version = detail::take<std::uint32_t>(in, where);
    if (version != kCheckpointVersion) {
        throw schema_error(where + ": unsupported checkpoint version " + std::to_string(version));
    }
    const auto count = detail::take<std::uint32_t>(in, where);
    std::vector<RawEntry> entries;
    std::set<std::string> names;
    for (std::uint32_t i = 0; i < count; ++i) {
        RawEntry e;
        const auto len = detail::take<std::uint32_t>(in, where);
        if (len == 0 || len > 4096) {
            throw schema_error(where + ": implausible name length " + std::to_string(len));
        }
        e.name.resize(len);
        if (!in.read(e.name.data(), len)) {
            throw schema_error(where + ": truncated checkpoint");
        }
        if (!names.insert(e.name).second) {
            throw schema_error(where + ": duplicate entry '" + e.name + "'");
        }
        e.dtype = detail::take<std::uint8_t>(in, where);
        if (e.dtype > 1) {
            throw schema_error(where + ": entry '" + e.name + "' has unknown dtype " + std::to_string(e.dtype));
        }
        const auto rank = detail::take<std::uint32_t>(in, where);
        if (rank == 0 || rank > 8) {
            throw schema_error(where + ": entry '" + e.name + "' has implausible rank " + std::to_string(rank));
        }
        std::size_t n = 1;
        for (std::uint32_t k = 0; k < rank; ++k) {
            const auto x = detail::take<std::uint32_t>(in, where);
            if (x == 0) {
                throw schema_error(where + ": entry '" + e.name + "' has a zero extent");
            }
            e.shape.push_back(x);
            n *= x;
        }
        e.bytes.resize(n * (e.dtype == 0 ? 4 : 8));
        if (!in.read(e.bytes.data(), static_cast<std::streamsize>(e.bytes.size()))) {
            throw schema_error(where + ": truncated checkpoint");
        }
        entries.push_back(std::move(e));
    }
    if (in.peek() != std::char_traits<char>::eof()) {
        throw schema_error(where + ": trailing bytes after the last entry");
    }
    return entries;
}

namespace detail {
inline RawEntry meta_config(const ModelConfig& c) {
    const std::vector<double> v{double(c.n_enc_layers), double(c.n_dec_layers), double(c.d_model),
                                double(c.n_heads),      double(c.d_ff),         double(c.vocab_size),
                                double(c.max_seq_len),  double(c.seed & 0xffffffffULL), double(c.seed >> 32)};
    return RawEntry::from<double>("meta.config", {v.size()}, v);
}

inline RawEntry meta_peft(const PeftMethod& m, bool injected) {
    const std::vector<double> v{double(static_cast<int>(m.kind)), double(m.r),
                                double(static_cast<int>(m.adapter_activation)), injected ? 1.0 : 0.0};
    return RawEntry::from<double>("meta.peft", {v.size()}, v);
}

struct Meta {
    ModelConfig config;
    PeftMethod method;
    bool injected = false;
};

inline Meta parse_meta(const std::map<std::string, const RawEntry*>& by_name, const std::string& where) {
    auto fetch = [&](const std::string& name, std::size_t n) {
        auto it = by_name.find(name);
        if (it == by_name.end()) {
            throw schema_error(where + ": missing '" + name + "'");
        }
        auto v = it->second->values<double>();
        if (v.size() != n) {
            throw schema_error(where + ": '" + name + "' has " + std::to_string(v.size()) + " values, expected " +
                               std::to_string(n));
        }
        return v;
    };
    auto c = fetch("meta.config", 9);
    auto p = fetch("meta.peft", 4);
    Meta meta;
    auto sz = [](double x) { return static_cast<std::size_t>(x); };
    meta.config = {sz(c[0]), sz(c[1]), sz(c[2]), sz(c[3]), sz(c[4]), sz(c[5]), sz(c[6]),
                   static_cast<std::uint64_t>(c[7]) | (static_cast<std::uint64_t>(c[8]) << 32)};
    try {
        meta.config.validate();
    } catch (const config_error& e) {
        throw schema_error(where + ": invalid stored config: " + e.what());
    }
    if (p[0] < 0 || p[0] > 4 || p[2] < 0 || p[2] > 1) {
        throw schema_error(where + ": invalid stored method");
    }
    meta.method = {static_cast<PeftKind>(static_cast<int>(p[0])), sz(p[1]),
                   static_cast<Activation>(static_cast<int>(p[2]))};
    meta.injected = p[3] != 0;
    return meta;
}
}  // namespace detail

/// Every parameter plus the meta entries.
template <class T>
void save_model(const std::filesystem::path& path, const Model<T>& model) {
    std::vector<RawEntry> entries{detail::meta_config(model.config()),
                                  detail::meta_peft(model.method(), model.injected())};
    for (const auto& e : model.registry().entries()) {
        entries.push_back(RawEntry::from<T>(e.name, e.value.shape(), e.value.data()));
    }
    write_checkpoint(path, entries);
}

/// Only the fine-tuning parameters (LoRA pairs and adapters) plus meta.
template <class T>
void save_deltas(const std::filesystem::path& path, const Model<T>& model) {
    std::vector<RawEntry> entries{detail::meta_config(model.config()),
                                  detail::meta_peft(model.method(), model.injected())};
    for (const auto& spec : peft_layout(model.config(), model.method())) {
        const auto& v = model.registry().get(spec.name);
        entries.push_back(RawEntry::from<T>(spec.name, v.shape(), v.data()));
    }
    write_checkpoint(path, entries);
}

/// Loads a full model; names and shapes must match the stored config and
/// method exactly. Base parameters come back frozen unless the method is
/// Full.
template <class T>
Model<T> load_model(const std::filesystem::path& path) {
    const auto raw = read_checkpoint(path);
    const auto where = path.string();
    std::map<std::string, const RawEntry*> by_name;
    for (const auto& e : raw) {
        by_name[e.name] = &e;
    }
    const auto meta = detail::parse_meta(by_name, where);
    const auto base = base_layout(meta.config);
    auto peft = meta.injected ? peft_layout(meta.config, meta.method) : std::vector<ParamSpec>{};
    std::size_t expected = 2;
    ParamRegistry<T> registry;
    auto take = [&](const ParamSpec& spec, bool frozen) {
        auto it = by_name.find(spec.name);
        if (it == by_name.end()) {
            throw schema_error(where + ": missing parameter '" + spec.name + "'");
        }
        if (it->second->shape != spec.shape) {
            throw schema_error(where + ": parameter '" + spec.name + "' has shape " +
                               shape_str(it->second->shape) + ", expected " + shape_str(spec.shape));
        }
        registry.add(spec.name, Tensor<T>(spec.shape, it->second->template values<T>()), spec.decay);
        registry.entry(spec.name).frozen = frozen;
        ++expected;
    };
    const bool freeze_base = meta.injected && !meta.method.is_full();
    for (const auto& spec : base) {
        take(spec, freeze_base);
    }
    for (const auto& spec : peft) {
        take(spec, false);
    }
    if (expected != raw.size()) {
        for (const auto& e : raw) {
            if (!registry.contains(e.name) && !e.name.starts_with("meta.")) {
                throw schema_error(where + ": unexpected entry '" + e.name + "'");
            }
        }
    }
    Model<T> model(meta.config, std::move(registry), meta.method);
    if (meta.injected) {
        model.set_method(meta.method);
    }
    return model;
}

/// Wraps a plain base model with the LoRA pairs of a deltas file. Adapter
/// deltas are rejected since they cannot be merged afterwards.
template <class T>
Model<T> attach_deltas(const Model<T>& base, const std::filesystem::path& deltas_path) {
    const auto raw = read_checkpoint(deltas_path);
    const auto where = deltas_path.string();
    std::map<std::string, const RawEntry*> by_name;
    for (const auto& e : raw) {
        by_name[e.name] = &e;
    }
    const auto meta = detail::parse_meta(by_name, where);
    for (const auto& e : raw) {
        if (e.name.find(".adapter.") != std::string::npos) {
            throw unsupported_merge_error(where + ": adapter entry '" + e.name + "' cannot be merged");
        }
    }
    if (meta.method.adapters()) {
        throw unsupported_merge_error(where + ": adapter deltas cannot be merged");
    }
    if (!(meta.config == base.config())) {
        throw schema_error(where + ": deltas were trained on a different model configuration");
    }
    if (base.injected() && !base.method().is_full()) {
        throw state_error("merge base must be a plain checkpoint, got " + method_label(base.method()));
    }
    auto wrapped = base.clone();
    auto& reg = wrapped.registry();
    for (const auto& spec : peft_layout(meta.config, meta.method)) {
        auto it = by_name.find(spec.name);
        if (it == by_name.end()) {
            throw schema_error(where + ": missing delta '" + spec.name + "'");
        }
        if (it->second->shape != spec.shape) {
            throw schema_error(where + ": delta '" + spec.name + "' has shape " + shape_str(it->second->shape) +
                               ", expected " + shape_str(spec.shape));
        }
        reg.add(spec.name, Tensor<T>(spec.shape, it->second->template values<T>()), spec.decay);
    }
    for (const auto& e : raw) {
        if (!e.name.starts_with("meta.") && !reg.contains(e.name)) {
            throw schema_error(where + ": delta '" + e.name + "' does not resolve against the base");
        }
    }
    wrapped.set_method(meta.method);
    wrapped.rebind();
    return wrapped;
}

}  // namespace peftlab
