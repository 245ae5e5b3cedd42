// SPDX-License-Identifier: Apache-2.0
//
// Parameter-efficient fine-tuning: LoRA on attention query/value projections,
// FF-LoRA on both feed-forward matrices, bottleneck adapters after every
// attention and feed-forward sublayer, and their combination.
#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "peftlab/model.hpp"
#include "peftlab/ops.hpp"

namespace peftlab {

// ---------------------------------------------------------------------------
// Reference shapes and closed-form accounting
// ---------------------------------------------------------------------------

/// Layer geometry used only for parameter accounting.
struct ReferenceShape {
    std::string name;
    std::size_t n_enc = 0;
    std::size_t n_dec = 0;
    std::size_t d = 0;
    std::size_t d_ff = 0;
    std::uint64_t total = 0;  // base parameter count used for percentages

    std::size_t attention_blocks() const { return n_enc + 2 * n_dec; }
    std::size_t adapter_sites() const { return 2 * n_enc + 3 * n_dec; }
};

inline ReferenceShape codet5_base() { return {"codet5-base", 12, 12, 768, 3072, 223'000'000}; }
inline ReferenceShape plbart_base() { return {"plbart-base", 6, 6, 768, 3072, 140'000'000}; }

inline std::optional<ReferenceShape> reference_shape(std::string_view name) {
    if (name == "codet5-base") return codet5_base();
    if (name == "plbart-base") return plbart_base();
    return std::nullopt;
}

/// Accounting shape of a concrete model; the total is its base registry size.
inline ReferenceShape shape_of(const ModelConfig& c) {
    std::uint64_t total = 0;
    for (const auto& spec : base_layout(c)) {
        total += shape_size(spec.shape);
    }
    return {"custom", c.n_enc_layers, c.n_dec_layers, c.d_model, c.d_ff, total};
}

inline std::uint64_t lora_count(const ReferenceShape& s, std::uint64_t r) {
    return s.attention_blocks() * 2 * r * 2 * s.d;
}
inline std::uint64_t fflora_count(const ReferenceShape& s, std::uint64_t r) {
    return (s.n_enc + s.n_dec) * 2 * r * (s.d + s.d_ff);
}
inline std::uint64_t adapter_count(const ReferenceShape& s, std::uint64_t r) {
    return s.adapter_sites() * (2 * s.d * r + r + s.d);
}

struct TrainableCount {
    std::uint64_t count = 0;
    double percent = 0;  // versus the shape's total
};

/// Closed-form number of trainable parameters.
inline TrainableCount count_trainable(const ReferenceShape& s, const PeftMethod& m) {
    std::uint64_t n = 0;
    switch (m.kind) {
    case PeftKind::full: n = s.total; break;
    case PeftKind::lora: n = lora_count(s, m.r); break;
    case PeftKind::fflora: n = fflora_count(s, m.r); break;
    case PeftKind::adapter: n = adapter_count(s, m.r); break;
    case PeftKind::fflora_adapter: n = fflora_count(s, m.r) + adapter_count(s, m.r); break;
    }
    return {n, 100.0 * static_cast<double>(n) / static_cast<double>(s.total)};
}

namespace detail {
// numerator/denominator is a quantity in hundredths. Rounds it to whole
// hundredths (half up), then to tenths with ties to even; returns tenths.
inline std::uint64_t two_stage_tenths(std::uint64_t numerator, std::uint64_t denominator) {
    const std::uint64_t hundredths = (2 * numerator + denominator) / (2 * denominator);
    const std::uint64_t q = hundredths / 10, rem = hundredths % 10;
    if (rem > 5 || (rem == 5 && q % 2 == 1)) {
        return q + 1;
    }
    return q;
}

inline std::string tenths_str(std::uint64_t tenths) {
    std::string s = std::to_string(tenths / 10);
    if (tenths % 10 != 0) {
        s += "." + std::to_string(tenths % 10);
    }
    return s;
}
}  // namespace detail

/// Table-style rendering such as "0.2M (0.1%)" or "223M (100%)": millions
/// with one decimal below 10M and whole millions above, percent with one
/// decimal; a trailing ".0" is dropped.
inline std::string format_count(std::uint64_t count, std::uint64_t total) {
    std::string millions;
    if (count < 10'000'000) {
        millions = detail::tenths_str(detail::two_stage_tenths(count, 10'000));
    } else {
        millions = std::to_string((count + 500'000) / 1'000'000);
    }
    const auto pct = detail::two_stage_tenths(count * 10'000, total);
    return millions + "M (" + detail::tenths_str(pct) + "%)";
}

// ---------------------------------------------------------------------------
// Injection layout
// ---------------------------------------------------------------------------

/// Frozen weight matrices that `method` wraps with LoRA pairs, with their
/// [in×out] shapes.
inline std::vector<std::pair<std::string, Shape>> lora_targets(const ModelConfig& c, const PeftMethod& m) {
    std::vector<std::pair<std::string, Shape>> out;
    const std::size_t d = c.d_model;
    if (m.attention_lora()) {
        for (std::size_t i = 0; i < c.n_enc_layers; ++i) {
            for (const char* w : {"q", "v"}) {
                out.push_back({"enc." + std::to_string(i) + ".attn." + w, {d, d}});
            }
        }
        for (std::size_t i = 0; i < c.n_dec_layers; ++i) {
            for (const char* scope : {"self", "cross"}) {
                for (const char* w : {"q", "v"}) {
                    out.push_back({"dec." + std::to_string(i) + "." + scope + "." + w, {d, d}});
                }
            }
        }
    }
    if (m.ff_lora()) {
        auto add_ff = [&](const std::string& p) {
            out.push_back({p + ".ff.w1", {d, c.d_ff}});
            out.push_back({p + ".ff.w2", {c.d_ff, d}});
        };
        for (std::size_t i = 0; i < c.n_enc_layers; ++i) add_ff("enc." + std::to_string(i));
        for (std::size_t i = 0; i < c.n_dec_layers; ++i) add_ff("dec." + std::to_string(i));
    }
    return out;
}

/// Adapter attachment prefixes: two per encoder layer, three per decoder
/// layer.
inline std::vector<std::string> adapter_sites(const ModelConfig& c, const PeftMethod& m) {
    std::vector<std::string> out;
    if (!m.adapters()) {
        return out;
    }
    for (std::size_t i = 0; i < c.n_enc_layers; ++i) {
        for (const char* s : {"attn", "ff"}) out.push_back("enc." + std::to_string(i) + ".adapter." + s);
    }
    for (std::size_t i = 0; i < c.n_dec_layers; ++i) {
        for (const char* s : {"self", "cross", "ff"}) out.push_back("dec." + std::to_string(i) + ".adapter." + s);
    }
    return out;
}

inline void validate_method(const ModelConfig& c, const PeftMethod& m) {
    if (m.is_full()) {
        return;
    }
    if (m.r < 1) {
        throw config_error("rank must be at least 1");
    }
    for (const auto& [name, shape] : lora_targets(c, m)) {
        if (m.r >= std::min(shape[0], shape[1])) {
            throw config_error("LoRA rank " + std::to_string(m.r) + " violates r < min(d, k) for '" + name +
                               "' " + shape_str(shape));
        }
    }
}

/// Every parameter the method adds, in injection order. Shape-only, so it
/// also describes full-size reference models without allocating them.
inline std::vector<ParamSpec> peft_layout(const ModelConfig& c, const PeftMethod& m) {
    validate_method(c, m);
    std::vector<ParamSpec> out;
    for (const auto& [name, shape] : lora_targets(c, m)) {
        out.push_back({name + ".lora_a", {shape[0], m.r}, Init::normal, true});
        out.push_back({name + ".lora_b", {m.r, shape[1]}, Init::zeros, true});
    }
    for (const auto& site : adapter_sites(c, m)) {
        out.push_back({site + ".down", {c.d_model, m.r}, Init::normal, true});
        out.push_back({site + ".down_b", {m.r}, Init::zeros, false});
        out.push_back({site + ".up", {m.r, c.d_model}, Init::zeros, true});
        out.push_back({site + ".up_b", {c.d_model}, Init::zeros, false});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Model surgery
// ---------------------------------------------------------------------------

template <class T>
struct LoraPair {
    Tensor<T> a;  // [in×r], N(0, 0.02²)
    Tensor<T> b;  // [r×out], zeros
};

/// A fresh LoRA pair; ΔW = A·B is exactly zero.
template <class T>
LoraPair<T> lora_init(std::size_t d_in, std::size_t d_out, std::size_t r, std::uint64_t seed,
                      const std::string& name = "lora") {
    if (r < 1 || r >= std::min(d_in, d_out)) {
        throw config_error("LoRA rank " + std::to_string(r) + " violates 1 <= r < min(" + std::to_string(d_in) +
                           ", " + std::to_string(d_out) + ")");
    }
    return {make_param<T>({name + ".lora_a", {d_in, r}, Init::normal, true}, seed),
            Tensor<T>::zeros({r, d_out})};
}

/// Attaches `method` to an unmodified model. Full leaves everything
/// trainable; any other method freezes the base and adds its parameters
/// (LoRA B and adapter up-projections start at zero, so the model computes
/// exactly the base function).
template <class T>
void inject_in_place(Model<T>& model, const PeftMethod& method, std::uint64_t seed) {
    if (model.injected()) {
        throw state_error("model already carries an injected method (" + method_label(model.method()) + ")");
    }
    for (const auto& e : model.registry().entries()) {
        if (e.name.find(".lora_") != std::string::npos || e.name.find(".adapter.") != std::string::npos) {
            throw state_error("model already carries fine-tuning parameters ('" + e.name + "')");
        }
    }
    auto layout = peft_layout(model.config(), method);
    auto& reg = model.registry();
    if (!method.is_full()) {
        for (auto& e : reg.entries()) {
            e.frozen = true;
        }
    }
    for (const auto& spec : layout) {
        reg.add(spec.name, make_param<T>(spec, seed), spec.decay);
    }
    model.set_method(method);
    model.rebind();
}

template <class T>
Model<T> inject(const Model<T>& base, const PeftMethod& method, std::uint64_t seed) {
    auto m = base.clone();
    inject_in_place(m, method, seed);
    return m;
}

/// Unfrozen parameters in registry order.
template <class T>
std::vector<std::pair<std::string, Tensor<T>>> trainable_params(const Model<T>& model) {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    for (const auto& e : model.registry().entries()) {
        if (!e.frozen) {
            out.emplace_back(e.name, e.value);
        }
    }
    return out;
}

template <class T>
std::size_t trainable_count(const Model<T>& model) {
    std::size_t n = 0;
    for (const auto& [name, t] : trainable_params(model)) {
        n += t.size();
    }
    return n;
}

/// W ← W + A·B for every LoRA pair; returns a plain model with no LoRA
/// parameters. Adapters cannot be folded into the base weights.
template <class T>
Model<T> merge_lora(const Model<T>& wrapped) {
    if (wrapped.method().adapters()) {
        throw unsupported_merge_error("adapter blocks have no exact merge into the base weights");
    }
    ParamRegistry<T> merged;
    const auto& reg = wrapped.registry();
    NoGradGuard<T> no_grad;
    for (const auto& e : reg.entries()) {
        if (e.name.ends_with(".lora_a") || e.name.ends_with(".lora_b")) {
            continue;
        }
        auto value = e.value.clone();
        auto a = reg.find(e.name + ".lora_a");
        if (a) {
            auto delta = matmul(a, reg.get(e.name + ".lora_b"));
            for (std::size_t i = 0; i < value.size(); ++i) {
                value[i] += delta[i];
            }
        }
        merged.add(e.name, value, e.decay);
    }
    return Model<T>(wrapped.config(), std::move(merged));
}

}  // namespace peftlab
