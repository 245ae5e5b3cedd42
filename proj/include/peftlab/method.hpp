// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <string>
#include <string_view>

#include "peftlab/errors.hpp"

namespace peftlab {

enum class PeftKind { full, lora, fflora, adapter, fflora_adapter };

enum class Activation { relu, gelu };

/// Fine-tuning method and its rank / bottleneck size `r` (0 for full).
struct PeftMethod {
    PeftKind kind = PeftKind::full;
    std::size_t r = 0;
    Activation adapter_activation = Activation::relu;

    static PeftMethod full() { return {}; }
    static PeftMethod lora(std::size_t r) { return {PeftKind::lora, r}; }
    static PeftMethod fflora(std::size_t r) { return {PeftKind::fflora, r}; }
    static PeftMethod adapter(std::size_t r, Activation act = Activation::relu) {
        return {PeftKind::adapter, r, act};
    }
    static PeftMethod fflora_adapter(std::size_t r, Activation act = Activation::relu) {
        return {PeftKind::fflora_adapter, r, act};
    }

    bool is_full() const { return kind == PeftKind::full; }
    bool attention_lora() const { return kind == PeftKind::lora; }
    bool ff_lora() const { return kind == PeftKind::fflora || kind == PeftKind::fflora_adapter; }
    bool adapters() const { return kind == PeftKind::adapter || kind == PeftKind::fflora_adapter; }

    friend bool operator==(const PeftMethod&, const PeftMethod&) = default;
};

inline std::string_view kind_name(PeftKind kind) {
    switch (kind) {
    case PeftKind::full: return "full";
    case PeftKind::lora: return "lora";
    case PeftKind::fflora: return "fflora";
    case PeftKind::adapter: return "adapter";
    case PeftKind::fflora_adapter: return "fflora_adapter";
    }
    return "?";
}

inline PeftKind parse_kind(std::string_view name) {
    for (auto k : {PeftKind::full, PeftKind::lora, PeftKind::fflora, PeftKind::adapter,
                   PeftKind::fflora_adapter}) {
        if (kind_name(k) == name) {
            return k;
        }
    }
    throw config_error("unknown fine-tuning method '" + std::string(name) +
                       "' (expected full, lora, fflora, adapter or fflora_adapter)");
}

inline Activation parse_activation(std::string_view name) {
    if (name == "relu") return Activation::relu;
    if (name == "gelu") return Activation::gelu;
    throw config_error("unknown adapter activation '" + std::string(name) + "'");
}

/// Display label such as "lora(r=4)" or "full".
inline std::string method_label(const PeftMethod& m) {
    if (m.is_full()) {
        return "full";
    }
    return std::string(kind_name(m.kind)) + "(r=" + std::to_string(m.r) + ")";
}

}  // namespace peftlab
