// SPDX-License-Identifier: Apache-2.0
//
// Encoder-decoder transformer parameters: configuration, canonical parameter
// layout, deterministic initialization and the typed view the forward pass
// uses.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "peftlab/method.hpp"
#include "peftlab/registry.hpp"
#include "peftlab/rng.hpp"

namespace peftlab {

inline constexpr std::int32_t kPad = 0;
inline constexpr std::int32_t kBos = 1;
inline constexpr std::int32_t kEos = 2;
inline constexpr std::int32_t kSep = 3;
inline constexpr std::int32_t kFirstTaskToken = 4;

inline constexpr double kInitStddev = 0.02;

struct ModelConfig {
    std::size_t n_enc_layers = 2;
    std::size_t n_dec_layers = 2;
    std::size_t d_model = 64;
    std::size_t n_heads = 4;
    std::size_t d_ff = 256;
    std::size_t vocab_size = 64;
    std::size_t max_seq_len = 32;
    std::uint64_t seed = 0;

    void validate() const {
        if (n_enc_layers == 0 || n_dec_layers == 0 || d_model == 0 || n_heads == 0 || d_ff == 0 ||
            vocab_size == 0 || max_seq_len == 0) {
            throw config_error("model dimensions must be positive");
        }
        if (d_model % n_heads != 0) {
            throw config_error("d_model " + std::to_string(d_model) + " is not divisible by n_heads " +
                               std::to_string(n_heads));
        }
        if (max_seq_len < 2) {
            throw config_error("max_seq_len must be at least 2");
        }
        if (vocab_size <= static_cast<std::size_t>(kFirstTaskToken)) {
            throw config_error("vocab_size must exceed the 4 special ids");
        }
    }

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

enum class Init { normal, zeros, ones };

struct ParamSpec {
    std::string name;
    Shape shape;
    Init init;
    bool decay;
};

/// Every base parameter of `config` in canonical order.
inline std::vector<ParamSpec> base_layout(const ModelConfig& c) {
    std::vector<ParamSpec> out;
    const std::size_t d = c.d_model;
    auto norm = [&](const std::string& p) {
        out.push_back({p + ".g", {d}, Init::ones, false});
        out.push_back({p + ".b", {d}, Init::zeros, false});
    };
    auto attn = [&](const std::string& p) {
        for (const char* m : {"q", "k", "v", "o"}) {
            out.push_back({p + "." + m, {d, d}, Init::normal, true});
        }
    };
    auto ff = [&](const std::string& p) {
        out.push_back({p + ".w1", {d, c.d_ff}, Init::normal, true});
        out.push_back({p + ".b1", {c.d_ff}, Init::zeros, false});
        out.push_back({p + ".w2", {c.d_ff, d}, Init::normal, true});
        out.push_back({p + ".b2", {d}, Init::zeros, false});
    };
    out.push_back({"embed.tok", {c.vocab_size, d}, Init::normal, true});
    out.push_back({"embed.pos", {c.max_seq_len, d}, Init::normal, true});
    for (std::size_t i = 0; i < c.n_enc_layers; ++i) {
        const std::string p = "enc." + std::to_string(i);
        norm(p + ".ln1");
        attn(p + ".attn");
        norm(p + ".ln2");
        ff(p + ".ff");
    }
    norm("enc.ln_f");
    for (std::size_t i = 0; i < c.n_dec_layers; ++i) {
        const std::string p = "dec." + std::to_string(i);
        norm(p + ".ln1");
        attn(p + ".self");
        norm(p + ".ln2");
        attn(p + ".cross");
        norm(p + ".ln3");
        ff(p + ".ff");
    }
    norm("dec.ln_f");
    out.push_back({"head.out", {d, c.vocab_size}, Init::normal, true});
    out.push_back({"cls.w", {d, 2}, Init::normal, true});
    out.push_back({"cls.b", {2}, Init::zeros, false});
    return out;
}

/// Draws a parameter from the counter-based generator keyed by (seed, name).
template <class T>
Tensor<T> make_param(const ParamSpec& spec, std::uint64_t seed) {
    const std::size_t n = shape_size(spec.shape);
    std::vector<T> data(n, T(0));
    if (spec.init == Init::ones) {
        std::fill(data.begin(), data.end(), T(1));
    } else if (spec.init == Init::normal) {
        CounterRng rng(seed, spec.name);
        for (std::size_t i = 0; i < n; ++i) {
            data[i] = static_cast<T>(kInitStddev * rng.normal(i));
        }
    }
    return Tensor<T>(spec.shape, std::move(data));
}

template <class T>
struct Linear {
    Tensor<T> weight;  // [in×out], y = x·W
    Tensor<T> bias;    // optional
    Tensor<T> lora_a;  // optional [in×r]
    Tensor<T> lora_b;  // optional [r×out]
};

template <class T>
struct Norm {
    Tensor<T> gain, bias;
};

template <class T>
struct AdapterBlock {
    Tensor<T> down, down_bias, up, up_bias;
    explicit operator bool() const { return static_cast<bool>(down); }
};

template <class T>
struct AttentionBlock {
    Linear<T> q, k, v, o;
};

template <class T>
struct FeedForward {
    Linear<T> w1, w2;
};

template <class T>
struct EncoderLayer {
    Norm<T> ln1, ln2;
    AttentionBlock<T> attn;
    FeedForward<T> ff;
    AdapterBlock<T> after_attn, after_ff;
};

template <class T>
struct DecoderLayer {
    Norm<T> ln1, ln2, ln3;
    AttentionBlock<T> self_attn, cross_attn;
    FeedForward<T> ff;
    AdapterBlock<T> after_self, after_cross, after_ff;
};

/// A transformer instance: the registry owns the parameters; the layer
/// structs are typed handles into it. Move-only; use clone() for copies.
template <class T>
class Model {
public:
    Model(ModelConfig config, ParamRegistry<T> registry, PeftMethod method = {})
        : config_(config), registry_(std::move(registry)), method_(method) {
        config_.validate();
        rebind();
    }

    Model(Model&&) noexcept = default;
    Model& operator=(Model&&) noexcept = default;
    Model(const Model&) = delete;
    Model& operator=(const Model&) = delete;

    Model clone() const {
        Model out(config_, registry_.clone(), method_);
        out.injected_ = injected_;
        return out;
    }

    const ModelConfig& config() const { return config_; }
    const PeftMethod& method() const { return method_; }
    ParamRegistry<T>& registry() { return registry_; }
    const ParamRegistry<T>& registry() const { return registry_; }

    /// Refreshes the typed handles after parameters were added or replaced.
    void rebind() {
        auto& r = registry_;
        auto linear = [&](const std::string& name, const std::string& bias) {
            Linear<T> l{r.get(name), bias.empty() ? Tensor<T>() : r.get(bias), r.find(name + ".lora_a"),
                        r.find(name + ".lora_b")};
            if (static_cast<bool>(l.lora_a) != static_cast<bool>(l.lora_b)) {
                throw schema_error("incomplete LoRA pair on '" + name + "'");
            }
            return l;
        };
        auto norm = [&](const std::string& p) { return Norm<T>{r.get(p + ".g"), r.get(p + ".b")}; };
        auto attn = [&](const std::string& p) {
            return AttentionBlock<T>{linear(p + ".q", ""), linear(p + ".k", ""), linear(p + ".v", ""),
                                     linear(p + ".o", "")};
        };
        auto ff = [&](const std::string& p) {
            return FeedForward<T>{linear(p + ".w1", p + ".b1"), linear(p + ".w2", p + ".b2")};
        };
        auto adapter = [&](const std::string& p) {
            return AdapterBlock<T>{r.find(p + ".down"), r.find(p + ".down_b"), r.find(p + ".up"),
                                   r.find(p + ".up_b")};
        };
        tok_embed = r.get("embed.tok");
        pos_embed = r.get("embed.pos");
        enc_layers.clear();
        for (std::size_t i = 0; i < config_.n_enc_layers; ++i) {
            const std::string p = "enc." + std::to_string(i);
            enc_layers.push_back({norm(p + ".ln1"), norm(p + ".ln2"), attn(p + ".attn"), ff(p + ".ff"),
                                  adapter(p + ".adapter.attn"), adapter(p + ".adapter.ff")});
        }
        enc_final = norm("enc.ln_f");
        dec_layers.clear();
        for (std::size_t i = 0; i < config_.n_dec_layers; ++i) {
            const std::string p = "dec." + std::to_string(i);
            dec_layers.push_back({norm(p + ".ln1"), norm(p + ".ln2"), norm(p + ".ln3"), attn(p + ".self"),
                                  attn(p + ".cross"), ff(p + ".ff"), adapter(p + ".adapter.self"),
                                  adapter(p + ".adapter.cross"), adapter(p + ".adapter.ff")});
        }
        dec_final = norm("dec.ln_f");
        head = r.get("head.out");
        cls_weight = r.get("cls.w");
        cls_bias = r.get("cls.b");
    }

    void set_method(const PeftMethod& method) {
        method_ = method;
        injected_ = true;
    }
    bool injected() const { return injected_; }

    Tensor<T> tok_embed, pos_embed, head, cls_weight, cls_bias;
    std::vector<EncoderLayer<T>> enc_layers;
    std::vector<DecoderLayer<T>> dec_layers;
    Norm<T> enc_final, dec_final;

private:
    ModelConfig config_;
    ParamRegistry<T> registry_;
    PeftMethod method_;
    bool injected_ = false;
};

/// Fresh model with N(0, 0.02²) weights, unit layer-norm gains and zero
/// biases. Same config ⇒ bit-identical parameters.
template <class T>
Model<T> init_model(const ModelConfig& config) {
    config.validate();
    ParamRegistry<T> registry;
    for (const auto& spec : base_layout(config)) {
        registry.add(spec.name, make_param<T>(spec, config.seed), spec.decay);
    }
    return Model<T>(config, std::move(registry));
}

}  // namespace peftlab
