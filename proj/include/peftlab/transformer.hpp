// SPDX-License-Identifier: Apache-2.0
//
// Pre-norm encoder-decoder forward pass. Batches are packed row-wise (no
// padding rows); attention masks keep each sequence to its own keys.
#pragma once

#include <array>
#include <cmath>
#include <functional>
#include <string_view>
#include <vector>

#include "peftlab/model.hpp"
#include "peftlab/ops.hpp"

namespace peftlab {

using TokenSeq = std::vector<TokenId>;

/// Observer for attention probabilities, one call per head.
template <class T>
struct ForwardHooks {
    std::function<void(std::string_view scope, std::size_t layer, const Tensor<T>& probs)> on_attention;
};

/// Row-packed sequences. Row i is part of sequence `row_seq[i]` of this
/// packing; `segment[i]` names the encoder sequence it pairs with.
struct Packing {
    TokenSeq ids;
    TokenSeq positions;
    std::vector<std::size_t> segment;
    std::vector<std::size_t> row_seq;
    std::vector<std::size_t> offsets;
    std::vector<std::size_t> lengths;

    std::size_t rows() const { return ids.size(); }
};

inline Packing pack(const std::vector<TokenSeq>& seqs, std::size_t max_len,
                    const std::vector<std::size_t>* segments = nullptr) {
    Packing p;
    for (std::size_t s = 0; s < seqs.size(); ++s) {
        const auto& seq = seqs[s];
        if (seq.empty()) {
            throw length_error("empty sequence in batch");
        }
        if (seq.size() > max_len) {
            throw length_error("sequence of length " + std::to_string(seq.size()) +
                               " exceeds max_seq_len " + std::to_string(max_len));
        }
        p.offsets.push_back(p.ids.size());
        p.lengths.push_back(seq.size());
        for (std::size_t i = 0; i < seq.size(); ++i) {
            p.ids.push_back(seq[i]);
            p.positions.push_back(static_cast<TokenId>(i));
            p.segment.push_back(segments ? (*segments)[s] : s);
            p.row_seq.push_back(s);
        }
    }
    if (p.ids.empty()) {
        throw length_error("empty batch");
    }
    return p;
}

namespace detail {

/// Self-attention windows: each row sees its own sequence, up to itself
/// when causal.
inline AttentionLayout self_layout(const Packing& p, bool causal) {
    AttentionLayout layout;
    for (std::size_t i = 0; i < p.rows(); ++i) {
        const std::size_t seq = p.row_seq[i];
        layout.begin.push_back(p.offsets[seq]);
        layout.end.push_back(causal ? p.offsets[seq] + static_cast<std::size_t>(p.positions[i]) + 1
                                    : p.offsets[seq] + p.lengths[seq]);
    }
    for (auto id : p.ids) {
        layout.key_valid.push_back(id != kPad);
    }
    return layout;
}

/// Cross-attention windows: each query row sees the encoder sequence named
/// by its segment.
inline AttentionLayout cross_layout(const Packing& queries, const Packing& keys) {
    AttentionLayout layout;
    for (std::size_t i = 0; i < queries.rows(); ++i) {
        const std::size_t seq = queries.segment[i];
        if (seq >= keys.offsets.size()) {
            throw contract_error("decoder sequence refers to missing encoder sequence " + std::to_string(seq));
        }
        layout.begin.push_back(keys.offsets[seq]);
        layout.end.push_back(keys.offsets[seq] + keys.lengths[seq]);
    }
    for (auto id : keys.ids) {
        layout.key_valid.push_back(id != kPad);
    }
    return layout;
}

template <class T>
Tensor<T> apply_linear(const Tensor<T>& x, const Linear<T>& l) {
    auto y = matmul(x, l.weight);
    if (l.lora_a) {
        y = add(y, matmul(matmul(x, l.lora_a), l.lora_b));
    }
    if (l.bias) {
        y = add(y, l.bias);
    }
    return y;
}

template <class T>
Tensor<T> apply_norm(const Tensor<T>& x, const Norm<T>& n) {
    return layer_norm(x, n.gain, n.bias);
}

template <class T>
Tensor<T> apply_adapter(const Tensor<T>& h, const AdapterBlock<T>& a, Activation act) {
    if (!a) {
        return h;
    }
    auto inner = add(matmul(h, a.down), a.down_bias);
    inner = act == Activation::relu ? relu(inner) : gelu(inner);
    return add(h, add(matmul(inner, a.up), a.up_bias));
}

template <class T>
Tensor<T> apply_attention(const Tensor<T>& xq, const Tensor<T>& xkv, const AttentionBlock<T>& blk,
                          const AttentionLayout& layout, std::size_t n_heads, const ForwardHooks<T>* hooks,
                          std::string_view scope, std::size_t layer) {
    auto q = apply_linear(xq, blk.q);
    auto k = apply_linear(xkv, blk.k);
    auto v = apply_linear(xkv, blk.v);
    const bool observe = hooks && hooks->on_attention;
    std::vector<Tensor<T>> probs;
    auto out = multi_head_attention(q, k, v, layout, n_heads, observe ? &probs : nullptr);
    for (const auto& p : probs) {
        hooks->on_attention(scope, layer, p);
    }
    return apply_linear(out, blk.o);
}

template <class T>
Tensor<T> apply_ff(const Tensor<T>& x, const FeedForward<T>& ff) {
    return apply_linear(gelu(apply_linear(x, ff.w1)), ff.w2);
}

template <class T>
Tensor<T> embed(const Model<T>& m, const Packing& p) {
    return add(embedding_gather<T>(p.ids, m.tok_embed), embedding_gather<T>(p.positions, m.pos_embed));
}

}  // namespace detail

template <class T>
struct Encoded {
    Tensor<T> states;  // [rows×d]
    Packing packing;
};

/// Encodes a batch of source sequences.
template <class T>
Encoded<T> encode_batch(const Model<T>& m, const std::vector<TokenSeq>& srcs,
                        const ForwardHooks<T>* hooks = nullptr) {
    auto packing = pack(srcs, m.config().max_seq_len);
    const auto layout = detail::self_layout(packing, false);
    const Activation act = m.method().adapter_activation;
    auto x = detail::embed(m, packing);
    for (std::size_t i = 0; i < m.enc_layers.size(); ++i) {
        const auto& layer = m.enc_layers[i];
        auto h = detail::apply_norm(x, layer.ln1);
        h = detail::apply_attention(h, h, layer.attn, layout, m.config().n_heads, hooks, "enc", i);
        x = add(x, detail::apply_adapter(h, layer.after_attn, act));
        h = detail::apply_ff(detail::apply_norm(x, layer.ln2), layer.ff);
        x = add(x, detail::apply_adapter(h, layer.after_ff, act));
    }
    return {detail::apply_norm(x, m.enc_final), std::move(packing)};
}

/// Encoder output [len(src)×d] for one sequence.
template <class T>
Tensor<T> forward_encoder(const Model<T>& m, const TokenSeq& src, const ForwardHooks<T>* hooks = nullptr) {
    return encode_batch(m, {src}, hooks).states;
}

/// Decoder logits [rows×V] for packed decoder inputs. `tgt_segments` maps
/// each decoder sequence to its encoder sequence.
template <class T>
Tensor<T> decoder_logits(const Model<T>& m, const Encoded<T>& enc, const std::vector<TokenSeq>& tgt_inputs,
                         const std::vector<std::size_t>* tgt_segments = nullptr,
                         const ForwardHooks<T>* hooks = nullptr) {
    auto packing = pack(tgt_inputs, m.config().max_seq_len, tgt_segments);
    const auto self_layout = detail::self_layout(packing, true);
    const auto cross_layout = detail::cross_layout(packing, enc.packing);
    const Activation act = m.method().adapter_activation;
    auto x = detail::embed(m, packing);
    for (std::size_t i = 0; i < m.dec_layers.size(); ++i) {
        const auto& layer = m.dec_layers[i];
        auto h = detail::apply_norm(x, layer.ln1);
        h = detail::apply_attention(h, h, layer.self_attn, self_layout, m.config().n_heads, hooks, "dec.self", i);
        x = add(x, detail::apply_adapter(h, layer.after_self, act));
        h = detail::apply_norm(x, layer.ln2);
        h = detail::apply_attention(h, enc.states, layer.cross_attn, cross_layout, m.config().n_heads, hooks,
                                    "dec.cross", i);
        x = add(x, detail::apply_adapter(h, layer.after_cross, act));
        h = detail::apply_ff(detail::apply_norm(x, layer.ln3), layer.ff);
        x = add(x, detail::apply_adapter(h, layer.after_ff, act));
    }
    return matmul(detail::apply_norm(x, m.dec_final), m.head);
}

/// Teacher-forcing loss. Each target starts with BOS and ends with EOS; the
/// decoder reads tgt[0..n-2] and predicts tgt[1..n-1]. PAD targets are
/// ignored.
template <class T>
Tensor<T> seq2seq_loss(const Model<T>& m, const std::vector<TokenSeq>& srcs, const std::vector<TokenSeq>& tgts) {
    if (srcs.size() != tgts.size()) {
        throw contract_error("seq2seq_loss needs one target per source");
    }
    std::vector<TokenSeq> inputs;
    TokenSeq labels;
    for (const auto& tgt : tgts) {
        if (tgt.size() < 2 || tgt.front() != kBos || tgt.back() != kEos) {
            throw contract_error("target must start with BOS and end with EOS");
        }
        if (tgt.size() - 1 > m.config().max_seq_len) {
            throw length_error("target of length " + std::to_string(tgt.size()) + " exceeds max_seq_len " +
                               std::to_string(m.config().max_seq_len) + " + 1");
        }
        inputs.emplace_back(tgt.begin(), tgt.end() - 1);
        labels.insert(labels.end(), tgt.begin() + 1, tgt.end());
    }
    auto enc = encode_batch(m, srcs);
    auto logits = decoder_logits(m, enc, inputs);
    return cross_entropy<T>(logits, labels, kPad);
}

template <class T>
Tensor<T> seq2seq_loss(const Model<T>& m, const TokenSeq& src, const TokenSeq& tgt) {
    return seq2seq_loss(m, std::vector<TokenSeq>{src}, std::vector<TokenSeq>{tgt});
}

/// Argmax decoding from BOS until EOS or `max_len` generated tokens. The
/// returned sequences exclude BOS and EOS. Ties go to the lower token id.
template <class T>
std::vector<TokenSeq> greedy_decode(const Model<T>& m, const std::vector<TokenSeq>& srcs, std::size_t max_len) {
    NoGradGuard<T> no_grad;
    std::vector<TokenSeq> outputs(srcs.size());
    if (srcs.empty() || max_len == 0) {
        return outputs;
    }
    max_len = std::min(max_len, m.config().max_seq_len);
    auto enc = encode_batch(m, srcs);
    std::vector<bool> done(srcs.size(), false);
    const std::size_t vocab = m.config().vocab_size;
    for (std::size_t step = 0; step < max_len; ++step) {
        std::vector<TokenSeq> inputs;
        std::vector<std::size_t> active;
        for (std::size_t s = 0; s < srcs.size(); ++s) {
            if (done[s]) {
                continue;
            }
            TokenSeq in{kBos};
            in.insert(in.end(), outputs[s].begin(), outputs[s].end());
            inputs.push_back(std::move(in));
            active.push_back(s);
        }
        if (active.empty()) {
            break;
        }
        auto logits = decoder_logits(m, enc, inputs, &active);
        std::size_t row_end = 0;
        for (std::size_t a = 0; a < active.size(); ++a) {
            row_end += inputs[a].size();
            const T* row = logits.data().data() + (row_end - 1) * vocab;
            std::size_t best = 0;
            for (std::size_t v = 1; v < vocab; ++v) {
                if (row[v] > row[best]) {
                    best = v;
                }
            }
            const auto s = active[a];
            if (static_cast<TokenId>(best) == kEos) {
                done[s] = true;
            } else {
                outputs[s].push_back(static_cast<TokenId>(best));
            }
        }
    }
    return outputs;
}

template <class T>
TokenSeq greedy_decode(const Model<T>& m, const TokenSeq& src, std::size_t max_len) {
    return greedy_decode(m, std::vector<TokenSeq>{src}, max_len).front();
}

/// `a SEP b`
inline TokenSeq pair_input(const TokenSeq& a, const TokenSeq& b) {
    TokenSeq out(a);
    out.push_back(kSep);
    out.insert(out.end(), b.begin(), b.end());
    return out;
}

/// Two-way logits [pairs×2]: encoder output mean-pooled over non-pad
/// positions, then the `cls` head.
template <class T>
Tensor<T> pair_logits(const Model<T>& m, const std::vector<std::pair<TokenSeq, TokenSeq>>& pairs) {
    std::vector<TokenSeq> inputs;
    inputs.reserve(pairs.size());
    for (const auto& [a, b] : pairs) {
        inputs.push_back(pair_input(a, b));
    }
    auto enc = encode_batch(m, inputs);
    const std::size_t rows = enc.packing.rows();
    std::vector<T> pool(pairs.size() * rows, T(0));
    for (std::size_t s = 0; s < pairs.size(); ++s) {
        std::size_t count = 0;
        for (std::size_t i = 0; i < enc.packing.lengths[s]; ++i) {
            count += enc.packing.ids[enc.packing.offsets[s] + i] != kPad;
        }
        if (count == 0) {
            throw data_error("pair input consists only of padding");
        }
        for (std::size_t i = 0; i < enc.packing.lengths[s]; ++i) {
            const std::size_t row = enc.packing.offsets[s] + i;
            if (enc.packing.ids[row] != kPad) {
                pool[s * rows + row] = T(1) / static_cast<T>(count);
            }
        }
    }
    Tensor<T> pooling({pairs.size(), rows}, std::move(pool));
    return add(matmul(matmul(pooling, enc.states), m.cls_weight), m.cls_bias);
}

template <class T>
std::array<T, 2> pair_classify(const Model<T>& m, const TokenSeq& a, const TokenSeq& b) {
    NoGradGuard<T> no_grad;
    auto logits = pair_logits(m, {{a, b}});
    return {logits[0], logits[1]};
}

template <class T>
Tensor<T> pair_loss(const Model<T>& m, const std::vector<std::pair<TokenSeq, TokenSeq>>& pairs,
                    const std::vector<int>& labels) {
    TokenSeq targets(labels.begin(), labels.end());
    return cross_entropy<T>(pair_logits(m, pairs), targets, -1);
}

}  // namespace peftlab
