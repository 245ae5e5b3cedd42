// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <Eigen/SVD>

#include "peftlab/train.hpp"
#include "test_util.hpp"

using namespace peftlab;
using namespace peftlab::testing;

namespace {

const std::vector<PeftMethod> kAllMethods{PeftMethod::full(),       PeftMethod::lora(2),    PeftMethod::fflora(4),
                                          PeftMethod::adapter(3),   PeftMethod::fflora_adapter(2),
                                          PeftMethod::adapter(2, Activation::gelu)};

ModelConfig full_size(std::size_t layers_each) {
    ModelConfig c;
    c.n_enc_layers = layers_each;
    c.n_dec_layers = layers_each;
    c.d_model = 768;
    c.n_heads = 12;
    c.d_ff = 3072;
    c.vocab_size = 32;
    return c;
}

std::uint64_t layout_total(const ModelConfig& c, const PeftMethod& m) {
    std::uint64_t n = 0;
    for (const auto& spec : peft_layout(c, m)) {
        n += shape_size(spec.shape);
    }
    return n;
}

template <class T>
Tensor<T> probe_logits(const Model<T>& m, const TokenSeq& src, const TokenSeq& tgt) {
    NoGradGuard<T> guard;
    return decoder_logits(m, encode_batch(m, {src}), {tgt});
}

}  // namespace

TEST(Accounting, PublishedTableCounts) {
    const auto t5 = codet5_base(), plbart = plbart_base();
    EXPECT_EQ(t5.attention_blocks(), 36u);
    EXPECT_EQ(plbart.attention_blocks(), 18u);
    EXPECT_EQ(count_trainable(t5, PeftMethod::lora(2)).count, 221'184u);
    EXPECT_EQ(count_trainable(t5, PeftMethod::lora(16)).count, 1'769'472u);
    EXPECT_EQ(count_trainable(t5, PeftMethod::fflora(16)).count, 2'949'120u);
    EXPECT_EQ(count_trainable(t5, PeftMethod::fflora(4)).count, 737'280u);
    EXPECT_EQ(count_trainable(plbart, PeftMethod::lora(16)).count, 884'736u);
    EXPECT_EQ(count_trainable(plbart, PeftMethod::fflora(16)).count, 1'474'560u);
    EXPECT_EQ(count_trainable(t5, PeftMethod::full()).count, 223'000'000u);
}

TEST(Accounting, TableFormatting) {
    const auto t5 = codet5_base(), plbart = plbart_base();
    auto fmt = [](const ReferenceShape& s, const PeftMethod& m) {
        return format_count(count_trainable(s, m).count, s.total);
    };
    EXPECT_EQ(fmt(t5, PeftMethod::lora(2)), "0.2M (0.1%)");
    EXPECT_EQ(fmt(t5, PeftMethod::fflora(16)), "3M (1.3%)");
    EXPECT_EQ(fmt(t5, PeftMethod::full()), "223M (100%)");
    EXPECT_EQ(fmt(t5, PeftMethod::fflora(4)), "0.7M (0.3%)");
    EXPECT_EQ(fmt(t5, PeftMethod::lora(16)), "1.8M (0.8%)");
    EXPECT_EQ(fmt(plbart, PeftMethod::lora(16)), "0.9M (0.6%)");
    EXPECT_EQ(fmt(plbart, PeftMethod::fflora(16)), "1.5M (1%)");
    EXPECT_EQ(fmt(plbart, PeftMethod::full()), "140M (100%)");
}

TEST(Accounting, ShapeEquivalentLayoutsMatchClosedForm) {
    const auto t5 = full_size(12), plbart = full_size(6);
    for (std::size_t r : {1, 2, 4, 8, 16}) {
        for (auto kind : {PeftKind::lora, PeftKind::fflora, PeftKind::adapter, PeftKind::fflora_adapter}) {
            const PeftMethod m{kind, r};
            EXPECT_EQ(layout_total(t5, m), count_trainable(codet5_base(), m).count) << method_label(m);
            EXPECT_EQ(layout_total(plbart, m), count_trainable(plbart_base(), m).count) << method_label(m);
        }
    }
}

TEST(Accounting, EnumerationMatchesClosedFormOnRandomConfigs) {
    std::mt19937_64 gen(17);
    std::uniform_int_distribution<std::size_t> layers(1, 3), heads(1, 4), width(3, 8), rank(1, 5);
    for (int trial = 0; trial < 12; ++trial) {
        ModelConfig c;
        c.n_enc_layers = layers(gen);
        c.n_dec_layers = layers(gen);
        c.n_heads = heads(gen);
        c.d_model = c.n_heads * width(gen);
        c.d_ff = c.d_model * 2;
        c.vocab_size = 10;
        c.max_seq_len = 6;
        c.seed = static_cast<std::uint64_t>(trial);
        auto base = init_model<float>(c);
        const std::size_t r = std::min(rank(gen), c.d_model - 1);
        for (auto kind : {PeftKind::full, PeftKind::lora, PeftKind::fflora, PeftKind::adapter,
                          PeftKind::fflora_adapter}) {
            const PeftMethod m{kind, kind == PeftKind::full ? 0 : r};
            auto model = inject(base, m, 1);
            EXPECT_EQ(trainable_count(model), count_trainable(shape_of(c), m).count) << method_label(m);
        }
    }
}

TEST(Accounting, ToyExamplesAndMonotoneCapacity) {
    ModelConfig c;  // d=64, 2+2 layers
    auto base = init_model<float>(c);
    // 2 encoder self + 2 decoder self + 2 decoder cross blocks
    EXPECT_EQ(trainable_count(inject(base, PeftMethod::lora(4), 0)), 6u * 2u * 4u * 128u);
    EXPECT_EQ(trainable_count(inject(base, PeftMethod::adapter(8), 0)),
              (2u * 2u + 3u * 2u) * (2u * 64u * 8u + 8u + 64u));
    auto full = inject(base, PeftMethod::full(), 0);
    EXPECT_EQ(trainable_params(full).size(), full.registry().size());
    for (auto kind : {PeftKind::lora, PeftKind::fflora, PeftKind::adapter, PeftKind::fflora_adapter}) {
        for (std::size_t r = 1; r < 16; ++r) {
            EXPECT_LT(count_trainable(codet5_base(), PeftMethod{kind, r}).count,
                      count_trainable(codet5_base(), PeftMethod{kind, r + 1}).count);
        }
    }
}

TEST(Inject, PlacementAndFreezing) {
    auto base = init_model<float>(ModelConfig{});
    auto m = inject(base, PeftMethod::fflora_adapter(2), 0);
    const auto& reg = m.registry();
    EXPECT_TRUE(reg.contains("enc.1.ff.w1.lora_a"));
    EXPECT_TRUE(reg.contains("dec.0.ff.w2.lora_b"));
    EXPECT_FALSE(reg.contains("enc.0.attn.q.lora_a"));
    EXPECT_TRUE(reg.contains("dec.1.adapter.cross.up_b"));
    EXPECT_TRUE(reg.contains("enc.0.adapter.attn.down"));
    EXPECT_FALSE(reg.contains("enc.0.adapter.cross.down"));
    for (const auto& e : reg.entries()) {
        const bool added = e.name.find(".lora_") != std::string::npos || e.name.find(".adapter.") != std::string::npos;
        EXPECT_EQ(e.frozen, !added) << e.name;
    }
    auto lora = inject(base, PeftMethod::lora(2), 0);
    std::size_t pairs = 0;
    for (const auto& e : lora.registry().entries()) pairs += e.name.ends_with(".lora_a");
    EXPECT_EQ(pairs, (2u + 2u * 2u) * 2u);
    EXPECT_TRUE(lora.registry().contains("dec.0.cross.v.lora_b"));
    EXPECT_FALSE(lora.registry().contains("dec.0.cross.k.lora_b"));
}

TEST(Inject, Errors) {
    auto base = init_model<float>(ModelConfig{});
    auto m = inject(base, PeftMethod::lora(2), 0);
    EXPECT_THROW(inject(m, PeftMethod::adapter(2), 0), state_error);
    EXPECT_THROW(inject(base, PeftMethod::lora(64), 0), config_error);
    EXPECT_THROW(inject(base, PeftMethod::lora(0), 0), config_error);
    EXPECT_NO_THROW(inject(base, PeftMethod::lora(63), 0));
    EXPECT_THROW(lora_init<float>(8, 4, 4, 0), config_error);
}

TEST(Inject, IdentityAtInitIsBitwise) {
    auto base = init_model<float>(ModelConfig{});
    std::mt19937_64 gen(5);
    for (const auto& method : kAllMethods) {
        auto m = inject(base, method, 11);
        for (int i = 0; i < 5; ++i) {
            const auto src = random_tokens(gen, 1, 12, 64), tgt = random_target(gen, 10, 64);
            EXPECT_EQ(probe_logits(m, src, tgt).storage(), probe_logits(base, src, tgt).storage())
                << method_label(method);
            NoGradGuard<float> guard;
            const std::vector<std::pair<TokenSeq, TokenSeq>> pair{{src, random_tokens(gen, 1, 6, 64)}};
            EXPECT_EQ(pair_logits(m, pair).storage(), pair_logits(base, pair).storage()) << method_label(method);
        }
    }
}

TEST(LoraInit, ZeroDeltaAndDeterministic) {
    auto p = lora_init<float>(16, 24, 4, 3, "x");
    auto q = lora_init<float>(16, 24, 4, 3, "x");
    EXPECT_EQ(p.a.storage(), q.a.storage());
    EXPECT_EQ(p.a.shape(), (Shape{16, 4}));
    const auto delta = matmul(p.a, p.b);
    for (float v : delta.data()) EXPECT_EQ(v, 0.0f);
    EXPECT_NE(lora_init<float>(16, 24, 4, 4, "x").a.storage(), p.a.storage());
}

TEST(LoraInit, ProductRankIsBounded) {
    std::mt19937_64 gen(8);
    std::normal_distribution<double> dist;
    for (std::size_t r : {1, 2, 4}) {
        Tensor<double> a({12, r}, std::vector<double>(12 * r)), b({r, 10}, std::vector<double>(r * 10));
        for (auto& x : a.storage()) x = dist(gen);
        for (auto& x : b.storage()) x = dist(gen);
        auto prod = matmul(a, b);
        Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> M(prod.data().data(),
                                                                                                  12, 10);
        Eigen::JacobiSVD<Eigen::MatrixXd> svd(M);
        const auto s = svd.singularValues();
        EXPECT_LE(s(static_cast<Eigen::Index>(r)), 1e-6 * s(0));
        EXPECT_GT(s(static_cast<Eigen::Index>(r) - 1), 1e-6 * s(0));
    }
}

TEST(LoraTraining, GradientReachesBothFactors) {
    auto m = inject(init_model<double>(tiny_config()), PeftMethod::lora(2), 0);
    auto params = prepare_trainable(m);
    OptimizerState<double> state;
    TrainConfig cfg;
    cfg.lr = 1e-2;
    const std::vector<TokenSeq> srcs{{5, 6, 7}}, tgts{{kBos, 7, 6, kEos}};
    auto step = [&] {
        for (auto& p : params) p.value.zero_grad();
        Tape<double> tape;
        TapeScope<double> scope(tape);
        auto loss = seq2seq_loss(m, srcs, tgts);
        tape.backward(loss);
    };
    auto norm = [](const Tensor<double>& t) {
        double s = 0;
        for (double g : t.grad()) s += g * g;
        return s;
    };
    const auto& reg = m.registry();
    step();
    EXPECT_GT(norm(reg.get("enc.0.attn.q.lora_b")), 0.0);
    EXPECT_EQ(norm(reg.get("enc.0.attn.q.lora_a")), 0.0);
    adam_step(params, state, cfg);
    bool moved = false;
    for (double v : reg.get("enc.0.attn.q.lora_b").data()) moved |= v != 0.0;
    EXPECT_TRUE(moved);
    step();
    EXPECT_GT(norm(reg.get("enc.0.attn.q.lora_a")), 0.0);
}

TEST(PeftGradients, InjectedParametersMatchFiniteDifferences) {
    for (const auto& method : {PeftMethod::lora(2), PeftMethod::fflora_adapter(2),
                               PeftMethod::adapter(2, Activation::gelu)}) {
        auto m = inject(init_model<double>(tiny_config(8)), method, 1);
        randomize(m, ".lora_b", 2, 0.1);
        randomize(m, ".up", 3, 0.1);
        randomize(m, "_b", 4, 0.05);
        const std::vector<TokenSeq> srcs{{5, 6, 7}, {8, 9}}, tgts{{kBos, 4, 9, kEos}, {kBos, 10, kEos}};
        auto res = check_model_gradients(m, [&](const Model<double>& mm) { return seq2seq_loss(mm, srcs, tgts); });
        EXPECT_LE(res.worst, 1e-4) << method_label(method) << " " << res.worst_name;
    }
}

TEST(Merge, ZeroDeltasAreBitIdentical) {
    auto base = init_model<float>(ModelConfig{});
    auto merged = merge_lora(inject(base, PeftMethod::fflora(4), 0));
    ASSERT_EQ(merged.registry().size(), base.registry().size());
    for (std::size_t i = 0; i < base.registry().size(); ++i) {
        EXPECT_EQ(merged.registry().entries()[i].name, base.registry().entries()[i].name);
        EXPECT_EQ(merged.registry().entries()[i].value.storage(), base.registry().entries()[i].value.storage());
    }
}

TEST(Merge, RandomDeltasAgreeWithWrappedModel) {
    std::mt19937_64 gen(12);
    for (const auto& method : {PeftMethod::lora(2), PeftMethod::fflora(2)}) {
        auto wrapped = inject(init_model<float>(ModelConfig{}), method, 0);
        randomize(wrapped, ".lora_b", 7, 0.05);
        auto merged = merge_lora(wrapped);
        for (const auto& e : merged.registry().entries()) {
            EXPECT_EQ(e.name.find(".lora_"), std::string::npos);
        }
        double worst = 0;
        for (int i = 0; i < 100; ++i) {
            const auto src = random_tokens(gen, 1, 12, 64), tgt = random_target(gen, 10, 64);
            auto a = probe_logits(wrapped, src, tgt), b = probe_logits(merged, src, tgt);
            for (std::size_t k = 0; k < a.size(); ++k) worst = std::max(worst, double(std::abs(a[k] - b[k])));
        }
        EXPECT_LE(worst, 1e-5) << method_label(method);
    }
}

TEST(Merge, AdaptersRefuse) {
    auto m = inject(init_model<float>(ModelConfig{}), PeftMethod::fflora_adapter(2), 0);
    EXPECT_THROW(merge_lora(m), unsupported_merge_error);
}
