// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <set>

#include "peftlab/config.hpp"
#include "peftlab/metrics.hpp"
#include "peftlab/tasks.hpp"
#include "test_util.hpp"

using namespace peftlab;
using namespace peftlab::testing;

namespace {

using Words = std::vector<std::string>;

Words words(const std::string& s) {
    Words out;
    std::istringstream is(s);
    for (std::string w; is >> w;) out.push_back(w);
    return out;
}

TaskParams params(TaskKind kind, std::uint64_t seed = 1) {
    TaskParams p;
    p.kind = kind;
    p.seed = seed;
    p.n_train = 200;
    p.n_dev = 40;
    p.n_test = 40;
    return p;
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST(GenTask, TargetsFollowTheTaskRule) {
    for (auto kind : {TaskKind::copy, TaskKind::reverse, TaskKind::subst_translate}) {
        const auto spec = gen_task(params(kind));
        EXPECT_EQ(spec.metric, kind == TaskKind::subst_translate ? MetricKind::bleu4 : MetricKind::exact_match);
        const auto table = substitution_table(1, 64);
        for (const auto& ex : spec.train.seq) {
            TokenSeq expect;
            switch (kind) {
            case TaskKind::copy: expect = ex.src; break;
            case TaskKind::reverse: expect.assign(ex.src.rbegin(), ex.src.rend()); break;
            default: expect = swap_adjacent_pairs(apply_table(ex.src, table)); break;
            }
            EXPECT_EQ(ex.tgt, expect);
            EXPECT_GE(ex.src.size(), 3u);
            EXPECT_LE(ex.src.size(), 8u);
            for (auto t : ex.src) {
                EXPECT_GE(t, kFirstTaskToken);
                EXPECT_LT(t, 64);
            }
        }
    }
}

TEST(GenTask, SmallExamples) {
    EXPECT_EQ(swap_adjacent_pairs({5, 6, 7}), (TokenSeq{6, 5, 7}));
    EXPECT_EQ(swap_adjacent_pairs({5, 6, 7, 8}), (TokenSeq{6, 5, 8, 7}));
    const auto table = substitution_table(9, 12);
    ASSERT_EQ(table.size(), 12u);
    for (TokenId t = 0; t < kFirstTaskToken; ++t) EXPECT_EQ(table[t], t);
    std::set<TokenId> image(table.begin(), table.end());
    EXPECT_EQ(image.size(), 12u);
    EXPECT_EQ(apply_table({5, 6, 7}, table), (TokenSeq{table[5], table[6], table[7]}));
}

TEST(GenTask, SubstTranslateInverts) {
    const auto spec = gen_task(params(TaskKind::subst_translate, 4));
    const auto inv = invert_table(substitution_table(4, 64));
    for (const auto* split : {&spec.train, &spec.dev, &spec.test}) {
        for (const auto& ex : split->seq) {
            EXPECT_EQ(apply_table(swap_adjacent_pairs(ex.tgt), inv), ex.src);
        }
    }
}

TEST(GenTask, ReproducibleAndDisjoint) {
    for (auto kind : {TaskKind::copy, TaskKind::reverse, TaskKind::subst_translate}) {
        const auto a = gen_task(params(kind, 7)), b = gen_task(params(kind, 7)), c = gen_task(params(kind, 8));
        EXPECT_EQ(a.train.seq, b.train.seq);
        EXPECT_EQ(a.test.seq, b.test.seq);
        EXPECT_NE(a.train.seq, c.train.seq);
        std::set<TokenSeq> seen;
        std::size_t total = 0;
        for (const auto* split : {&a.train, &a.dev, &a.test}) {
            for (const auto& ex : split->seq) {
                seen.insert(ex.src);
                ++total;
            }
        }
        EXPECT_EQ(seen.size(), total);
        EXPECT_EQ(total, 280u);
    }
}

TEST(GenTask, ClonePairsLowResource) {
    TaskParams p;
    p.kind = TaskKind::clone_pairs;
    p.seed = 3;
    p.n_train = 1000;
    p.low_resource_fraction = 0.25;
    const auto spec = gen_task(p);
    EXPECT_EQ(spec.metric, MetricKind::f1);
    ASSERT_EQ(spec.train.pairs.size(), 250u);
    std::size_t positives = 0;
    const auto table = substitution_table(3, 64);
    for (const auto& ex : spec.train.pairs) {
        positives += ex.label;
        if (ex.label == 1) {
            EXPECT_EQ(ex.b, apply_table(ex.a, table));
        } else {
            EXPECT_NE(ex.b, apply_table(ex.a, table));
        }
    }
    EXPECT_NEAR(static_cast<double>(positives) / 250.0, 0.5, 0.05);
    p.low_resource_fraction = 0.0025;
    EXPECT_EQ(gen_task(p).train.pairs.size(), 3u);
}

TEST(GenTask, InvalidParameters) {
    auto p = params(TaskKind::copy);
    p.n_dev = 0;
    EXPECT_THROW(gen_task(p), config_error);
    p = params(TaskKind::copy);
    p.min_len = 9;
    EXPECT_THROW(gen_task(p), config_error);
    p = params(TaskKind::copy);
    p.low_resource_fraction = 0;
    EXPECT_THROW(gen_task(p), config_error);
    p.low_resource_fraction = 1.5;
    EXPECT_THROW(gen_task(p), config_error);
    p = params(TaskKind::copy);
    p.vocab_size = 5;
    EXPECT_THROW(gen_task(p), config_error);
    EXPECT_THROW(parse_task_kind("summarize"), config_error);
}

TEST(TaskFiles, RoundTrip) {
    for (auto kind : {TaskKind::reverse, TaskKind::clone_pairs}) {
        const auto dir = temp_dir("task");
        auto p = params(kind, 5);
        p.low_resource_fraction = 0.5;
        const auto spec = gen_task(p);
        write_task(dir, spec);
        const auto back = read_task(dir);
        EXPECT_EQ(back.params.kind, kind);
        EXPECT_EQ(back.params.low_resource_fraction, 0.5);
        EXPECT_EQ(back.metric, spec.metric);
        EXPECT_EQ(back.train.seq, spec.train.seq);
        EXPECT_EQ(back.train.pairs, spec.train.pairs);
        EXPECT_EQ(back.test.seq, spec.test.seq);
        EXPECT_EQ(back.test.pairs, spec.test.pairs);
        const auto again = temp_dir("task");
        write_task(again, back);
        for (const char* f : {"task.cfg", "train.tsv", "dev.tsv", "test.tsv"}) {
            EXPECT_EQ(slurp(dir / f), slurp(again / f)) << f;
        }
        std::filesystem::remove_all(dir);
        std::filesystem::remove_all(again);
    }
}

TEST(TaskFiles, LineFormat) {
    const auto dir = temp_dir("fmt");
    TaskSpec spec = gen_task(params(TaskKind::clone_pairs));
    spec.train.pairs = {{{5, 6}, {7}, 1}};
    write_task(dir, spec);
    EXPECT_EQ(slurp(dir / "train.tsv"), "5 6\t7\t1\n");
    std::filesystem::remove_all(dir);
}

TEST(TaskFiles, MalformedLinesNameTheLine) {
    const auto dir = temp_dir("bad");
    write_task(dir, gen_task(params(TaskKind::copy)));
    auto expect_error_at = [&](const std::string& dev, const std::string& needle) {
        std::ofstream(dir / "dev.tsv", std::ios::binary) << dev;
        try {
            read_task(dir);
            ADD_FAILURE() << "no error for " << dev;
        } catch (const parse_error& e) {
            EXPECT_NE(std::string(e.what()).find(needle), std::string::npos) << e.what();
        }
    };
    expect_error_at("5 6\t5 6\n7 x\t7\n", "dev.tsv:2");
    expect_error_at("5 6\n", "dev.tsv:1");
    expect_error_at("5\t5\n6\t6\t1\n", "dev.tsv:2");
    expect_error_at("5\t-3\n", "dev.tsv:1");
    std::filesystem::remove_all(dir);
    EXPECT_THROW(read_task(dir), io_error);
}

TEST(Bleu, IdentityAndEmpty) {
    EXPECT_DOUBLE_EQ(bleu4_smoothed(words("a b c d e"), {words("a b c d e")}), 100.0);
    EXPECT_DOUBLE_EQ(bleu4_smoothed(words("a"), {words("a")}), 100.0);
    EXPECT_EQ(bleu4_smoothed(Words{}, {words("a b")}), 0.0);
    EXPECT_THROW(bleu4_smoothed(words("a"), {}), contract_error);
}

TEST(Bleu, HandCountedOracle) {
    // p1 = 3/4, p2 = (2+1)/(3+1), p3 = (1+1)/(2+1), p4 = (0+1)/(1+1), no brevity penalty
    const double expect = 100.0 * std::pow((3.0 / 4) * (3.0 / 4) * (2.0 / 3) * (1.0 / 2), 0.25);
    EXPECT_NEAR(bleu4_smoothed(words("a b c d"), {words("a b c e")}), expect, 1e-9);
    // c = 2, r = 4: p1 = 1, p2 = 2/2, p3 = 1/1, p4 = 1/1
    EXPECT_NEAR(bleu4_smoothed(words("a b"), {words("a b c d")}), 100.0 * std::exp(1.0 - 4.0 / 2.0), 1e-9);
    // clipping: p1 = 2/4, p2 = (1+1)/(3+1), p3 = (0+1)/(2+1), p4 = (0+1)/(1+1)
    const double clipped = 100.0 * std::pow(0.5 * 0.5 * (1.0 / 3) * 0.5, 0.25);
    EXPECT_NEAR(bleu4_smoothed(words("a a a a"), {words("a a b c")}), clipped, 1e-9);
    EXPECT_EQ(bleu4_smoothed(words("x y"), {words("a b")}), 0.0);
}

TEST(Bleu, ClosestReferenceAndCorpusMean) {
    const auto cand = words("a b c");
    // closest reference length is 3, so no penalty
    EXPECT_DOUBLE_EQ(bleu4_smoothed(cand, {words("a b c d e f"), words("a b c")}), 100.0);
    const double s1 = bleu4_smoothed(words("a b c d"), {words("a b c e")});
    EXPECT_NEAR(corpus_bleu4(std::vector<Words>{words("a b c d"), words("x")},
                             std::vector<Words>{words("a b c e"), words("x")}),
                (s1 + 100.0) / 2, 1e-12);
    EXPECT_THROW(corpus_bleu4(std::vector<Words>{}, std::vector<Words>{}), data_error);
}

TEST(Bleu, RangeAndMaximumOnRandomSentences) {
    std::mt19937_64 gen(2);
    for (int i = 0; i < 300; ++i) {
        const auto ref = random_tokens(gen, 1, 8, 8);
        const auto cand = random_tokens(gen, 0, 8, 8);
        const double s = bleu4_smoothed(cand, {ref});
        EXPECT_GE(s, 0.0);
        EXPECT_LE(s, 100.0);
        EXPECT_EQ(s == 100.0, cand == ref) << i;
    }
}

TEST(ExactMatch, Counts) {
    const std::vector<TokenSeq> ref{{4}, {5, 6}, {7}, {8}};
    EXPECT_EQ(exact_match(ref, ref), 1.0);
    EXPECT_EQ(exact_match(std::vector<TokenSeq>{{9}, {9}, {9}, {9}}, ref), 0.0);
    EXPECT_EQ(exact_match(std::vector<TokenSeq>{{4}, {5, 6}, {7}, {9}}, ref), 0.75);
    EXPECT_THROW(exact_match(std::vector<TokenSeq>{{4}}, ref), contract_error);
}

TEST(F1, Cases) {
    auto s = f1_precision_recall({1, 0, 1}, {1, 0, 1});
    EXPECT_EQ(s.f1, 1.0);
    EXPECT_EQ(s.precision, 1.0);
    EXPECT_EQ(s.recall, 1.0);
    s = f1_precision_recall({1, 1, 1, 0}, {1, 1, 0, 1});
    EXPECT_DOUBLE_EQ(s.f1, 2.0 / 3);
    EXPECT_DOUBLE_EQ(s.precision, 2.0 / 3);
    EXPECT_DOUBLE_EQ(s.recall, 2.0 / 3);
    s = f1_precision_recall({0, 0}, {1, 0});
    EXPECT_EQ(s.f1, 0.0);
    EXPECT_EQ(s.precision, 0.0);
    EXPECT_EQ(s.recall, 0.0);
    EXPECT_THROW(f1_precision_recall({1}, {1, 0}), contract_error);
    EXPECT_THROW(f1_precision_recall({2}, {1}), contract_error);
}

TEST(F1, HarmonicMeanIdentity) {
    std::mt19937_64 gen(6);
    std::bernoulli_distribution coin(0.5);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<int> p(20), l(20);
        for (int i = 0; i < 20; ++i) {
            p[i] = coin(gen);
            l[i] = coin(gen);
        }
        const auto s = f1_precision_recall(p, l);
        if (s.precision > 0 && s.recall > 0) {
            EXPECT_NEAR(s.f1, 2 * s.precision * s.recall / (s.precision + s.recall), 1e-15);
        }
    }
}

TEST(KeyValueConfig, ParsesValuesAndComments) {
    auto kv = KeyValueConfig::parse_string("# header\nlr = 0.001  # inline\n\nname=copy\nranks = 1, 2,4\nflag = true\n");
    EXPECT_EQ(kv.get_double("lr"), 0.001);
    EXPECT_EQ(kv.get_string("name"), "copy");
    EXPECT_EQ(kv.get_number_list<std::size_t>("ranks"), (std::vector<std::size_t>{1, 2, 4}));
    EXPECT_TRUE(kv.get_bool("flag", false));
    EXPECT_EQ(kv.get_size("missing", 7), 7u);
    EXPECT_NO_THROW(kv.reject_unknown());
    EXPECT_THROW(kv.get_string("absent"), config_error);
}

TEST(KeyValueConfig, ErrorsNameTheLine) {
    auto message = [](auto&& fn) -> std::string {
        try {
            fn();
        } catch (const std::exception& e) {
            return e.what();
        }
        return "";
    };
    EXPECT_NE(message([] { KeyValueConfig::parse_string("a = 1\njunk\n", "x.cfg"); }).find("x.cfg:2"),
              std::string::npos);
    EXPECT_NE(message([] { KeyValueConfig::parse_string("a = 1\n\na = 2\n", "x.cfg"); }).find("x.cfg:3"),
              std::string::npos);
    auto kv = KeyValueConfig::parse_string("a = 1\nsteps = ten\ntypo = 3\n", "y.cfg");
    EXPECT_NE(message([&] { kv.get_size("steps"); }).find("y.cfg:2"), std::string::npos);
    kv.get_string("a");
    EXPECT_NE(message([&] { kv.reject_unknown(); }).find("y.cfg:3"), std::string::npos);
    auto kv2 = KeyValueConfig::parse_string("a = 1\ntypo = 3\n", "z.cfg");
    kv2.get_string("a");
    const auto msg = message([&] { kv2.reject_unknown(); });
    EXPECT_NE(msg.find("z.cfg:2"), std::string::npos);
    EXPECT_NE(msg.find("typo"), std::string::npos);
}

TEST(KeyValueConfig, WriteReadsBack) {
    KeyValueConfig kv;
    kv.set("b", "2");
    kv.set("a", "x y");
    const auto back = KeyValueConfig::parse_string(kv.to_string());
    EXPECT_EQ(back.get_string("b"), "2");
    EXPECT_EQ(back.get_string("a"), "x y");
    EXPECT_EQ(format_double(0.1), "0.1");
    EXPECT_EQ(std::stod(format_double(1.0 / 3)), 1.0 / 3);
}
