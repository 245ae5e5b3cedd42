// SPDX-License-Identifier: Apache-2.0
//
// Synthetic seq2seq and pair-classification tasks, and their text files.
#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "peftlab/config.hpp"
#include "peftlab/metrics.hpp"
#include "peftlab/model.hpp"
#include "peftlab/rng.hpp"
#include "peftlab/transformer.hpp"

namespace peftlab {

enum class TaskKind { copy, reverse, subst_translate, clone_pairs };

inline const char* task_name(TaskKind k) {
    switch (k) {
    case TaskKind::copy: return "copy";
    case TaskKind::reverse: return "reverse";
    case TaskKind::subst_translate: return "subst_translate";
    case TaskKind::clone_pairs: return "clone_pairs";
    }
    return "?";
}

inline TaskKind parse_task_kind(std::string_view name) {
    for (auto k : {TaskKind::copy, TaskKind::reverse, TaskKind::subst_translate, TaskKind::clone_pairs}) {
        if (name == task_name(k)) {
            return k;
        }
    }
    throw config_error("unknown task kind '" + std::string(name) + "'");
}

inline MetricKind default_metric(TaskKind k) {
    switch (k) {
    case TaskKind::copy:
    case TaskKind::reverse: return MetricKind::exact_match;
    case TaskKind::subst_translate: return MetricKind::bleu4;
    case TaskKind::clone_pairs: return MetricKind::f1;
    }
    return MetricKind::exact_match;
}

inline MetricKind parse_metric(std::string_view name) {
    for (auto k : {MetricKind::bleu4, MetricKind::exact_match, MetricKind::f1}) {
        if (name == metric_name(k)) {
            return k;
        }
    }
    throw config_error("unknown metric '" + std::string(name) + "'");
}

/// Target excludes BOS/EOS; the loss layer adds them.
struct Seq2SeqExample {
    TokenSeq src, tgt;
    friend bool operator==(const Seq2SeqExample&, const Seq2SeqExample&) = default;
};

struct PairExample {
    TokenSeq a, b;
    int label = 0;
    friend bool operator==(const PairExample&, const PairExample&) = default;
};

/// One split; exactly one of the two lists is used depending on the task.
struct Split {
    std::vector<Seq2SeqExample> seq;
    std::vector<PairExample> pairs;

    std::size_t size() const { return seq.size() + pairs.size(); }
    bool empty() const { return size() == 0; }
};

struct TaskParams {
    TaskKind kind = TaskKind::copy;
    std::uint64_t seed = 0;
    std::size_t n_train = 1000;
    std::size_t n_dev = 100;
    std::size_t n_test = 100;
    std::size_t vocab_size = 64;
    std::size_t min_len = 3;
    std::size_t max_len = 8;
    double low_resource_fraction = 1.0;
};

struct TaskSpec {
    TaskParams params;
    MetricKind metric = MetricKind::exact_match;
    Split train, dev, test;

    TaskKind kind() const { return params.kind; }
    bool is_pair() const { return params.kind == TaskKind::clone_pairs; }

    const Split& split(std::string_view name) const {
        if (name == "train") return train;
        if (name == "dev") return dev;
        if (name == "test") return test;
        throw config_error("unknown split '" + std::string(name) + "' (expected train, dev or test)");
    }
};

/// Per-task bijection of the task vocabulary [4, V); index = token id.
inline std::vector<TokenId> substitution_table(std::uint64_t seed, std::size_t vocab_size) {
    std::vector<TokenId> image;
    for (auto t = static_cast<std::size_t>(kFirstTaskToken); t < vocab_size; ++t) {
        image.push_back(static_cast<TokenId>(t));
    }
    StreamRng rng(seed, "substitution");
    rng.shuffle(image);
    std::vector<TokenId> table(vocab_size);
    for (std::size_t t = 0; t < vocab_size; ++t) {
        table[t] = t < static_cast<std::size_t>(kFirstTaskToken) ? static_cast<TokenId>(t)
                                                                 : image[t - kFirstTaskToken];
    }
    return table;
}

inline std::vector<TokenId> invert_table(const std::vector<TokenId>& table) {
    std::vector<TokenId> inv(table.size());
    for (std::size_t t = 0; t < table.size(); ++t) {
        inv[static_cast<std::size_t>(table[t])] = static_cast<TokenId>(t);
    }
    return inv;
}

inline TokenSeq apply_table(const TokenSeq& seq, const std::vector<TokenId>& table) {
    TokenSeq out;
    out.reserve(seq.size());
    for (auto t : seq) {
        out.push_back(table.at(static_cast<std::size_t>(t)));
    }
    return out;
}

/// Swaps positions (0,1), (2,3), ...; an odd trailing token stays. Its own
/// inverse.
inline TokenSeq swap_adjacent_pairs(TokenSeq seq) {
    for (std::size_t i = 0; i + 1 < seq.size(); i += 2) {
        std::swap(seq[i], seq[i + 1]);
    }
    return seq;
}

inline TokenSeq subst_translate(const TokenSeq& src, const std::vector<TokenId>& table) {
    return swap_adjacent_pairs(apply_table(src, table));
}

namespace detail {
inline TokenSeq random_sequence(StreamRng& rng, const TaskParams& p) {
    const auto len = rng.range(p.min_len, p.max_len);
    TokenSeq seq(len);
    for (auto& t : seq) {
        t = static_cast<TokenId>(rng.range(kFirstTaskToken, p.vocab_size - 1));
    }
    return seq;
}

inline std::size_t subsample(std::size_t n, double fraction) {
    return static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(n) - 1e-9));
}
}  // namespace detail

/// Generates all three splits. Generative sources are distinct across (and
/// within) splits; clone pairs alternate labels in randomly ordered
/// positive/negative couples so every prefix stays balanced.
inline TaskSpec gen_task(const TaskParams& p) {
    if (p.n_train == 0 || p.n_dev == 0 || p.n_test == 0) {
        throw config_error("split sizes must be at least 1");
    }
    if (p.min_len == 0 || p.min_len > p.max_len) {
        throw config_error("invalid length range [" + std::to_string(p.min_len) + ", " + std::to_string(p.max_len) +
                           "]");
    }
    if (p.vocab_size <= static_cast<std::size_t>(kFirstTaskToken) + 1) {
        throw config_error("vocab_size must leave at least two task tokens");
    }
    if (!(p.low_resource_fraction > 0.0 && p.low_resource_fraction <= 1.0)) {
        throw config_error("low_resource_fraction must lie in (0, 1]");
    }
    const double distinct = std::pow(static_cast<double>(p.vocab_size - kFirstTaskToken), static_cast<double>(p.min_len));
    const std::size_t total = p.n_train + p.n_dev + p.n_test;
    if (p.kind != TaskKind::clone_pairs && distinct < 2.0 * static_cast<double>(total)) {
        throw config_error("vocabulary and length range too small for " + std::to_string(total) +
                           " distinct sequences");
    }
    TaskSpec spec;
    spec.params = p;
    spec.metric = default_metric(p.kind);
    StreamRng rng(p.seed, task_name(p.kind));
    const auto table = substitution_table(p.seed, p.vocab_size);
    const std::size_t n_train = std::max<std::size_t>(1, detail::subsample(p.n_train, p.low_resource_fraction));

    if (p.kind == TaskKind::clone_pairs) {
        auto make_split = [&](std::size_t n) {
            std::vector<PairExample> out;
            while (out.size() < n) {
                const bool positive_first = rng.range(0, 1) == 1;
                for (int k = 0; k < 2 && out.size() < n; ++k) {
                    const int label = (k == 0) == positive_first ? 1 : 0;
                    auto a = detail::random_sequence(rng, p);
                    const auto translated = apply_table(a, table);
                    TokenSeq b;
                    if (label == 1) {
                        b = translated;
                    } else {
                        do {
                            b = detail::random_sequence(rng, p);
                        } while (b == translated);
                    }
                    out.push_back({std::move(a), std::move(b), label});
                }
            }
            return out;
        };
        spec.train.pairs = make_split(p.n_train);
        spec.dev.pairs = make_split(p.n_dev);
        spec.test.pairs = make_split(p.n_test);
        spec.train.pairs.resize(n_train);
        return spec;
    }

    std::set<TokenSeq> seen;
    auto make_split = [&](std::size_t n) {
        std::vector<Seq2SeqExample> out;
        while (out.size() < n) {
            auto src = detail::random_sequence(rng, p);
            if (!seen.insert(src).second) {
                continue;
            }
            TokenSeq tgt;
            switch (p.kind) {
            case TaskKind::copy: tgt = src; break;
            case TaskKind::reverse: tgt.assign(src.rbegin(), src.rend()); break;
            default: tgt = subst_translate(src, table); break;
            }
            out.push_back({std::move(src), std::move(tgt)});
        }
        return out;
    };
    spec.train.seq = make_split(p.n_train);
    spec.dev.seq = make_split(p.n_dev);
    spec.test.seq = make_split(p.n_test);
    spec.train.seq.resize(n_train);
    return spec;
}

// ---------------------------------------------------------------------------
// Task files: <dir>/task.cfg plus train.tsv, dev.tsv, test.tsv
// ---------------------------------------------------------------------------

namespace detail {
inline std::string join_tokens(const TokenSeq& seq) {
    std::string out;
    for (std::size_t i = 0; i < seq.size(); ++i) {
        out += (i ? " " : "") + std::to_string(seq[i]);
    }
    return out;
}

inline TokenSeq parse_tokens(const std::string& field, const std::string& where) {
    TokenSeq out;
    std::istringstream is(field);
    std::string tok;
    while (is >> tok) {
        try {
            std::size_t used = 0;
            const long v = std::stol(tok, &used);
            if (used != tok.size() || v < 0) {
                throw std::invalid_argument(tok);
            }
            out.push_back(static_cast<TokenId>(v));
        } catch (const std::logic_error&) {
            throw parse_error(where + ": bad token id '" + tok + "'");
        }
    }
    return out;
}

inline std::vector<std::string> split_tabs(const std::string& line) {
    std::vector<std::string> fields;
    std::size_t start = 0;
    while (true) {
        const auto tab = line.find('\t', start);
        fields.push_back(line.substr(start, tab - start));
        if (tab == std::string::npos) {
            return fields;
        }
        start = tab + 1;
    }
}

inline void write_split(const std::filesystem::path& path, const Split& split, bool pairs) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw io_error("cannot write " + path.string());
    }
    if (pairs) {
        for (const auto& ex : split.pairs) {
            out << join_tokens(ex.a) << '\t' << join_tokens(ex.b) << '\t' << ex.label << '\n';
        }
    } else {
        for (const auto& ex : split.seq) {
            out << join_tokens(ex.src) << '\t' << join_tokens(ex.tgt) << '\n';
        }
    }
    if (!out) {
        throw io_error("failed writing " + path.string());
    }
}

inline Split read_split(const std::filesystem::path& path, bool pairs) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw io_error("cannot read task file " + path.string());
    }
    Split split;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) {
            continue;
        }
        const std::string where = path.string() + ":" + std::to_string(lineno);
        auto fields = split_tabs(line);
        if (fields.size() != (pairs ? 3u : 2u)) {
            throw parse_error(where + ": expected " + std::to_string(pairs ? 3 : 2) + " tab-separated fields");
        }
        if (pairs) {
            const auto& lab = fields[2];
            if (lab != "0" && lab != "1") {
                throw parse_error(where + ": label must be 0 or 1");
            }
            split.pairs.push_back({parse_tokens(fields[0], where), parse_tokens(fields[1], where), lab == "1"});
        } else {
            split.seq.push_back({parse_tokens(fields[0], where), parse_tokens(fields[1], where)});
        }
    }
    return split;
}
}  // namespace detail

inline void write_task(const std::filesystem::path& dir, const TaskSpec& spec) {
    std::filesystem::create_directories(dir);
    const auto& p = spec.params;
    KeyValueConfig meta;
    meta.set("kind", task_name(p.kind));
    meta.set("seed", std::to_string(p.seed));
    meta.set("vocab_size", std::to_string(p.vocab_size));
    meta.set("min_len", std::to_string(p.min_len));
    meta.set("max_len", std::to_string(p.max_len));
    meta.set("n_train", std::to_string(p.n_train));
    meta.set("n_dev", std::to_string(p.n_dev));
    meta.set("n_test", std::to_string(p.n_test));
    meta.set("low_resource_fraction", format_double(p.low_resource_fraction));
    meta.set("metric", metric_name(spec.metric));
    meta.write(dir / "task.cfg");
    detail::write_split(dir / "train.tsv", spec.train, spec.is_pair());
    detail::write_split(dir / "dev.tsv", spec.dev, spec.is_pair());
    detail::write_split(dir / "test.tsv", spec.test, spec.is_pair());
}

inline TaskSpec read_task(const std::filesystem::path& dir) {
    auto meta = KeyValueConfig::load(dir / "task.cfg");
    TaskSpec spec;
    auto& p = spec.params;
    p.kind = parse_task_kind(meta.get_string("kind"));
    p.seed = meta.get_u64("seed");
    p.vocab_size = meta.get_size("vocab_size");
    p.min_len = meta.get_size("min_len");
    p.max_len = meta.get_size("max_len");
    p.n_train = meta.get_size("n_train");
    p.n_dev = meta.get_size("n_dev");
    p.n_test = meta.get_size("n_test");
    p.low_resource_fraction = meta.get_double("low_resource_fraction");
    spec.metric = parse_metric(meta.get_string("metric"));
    meta.reject_unknown();
    spec.train = detail::read_split(dir / "train.tsv", spec.is_pair());
    spec.dev = detail::read_split(dir / "dev.tsv", spec.is_pair());
    spec.test = detail::read_split(dir / "test.tsv", spec.is_pair());
    return spec;
}

}  // namespace peftlab
