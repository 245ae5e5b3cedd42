// SPDX-License-Identifier: Apache-2.0
//
// Sentence-level smoothed BLEU-4, exact match and binary F1.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <vector>

#include "peftlab/errors.hpp"

namespace peftlab {

enum class MetricKind { bleu4, exact_match, f1 };

inline const char* metric_name(MetricKind k) {
    switch (k) {
    case MetricKind::bleu4: return "bleu4";
    case MetricKind::exact_match: return "exact_match";
    case MetricKind::f1: return "f1";
    }
    return "?";
}

namespace detail {
template <class Tok>
std::map<std::vector<Tok>, int> ngram_counts(const std::vector<Tok>& seq, std::size_t n) {
    std::map<std::vector<Tok>, int> counts;
    for (std::size_t i = 0; i + n <= seq.size(); ++i) {
        ++counts[std::vector<Tok>(seq.begin() + static_cast<std::ptrdiff_t>(i),
                                  seq.begin() + static_cast<std::ptrdiff_t>(i + n))];
    }
    return counts;
}
}  // namespace detail

/// BLEU-4 of one candidate in [0, 100]. Unigram precision is unsmoothed;
/// 2- to 4-gram precisions use (matches + 1) / (total + 1). Brevity penalty
/// exp(1 − r/c) against the closest reference length (shorter on ties).
template <class Tok>
double bleu4_smoothed(const std::vector<Tok>& candidate, const std::vector<std::vector<Tok>>& references) {
    if (references.empty()) {
        throw contract_error("bleu4_smoothed needs at least one reference");
    }
    if (candidate.empty()) {
        return 0.0;
    }
    double log_precision = 0.0;
    for (std::size_t n = 1; n <= 4; ++n) {
        const auto cand = detail::ngram_counts(candidate, n);
        std::map<std::vector<Tok>, int> max_ref;
        for (const auto& ref : references) {
            for (const auto& [gram, count] : detail::ngram_counts(ref, n)) {
                max_ref[gram] = std::max(max_ref[gram], count);
            }
        }
        double matches = 0, total = 0;
        for (const auto& [gram, count] : cand) {
            total += count;
            auto it = max_ref.find(gram);
            if (it != max_ref.end()) {
                matches += std::min(count, it->second);
            }
        }
        if (n > 1) {
            matches += 1;
            total += 1;
        }
        if (matches == 0) {
            return 0.0;
        }
        log_precision += std::log(matches / total) / 4.0;
    }
    const double c = static_cast<double>(candidate.size());
    double r = static_cast<double>(references.front().size());
    for (const auto& ref : references) {
        const double len = static_cast<double>(ref.size());
        if (std::abs(len - c) < std::abs(r - c) || (std::abs(len - c) == std::abs(r - c) && len < r)) {
            r = len;
        }
    }
    const double brevity = c < r ? std::exp(1.0 - r / c) : 1.0;
    return 100.0 * brevity * std::exp(log_precision);
}

/// Mean of sentence scores against single references.
template <class Tok>
double corpus_bleu4(const std::vector<std::vector<Tok>>& candidates, const std::vector<std::vector<Tok>>& references) {
    if (candidates.size() != references.size()) {
        throw contract_error("corpus_bleu4 needs one reference per candidate");
    }
    if (candidates.empty()) {
        throw data_error("corpus_bleu4 over an empty split");
    }
    double total = 0;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        total += bleu4_smoothed(candidates[i], {references[i]});
    }
    return total / static_cast<double>(candidates.size());
}

template <class Seq>
double exact_match(const std::vector<Seq>& candidates, const std::vector<Seq>& references) {
    if (candidates.size() != references.size()) {
        throw contract_error("exact_match needs equal-length lists, got " + std::to_string(candidates.size()) +
                             " and " + std::to_string(references.size()));
    }
    if (candidates.empty()) {
        throw data_error("exact_match over an empty list");
    }
    std::size_t hits = 0;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        hits += candidates[i] == references[i];
    }
    return static_cast<double>(hits) / static_cast<double>(candidates.size());
}

struct F1Score {
    double f1 = 0, precision = 0, recall = 0;
};

/// Positive class is 1; every 0/0 ratio is taken as 0.
inline F1Score f1_precision_recall(const std::vector<int>& predictions, const std::vector<int>& labels) {
    if (predictions.size() != labels.size()) {
        throw contract_error("f1_precision_recall needs equal-length lists, got " +
                             std::to_string(predictions.size()) + " and " + std::to_string(labels.size()));
    }
    std::size_t tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if ((predictions[i] != 0 && predictions[i] != 1) || (labels[i] != 0 && labels[i] != 1)) {
            throw contract_error("labels must be binary");
        }
        tp += predictions[i] == 1 && labels[i] == 1;
        fp += predictions[i] == 1 && labels[i] == 0;
        fn += predictions[i] == 0 && labels[i] == 1;
    }
    auto ratio = [](double num, double den) { return den == 0 ? 0.0 : num / den; };
    F1Score s;
    s.precision = ratio(static_cast<double>(tp), static_cast<double>(tp + fp));
    s.recall = ratio(static_cast<double>(tp), static_cast<double>(tp + fn));
    s.f1 = ratio(2 * s.precision * s.recall, s.precision + s.recall);
    return s;
}

}  // namespace peftlab
