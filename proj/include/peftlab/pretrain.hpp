// SPDX-License-Identifier: Apache-2.0
//
// Toy pretraining of a shared base model on a copy/reverse mixture.
#pragma once

#include "peftlab/train.hpp"

namespace peftlab {

struct PretrainConfig {
    ModelConfig model;
    std::uint64_t seed = 0;
    std::size_t steps = 1500;
    std::size_t batch_size = 32;
    double lr = 1e-3;
    std::size_t n_examples = 4000;
    std::size_t min_len = 3;
    std::size_t max_len = 8;
};

/// Half copy, half reverse. Reverse sources carry a leading SEP so the two
/// tasks are distinguishable from the input alone.
inline TaskSpec pretrain_mixture(const PretrainConfig& c) {
    TaskParams p;
    p.kind = TaskKind::copy;
    p.seed = c.seed;
    p.n_train = c.n_examples;
    p.n_dev = 64;
    p.n_test = 64;
    p.vocab_size = c.model.vocab_size;
    p.min_len = c.min_len;
    p.max_len = c.max_len;
    auto spec = gen_task(p);
    for (std::size_t i = 1; i < spec.train.seq.size(); i += 2) {
        auto& ex = spec.train.seq[i];
        ex.tgt.assign(ex.src.rbegin(), ex.src.rend());
        ex.src.insert(ex.src.begin(), kSep);
    }
    return spec;
}

/// Full training on the mixture; returns the final parameters as a plain
/// (non-injected) model.
template <class T>
Model<T> pretrain_base(const PretrainConfig& c) {
    if (c.steps == 0) {
        throw config_error("pretraining needs at least one step");
    }
    if (c.max_len + 2 > c.model.max_seq_len) {
        throw config_error("pretraining sequences do not fit max_seq_len");
    }
    auto model = init_model<T>(c.model);
    inject_in_place(model, PeftMethod::full(), c.seed);
    const auto task = pretrain_mixture(c);
    TrainConfig tc;
    tc.lr = c.lr;
    tc.batch_size = c.batch_size;
    tc.max_steps = c.steps;
    tc.eval_interval = c.steps;
    tc.patience = 1;
    tc.seed = c.seed;
    train(model, task, tc);
    return Model<T>(model.config(), model.registry().clone());
}

}  // namespace peftlab
