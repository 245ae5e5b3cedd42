// SPDX-License-Identifier: Apache-2.0
//
// AdamW, gradient clipping, early stopping and the fine-tuning loop.
#pragma once

#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "peftlab/peft.hpp"
#include "peftlab/tasks.hpp"
#include "peftlab/transformer.hpp"

namespace peftlab {

struct TrainConfig {
    double lr = 5e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
    std::size_t batch_size = 32;
    std::size_t max_steps = 1000;
    std::size_t eval_interval = 100;
    std::size_t patience = 5;
    std::uint64_t seed = 0;
    double clip_norm = 1.0;  // 0 disables clipping

    void validate() const {
        if (!(lr > 0)) {
            throw config_error("lr must be positive");
        }
        if (batch_size == 0 || max_steps == 0 || eval_interval == 0 || patience == 0) {
            throw config_error("batch_size, max_steps, eval_interval and patience must be positive");
        }
        if (eval_interval > max_steps) {
            throw config_error("eval_interval " + std::to_string(eval_interval) + " exceeds max_steps " +
                               std::to_string(max_steps));
        }
        if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1 && eps > 0 && weight_decay >= 0 &&
              clip_norm >= 0)) {
            throw config_error("optimizer hyperparameters out of range");
        }
    }
};

struct CurvePoint {
    std::size_t step = 0;
    double train_loss = 0;
    double dev_metric = 0;
    MetricKind dev_metric_kind = MetricKind::exact_match;
    friend bool operator==(const CurvePoint&, const CurvePoint&) = default;
};

template <class T>
struct NamedParam {
    std::string name;
    Tensor<T> value;
    bool decay = true;
};

template <class T>
struct OptimizerState {
    struct Moments {
        std::vector<T> m, v;
    };
    std::map<std::string, Moments> moments;
    std::size_t t = 0;
};

/// Unfrozen registry entries; also syncs requires_grad with the frozen flags.
template <class T>
std::vector<NamedParam<T>> prepare_trainable(Model<T>& model) {
    std::vector<NamedParam<T>> out;
    for (auto& e : model.registry().entries()) {
        e.value.set_requires_grad(!e.frozen);
        e.value.clear_grad();
        if (!e.frozen) {
            out.push_back({e.name, e.value, e.decay});
        }
    }
    return out;
}

/// Decoupled-weight-decay Adam over `params`, reading their accumulated
/// gradients.
template <class T>
void adam_step(const std::vector<NamedParam<T>>& params, OptimizerState<T>& state, const TrainConfig& config) {
    for (const auto& p : params) {
        if (!p.value.has_grad()) {
            throw contract_error("missing gradient on trainable parameter '" + p.name + "'");
        }
    }
    ++state.t;
    const double t = static_cast<double>(state.t);
    const double c1 = 1.0 - std::pow(config.beta1, t);
    const double c2 = 1.0 - std::pow(config.beta2, t);
    const T b1 = static_cast<T>(config.beta1), b2 = static_cast<T>(config.beta2);
    for (const auto& p : params) {
        auto& mom = state.moments[p.name];
        const std::size_t n = p.value.size();
        if (mom.m.size() != n) {
            mom.m.assign(n, T(0));
            mom.v.assign(n, T(0));
        }
        Tensor<T> handle = p.value;
        auto g = handle.grad();
        T* w = handle.storage().data();
        const double wd = p.decay ? config.weight_decay : 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            mom.m[i] = b1 * mom.m[i] + (T(1) - b1) * g[i];
            mom.v[i] = b2 * mom.v[i] + (T(1) - b2) * g[i] * g[i];
            const double m_hat = static_cast<double>(mom.m[i]) / c1;
            const double v_hat = static_cast<double>(mom.v[i]) / c2;
            const double theta = static_cast<double>(w[i]);
            w[i] = static_cast<T>(theta - config.lr * m_hat / (std::sqrt(v_hat) + config.eps) -
                                  config.lr * wd * theta);
        }
    }
}

/// Rescales gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
template <class T>
double clip_grad_norm(const std::vector<NamedParam<T>>& params, double max_norm) {
    double sq = 0;
    for (const auto& p : params) {
        for (T g : p.value.grad()) {
            sq += static_cast<double>(g) * static_cast<double>(g);
        }
    }
    const double norm = std::sqrt(sq);
    if (max_norm > 0 && norm > max_norm) {
        const T scale = static_cast<T>(max_norm / norm);
        for (const auto& p : params) {
            for (T& g : p.value.grad()) {
                g *= scale;
            }
        }
    }
    return norm;
}

/// Tracks the best evaluation; stops after `patience` consecutive
/// evaluations without a strictly greater metric.
class EarlyStopping {
public:
    explicit EarlyStopping(std::size_t patience) : patience_(patience) {}

    /// Returns true when training should stop.
    bool observe(double metric) {
        const std::size_t index = count_++;
        if (index == 0 || metric > best_) {
            best_ = metric;
            best_index_ = index;
            improved_ = true;
            bad_ = 0;
        } else {
            improved_ = false;
            ++bad_;
        }
        return bad_ >= patience_;
    }

    bool last_improved() const { return improved_; }
    std::size_t best_index() const { return best_index_; }
    double best() const { return best_; }
    std::size_t evaluations() const { return count_; }

private:
    std::size_t patience_;
    std::size_t count_ = 0;
    std::size_t best_index_ = 0;
    std::size_t bad_ = 0;
    double best_ = 0;
    bool improved_ = false;
};

inline TokenSeq with_bos_eos(const TokenSeq& tgt) {
    TokenSeq out{kBos};
    out.insert(out.end(), tgt.begin(), tgt.end());
    out.push_back(kEos);
    return out;
}

inline constexpr std::size_t kEvalBatch = 64;

/// Greedy decodes of every source in `split`.
template <class T>
std::vector<TokenSeq> predict(const Model<T>& model, const Split& split, std::size_t max_decode_len = 0) {
    if (max_decode_len == 0) {
        max_decode_len = model.config().max_seq_len - 1;
    }
    std::vector<TokenSeq> out;
    out.reserve(split.seq.size());
    for (std::size_t start = 0; start < split.seq.size(); start += kEvalBatch) {
        std::vector<TokenSeq> srcs;
        for (std::size_t i = start; i < std::min(split.seq.size(), start + kEvalBatch); ++i) {
            srcs.push_back(split.seq[i].src);
        }
        for (auto& p : greedy_decode(model, srcs, max_decode_len)) {
            out.push_back(std::move(p));
        }
    }
    return out;
}

/// Argmax labels for every pair in `split`.
template <class T>
std::vector<int> predict_pairs(const Model<T>& model, const Split& split) {
    NoGradGuard<T> no_grad;
    std::vector<int> out;
    out.reserve(split.pairs.size());
    for (std::size_t start = 0; start < split.pairs.size(); start += kEvalBatch) {
        std::vector<std::pair<TokenSeq, TokenSeq>> batch;
        for (std::size_t i = start; i < std::min(split.pairs.size(), start + kEvalBatch); ++i) {
            batch.emplace_back(split.pairs[i].a, split.pairs[i].b);
        }
        auto logits = pair_logits(model, batch);
        for (std::size_t i = 0; i < batch.size(); ++i) {
            out.push_back(logits.at(i, 1) > logits.at(i, 0) ? 1 : 0);
        }
    }
    return out;
}

/// Metric over the whole split: bleu4 in [0, 100], exact_match and f1 in
/// [0, 1].
template <class T>
double evaluate(const Model<T>& model, const Split& split, MetricKind metric, std::size_t max_decode_len = 0) {
    if (split.empty()) {
        throw data_error("cannot evaluate on an empty split");
    }
    if (metric == MetricKind::f1) {
        if (split.pairs.empty()) {
            throw contract_error("f1 needs a pair-classification split");
        }
        std::vector<int> labels;
        for (const auto& ex : split.pairs) {
            labels.push_back(ex.label);
        }
        return f1_precision_recall(predict_pairs(model, split), labels).f1;
    }
    if (split.seq.empty()) {
        throw contract_error(std::string(metric_name(metric)) + " needs a generative split");
    }
    auto preds = predict(model, split, max_decode_len);
    std::vector<TokenSeq> refs;
    for (const auto& ex : split.seq) {
        refs.push_back(ex.tgt);
    }
    return metric == MetricKind::bleu4 ? corpus_bleu4(preds, refs) : exact_match(preds, refs);
}

/// Decode budget for a task: its longest target plus slack for one extra token.
inline std::size_t decode_budget(const TaskSpec& task) {
    return task.params.max_len + 1;
}

struct TrainResult {
    std::vector<CurvePoint> curve;
    std::size_t best_step = 0;
    double best_dev_metric = 0;
    std::size_t stop_step = 0;  // last optimizer step taken
    bool early_stopped = false;
};

/// Fine-tunes the unfrozen parameters of `model` on `task.train`, evaluates
/// on `task.dev` every `eval_interval` steps (and after the last step), and
/// leaves the model holding the parameters of the best evaluation.
template <class T>
TrainResult train(Model<T>& model, const TaskSpec& task, const TrainConfig& config) {
    config.validate();
    if (!model.injected()) {
        throw state_error("train() needs a model with an injected method (inject one first, Full included)");
    }
    if (task.train.empty() || task.dev.empty()) {
        throw data_error("train and dev splits must be non-empty");
    }
    auto params = prepare_trainable(model);
    OptimizerState<T> state;
    EarlyStopping stopper(config.patience);
    StreamRng rng(config.seed, "batches");
    const std::size_t n = task.train.size();
    std::vector<std::size_t> order(n);
    std::size_t cursor = n;
    std::vector<std::vector<T>> best;

    auto snapshot = [&] {
        best.clear();
        for (const auto& p : params) {
            best.push_back(p.value.storage());
        }
    };

    TrainResult result;
    double loss_sum = 0;
    std::size_t loss_count = 0;
    for (std::size_t step = 1; step <= config.max_steps; ++step) {
        std::vector<std::size_t> batch;
        while (batch.size() < std::min(config.batch_size, n)) {
            if (cursor == n) {
                std::iota(order.begin(), order.end(), std::size_t{0});
                rng.shuffle(order);
                cursor = 0;
            }
            batch.push_back(order[cursor++]);
        }
        for (const auto& p : params) {
            p.value.zero_grad();
        }
        Tape<T> tape;
        TapeScope<T> scope(tape);
        Tensor<T> loss;
        if (task.is_pair()) {
            std::vector<std::pair<TokenSeq, TokenSeq>> pairs;
            std::vector<int> labels;
            for (auto i : batch) {
                pairs.emplace_back(task.train.pairs[i].a, task.train.pairs[i].b);
                labels.push_back(task.train.pairs[i].label);
            }
            loss = pair_loss(model, pairs, labels);
        } else {
            std::vector<TokenSeq> srcs, tgts;
            for (auto i : batch) {
                srcs.push_back(task.train.seq[i].src);
                tgts.push_back(with_bos_eos(task.train.seq[i].tgt));
            }
            loss = seq2seq_loss(model, srcs, tgts);
        }
        const double value = static_cast<double>(loss.item());
        if (!std::isfinite(value)) {
            throw error("training diverged: non-finite loss at step " + std::to_string(step));
        }
        tape.backward(loss);
        clip_grad_norm(params, config.clip_norm);
        adam_step(params, state, config);
        loss_sum += value;
        ++loss_count;
        result.stop_step = step;

        if (step % config.eval_interval == 0 || step == config.max_steps) {
            const double metric = evaluate(model, task.dev, task.metric, decode_budget(task));
            result.curve.push_back({step, loss_sum / static_cast<double>(loss_count), metric, task.metric});
            loss_sum = 0;
            loss_count = 0;
            const bool stop = stopper.observe(metric);
            if (stopper.last_improved()) {
                snapshot();
                result.best_step = step;
                result.best_dev_metric = metric;
            }
            if (stop) {
                result.early_stopped = step < config.max_steps;
                break;
            }
        }
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        params[i].value.storage() = best[i];
        params[i].value.clear_grad();
        params[i].value.set_requires_grad(false);
    }
    return result;
}

}  // namespace peftlab
