// SPDX-License-Identifier: Apache-2.0
//
// Rank sweeps, result tables, plots, checkpoint merging and prediction dumps.
#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <exception>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "peftlab/checkpoint.hpp"
#include "peftlab/config.hpp"
#include "peftlab/pretrain.hpp"
#include "peftlab/train.hpp"

namespace peftlab {

using Scalar = float;

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

struct RunRecord {
    PeftMethod method;
    std::uint64_t trainable_count = 0;
    double trainable_percent = 0;
    double dev_metric = 0;  // dev metric of the selected checkpoint
    double test_metric = 0;
    std::size_t stop_step = 0;
    std::size_t best_step = 0;
    std::uint64_t seed = 0;
    std::vector<CurvePoint> curve;
};

struct SweepConfig {
    std::filesystem::path base;
    std::filesystem::path task;
    std::filesystem::path output;
    std::filesystem::path svg;             // optional
    std::filesystem::path checkpoint_dir;  // optional
    std::vector<PeftKind> methods;
    std::vector<std::size_t> ranks{1, 2, 4, 8, 16};
    std::vector<std::uint64_t> seeds{0, 1, 2};
    bool include_full = true;
    Activation adapter_activation = Activation::relu;
    TrainConfig train;
    double full_lr = 0;  // 0 means train.lr
    std::size_t jobs = 1;
};

inline TrainConfig train_config_from(const KeyValueConfig& kv, TrainConfig t = {}) {
    t.lr = kv.get_double("lr", t.lr);
    t.weight_decay = kv.get_double("weight_decay", t.weight_decay);
    t.batch_size = kv.get_size("batch_size", t.batch_size);
    t.max_steps = kv.get_size("max_steps", t.max_steps);
    t.eval_interval = kv.get_size("eval_interval", t.eval_interval);
    t.patience = kv.get_size("patience", t.patience);
    t.clip_norm = kv.get_double("clip_norm", t.clip_norm);
    t.seed = kv.get_u64("seed", t.seed);
    t.validate();
    return t;
}

inline SweepConfig sweep_config_from(const KeyValueConfig& kv) {
    SweepConfig c;
    c.base = kv.get_string("base");
    c.task = kv.get_string("task");
    c.output = kv.get_string("output");
    c.svg = kv.get_string("svg", "");
    c.checkpoint_dir = kv.get_string("checkpoint_dir", "");
    for (const auto& name : kv.get_list("methods")) {
        const auto kind = parse_kind(name);
        if (kind == PeftKind::full) {
            continue;
        }
        if (std::find(c.methods.begin(), c.methods.end(), kind) == c.methods.end()) {
            c.methods.push_back(kind);
        }
    }
    std::sort(c.methods.begin(), c.methods.end());
    if (kv.has("ranks")) {
        c.ranks = kv.get_number_list<std::size_t>("ranks");
    }
    for (auto r : c.ranks) {
        if (r != 1 && r != 2 && r != 4 && r != 8 && r != 16) {
            throw config_error("ranks must be drawn from {1, 2, 4, 8, 16}, got " + std::to_string(r));
        }
    }
    std::sort(c.ranks.begin(), c.ranks.end());
    c.ranks.erase(std::unique(c.ranks.begin(), c.ranks.end()), c.ranks.end());
    if (kv.has("seeds")) {
        c.seeds = kv.get_number_list<std::uint64_t>("seeds");
    }
    if (c.seeds.empty()) {
        throw config_error("seeds must not be empty");
    }
    c.include_full = kv.get_bool("include_full", true);
    c.adapter_activation = parse_activation(kv.get_string("adapter_activation", "relu"));
    c.train = train_config_from(kv);
    c.full_lr = kv.get_double("full_lr", 0.0);
    c.jobs = std::max<std::size_t>(1, kv.get_size("jobs", 1));
    kv.reject_unknown();
    return c;
}

/// Cells in output order: full first, then by (method, r), seeds in config
/// order.
inline std::vector<std::pair<PeftMethod, std::uint64_t>> sweep_cells(const SweepConfig& c) {
    std::vector<std::pair<PeftMethod, std::uint64_t>> cells;
    if (c.include_full) {
        for (auto seed : c.seeds) {
            cells.push_back({PeftMethod::full(), seed});
        }
    }
    for (auto kind : c.methods) {
        for (auto r : c.ranks) {
            for (auto seed : c.seeds) {
                cells.push_back({PeftMethod{kind, r, c.adapter_activation}, seed});
            }
        }
    }
    return cells;
}

inline std::string cell_stem(const PeftMethod& m, std::uint64_t seed) {
    return std::string(kind_name(m.kind)) + "_r" + std::to_string(m.r) + "_s" + std::to_string(seed);
}

/// Fine-tunes one copy of `base` and scores its best checkpoint on test.
template <class T>
RunRecord run_cell(const Model<T>& base, const TaskSpec& task, const PeftMethod& method, std::uint64_t seed,
                   TrainConfig config, const std::filesystem::path& checkpoint_dir = {}) {
    auto model = inject(base, method, seed);
    config.seed = seed;
    const auto result = train(model, task, config);
    RunRecord rec;
    rec.method = method;
    rec.seed = seed;
    const auto expected = count_trainable(shape_of(base.config()), method);
    rec.trainable_count = trainable_count(model);
    if (rec.trainable_count != expected.count) {
        throw error("trainable count " + std::to_string(rec.trainable_count) + " of " + method_label(method) +
                    " disagrees with the closed form " + std::to_string(expected.count));
    }
    rec.trainable_percent = expected.percent;
    rec.dev_metric = result.best_dev_metric;
    rec.test_metric = evaluate(model, task.test, task.metric, decode_budget(task));
    rec.stop_step = result.stop_step;
    rec.best_step = result.best_step;
    rec.curve = result.curve;
    if (!checkpoint_dir.empty()) {
        std::filesystem::create_directories(checkpoint_dir);
        save_model(checkpoint_dir / (cell_stem(method, seed) + ".ckpt"), model);
    }
    return rec;
}

/// Runs every cell, `jobs` at a time; results come back in cell order.
template <class T>
std::vector<RunRecord> run_sweep(const Model<T>& base, const TaskSpec& task, const SweepConfig& c,
                                 std::ostream* log = nullptr) {
    const auto cells = sweep_cells(c);
    std::vector<RunRecord> records(cells.size());
    std::vector<std::exception_ptr> failures(cells.size());
    std::atomic<std::size_t> next{0};
    std::mutex log_mutex;
    auto worker = [&] {
        for (std::size_t i = next++; i < cells.size(); i = next++) {
            const auto& [method, seed] = cells[i];
            auto config = c.train;
            if (method.is_full() && c.full_lr > 0) {
                config.lr = c.full_lr;
            }
            try {
                records[i] = run_cell(base, task, method, seed, config, c.checkpoint_dir);
                if (log) {
                    std::lock_guard lock(log_mutex);
                    *log << "[" << (i + 1) << "/" << cells.size() << "] " << method_label(method) << " seed "
                         << seed << ": dev " << records[i].dev_metric << ", test " << records[i].test_metric
                         << ", stop " << records[i].stop_step << "\n";
                }
            } catch (...) {
                failures[i] = std::current_exception();
            }
        }
    };
    const std::size_t jobs = std::min(c.jobs, std::max<std::size_t>(1, cells.size()));
    std::vector<std::thread> threads;
    for (std::size_t j = 1; j < jobs; ++j) {
        threads.emplace_back(worker);
    }
    worker();
    for (auto& t : threads) {
        t.join();
    }
    for (const auto& f : failures) {
        if (f) {
            std::rethrow_exception(f);
        }
    }
    return records;
}

struct CellSummary {
    PeftMethod method;
    std::uint64_t trainable_count = 0;
    double trainable_percent = 0;
    std::size_t n = 0;
    double dev_mean = 0, dev_std = 0, test_mean = 0, test_std = 0, stop_mean = 0, stop_std = 0;
};

inline std::pair<double, double> mean_std(const std::vector<double>& xs) {
    double mean = 0;
    for (double x : xs) {
        mean += x;
    }
    mean /= static_cast<double>(xs.size());
    if (xs.size() < 2) {
        return {mean, 0.0};
    }
    double ss = 0;
    for (double x : xs) {
        ss += (x - mean) * (x - mean);
    }
    return {mean, std::sqrt(ss / static_cast<double>(xs.size() - 1))};
}

/// Per-(method, r) mean and sample standard deviation, in first-seen order.
inline std::vector<CellSummary> summarize(const std::vector<RunRecord>& records) {
    std::vector<CellSummary> out;
    std::vector<std::vector<const RunRecord*>> groups;
    for (const auto& rec : records) {
        auto it = std::find_if(out.begin(), out.end(), [&](const CellSummary& s) { return s.method == rec.method; });
        if (it == out.end()) {
            out.push_back({rec.method, rec.trainable_count, rec.trainable_percent});
            groups.emplace_back();
            it = out.end() - 1;
        }
        groups[static_cast<std::size_t>(it - out.begin())].push_back(&rec);
    }
    for (std::size_t g = 0; g < out.size(); ++g) {
        std::vector<double> dev, test, stop;
        for (const auto* r : groups[g]) {
            dev.push_back(r->dev_metric);
            test.push_back(r->test_metric);
            stop.push_back(static_cast<double>(r->stop_step));
        }
        out[g].n = groups[g].size();
        std::tie(out[g].dev_mean, out[g].dev_std) = mean_std(dev);
        std::tie(out[g].test_mean, out[g].test_std) = mean_std(test);
        std::tie(out[g].stop_mean, out[g].stop_std) = mean_std(stop);
    }
    return out;
}

inline constexpr const char* kSweepHeader = "method,r,trainable_params,trainable_pct,seed,dev_metric,test_metric,stop_step";

inline std::string utc_timestamp() {
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

/// CSV text: a `# generated` line, the header, one row per run, then mean and
/// std rows per (method, r).
inline std::string sweep_csv(const std::vector<RunRecord>& records, const std::string& timestamp) {
    std::ostringstream os;
    os << "# generated " << timestamp << "\n" << kSweepHeader << "\n";
    for (const auto& r : records) {
        os << kind_name(r.method.kind) << ',' << r.method.r << ',' << r.trainable_count << ','
           << format_double(r.trainable_percent) << ',' << r.seed << ',' << format_double(r.dev_metric) << ','
           << format_double(r.test_metric) << ',' << r.stop_step << "\n";
    }
    for (const auto& s : summarize(records)) {
        auto row = [&](const char* tag, double dev, double test, double stop) {
            os << kind_name(s.method.kind) << ',' << s.method.r << ',' << s.trainable_count << ','
               << format_double(s.trainable_percent) << ',' << tag << ',' << format_double(dev) << ','
               << format_double(test) << ',' << format_double(stop) << "\n";
        };
        row("mean", s.dev_mean, s.test_mean, s.stop_mean);
        row("std", s.dev_std, s.test_std, s.stop_std);
    }
    return os.str();
}

/// Lines marking the dev-best r per method and whether full fine-tuning's
/// mean test metric is at least every PEFT cell's mean.
inline std::string sweep_report(const std::vector<RunRecord>& records) {
    const auto summary = summarize(records);
    std::ostringstream os;
    std::map<PeftKind, const CellSummary*> best;
    const CellSummary* full = nullptr;
    for (const auto& s : summary) {
        if (s.method.is_full()) {
            full = &s;
            continue;
        }
        auto& b = best[s.method.kind];
        if (b == nullptr || s.dev_mean > b->dev_mean) {
            b = &s;
        }
    }
    if (full) {
        os << "full: dev " << format_double(full->dev_mean) << ", test " << format_double(full->test_mean) << "\n";
    }
    for (const auto& [kind, s] : best) {
        os << "dev-best " << kind_name(kind) << ": r=" << s->method.r << " (dev " << format_double(s->dev_mean)
           << ", test " << format_double(s->test_mean) << ")\n";
    }
    if (full && !best.empty()) {
        bool full_leads = true;
        for (const auto& s : summary) {
            if (!s.method.is_full() && s.test_mean > full->test_mean) {
                full_leads = false;
            }
        }
        os << "full >= every PEFT cell on mean test metric: " << (full_leads ? "yes" : "no") << "\n";
    }
    return os.str();
}

inline void write_text_atomically(const std::filesystem::path& path, const std::string& text) {
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    detail::write_atomically(path, [&](std::ostream& out) { out << text; });
}

// ---------------------------------------------------------------------------
// Plots
// ---------------------------------------------------------------------------

struct CsvRow {
    std::string method;
    std::size_t r = 0;
    double trainable_params = 0;
    std::string seed;
    double dev_metric = 0, test_metric = 0, stop_step = 0;
};

inline std::vector<CsvRow> read_sweep_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw io_error("cannot read " + path.string());
    }
    std::vector<CsvRow> rows;
    std::string line;
    std::size_t lineno = 0;
    bool header = false;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') {
            continue;
        }
        if (!header) {
            if (line != kSweepHeader) {
                throw parse_error(path.string() + ":" + std::to_string(lineno) + ": unexpected header");
            }
            header = true;
            continue;
        }
        std::vector<std::string> f;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) {
            f.push_back(cell);
        }
        if (f.size() != 8) {
            throw parse_error(path.string() + ":" + std::to_string(lineno) + ": expected 8 fields");
        }
        try {
            rows.push_back({f[0], std::stoul(f[1]), std::stod(f[2]), f[4], std::stod(f[5]), std::stod(f[6]),
                            std::stod(f[7])});
        } catch (const std::logic_error&) {
            throw parse_error(path.string() + ":" + std::to_string(lineno) + ": malformed number");
        }
    }
    if (!header) {
        throw parse_error(path.string() + ": missing header");
    }
    return rows;
}

/// Scatter of mean test metric against trainable parameters (log x); full
/// fine-tuning is drawn as a horizontal reference line.
inline std::string sweep_svg(const std::vector<CsvRow>& rows, const std::string& title = "test metric") {
    constexpr double W = 640, H = 420, L = 70, R = 150, Tm = 30, B = 50;
    std::vector<const CsvRow*> points;
    const CsvRow* full = nullptr;
    for (const auto& row : rows) {
        if (row.seed != "mean") {
            continue;
        }
        if (row.method == "full") {
            full = &row;
        } else {
            points.push_back(&row);
        }
    }
    double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
    for (const auto* p : points) {
        xmin = std::min(xmin, std::log10(p->trainable_params));
        xmax = std::max(xmax, std::log10(p->trainable_params));
        ymin = std::min(ymin, p->test_metric);
        ymax = std::max(ymax, p->test_metric);
    }
    if (full) {
        ymin = std::min(ymin, full->test_metric);
        ymax = std::max(ymax, full->test_metric);
    }
    if (points.empty()) {
        xmin = 0;
        xmax = 1;
    }
    if (ymin > ymax) {
        ymin = 0;
        ymax = 1;
    }
    xmin = std::floor(xmin);
    xmax = std::max(std::ceil(xmax), xmin + 1);
    const double pad = std::max(1e-9, 0.05 * (ymax - ymin));
    ymin -= pad;
    ymax += pad;
    auto sx = [&](double x) { return L + (x - xmin) / (xmax - xmin) * (W - L - R); };
    auto sy = [&](double y) { return H - B - (y - ymin) / (ymax - ymin) * (H - Tm - B); };
    const std::map<std::string, const char*> colors{
        {"lora", "#1f77b4"}, {"fflora", "#ff7f0e"}, {"adapter", "#2ca02c"}, {"fflora_adapter", "#d62728"}};
    std::ostringstream os;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
    os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    os << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B
       << "\" stroke=\"black\"/>\n";
    os << "<line x1=\"" << L << "\" y1=\"" << Tm << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
    for (double e = xmin; e <= xmax; e += 1) {
        os << "<text x=\"" << sx(e) << "\" y=\"" << H - B + 18 << "\" font-size=\"11\" text-anchor=\"middle\">1e"
           << static_cast<int>(e) << "</text>\n";
    }
    for (int k = 0; k <= 4; ++k) {
        const double y = ymin + (ymax - ymin) * k / 4.0;
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.3g", y);
        os << "<text x=\"" << L - 6 << "\" y=\"" << sy(y) + 4 << "\" font-size=\"11\" text-anchor=\"end\">" << buf
           << "</text>\n";
    }
    os << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 10
       << "\" font-size=\"12\" text-anchor=\"middle\">trainable parameters (log scale)</text>\n";
    os << "<text x=\"14\" y=\"" << (Tm + H - B) / 2 << "\" font-size=\"12\" transform=\"rotate(-90 14 "
       << (Tm + H - B) / 2 << ")\" text-anchor=\"middle\">" << title << "</text>\n";
    if (full) {
        os << "<line x1=\"" << L << "\" y1=\"" << sy(full->test_metric) << "\" x2=\"" << W - R << "\" y2=\""
           << sy(full->test_metric) << "\" stroke=\"black\" stroke-dasharray=\"6 4\"/>\n";
    }
    for (const auto* p : points) {
        auto it = colors.find(p->method);
        os << "<circle cx=\"" << sx(std::log10(p->trainable_params)) << "\" cy=\"" << sy(p->test_metric)
           << "\" r=\"4\" fill=\"" << (it == colors.end() ? "gray" : it->second) << "\"><title>" << p->method
           << " r=" << p->r << "</title></circle>\n";
    }
    double ly = Tm + 10;
    for (const auto& [name, color] : colors) {
        os << "<circle cx=\"" << W - R + 20 << "\" cy=\"" << ly << "\" r=\"4\" fill=\"" << color << "\"/>";
        os << "<text x=\"" << W - R + 30 << "\" y=\"" << ly + 4 << "\" font-size=\"11\">" << name << "</text>\n";
        ly += 18;
    }
    if (full) {
        os << "<line x1=\"" << W - R + 12 << "\" y1=\"" << ly << "\" x2=\"" << W - R + 28 << "\" y2=\"" << ly
           << "\" stroke=\"black\" stroke-dasharray=\"6 4\"/>";
        os << "<text x=\"" << W - R + 30 << "\" y=\"" << ly + 4 << "\" font-size=\"11\">full</text>\n";
    }
    os << "</svg>\n";
    return os.str();
}

/// `step,train_loss,dev_metric`
inline std::string curve_csv(const std::vector<CurvePoint>& curve) {
    std::ostringstream os;
    os << "step,train_loss,dev_metric\n";
    for (const auto& p : curve) {
        os << p.step << ',' << format_double(p.train_loss) << ',' << format_double(p.dev_metric) << "\n";
    }
    return os.str();
}

// ---------------------------------------------------------------------------
// Parameter tables
// ---------------------------------------------------------------------------

struct ParamsRow {
    PeftMethod method;
    std::uint64_t count = 0;
    std::string formatted;
};

inline std::vector<ParamsRow> params_table(const ReferenceShape& shape) {
    std::vector<ParamsRow> rows;
    auto add = [&](const PeftMethod& m) {
        const auto c = count_trainable(shape, m);
        rows.push_back({m, c.count, format_count(c.count, shape.total)});
    };
    add(PeftMethod::full());
    for (auto kind : {PeftKind::lora, PeftKind::fflora, PeftKind::adapter, PeftKind::fflora_adapter}) {
        for (std::size_t r : {1, 2, 4, 8, 16}) {
            add(PeftMethod{kind, r});
        }
    }
    return rows;
}

inline std::string params_table_text(const ReferenceShape& shape) {
    std::ostringstream os;
    os << "# " << shape.name << " (" << shape.n_enc << "+" << shape.n_dec << " layers, d=" << shape.d
       << ", d_ff=" << shape.d_ff << ", total " << shape.total << ")\n";
    os << "method\tr\tparams\tformatted\n";
    for (const auto& row : params_table(shape)) {
        os << kind_name(row.method.kind) << '\t' << row.method.r << '\t' << row.count << '\t' << row.formatted
           << "\n";
    }
    return os.str();
}

inline ModelConfig model_config_from(const KeyValueConfig& kv, ModelConfig c = {}) {
    c.n_enc_layers = kv.get_size("n_enc_layers", c.n_enc_layers);
    c.n_dec_layers = kv.get_size("n_dec_layers", c.n_dec_layers);
    c.d_model = kv.get_size("d_model", c.d_model);
    c.n_heads = kv.get_size("n_heads", c.n_heads);
    c.d_ff = kv.get_size("d_ff", c.d_ff);
    c.vocab_size = kv.get_size("vocab_size", c.vocab_size);
    c.max_seq_len = kv.get_size("max_seq_len", c.max_seq_len);
    c.seed = kv.get_u64("model_seed", c.seed);
    c.validate();
    return c;
}

// ---------------------------------------------------------------------------
// Merge
// ---------------------------------------------------------------------------

inline constexpr double kMergeTolerance = 1e-5;

/// Largest absolute logit difference between two models on `n_inputs` random
/// source/target pairs.
template <class T>
double max_forward_deviation(const Model<T>& a, const Model<T>& b, std::size_t n_inputs, std::uint64_t seed) {
    NoGradGuard<T> no_grad;
    const auto& c = a.config();
    StreamRng rng(seed, "merge-check");
    const std::size_t max_len = std::max<std::size_t>(1, c.max_seq_len - 1);
    double worst = 0;
    for (std::size_t i = 0; i < n_inputs; ++i) {
        TokenSeq src(rng.range(1, max_len)), tgt{kBos};
        for (auto& t : src) {
            t = static_cast<TokenId>(rng.range(kFirstTaskToken, c.vocab_size - 1));
        }
        const auto n_tgt = rng.range(0, max_len - 1);
        for (std::size_t k = 0; k < n_tgt; ++k) {
            tgt.push_back(static_cast<TokenId>(rng.range(kFirstTaskToken, c.vocab_size - 1)));
        }
        auto la = decoder_logits(a, encode_batch(a, {src}), {tgt});
        auto lb = decoder_logits(b, encode_batch(b, {src}), {tgt});
        for (std::size_t k = 0; k < la.size(); ++k) {
            worst = std::max(worst, std::abs(static_cast<double>(la[k]) - static_cast<double>(lb[k])));
        }
    }
    return worst;
}

struct MergeReport {
    double max_deviation = 0;
};

/// Folds the LoRA deltas into the base weights, verifies the merged model on
/// 16 random inputs and only then writes `out_path`.
template <class T>
MergeReport merge_files(const std::filesystem::path& base_path, const std::filesystem::path& deltas_path,
                        const std::filesystem::path& out_path) {
    const auto base = load_model<T>(base_path);
    const auto wrapped = attach_deltas(base, deltas_path);
    const auto merged = merge_lora(wrapped);
    MergeReport report{max_forward_deviation(wrapped, merged, 16, 0)};
    if (!(report.max_deviation <= kMergeTolerance)) {
        throw error("merge verification failed: max deviation " + format_double(report.max_deviation) +
                    " exceeds " + format_double(kMergeTolerance));
    }
    save_model(out_path, merged);
    return report;
}

// ---------------------------------------------------------------------------
// Prediction dumps
// ---------------------------------------------------------------------------

inline std::string tokens_str(const TokenSeq& seq) {
    return seq.empty() ? "(empty)" : detail::join_tokens(seq);
}

/// Ground truth followed by one prediction row per model for the first `n`
/// examples of `split`.
template <class T>
std::string dump_predictions(const std::vector<std::pair<std::string, const Model<T>*>>& models,
                             const TaskSpec& task, const Split& split, std::size_t n) {
    for (const auto& [label, m] : models) {
        if (m->config().vocab_size < task.params.vocab_size) {
            throw config_error("model '" + label + "' has vocabulary " + std::to_string(m->config().vocab_size) +
                               ", task needs " + std::to_string(task.params.vocab_size));
        }
    }
    n = std::min(n, split.size());
    std::ostringstream os;
    os << "example\tsource\ttokens\n";
    Split head;
    if (task.is_pair()) {
        head.pairs.assign(split.pairs.begin(), split.pairs.begin() + static_cast<std::ptrdiff_t>(n));
    } else {
        head.seq.assign(split.seq.begin(), split.seq.begin() + static_cast<std::ptrdiff_t>(n));
    }
    std::vector<std::vector<TokenSeq>> seq_preds;
    std::vector<std::vector<int>> pair_preds;
    if (n > 0) {
        for (const auto& [label, m] : models) {
            if (task.is_pair()) {
                pair_preds.push_back(predict_pairs(*m, head));
            } else {
                seq_preds.push_back(predict(*m, head, decode_budget(task)));
            }
        }
    }
    for (std::size_t i = 0; i < n; ++i) {
        if (task.is_pair()) {
            os << i << "\tGT\t" << head.pairs[i].label << "\n";
            for (std::size_t k = 0; k < models.size(); ++k) {
                os << i << '\t' << models[k].first << '\t' << pair_preds[k][i] << "\n";
            }
        } else {
            os << i << "\tGT\t" << tokens_str(head.seq[i].tgt) << "\n";
            for (std::size_t k = 0; k < models.size(); ++k) {
                os << i << '\t' << models[k].first << '\t' << tokens_str(seq_preds[k][i]) << "\n";
            }
        }
    }
    return os.str();
}

}  // namespace peftlab
