// SPDX-License-Identifier: Apache-2.0
//
// peftlab command-line interface.
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "peftlab/experiment.hpp"

namespace fs = std::filesystem;
using namespace peftlab;

namespace {

int cmd_gen_data(const fs::path& config_path) {
    auto kv = KeyValueConfig::load(config_path);
    TaskParams p;
    p.kind = parse_task_kind(kv.get_string("kind"));
    p.seed = kv.get_u64("seed", p.seed);
    p.n_train = kv.get_size("n_train", p.n_train);
    p.n_dev = kv.get_size("n_dev", p.n_dev);
    p.n_test = kv.get_size("n_test", p.n_test);
    p.vocab_size = kv.get_size("vocab_size", p.vocab_size);
    p.min_len = kv.get_size("min_len", p.min_len);
    p.max_len = kv.get_size("max_len", p.max_len);
    p.low_resource_fraction = kv.get_double("low_resource_fraction", p.low_resource_fraction);
    const fs::path out = kv.get_string("output");
    kv.reject_unknown();
    write_task(out, gen_task(p));
    std::cout << "wrote " << (out / "task.cfg").string() << "\n";
    for (const char* split : {"train.tsv", "dev.tsv", "test.tsv"}) {
        std::cout << "wrote " << (out / split).string() << "\n";
    }
    return 0;
}

int cmd_pretrain(const fs::path& config_path) {
    auto kv = KeyValueConfig::load(config_path);
    PretrainConfig c;
    c.model = model_config_from(kv);
    c.seed = kv.get_u64("seed", c.seed);
    c.steps = kv.get_size("steps", c.steps);
    c.batch_size = kv.get_size("batch_size", c.batch_size);
    c.lr = kv.get_double("lr", c.lr);
    c.n_examples = kv.get_size("n_examples", c.n_examples);
    c.min_len = kv.get_size("min_len", c.min_len);
    c.max_len = kv.get_size("max_len", c.max_len);
    const fs::path out = kv.get_string("output");
    kv.reject_unknown();
    auto model = pretrain_base<Scalar>(c);
    if (out.has_parent_path()) {
        fs::create_directories(out.parent_path());
    }
    save_model(out, model);
    std::cout << "wrote " << out.string() << "\n";
    return 0;
}

int cmd_train(const fs::path& config_path) {
    auto kv = KeyValueConfig::load(config_path);
    const auto task = read_task(kv.get_string("task"));
    auto model = kv.has("base") ? load_model<Scalar>(kv.get_string("base")) : init_model<Scalar>(model_config_from(kv));
    PeftMethod method{parse_kind(kv.get_string("method", "full")), kv.get_size("r", 0),
                      parse_activation(kv.get_string("adapter_activation", "relu"))};
    const auto config = train_config_from(kv);
    const fs::path out = kv.get_string("output");
    const fs::path curve = kv.get_string("curve", "");
    const fs::path deltas = kv.get_string("deltas", "");
    kv.reject_unknown();
    if (model.injected()) {
        if (!model.method().is_full()) {
            throw config_error("base checkpoint already carries " + method_label(model.method()));
        }
        model = Model<Scalar>(model.config(), model.registry().clone());
    }
    inject_in_place(model, method, config.seed);
    const auto result = train(model, task, config);
    if (out.has_parent_path()) {
        fs::create_directories(out.parent_path());
    }
    save_model(out, model);
    std::cout << "wrote " << out.string() << "\n";
    if (!curve.empty()) {
        write_text_atomically(curve, curve_csv(result.curve));
        std::cout << "wrote " << curve.string() << "\n";
    }
    if (!deltas.empty()) {
        save_deltas(deltas, model);
        std::cout << "wrote " << deltas.string() << "\n";
    }
    std::cout << method_label(method) << ": best dev " << metric_name(task.metric) << " "
              << format_double(result.best_dev_metric) << " at step " << result.best_step << ", stopped at step "
              << result.stop_step << "\n";
    return 0;
}

int cmd_eval(const fs::path& config_path) {
    auto kv = KeyValueConfig::load(config_path);
    const fs::path ckpt = kv.get_string("checkpoint");
    const auto task = read_task(kv.get_string("task"));
    const auto split_name = kv.get_string("split", "test");
    const auto metric = kv.has("metric") ? parse_metric(kv.get_string("metric")) : task.metric;
    kv.reject_unknown();
    const auto model = load_model<Scalar>(ckpt);
    const double value = evaluate(model, task.split(split_name), metric, decode_budget(task));
    std::cout << ckpt.string() << " " << split_name << " " << metric_name(metric) << " " << format_double(value)
              << "\n";
    return 0;
}

int cmd_sweep(const fs::path& config_path) {
    const auto c = sweep_config_from(KeyValueConfig::load(config_path));
    const auto base = load_model<Scalar>(c.base);
    const auto task = read_task(c.task);
    const auto records = run_sweep(base, task, c, &std::cerr);
    write_text_atomically(c.output, sweep_csv(records, utc_timestamp()));
    std::cout << "wrote " << c.output.string() << "\n";
    if (!c.svg.empty()) {
        write_text_atomically(c.svg, sweep_svg(read_sweep_csv(c.output), std::string("test ") + metric_name(task.metric)));
        std::cout << "wrote " << c.svg.string() << "\n";
    }
    std::cout << sweep_report(records);
    return 0;
}

int cmd_params(const std::string& target) {
    ReferenceShape shape;
    if (auto ref = reference_shape(target)) {
        shape = *ref;
    } else if (fs::exists(target)) {
        auto kv = KeyValueConfig::load(target);
        const auto config = model_config_from(kv);
        kv.reject_unknown();
        shape = shape_of(config);
        shape.name = target;
    } else {
        throw config_error("unknown shape '" + target + "' (expected codet5-base, plbart-base or a config file)");
    }
    std::cout << params_table_text(shape);
    return 0;
}

int cmd_merge(const fs::path& base, const fs::path& deltas, const fs::path& out) {
    const auto report = merge_files<Scalar>(base, deltas, out);
    std::cout << "verified max deviation " << format_double(report.max_deviation) << "\n";
    std::cout << "wrote " << out.string() << "\n";
    return 0;
}

int cmd_dump_preds(const std::vector<fs::path>& checkpoints, const fs::path& task_dir, const std::string& split,
                   std::size_t n) {
    const auto task = read_task(task_dir);
    std::vector<Model<Scalar>> models;
    for (const auto& p : checkpoints) {
        models.push_back(load_model<Scalar>(p));
    }
    std::vector<std::pair<std::string, const Model<Scalar>*>> labelled;
    for (auto& m : models) {
        labelled.emplace_back(method_label(m.method()), &m);
    }
    std::cout << dump_predictions(labelled, task, task.split(split), n);
    return 0;
}

int cmd_plot(const fs::path& csv, const fs::path& svg) {
    write_text_atomically(svg, sweep_svg(read_sweep_csv(csv)));
    std::cout << "wrote " << svg.string() << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Parameter-efficient fine-tuning experiments on toy encoder-decoder transformers"};
    app.require_subcommand(1);

    fs::path config;
    auto* gen = app.add_subcommand("gen-data", "Generate a synthetic task directory");
    gen->add_option("config", config, "key = value config file")->required();
    auto* pre = app.add_subcommand("pretrain", "Pretrain a shared base model");
    pre->add_option("config", config, "key = value config file")->required();
    auto* tr = app.add_subcommand("train", "Fine-tune one model");
    tr->add_option("config", config, "key = value config file")->required();
    auto* sw = app.add_subcommand("sweep", "Run a method x rank x seed sweep");
    sw->add_option("config", config, "key = value config file")->required();
    auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a task split");
    ev->add_option("config", config, "key = value config file")->required();

    std::string shape;
    auto* pa = app.add_subcommand("params", "Print trainable-parameter counts");
    pa->add_option("shape", shape, "codet5-base, plbart-base or a model config file")->required();

    fs::path base, deltas, out;
    auto* me = app.add_subcommand("merge", "Fold LoRA deltas into a base checkpoint");
    me->add_option("base", base, "plain base checkpoint")->required();
    me->add_option("deltas", deltas, "deltas checkpoint")->required();
    me->add_option("output", out, "merged checkpoint")->required();

    std::vector<fs::path> checkpoints;
    fs::path task_dir;
    std::string split = "test";
    std::size_t n = 5;
    auto* dp = app.add_subcommand("dump-preds", "Print side-by-side predictions");
    dp->add_option("checkpoints", checkpoints, "checkpoints to compare")->required();
    dp->add_option("--task", task_dir, "task directory")->required();
    dp->add_option("--split", split, "train, dev or test");
    dp->add_option("-n", n, "number of examples");

    fs::path csv, svg;
    auto* pl = app.add_subcommand("plot", "Render a sweep CSV as SVG");
    pl->add_option("csv", csv, "sweep CSV")->required();
    pl->add_option("svg", svg, "output SVG")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    }

    try {
        if (*gen) return cmd_gen_data(config);
        if (*pre) return cmd_pretrain(config);
        if (*tr) return cmd_train(config);
        if (*sw) return cmd_sweep(config);
        if (*ev) return cmd_eval(config);
        if (*pa) return cmd_params(shape);
        if (*me) return cmd_merge(base, deltas, out);
        if (*dp) return cmd_dump_preds(checkpoints, task_dir, split, n);
        if (*pl) return cmd_plot(csv, svg);
    } catch (const config_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const parse_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}
