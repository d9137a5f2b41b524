// SPDX-License-Identifier: Apache-2.0
#include "lopt/cli.hpp"

#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>

#include "lopt/data.hpp"
#include "lopt/harness.hpp"
#include "lopt/prompt.hpp"
#include "lopt/tiny_lm.hpp"
#include "lopt/verify.hpp"

namespace lopt {

namespace fs = std::filesystem;

namespace {

struct ParamsRow {
    PromptMethod method;
    std::size_t n, d, r, baseline_n, baseline_d;
};

void print_params_row(std::ostream& out, const ParamsRow& row) {
    const auto count = parameter_count(row.method, row.n, row.d, row.r);
    const double rate =
        reduction_rate(row.method, row.n, row.d, row.r, row.baseline_n, row.baseline_d);
    char buf[200];
    std::snprintf(buf, sizeof buf, "%-6s %5zu %5zu %3zu %10zu %10s   (baseline n=%zu d=%zu)\n",
                  to_string(row.method).c_str(), row.n, row.d, row.r, count,
                  format_rate(rate).c_str(), row.baseline_n, row.baseline_d);
    out << buf;
}

// Reference grid: two backbone widths and the length/rank ablation.
std::vector<ParamsRow> reference_grid() {
    std::vector<ParamsRow> rows{
        {PromptMethod::full, 10, 1280, 0, 10, 1280},
        {PromptMethod::lopt1, 10, 1280, 2, 10, 1280},
        {PromptMethod::lopt2, 10, 1280, 2, 10, 1280},
        {PromptMethod::full, 100, 768, 0, 100, 768},
        {PromptMethod::lopt1, 20, 768, 5, 100, 768},
        {PromptMethod::lopt2, 20, 768, 5, 100, 768},
    };
    for (std::size_t n : {10, 20, 30})
        for (std::size_t r : {1, 2, 5}) rows.push_back({PromptMethod::lopt1, n, 1280, r, 10, 1280});
    return rows;
}

TinyLM pretrain_model(const ModelDims& dims, const Dataset& corpus_ds, const Vocab& vocab,
                      const PretrainOptions& opts, std::ostream& out) {
    const auto corpus = pretraining_corpus(corpus_ds, vocab, Verbalizer::builtin(vocab));
    PretrainReport report;
    TinyLM lm = pretrain(TinyLM::init(dims, opts.seed), corpus, opts, &report);
    if (!report.losses.empty()) {
        out << "pretrain: loss " << report.losses.front() << " -> " << report.losses.back()
            << " over " << report.losses.size() << " steps\n";
    }
    return lm;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Low-rank soft prompt tuning on a tiny frozen transformer", "lopt"};
    app.require_subcommand(1);

    // gen-task
    TaskSpec task;
    std::string task_kind = "majority", gen_out;
    auto* gen = app.add_subcommand("gen-task", "Generate a synthetic classification task");
    gen->add_option("--kind", task_kind, "majority | keyword")->capture_default_str();
    gen->add_option("--num-train", task.num_train)->capture_default_str();
    gen->add_option("--num-val", task.num_val)->capture_default_str();
    gen->add_option("--seq-len", task.seq_len)->capture_default_str();
    gen->add_option("--seed", task.seed)->capture_default_str();
    gen->add_option("--out", gen_out, "Output directory (train.jsonl, val.jsonl, vocab.json)")
        ->required();

    // pretrain
    ModelDims dims;
    PretrainOptions pre;
    std::string pre_out, pre_corpus, pre_vocab;
    TaskSpec pre_task;
    pre_task.num_train = 2048;
    pre_task.num_val = 0;
    pre_task.seed = 1000;
    std::string pre_kind = "majority";
    auto* pt = app.add_subcommand("pretrain", "Train and freeze a tiny language model");
    pt->add_option("--out", pre_out, "Checkpoint path")->required();
    pt->add_option("--steps", pre.steps)->capture_default_str();
    pt->add_option("--lr", pre.lr)->capture_default_str();
    pt->add_option("--batch-size", pre.batch_size)->capture_default_str();
    pt->add_option("--seed", pre.seed)->capture_default_str();
    pt->add_option("--corpus", pre_corpus, "JSONL corpus (default: generated task)");
    pt->add_option("--vocab", pre_vocab, "Vocabulary JSON (default: builtin)");
    pt->add_option("--task-kind", pre_kind)->capture_default_str();
    pt->add_option("--corpus-size", pre_task.num_train)->capture_default_str();
    pt->add_option("--seq-len", pre_task.seq_len)->capture_default_str();
    pt->add_option("--corpus-seed", pre_task.seed)->capture_default_str();
    pt->add_option("--d", dims.embed_dim)->capture_default_str();
    pt->add_option("--layers", dims.layers)->capture_default_str();
    pt->add_option("--heads", dims.heads)->capture_default_str();
    pt->add_option("--ffn-mult", dims.ffn_mult)->capture_default_str();
    pt->add_option("--max-seq", dims.max_seq)->capture_default_str();

    // train
    std::string config_path;
    auto* tr = app.add_subcommand("train", "Tune a soft prompt (extra --key value pairs override the config)");
    tr->add_option("--config", config_path, "Experiment config JSON");
    tr->allow_extras();

    // eval
    std::string ev_prompt, ev_model, ev_data, ev_vocab;
    auto* ev = app.add_subcommand("eval", "Accuracy of a prompt checkpoint on a dataset");
    ev->add_option("--prompt", ev_prompt)->required()->check(CLI::ExistingFile);
    ev->add_option("--model", ev_model)->required()->check(CLI::ExistingFile);
    ev->add_option("--data", ev_data)->required()->check(CLI::ExistingFile);
    ev->add_option("--vocab", ev_vocab)->check(CLI::ExistingFile);

    // params
    std::string pa_method;
    std::size_t pa_n = 10, pa_d = 1280, pa_r = 0, pa_bn = 10, pa_bd = 0;
    auto* pa = app.add_subcommand("params", "Trainable parameter counts and reduction rates");
    pa->add_option("--method", pa_method, "full | lopt1 | lopt2 (omit for the reference grid)");
    pa->add_option("--n", pa_n)->capture_default_str();
    pa->add_option("--d", pa_d)->capture_default_str();
    pa->add_option("--r", pa_r, "Rank (default floor(n/4))");
    pa->add_option("--baseline-n", pa_bn)->capture_default_str();
    pa->add_option("--baseline-d", pa_bd, "Default: --d");

    // gradcheck
    std::vector<std::string> gc_methods{"full", "lopt1", "lopt2"};
    std::vector<std::string> gc_sigmas{"relu", "elu", "gelu"};
    std::size_t gc_seeds = 5;
    PromptGradcheckSpec gc;
    auto* gcmd = app.add_subcommand("gradcheck", "Finite-difference check of prompt gradients");
    gcmd->add_option("--method", gc_methods)->capture_default_str();
    gcmd->add_option("--sigma", gc_sigmas)->capture_default_str();
    gcmd->add_option("--seeds", gc_seeds)->capture_default_str();
    gcmd->add_option("--n", gc.n)->capture_default_str();
    gcmd->add_option("--d", gc.d)->capture_default_str();
    gcmd->add_option("--r", gc.rank)->capture_default_str();
    gcmd->add_option("--eps", gc.options.eps)->capture_default_str();
    gcmd->add_option("--threshold", gc.options.threshold)->capture_default_str();

    // rank
    std::string rk_prompt;
    double rk_tol = 1e-6;
    auto* rk = app.add_subcommand("rank", "Singular values of a materialized prompt");
    rk->add_option("--prompt", rk_prompt)->required()->check(CLI::ExistingFile);
    rk->add_option("--tol", rk_tol)->capture_default_str();

    std::vector<std::string> argv_store{"lopt"};
    argv_store.insert(argv_store.end(), args.begin(), args.end());
    std::vector<char*> argv;
    for (auto& a : argv_store) argv.push_back(a.data());

    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::CallForHelp& e) {
        out << app.help();
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "lopt: " << e.what() << '\n';
        return e.get_exit_code() ? e.get_exit_code() : 2;
    }

    try {
        if (gen->parsed()) {
            task.kind = parse_task_kind(task_kind);
            const Vocab vocab = Vocab::builtin();
            const TaskSplit split = generate_task(task, vocab);
            fs::create_directories(gen_out);
            write_jsonl(split.train, fs::path(gen_out) / "train.jsonl");
            write_jsonl(split.val, fs::path(gen_out) / "val.jsonl");
            vocab.save(fs::path(gen_out) / "vocab.json");
            out << "wrote " << split.train.size() << " train / " << split.val.size()
                << " val examples to " << gen_out << '\n';
        } else if (pt->parsed()) {
            const Vocab vocab = pre_vocab.empty() ? Vocab::builtin() : Vocab::load(pre_vocab);
            dims.vocab_size = vocab.size();
            Dataset corpus;
            if (pre_corpus.empty()) {
                pre_task.kind = parse_task_kind(pre_kind);
                corpus = generate_task(pre_task, vocab).train;
            } else {
                corpus = load_jsonl(pre_corpus, vocab);
            }
            const TinyLM lm = pretrain_model(dims, corpus, vocab, pre, out);
            lm.save(pre_out);
            out << "saved frozen model to " << pre_out << '\n';
        } else if (tr->parsed()) {
            const auto overrides = parse_overrides(tr->remaining());
            const ExperimentConfig cfg = resolve_config(
                config_path.empty() ? std::nullopt : std::optional<fs::path>(config_path), overrides);
            const TrainResult result = run_experiment(cfg);
            out << result.metrics.summary().dump(2) << '\n';
        } else if (ev->parsed()) {
            const Vocab vocab = ev_vocab.empty() ? Vocab::builtin() : Vocab::load(ev_vocab);
            const TinyLM lm = TinyLM::load(ev_model);
            const auto prompt = PromptParameterization::load(ev_prompt);
            const Dataset ds = load_jsonl(ev_data, vocab);
            const double acc = evaluate(prompt, lm, ds, vocab, Verbalizer::builtin(vocab));
            out << nlohmann::json{{"accuracy", acc}, {"examples", ds.size()}}.dump() << '\n';
        } else if (pa->parsed()) {
            out << "method     n     d   r     params      delta\n";
            if (pa_method.empty()) {
                for (const auto& row : reference_grid()) print_params_row(out, row);
            } else {
                const auto method = parse_method(pa_method);
                const std::size_t r =
                    method == PromptMethod::full ? 0 : (pa_r ? pa_r : default_rank(pa_n));
                print_params_row(out, {method, pa_n, pa_d, r, pa_bn, pa_bd ? pa_bd : pa_d});
            }
        } else if (gcmd->parsed()) {
            nlohmann::json reports = nlohmann::json::array();
            bool all_passed = true;
            for (const auto& m : gc_methods) {
                const auto method = parse_method(m);
                for (const auto& s : gc_sigmas) {
                    for (std::size_t seed = 0; seed < gc_seeds; ++seed) {
                        PromptGradcheckSpec spec = gc;
                        spec.method = method;
                        spec.sigma = Nonlinearity{parse_activation(s), 1.0};
                        spec.seed = seed;
                        const GradReport rep = prompt_gradcheck(spec);
                        all_passed = all_passed && rep.passed;
                        auto j = rep.to_json();
                        j["method"] = m;
                        j["sigma"] = s;
                        j["seed"] = seed;
                        reports.push_back(std::move(j));
                    }
                }
            }
            out << nlohmann::json{{"passed", all_passed}, {"reports", reports}}.dump(2) << '\n';
            return all_passed ? 0 : 1;
        } else if (rk->parsed()) {
            const auto prompt = PromptParameterization::load(rk_prompt);
            NoGradGuard guard;
            auto j = rank_report(prompt.materialize(), rk_tol).to_json();
            j["method"] = to_string(prompt.method());
            j["r"] = prompt.rank();
            out << j.dump(2) << '\n';
        }
    } catch (const std::exception& e) {
        err << "lopt: " << e.what() << '\n';
        return 1;
    }
    return 0;
}

}  // namespace lopt
