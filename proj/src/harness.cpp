// SPDX-License-Identifier: Apache-2.0
#include "lopt/harness.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <set>

#include "lopt/rng.hpp"

namespace lopt {

namespace fs = std::filesystem;

std::size_t ExperimentConfig::resolved_rank() const {
    if (method == PromptMethod::full) return 0;
    return r.value_or(default_rank(n));
}

nlohmann::json ExperimentConfig::to_json() const {
    nlohmann::json j = {
        {"method", lopt::to_string(method)},
        {"n", n},
        {"r", method == PromptMethod::full ? nlohmann::json(nullptr) : nlohmann::json(resolved_rank())},
        {"sigma", lopt::to_string(sigma)},
        {"lr", lr},
        {"optimizer", optimizer == OptimizerKind::adafactor ? "adafactor" : "sgd"},
        {"batch_size", batch_size},
        {"steps", steps},
        {"eval_every", eval_every},
        {"seed", seed},
        {"model", model},
        {"train_path", train_path},
        {"val_path", val_path},
        {"vocab_path", vocab_path},
        {"task_kind", lopt::to_string(task.kind)},
        {"num_train", task.num_train},
        {"num_val", task.num_val},
        {"seq_len", task.seq_len},
        {"task_seed", task.seed},
        {"output_dir", output_dir},
        {"eps1", eps1},
        {"eps2", eps2},
        {"clip_threshold", clip_threshold},
        {"decay_exponent", decay_exponent},
        {"baseline_n", baseline_n},
        {"wall_clock", wall_clock},
    };
    return j;
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("config: expected a JSON object");
    static const std::set<std::string> known{
        "method",   "n",          "r",         "sigma",     "lr",         "optimizer",
        "batch_size", "steps",    "eval_every", "seed",     "model",      "train_path",
        "val_path", "vocab_path", "task_kind", "num_train", "num_val",    "seq_len",
        "task_seed", "output_dir", "eps1",     "eps2",      "clip_threshold", "decay_exponent",
        "baseline_n", "wall_clock"};
    for (const auto& [key, _] : j.items()) {
        if (!known.count(key)) throw ConfigError("config: unknown key '" + key + "'");
    }
    ExperimentConfig cfg;
    try {
        auto get = [&](const char* key, auto& field) {
            if (j.contains(key)) j.at(key).get_to(field);
        };
        if (j.contains("method")) cfg.method = parse_method(j.at("method").get<std::string>());
        get("n", cfg.n);
        if (j.contains("r") && !j.at("r").is_null()) cfg.r = j.at("r").get<std::size_t>();
        if (j.contains("sigma")) cfg.sigma = parse_activation(j.at("sigma").get<std::string>());
        get("lr", cfg.lr);
        if (j.contains("optimizer")) {
            const auto name = j.at("optimizer").get<std::string>();
            if (name == "adafactor") {
                cfg.optimizer = OptimizerKind::adafactor;
            } else if (name == "sgd") {
                cfg.optimizer = OptimizerKind::sgd;
            } else {
                throw ConfigError("config: unknown optimizer '" + name + "'");
            }
        }
        get("batch_size", cfg.batch_size);
        get("steps", cfg.steps);
        get("eval_every", cfg.eval_every);
        get("seed", cfg.seed);
        get("model", cfg.model);
        get("train_path", cfg.train_path);
        get("val_path", cfg.val_path);
        get("vocab_path", cfg.vocab_path);
        if (j.contains("task_kind")) cfg.task.kind = parse_task_kind(j.at("task_kind").get<std::string>());
        get("num_train", cfg.task.num_train);
        get("num_val", cfg.task.num_val);
        get("seq_len", cfg.task.seq_len);
        get("task_seed", cfg.task.seed);
        get("output_dir", cfg.output_dir);
        get("eps1", cfg.eps1);
        get("eps2", cfg.eps2);
        get("clip_threshold", cfg.clip_threshold);
        get("decay_exponent", cfg.decay_exponent);
        get("baseline_n", cfg.baseline_n);
        get("wall_clock", cfg.wall_clock);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    return cfg;
}

nlohmann::json parse_overrides(const std::vector<std::string>& args) {
    nlohmann::json out = nlohmann::json::object();
    for (std::size_t i = 0; i < args.size(); ++i) {
        const auto& flag = args[i];
        if (flag.rfind("--", 0) != 0 || flag.size() == 2) {
            throw ConfigError("override: expected --key, got '" + flag + "'");
        }
        if (i + 1 >= args.size()) throw ConfigError("override: " + flag + " needs a value");
        std::string key = flag.substr(2);
        for (auto& c : key) {
            if (c == '-') c = '_';
        }
        const auto& raw = args[++i];
        // Numbers, booleans and null keep their JSON type; anything else is a string.
        nlohmann::json value = nlohmann::json::parse(raw, nullptr, false);
        if (value.is_discarded() || value.is_object() || value.is_array() || value.is_string()) {
            value = raw;
        }
        out[key] = value;
    }
    return out;
}

ExperimentConfig resolve_config(const std::optional<fs::path>& path,
                                const nlohmann::json& overrides) {
    nlohmann::json j = nlohmann::json::object();
    if (path) {
        if (!fs::exists(*path)) throw ConfigError("config file not found: " + path->string());
        try {
            j = read_json_file(*path);
        } catch (const std::exception& e) {
            throw ConfigError(e.what());
        }
    }
    if (!j.is_object()) throw ConfigError("config: expected a JSON object");
    j.update(overrides);
    ExperimentConfig cfg = ExperimentConfig::from_json(j);
    if (const char* env = std::getenv("LOPT_SEED"); env && *env) {
        char* end = nullptr;
        const unsigned long long v = std::strtoull(env, &end, 10);
        if (*end != '\0') throw ConfigError(std::string("LOPT_SEED is not an integer: ") + env);
        cfg.seed = v;
    }
    validate_config(cfg);
    return cfg;
}

void validate_config(const ExperimentConfig& cfg) {
    if (cfg.n < 1) throw ConfigError("config: n must be >= 1");
    if (cfg.method != PromptMethod::full && cfg.resolved_rank() < 1) {
        throw ConfigError("config: r must be >= 1");
    }
    if (cfg.batch_size < 1) throw ConfigError("config: batch_size must be >= 1");
    if (cfg.eval_every < 1) throw ConfigError("config: eval_every must be >= 1");
    if (!(cfg.lr >= 0.0)) throw ConfigError("config: lr must be non-negative");
    if (cfg.baseline_n < 1) throw ConfigError("config: baseline_n must be >= 1");
    if (cfg.model.empty()) throw ConfigError("config: 'model' checkpoint path is required");
    if (cfg.train_path.empty() != cfg.val_path.empty()) {
        throw ConfigError("config: give both train_path and val_path, or neither");
    }
    for (const auto* p : {&cfg.model, &cfg.train_path, &cfg.val_path, &cfg.vocab_path}) {
        if (!p->empty() && !fs::exists(*p)) throw ConfigError("config: path not found: " + *p);
    }
}

std::string RunMetrics::csv() const {
    std::string out = "step,train_loss,train_acc,val_acc,elapsed_ms\n";
    char buf[160];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%zu,%.10f,%.6f,%.6f,%.0f\n", r.step, r.train_loss,
                      r.train_acc, r.val_acc, r.elapsed_ms);
        out += buf;
    }
    return out;
}

nlohmann::json RunMetrics::summary() const {
    return {{"best_val_acc", best_val_acc},
            {"final_val_acc", final_val_acc()},
            {"final_train_loss", rows.empty() ? 0.0 : rows.back().train_loss},
            {"initial_train_loss", rows.empty() ? 0.0 : rows.front().train_loss},
            {"trainable_params", trainable_params},
            {"reduction_pct", round_to_cents(reduction_pct)},
            {"lm_checksum", lm_checksum},
            {"fixed_checksum", fixed_checksum},
            {"wall_ms", wall_ms}};
}

std::vector<InputEmbeddings> embed_dataset(const TinyLM& lm, const Dataset& ds,
                                           const Vocab& vocab) {
    std::vector<InputEmbeddings> out;
    out.reserve(ds.size());
    NoGradGuard guard;
    for (const auto& ex : ds) out.push_back(embed(lm, classification_input(ex, vocab)));
    return out;
}

Evaluation evaluate(const PromptParameterization& prompt, const TinyLM& lm,
                    const std::vector<InputEmbeddings>& inputs, const Dataset& ds,
                    const Verbalizer& verbalizer) {
    if (inputs.size() != ds.size()) throw std::invalid_argument("evaluate: inputs/dataset mismatch");
    Evaluation ev;
    if (ds.empty()) return ev;
    NoGradGuard guard;
    const PrefixCache prefix = encode_prefix(lm, prompt.materialize());
    std::size_t correct = 0;
    for (std::size_t i = 0; i < ds.size(); ++i) {
        Tensor logits = forward(lm, prefix, inputs[i]);
        ev.loss += softmax_cross_entropy(logits, verbalizer.class_tokens.at(ds[i].label)).item();
        if (classify(logits, verbalizer) == ds[i].label) ++correct;
    }
    ev.loss /= static_cast<double>(ds.size());
    ev.accuracy = static_cast<double>(correct) / static_cast<double>(ds.size());
    return ev;
}

double evaluate(const PromptParameterization& prompt, const TinyLM& lm, const Dataset& ds,
                const Vocab& vocab, const Verbalizer& verbalizer) {
    return evaluate(prompt, lm, embed_dataset(lm, ds, vocab), ds, verbalizer).accuracy;
}

namespace {

std::size_t longest_input(const TaskSplit& data) {
    std::size_t len = 0;
    for (const auto* ds : {&data.train, &data.val})
        for (const auto& ex : *ds) len = std::max(len, ex.token_ids.size() + 1);
    return len;
}

}  // namespace

TrainResult train(const ExperimentConfig& cfg, const TinyLM& lm, const Vocab& vocab,
                  const TaskSplit& data) {
    if (!lm.frozen()) throw ConfigError("train: language model checkpoint is not frozen");
    if (cfg.n + longest_input(data) > lm.dims().max_seq) {
        throw ConfigError("train: prompt length " + std::to_string(cfg.n) + " plus input length " +
                          std::to_string(longest_input(data)) + " exceeds max_seq " +
                          std::to_string(lm.dims().max_seq));
    }
    if (vocab.size() != lm.dims().vocab_size) {
        throw ConfigError("train: vocabulary has " + std::to_string(vocab.size()) +
                          " tokens, model expects " + std::to_string(lm.dims().vocab_size));
    }
    if (data.train.empty()) throw ConfigError("train: empty training set");
    const Verbalizer verbalizer = Verbalizer::builtin(vocab);
    for (const auto* ds : {&data.train, &data.val}) {
        for (const auto& ex : *ds) {
            if (ex.label >= verbalizer.class_tokens.size()) {
                throw ConfigError("train: label " + std::to_string(ex.label) +
                                  " has no verbalizer token");
            }
        }
    }

    const auto start = std::chrono::steady_clock::now();
    auto elapsed_ms = [&] {
        return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start)
            .count();
    };

    auto prompt = PromptParameterization::init(cfg.method, cfg.n, lm.dims().embed_dim,
                                               cfg.resolved_rank(), Nonlinearity{cfg.sigma, 1.0},
                                               mix_seed(cfg.seed, 20));
    const auto params = prompt.trainable_parameters();
    const auto lm_params = lm.parameters();
    auto fixed_checksum = [&]() -> std::uint64_t {
        const auto* proj = std::get_if<ProjectedPrompt>(&prompt.state());
        return proj ? checksum(proj->x0) : 0;
    };

    RunMetrics metrics;
    metrics.trainable_params = prompt.parameter_count();
    metrics.reduction_pct = reduction_rate(cfg.method, cfg.n, lm.dims().embed_dim,
                                           cfg.resolved_rank(), cfg.baseline_n, lm.dims().embed_dim);
    metrics.lm_checksum = checksum(lm_params);
    metrics.fixed_checksum = fixed_checksum();

    const auto train_inputs = embed_dataset(lm, data.train, vocab);
    const auto val_inputs = embed_dataset(lm, data.val, vocab);

    auto record = [&](std::size_t step) {
        if (checksum(lm_params) != metrics.lm_checksum || fixed_checksum() != metrics.fixed_checksum) {
            throw TrainingError("train: a non-trainable tensor changed by step " + std::to_string(step),
                                metrics);
        }
        const Evaluation tr = evaluate(prompt, lm, train_inputs, data.train, verbalizer);
        const Evaluation va = evaluate(prompt, lm, val_inputs, data.val, verbalizer);
        metrics.rows.push_back({step, tr.loss, tr.accuracy, va.accuracy,
                                cfg.wall_clock ? std::round(elapsed_ms()) : 0.0});
        metrics.best_val_acc = std::max(metrics.best_val_acc, va.accuracy);
    };

    Adafactor adafactor(AdafactorOptions{.lr = cfg.lr,
                                         .eps1 = cfg.eps1,
                                         .eps2 = cfg.eps2,
                                         .clip_threshold = cfg.clip_threshold,
                                         .decay_exponent = cfg.decay_exponent});
    Sgd sgd(SgdOptions{.lr = cfg.lr});

    Rng rng(mix_seed(cfg.seed, 21));
    std::vector<std::size_t> order(data.train.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::size_t cursor = order.size();

    record(0);
    for (std::size_t step = 1; step <= cfg.steps; ++step) {
        for (const auto& p : params) {
            Tensor t = p.tensor;
            t.zero_grad();
        }
        const PrefixCache prefix = encode_prefix(lm, prompt.materialize());
        Tensor total;
        for (std::size_t b = 0; b < cfg.batch_size; ++b) {
            if (cursor == order.size()) {
                rng.shuffle(std::span(order));
                cursor = 0;
            }
            const std::size_t idx = order[cursor++];
            Tensor logits = forward(lm, prefix, train_inputs[idx]);
            Tensor loss = softmax_cross_entropy(logits, verbalizer.class_tokens[data.train[idx].label]);
            total = b == 0 ? loss : add(total, loss);
        }
        Tensor loss = scale(total, 1.0 / static_cast<double>(cfg.batch_size));
        if (!std::isfinite(loss.item())) {
            metrics.rows.push_back({step, loss.item(), 0.0, 0.0,
                                    cfg.wall_clock ? std::round(elapsed_ms()) : 0.0});
            throw TrainingError("train: non-finite loss at step " + std::to_string(step), metrics);
        }
        backward(loss);
        const StepResult res = cfg.optimizer == OptimizerKind::adafactor ? adafactor.step(params)
                                                                          : sgd.step(params);
        if (!res.applied) {
            metrics.rows.push_back({step, NAN, 0.0, 0.0,
                                    cfg.wall_clock ? std::round(elapsed_ms()) : 0.0});
            throw TrainingError("train: step " + std::to_string(step) + " skipped: " + res.message,
                                metrics);
        }
        if (step % cfg.eval_every == 0 || step == cfg.steps) record(step);
    }
    metrics.wall_ms = elapsed_ms();
    return {std::move(metrics), std::move(prompt)};
}

namespace {

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << text;
}

}  // namespace

TrainResult run_experiment(const ExperimentConfig& cfg) {
    validate_config(cfg);
    const Vocab vocab = cfg.vocab_path.empty() ? Vocab::builtin() : Vocab::load(cfg.vocab_path);
    const TinyLM lm = TinyLM::load(cfg.model);
    TaskSplit data;
    if (cfg.train_path.empty()) {
        data = generate_task(cfg.task, vocab);
    } else {
        data.train = load_jsonl(cfg.train_path, vocab);
        data.val = load_jsonl(cfg.val_path, vocab);
    }

    const bool write = !cfg.output_dir.empty();
    const fs::path out_dir(cfg.output_dir);
    try {
        TrainResult result = train(cfg, lm, vocab, data);
        if (write) {
            fs::create_directories(out_dir);
            write_json_file(out_dir / "config.resolved.json", cfg.to_json());
            write_text(out_dir / "metrics.csv", result.metrics.csv());
            result.prompt.save(out_dir / "prompt.final.json");
            write_json_file(out_dir / "summary.json", result.metrics.summary());
        }
        return result;
    } catch (const TrainingError& e) {
        if (write) {
            fs::create_directories(out_dir);
            write_json_file(out_dir / "config.resolved.json", cfg.to_json());
            write_text(out_dir / "metrics.csv", e.partial().csv());
        }
        throw;
    }
}

}  // namespace lopt
