// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "lopt/data.hpp"
#include "lopt/optimizer.hpp"
#include "lopt/prompt.hpp"
#include "lopt/tiny_lm.hpp"

namespace lopt {

enum class OptimizerKind { adafactor, sgd };

/// Flat run description. Every key is also a `--key value` CLI override.
struct ExperimentConfig {
    PromptMethod method = PromptMethod::lopt1;
    std::size_t n = 8;
    std::optional<std::size_t> r;  // floor(n/4) when unset
    Activation sigma = Activation::elu;
    double lr = 0.3;
    OptimizerKind optimizer = OptimizerKind::adafactor;
    std::size_t batch_size = 16;
    std::size_t steps = 2000;
    std::size_t eval_every = 100;
    std::uint64_t seed = 0;

    std::string model;       // frozen LM checkpoint
    std::string train_path;  // JSONL; when empty the task generator is used
    std::string val_path;
    std::string vocab_path;  // JSON array; builtin vocabulary when empty
    TaskSpec task;
    std::string output_dir;

    // Adafactor knobs.
    double eps1 = 1e-30;
    double eps2 = 1e-3;
    double clip_threshold = 1.0;
    double decay_exponent = 0.8;

    /// Full-prompt baseline length for the reported reduction rate.
    std::size_t baseline_n = 10;
    /// When false the elapsed_ms column is written as 0 so metrics files
    /// are byte-reproducible; wall time still lands in summary.json.
    bool wall_clock = false;

    std::size_t resolved_rank() const;
    nlohmann::json to_json() const;
    static ExperimentConfig from_json(const nlohmann::json& j);
};

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Parses `--key value` pairs into a JSON object of typed overrides.
nlohmann::json parse_overrides(const std::vector<std::string>& args);

/// Config file (optional) + overrides + LOPT_SEED, resolved and validated.
ExperimentConfig resolve_config(const std::optional<std::filesystem::path>& path,
                                const nlohmann::json& overrides);

/// Checks field ranges and that every referenced path exists.
void validate_config(const ExperimentConfig& cfg);

struct MetricsRow {
    std::size_t step = 0;
    double train_loss = 0.0;
    double train_acc = 0.0;
    double val_acc = 0.0;
    double elapsed_ms = 0.0;
};

struct RunMetrics {
    std::vector<MetricsRow> rows;
    double best_val_acc = 0.0;
    std::size_t trainable_params = 0;
    double reduction_pct = 0.0;
    std::uint64_t lm_checksum = 0;
    std::uint64_t fixed_checksum = 0;  // X0 for lopt2, else 0
    double wall_ms = 0.0;

    double final_val_acc() const { return rows.empty() ? 0.0 : rows.back().val_acc; }
    std::string csv() const;
    nlohmann::json summary() const;
};

class TrainingError : public std::runtime_error {
public:
    TrainingError(const std::string& what, RunMetrics partial)
        : std::runtime_error(what), partial_(std::move(partial)) {}
    /// Rows up to the failure; a diverged run ends with a NaN-loss row.
    const RunMetrics& partial() const { return partial_; }

private:
    RunMetrics partial_;
};

struct TrainResult {
    RunMetrics metrics;
    PromptParameterization prompt;
};

/// Prepared (t×d) input embeddings for a dataset, reused across steps.
std::vector<InputEmbeddings> embed_dataset(const TinyLM& lm, const Dataset& ds, const Vocab& vocab);

/// Mini-batch prompt tuning with the LM held fixed. Throws TrainingError on a
/// non-finite loss or if any non-trainable tensor changes.
TrainResult train(const ExperimentConfig& cfg, const TinyLM& lm, const Vocab& vocab,
                  const TaskSplit& data);

struct Evaluation {
    double loss = 0.0;
    double accuracy = 0.0;
};

Evaluation evaluate(const PromptParameterization& prompt, const TinyLM& lm,
                    const std::vector<InputEmbeddings>& inputs, const Dataset& ds,
                    const Verbalizer& verbalizer);
double evaluate(const PromptParameterization& prompt, const TinyLM& lm, const Dataset& ds,
                const Vocab& vocab, const Verbalizer& verbalizer);

/// Loads everything named by `cfg`, trains, and writes config.resolved.json,
/// metrics.csv, prompt.final.json and summary.json into cfg.output_dir.
TrainResult run_experiment(const ExperimentConfig& cfg);

}  // namespace lopt
