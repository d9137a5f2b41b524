// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <unistd.h>

#include "lopt/harness.hpp"
#include "lopt/rng.hpp"

using namespace lopt;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

class HarnessTest : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        dir_ = fs::temp_directory_path() / ("lopt_harness_" + std::to_string(::getpid()));
        fs::remove_all(dir_);
        fs::create_directories(dir_);
        ModelDims dims;
        dims.embed_dim = 16;
        dims.layers = 1;
        dims.ffn_mult = 2;
        dims.max_seq = 32;
        auto lm = TinyLM::init(dims, 0);
        lm.freeze();
        model_path_ = dir_ / "lm.json";
        lm.save(model_path_);
    }

    ExperimentConfig base_config(const std::string& name) const {
        ExperimentConfig cfg;
        cfg.model = model_path_.string();
        cfg.n = 4;
        cfg.steps = 6;
        cfg.eval_every = 3;
        cfg.batch_size = 4;
        cfg.task.num_train = 32;
        cfg.task.num_val = 16;
        cfg.output_dir = (dir_ / name).string();
        return cfg;
    }

    static void TearDownTestSuite() { fs::remove_all(dir_); }

    static inline fs::path dir_;
    static inline fs::path model_path_;
};

}  // namespace

TEST(Config, JsonRoundTrip) {
    ExperimentConfig cfg;
    cfg.method = PromptMethod::lopt2;
    cfg.n = 12;
    cfg.r = 3;
    cfg.sigma = Activation::gelu;
    cfg.seed = 77;
    cfg.task.kind = TaskKind::keyword;
    auto back = ExperimentConfig::from_json(cfg.to_json());
    EXPECT_EQ(back.to_json(), cfg.to_json());
    EXPECT_EQ(back.resolved_rank(), 3u);
}

TEST(Config, DefaultRankIsQuarterOfN) {
    ExperimentConfig cfg;
    cfg.n = 20;
    EXPECT_EQ(cfg.resolved_rank(), 5u);
    EXPECT_DOUBLE_EQ(cfg.lr, 0.3);
    EXPECT_EQ(cfg.batch_size, 16u);
}

TEST(Config, UnknownKeyRejected) {
    EXPECT_THROW(ExperimentConfig::from_json({{"learning_rate", 0.1}}), ConfigError);
    EXPECT_THROW(ExperimentConfig::from_json({{"method", "lora"}}), ConfigError);
}

TEST(Config, OverridesKeepJsonTypes) {
    auto j = parse_overrides({"--lr", "0.5", "--method", "full", "--batch-size", "8",
                              "--wall-clock", "true"});
    EXPECT_TRUE(j["lr"].is_number_float());
    EXPECT_EQ(j["method"], "full");
    EXPECT_EQ(j["batch_size"], 8);
    EXPECT_EQ(j["wall_clock"], true);
    EXPECT_THROW(parse_overrides({"lr", "0.5"}), ConfigError);
    EXPECT_THROW(parse_overrides({"--lr"}), ConfigError);
}

TEST(Config, MissingFileAndModelRejected) {
    EXPECT_THROW(resolve_config(fs::path("/nonexistent/config.json"), nlohmann::json::object()),
                 ConfigError);
    EXPECT_THROW(resolve_config(std::nullopt, nlohmann::json::object()), ConfigError);
}

TEST_F(HarnessTest, SeedEnvironmentOverride) {
    ::setenv("LOPT_SEED", "31", 1);
    auto cfg = resolve_config(std::nullopt, {{"model", model_path_.string()}, {"seed", 2}});
    ::unsetenv("LOPT_SEED");
    EXPECT_EQ(cfg.seed, 31u);
}

TEST_F(HarnessTest, ValidationRejectsBadFields) {
    auto cfg = base_config("bad");
    cfg.n = 0;
    EXPECT_THROW(validate_config(cfg), ConfigError);
    cfg = base_config("bad");
    cfg.batch_size = 0;
    EXPECT_THROW(validate_config(cfg), ConfigError);
    cfg = base_config("bad");
    cfg.train_path = "/nonexistent.jsonl";
    cfg.val_path = "/nonexistent.jsonl";
    EXPECT_THROW(validate_config(cfg), ConfigError);
}

TEST_F(HarnessTest, ZeroStepsRecordsInitialEvaluationOnly) {
    auto cfg = base_config("zero");
    cfg.steps = 0;
    auto result = run_experiment(cfg);
    ASSERT_EQ(result.metrics.rows.size(), 1u);
    EXPECT_EQ(result.metrics.rows[0].step, 0u);
    auto init = PromptParameterization::init(cfg.method, cfg.n, 16, cfg.resolved_rank(),
                                             Nonlinearity{cfg.sigma, 1.0}, mix_seed(cfg.seed, 20));
    EXPECT_EQ(checksum(result.prompt.all_tensors()), checksum(init.all_tensors()));
}

TEST_F(HarnessTest, WritesAllArtifacts) {
    auto cfg = base_config("artifacts");
    run_experiment(cfg);
    for (auto name : {"config.resolved.json", "metrics.csv", "prompt.final.json", "summary.json"}) {
        EXPECT_TRUE(fs::exists(fs::path(cfg.output_dir) / name)) << name;
    }
    auto csv = slurp(fs::path(cfg.output_dir) / "metrics.csv");
    EXPECT_EQ(csv.substr(0, csv.find('\n')), "step,train_loss,train_acc,val_acc,elapsed_ms");
    // steps 0, 3, 6
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);
    auto resolved = ExperimentConfig::from_json(read_json_file(fs::path(cfg.output_dir) / "config.resolved.json"));
    EXPECT_EQ(resolved.to_json(), cfg.to_json());
}

TEST_F(HarnessTest, RepeatedRunsAreByteIdentical) {
    for (auto method : {PromptMethod::full, PromptMethod::lopt1, PromptMethod::lopt2}) {
        auto a = base_config("det_a");
        auto b = base_config("det_b");
        a.method = b.method = method;
        run_experiment(a);
        run_experiment(b);
        for (auto name : {"metrics.csv", "prompt.final.json"}) {
            EXPECT_EQ(slurp(fs::path(a.output_dir) / name), slurp(fs::path(b.output_dir) / name))
                << to_string(method) << " " << name;
        }
    }
}

TEST_F(HarnessTest, DifferentSeedsDiffer) {
    auto a = base_config("seed_a");
    auto b = base_config("seed_b");
    b.seed = 1;
    run_experiment(a);
    run_experiment(b);
    EXPECT_NE(slurp(fs::path(a.output_dir) / "prompt.final.json"),
              slurp(fs::path(b.output_dir) / "prompt.final.json"));
}

TEST_F(HarnessTest, BackboneAndFixedProjectionUntouched) {
    auto cfg = base_config("frozen");
    cfg.method = PromptMethod::lopt2;
    const auto before = checksum(TinyLM::load(model_path_).parameters());
    auto result = run_experiment(cfg);
    EXPECT_EQ(result.metrics.lm_checksum, before);
    EXPECT_EQ(checksum(TinyLM::load(model_path_).parameters()), before);
    const auto init = PromptParameterization::init(cfg.method, cfg.n, 16, cfg.resolved_rank(),
                                                   Nonlinearity{cfg.sigma, 1.0}, mix_seed(cfg.seed, 20));
    EXPECT_EQ(checksum(std::get<ProjectedPrompt>(result.prompt.state()).x0),
              checksum(std::get<ProjectedPrompt>(init.state()).x0));
    EXPECT_EQ(result.metrics.fixed_checksum, checksum(std::get<ProjectedPrompt>(init.state()).x0));
}

TEST_F(HarnessTest, UnfrozenModelRejected) {
    ModelDims dims;
    dims.embed_dim = 16;
    dims.layers = 1;
    auto lm = TinyLM::init(dims, 0);
    auto cfg = base_config("unfrozen");
    auto vocab = Vocab::builtin();
    EXPECT_THROW(train(cfg, lm, vocab, generate_task(cfg.task, vocab)), ConfigError);
}

TEST_F(HarnessTest, ParameterAccountingInSummary) {
    auto cfg = base_config("summary");
    cfg.method = PromptMethod::lopt1;
    cfg.r = 2;
    auto result = run_experiment(cfg);
    EXPECT_EQ(result.metrics.trainable_params, 2u * (4 + 16));
    auto summary = read_json_file(fs::path(cfg.output_dir) / "summary.json");
    EXPECT_EQ(summary["trainable_params"], 40);
}

TEST_F(HarnessTest, AccuracyExtremes) {
    const auto lm = TinyLM::load(model_path_);
    const auto vocab = Vocab::builtin();
    const auto verb = Verbalizer::builtin(vocab);
    auto prompt = PromptParameterization::init(PromptMethod::full, 4, 16, 0,
                                               Nonlinearity{}, 3);
    TaskSpec spec;
    spec.num_train = 24;
    spec.num_val = 0;
    auto ds = generate_task(spec, vocab).train;
    // Relabel with the model's own predictions, then with their opposites.
    const auto inputs = embed_dataset(lm, ds, vocab);
    const PrefixCache prefix = [&] {
        NoGradGuard g;
        return encode_prefix(lm, prompt.materialize());
    }();
    for (std::size_t i = 0; i < ds.size(); ++i) {
        NoGradGuard g;
        ds[i].label = classify(forward(lm, prefix, inputs[i]), verb);
    }
    Dataset one{ds[0]};
    EXPECT_DOUBLE_EQ(evaluate(prompt, lm, one, vocab, verb), 1.0);
    EXPECT_DOUBLE_EQ(evaluate(prompt, lm, ds, vocab, verb), 1.0);
    for (auto& ex : ds) ex.label = 1 - ex.label;
    EXPECT_DOUBLE_EQ(evaluate(prompt, lm, ds, vocab, verb), 0.0);
}

TEST_F(HarnessTest, UntrainedPromptIsNearChance) {
    const auto lm = TinyLM::load(model_path_);
    const auto vocab = Vocab::builtin();
    const auto verb = Verbalizer::builtin(vocab);
    TaskSpec spec;
    spec.num_train = 0;
    spec.num_val = 128;
    const auto val = generate_task(spec, vocab).val;
    double total = 0.0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        auto prompt = PromptParameterization::init(PromptMethod::lopt1, 8, 16, 2,
                                                   Nonlinearity{}, seed);
        total += evaluate(prompt, lm, val, vocab, verb);
    }
    EXPECT_NEAR(total / 10.0, 0.5, 0.15);
}
