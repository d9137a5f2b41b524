// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <sstream>

#include <unistd.h>

#include <nlohmann/json.hpp>

#include "lopt/cli.hpp"
#include "lopt/prompt.hpp"
#include "lopt/tiny_lm.hpp"

using namespace lopt;
namespace fs = std::filesystem;

namespace {

struct CliRun {
    int code;
    std::string out, err;
};

CliRun run(const std::vector<std::string>& args) {
    std::ostringstream out, err;
    const int code = run_cli(args, out, err);
    return {code, out.str(), err.str()};
}

class CliTest : public ::testing::Test {
protected:
    void SetUp() override {
        dir_ = fs::temp_directory_path() /
               ("lopt_cli_" + std::to_string(::getpid()) + "_" +
                ::testing::UnitTest::GetInstance()->current_test_info()->name());
        fs::remove_all(dir_);
        fs::create_directories(dir_);
    }
    void TearDown() override { fs::remove_all(dir_); }

    fs::path dir_;
};

}  // namespace

TEST(Cli, ParamsSingleRow) {
    auto r = run({"params", "--method", "lopt1", "--n", "10", "--d", "1280", "--r", "2"});
    EXPECT_EQ(r.code, 0) << r.err;
    EXPECT_NE(r.out.find("2580"), std::string::npos) << r.out;
    EXPECT_NE(r.out.find("-79.84%"), std::string::npos) << r.out;
}

TEST(Cli, ParamsGridCoversReferenceTables) {
    auto r = run({"params"});
    ASSERT_EQ(r.code, 0) << r.err;
    for (const char* needle : {"12800", "2580", "5120", "76800", "3940", "7680", "-89.92%",
                               "-79.84%", "-49.61%", "-89.84%", "-79.69%", "-49.22%", "-89.77%",
                               "-79.53%", "-48.83%"}) {
        EXPECT_NE(r.out.find(needle), std::string::npos) << needle;
    }
}

TEST(Cli, UnknownSubcommandFails) {
    auto r = run({"frobnicate"});
    EXPECT_NE(r.code, 0);
    EXPECT_FALSE(r.err.empty());
}

TEST_F(CliTest, TrainWithMissingConfigLeavesNoOutputs) {
    const auto out_dir = dir_ / "run";
    auto r = run({"train", "--config", (dir_ / "missing.json").string(), "--output_dir",
                  out_dir.string()});
    EXPECT_NE(r.code, 0);
    EXPECT_NE(r.err.find("missing.json"), std::string::npos) << r.err;
    EXPECT_FALSE(fs::exists(out_dir));
}

TEST_F(CliTest, RealBinaryReportsFailureThroughExitCode) {
    const auto out_dir = dir_ / "run";
    const std::string cmd = std::string(LOPT_BIN) + " train --config " +
                            (dir_ / "missing.json").string() + " --output_dir " +
                            out_dir.string() + " 2>/dev/null";
    const int status = std::system(cmd.c_str());
    EXPECT_NE(status, 0);
    EXPECT_FALSE(fs::exists(out_dir));
    EXPECT_EQ(std::system((std::string(LOPT_BIN) + " params > /dev/null").c_str()), 0);
}

TEST_F(CliTest, RankOfLowRankCheckpoint) {
    auto p = PromptParameterization::init(PromptMethod::lopt1, 8, 64, 2,
                                          Nonlinearity{Activation::elu, 1.0}, 4);
    const auto path = dir_ / "prompt.json";
    p.save(path);
    auto r = run({"rank", "--prompt", path.string()});
    ASSERT_EQ(r.code, 0) << r.err;
    auto j = nlohmann::json::parse(r.out);
    EXPECT_EQ(j["effective_rank"], 2);
    EXPECT_EQ(j["singular_values"].size(), 8u);
}

TEST_F(CliTest, GenTaskPretrainTrainEval) {
    auto g = run({"gen-task", "--out", dir_.string(), "--num-train", "32", "--num-val", "16"});
    ASSERT_EQ(g.code, 0) << g.err;
    for (auto f : {"train.jsonl", "val.jsonl", "vocab.json"}) EXPECT_TRUE(fs::exists(dir_ / f)) << f;

    auto p = run({"pretrain", "--out", (dir_ / "lm.json").string(), "--steps", "3", "--d", "16",
                  "--layers", "1", "--corpus-size", "64"});
    ASSERT_EQ(p.code, 0) << p.err;
    EXPECT_TRUE(TinyLM::load(dir_ / "lm.json").frozen());

    const auto out_dir = dir_ / "run";
    auto t = run({"train", "--model", (dir_ / "lm.json").string(), "--train_path",
                  (dir_ / "train.jsonl").string(), "--val_path", (dir_ / "val.jsonl").string(),
                  "--n", "4", "--steps", "4", "--eval_every", "2", "--batch_size", "4",
                  "--output_dir", out_dir.string()});
    ASSERT_EQ(t.code, 0) << t.err;
    EXPECT_TRUE(fs::exists(out_dir / "metrics.csv"));

    auto e = run({"eval", "--prompt", (out_dir / "prompt.final.json").string(), "--model",
                  (dir_ / "lm.json").string(), "--data", (dir_ / "val.jsonl").string()});
    ASSERT_EQ(e.code, 0) << e.err;
    auto j = nlohmann::json::parse(e.out);
    EXPECT_EQ(j["examples"], 16);
    EXPECT_GE(j["accuracy"].get<double>(), 0.0);
    EXPECT_LE(j["accuracy"].get<double>(), 1.0);
}

TEST(Cli, GradcheckSingleCombination) {
    auto r = run({"gradcheck", "--method", "lopt2", "--sigma", "elu", "--seeds", "1"});
    EXPECT_EQ(r.code, 0) << r.err << r.out;
}
