// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>

#include "lopt/data.hpp"

using namespace lopt;

namespace {

std::filesystem::path write_temp(const std::string& name, const std::string& body) {
    auto path = std::filesystem::temp_directory_path() / name;
    std::ofstream(path) << body;
    return path;
}

}  // namespace

TEST(Vocab, BuiltinHasSixtyFourDistinctTokens) {
    auto v = Vocab::builtin();
    EXPECT_EQ(v.size(), 64u);
    for (std::size_t i = 0; i < v.size(); ++i) EXPECT_EQ(v.id(v.token(i)), i);
    EXPECT_EQ(v.token(v.pad_id()), "<pad>");
    EXPECT_EQ(v.token(v.eos_id()), "<eos>");
}

TEST(Vocab, RejectsDuplicatesAndMissingReserved) {
    EXPECT_THROW(Vocab({"<pad>", "<eos>", "a", "a"}), std::invalid_argument);
    EXPECT_THROW(Vocab({"<pad>", "a"}), std::invalid_argument);
}

TEST(Vocab, TokenizeRoundTrip) {
    auto v = Vocab::builtin();
    const std::string s = "a b w03 key no";
    EXPECT_EQ(v.detokenize(v.tokenize(s)), s);
    EXPECT_EQ(v.detokenize(v.tokenize("  a\tb   w03 ")), "a b w03");
    EXPECT_THROW(v.tokenize("a zebra"), UnknownTokenError);
}

TEST(Vocab, SaveLoad) {
    auto v = Vocab::builtin();
    auto path = std::filesystem::temp_directory_path() / "lopt_test_vocab.json";
    v.save(path);
    auto back = Vocab::load(path);
    std::filesystem::remove(path);
    EXPECT_EQ(back.tokens(), v.tokens());
}

TEST(Labels, CountingOracles) {
    auto v = Vocab::builtin();
    EXPECT_EQ(majority_label(v.tokenize("a a b"), v), 0u);
    EXPECT_EQ(majority_label(v.tokenize("b w00 a b"), v), 1u);
    EXPECT_EQ(keyword_label(v.tokenize("w01 w02 w03"), v), 0u);
    EXPECT_EQ(keyword_label(v.tokenize("w01 key w03"), v), 1u);
}

class TaskGeneration : public ::testing::TestWithParam<std::uint64_t> {};

TEST_P(TaskGeneration, MajorityLabelsBalanceAndDisjointness) {
    auto v = Vocab::builtin();
    TaskSpec spec;
    spec.seed = GetParam();
    auto split = generate_task(spec, v);
    ASSERT_EQ(split.train.size(), 512u);
    ASSERT_EQ(split.val.size(), 128u);
    for (const auto* ds : {&split.train, &split.val}) {
        std::size_t ones = 0;
        for (const auto& ex : *ds) {
            EXPECT_EQ(ex.token_ids.size(), 12u);
            EXPECT_EQ(ex.label, majority_label(ex.token_ids, v));
            const auto a = std::count(ex.token_ids.begin(), ex.token_ids.end(), v.id("a"));
            const auto b = std::count(ex.token_ids.begin(), ex.token_ids.end(), v.id("b"));
            EXPECT_NE(a, b);
            EXPECT_GE(a + b, 3);
            EXPECT_EQ(v.tokenize(ex.raw_text), ex.token_ids);
            ones += ex.label;
        }
        const double diff = std::abs(static_cast<double>(2 * ones) - static_cast<double>(ds->size()));
        EXPECT_LE(diff, 2.0);
    }
    // Brute-force multiset intersection.
    std::map<std::vector<std::size_t>, int> train_counts;
    for (const auto& ex : split.train) ++train_counts[ex.token_ids];
    for (const auto& ex : split.val) EXPECT_EQ(train_counts.count(ex.token_ids), 0u);
}

TEST_P(TaskGeneration, KeywordLabels) {
    auto v = Vocab::builtin();
    TaskSpec spec;
    spec.kind = TaskKind::keyword;
    spec.seed = GetParam();
    auto split = generate_task(spec, v);
    for (const auto& ex : split.train) EXPECT_EQ(ex.label, keyword_label(ex.token_ids, v));
    for (const auto& ex : split.val) EXPECT_EQ(ex.label, keyword_label(ex.token_ids, v));
}

INSTANTIATE_TEST_SUITE_P(Seeds, TaskGeneration, ::testing::Values(0, 1, 2, 17));

TEST(Tasks, DeterministicPerSeed) {
    auto v = Vocab::builtin();
    TaskSpec spec;
    spec.seed = 5;
    auto a = generate_task(spec, v);
    auto b = generate_task(spec, v);
    ASSERT_EQ(a.train.size(), b.train.size());
    for (std::size_t i = 0; i < a.train.size(); ++i) EXPECT_EQ(a.train[i].token_ids, b.train[i].token_ids);
    spec.seed = 6;
    auto c = generate_task(spec, v);
    EXPECT_NE(a.train[0].token_ids, c.train[0].token_ids);
}

TEST(Tasks, RejectsUnsupportedSpecs) {
    auto v = Vocab::builtin();
    TaskSpec spec;
    spec.num_classes = 3;
    EXPECT_THROW(generate_task(spec, v), std::invalid_argument);
    spec.num_classes = 2;
    spec.seq_len = 2;
    EXPECT_THROW(generate_task(spec, v), std::invalid_argument);
}

TEST(Jsonl, EmptyFileIsEmptyDataset) {
    auto path = write_temp("lopt_empty.jsonl", "");
    EXPECT_TRUE(load_jsonl(path, Vocab::builtin()).empty());
}

TEST(Jsonl, OneValidLine) {
    auto path = write_temp("lopt_one.jsonl", "{\"text\": \"a b a\", \"label\": 0}\n");
    auto ds = load_jsonl(path, Vocab::builtin());
    ASSERT_EQ(ds.size(), 1u);
    EXPECT_EQ(ds[0].label, 0u);
    EXPECT_EQ(ds[0].raw_text, "a b a");
    EXPECT_EQ(ds[0].token_ids.size(), 3u);
}

TEST(Jsonl, MissingLabelReportsLine) {
    auto path = write_temp("lopt_bad.jsonl",
                           "{\"text\": \"a\", \"label\": 1}\n\n{\"text\": \"b\"}\n");
    try {
        load_jsonl(path, Vocab::builtin());
        FAIL() << "expected DatasetFormatError";
    } catch (const DatasetFormatError& e) {
        EXPECT_EQ(e.line(), 3u);
    }
}

TEST(Jsonl, UnknownTokenReportsLine) {
    auto path = write_temp("lopt_unk.jsonl", "{\"text\": \"a zebra\", \"label\": 1}\n");
    try {
        load_jsonl(path, Vocab::builtin());
        FAIL() << "expected DatasetFormatError";
    } catch (const DatasetFormatError& e) {
        EXPECT_EQ(e.line(), 1u);
        EXPECT_NE(std::string(e.what()).find("zebra"), std::string::npos);
    }
}

TEST(Jsonl, RoundTrip) {
    auto v = Vocab::builtin();
    TaskSpec spec;
    spec.num_train = 20;
    spec.num_val = 0;
    auto ds = generate_task(spec, v).train;
    auto path = std::filesystem::temp_directory_path() / "lopt_rt.jsonl";
    write_jsonl(ds, path);
    auto back = load_jsonl(path, v);
    ASSERT_EQ(back.size(), ds.size());
    for (std::size_t i = 0; i < ds.size(); ++i) {
        EXPECT_EQ(back[i].raw_text, ds[i].raw_text);
        EXPECT_EQ(back[i].label, ds[i].label);
    }
}

TEST(Classify, PicksHighestClassToken) {
    auto v = Vocab::builtin();
    auto verb = Verbalizer::builtin(v);
    Tensor logits(Shape{64}, 0.0);
    logits.mutable_data()[v.id("no")] = 2.0;
    logits.mutable_data()[v.id("yes")] = 1.0;
    logits.mutable_data()[v.id("w10")] = 9.0;  // ignored: not a class token
    EXPECT_EQ(classify(logits, verb), 0u);
}

TEST(Classify, TieGoesToLowerClass) {
    auto v = Vocab::builtin();
    Tensor logits(Shape{64}, 0.5);
    EXPECT_EQ(classify(logits, Verbalizer::builtin(v)), 0u);
}

TEST(Classify, ShiftInvariant) {
    auto v = Vocab::builtin();
    auto verb = Verbalizer::builtin(v);
    Tensor logits(Shape{64}, 0.0);
    logits.mutable_data()[v.id("yes")] = 0.3;
    Tensor shifted = logits.clone();
    for (auto& x : shifted.mutable_data()) x += 123.0;
    EXPECT_EQ(classify(logits, verb), 1u);
    EXPECT_EQ(classify(shifted, verb), 1u);
}

TEST(Verbalizer, Validation) {
    EXPECT_THROW((Verbalizer{{5, 5}}.validate(64)), std::invalid_argument);
    EXPECT_THROW((Verbalizer{{5, 64}}.validate(64)), std::invalid_argument);
    EXPECT_NO_THROW((Verbalizer{{5, 6}}.validate(64)));
}

TEST(Corpus, AppendsEosAndVerbalizerToken) {
    auto v = Vocab::builtin();
    Example ex{v.tokenize("a b b"), 1, "a b b"};
    auto input = classification_input(ex, v);
    EXPECT_EQ(input.back(), v.eos_id());
    auto corpus = pretraining_corpus({ex}, v, Verbalizer::builtin(v));
    ASSERT_EQ(corpus.size(), 1u);
    EXPECT_EQ(corpus[0].size(), 5u);
    EXPECT_EQ(corpus[0].back(), v.id("yes"));
}
