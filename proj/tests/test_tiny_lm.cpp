// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <filesystem>

#include "lopt/data.hpp"
#include "lopt/rng.hpp"
#include "lopt/tiny_lm.hpp"
#include "lopt/verify.hpp"

using namespace lopt;

namespace {

ModelDims small_dims() {
    ModelDims d;
    d.vocab_size = 64;
    d.embed_dim = 16;
    d.layers = 2;
    d.heads = 2;
    d.ffn_mult = 2;
    d.max_seq = 32;
    return d;
}

Tensor random_prompt(std::size_t n, std::size_t d, std::uint64_t seed, bool rg = false) {
    Rng rng(seed);
    std::vector<double> v(n * d);
    for (auto& x : v) x = rng.uniform(-0.5, 0.5);
    return Tensor(Shape{n, d}, std::move(v), rg);
}

}  // namespace

TEST(TinyLM, InitIsDeterministic) {
    auto a = TinyLM::init(small_dims(), 7);
    auto b = TinyLM::init(small_dims(), 7);
    auto c = TinyLM::init(small_dims(), 8);
    EXPECT_EQ(checksum(a.parameters()), checksum(b.parameters()));
    EXPECT_NE(checksum(a.parameters()), checksum(c.parameters()));
}

TEST(TinyLM, CopyIsDeep) {
    auto a = TinyLM::init(small_dims(), 1);
    TinyLM b = a;
    const auto before = checksum(a.parameters());
    b.parameters()[0].tensor.mutable_data()[0] += 1.0;
    EXPECT_EQ(checksum(a.parameters()), before);
}

TEST(TinyLM, FreezeClearsRequiresGrad) {
    auto lm = TinyLM::init(small_dims(), 1);
    for (const auto& p : lm.parameters()) EXPECT_TRUE(p.tensor.requires_grad()) << p.name;
    lm.freeze();
    EXPECT_TRUE(lm.frozen());
    for (const auto& p : lm.parameters()) EXPECT_FALSE(p.tensor.requires_grad()) << p.name;
}

TEST(TinyLM, DimsValidation) {
    auto d = small_dims();
    d.heads = 3;
    EXPECT_THROW(d.validate(), std::invalid_argument);
}

TEST(TinyLM, SinusoidalTable) {
    auto p = sinusoidal_positions(8, 4);
    EXPECT_EQ(p.at(0, 0), 0.0);
    EXPECT_EQ(p.at(0, 1), 1.0);
    EXPECT_NEAR(p.at(3, 0), std::sin(3.0), 1e-15);
    EXPECT_NEAR(p.at(3, 1), std::cos(3.0), 1e-15);
    EXPECT_NEAR(p.at(3, 2), std::sin(3.0 / 100.0), 1e-15);
}

TEST(Embed, GathersRowsOfE) {
    auto lm = TinyLM::init(small_dims(), 2);
    std::vector<std::size_t> ids{5};
    auto e = embed(lm, ids);
    ASSERT_EQ(e.matrix.shape(), (Shape{1, 16}));
    for (std::size_t c = 0; c < 16; ++c) EXPECT_EQ(e.matrix.at(0, c), lm.embedding().at(5, c));

    std::vector<std::size_t> none;
    EXPECT_EQ(embed(lm, none).matrix.shape(), (Shape{0, 16}));

    std::vector<std::size_t> twice{9, 9};
    auto t = embed(lm, twice);
    for (std::size_t c = 0; c < 16; ++c) EXPECT_EQ(t.matrix.at(0, c), t.matrix.at(1, c));

    std::vector<std::size_t> bad{64};
    EXPECT_THROW(embed(lm, bad), std::out_of_range);
}

TEST(Embed, NoGradientIntoFrozenTable) {
    auto lm = TinyLM::init(small_dims(), 2);
    lm.freeze();
    std::vector<std::size_t> ids{1, 2, 3};
    auto prompt = random_prompt(2, 16, 0, true);
    backward(softmax_cross_entropy(forward(lm, prompt, embed(lm, ids)), 4));
    EXPECT_TRUE(prompt.has_grad());
    for (const auto& p : lm.parameters()) EXPECT_FALSE(p.tensor.has_grad()) << p.name;
}

TEST(Forward, LogitLengthIsVocabForEveryInputLength) {
    auto lm = TinyLM::init(small_dims(), 3);
    lm.freeze();
    auto prompt = random_prompt(4, 16, 1);
    for (std::size_t t = 1; t <= 10; ++t) {
        std::vector<std::size_t> ids(t, 7);
        EXPECT_EQ(forward(lm, prompt, embed(lm, ids)).shape(), (Shape{64}));
    }
}

TEST(Forward, Deterministic) {
    auto lm1 = TinyLM::init(small_dims(), 3);
    auto lm2 = TinyLM::init(small_dims(), 3);
    auto prompt = random_prompt(4, 16, 1);
    std::vector<std::size_t> ids{3, 2, 9, 1};
    auto a = forward(lm1, prompt, embed(lm1, ids));
    auto b = forward(lm2, prompt, embed(lm2, ids));
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a.data()[i], b.data()[i]);
}

// A prompt made of real token embeddings must give the same readout as the
// plain sequence: checks prefix caching, offsets and positions together.
TEST(Forward, CachedPrefixMatchesFullSequence) {
    auto lm = TinyLM::init(small_dims(), 4);
    std::vector<std::size_t> all{10, 11, 2, 3, 3, 2, 1};
    for (std::size_t split = 0; split < all.size(); ++split) {
        std::vector<std::size_t> head(all.begin(), all.begin() + split);
        std::vector<std::size_t> tail(all.begin() + split, all.end());
        Tensor prompt = embed(lm, head).matrix;
        auto got = forward(lm, prompt, embed(lm, tail));
        auto ref = sequence_logits(lm, all);
        for (std::size_t v = 0; v < 64; ++v) {
            EXPECT_NEAR(got.data()[v], ref.at(all.size() - 1, v), 1e-12) << "split " << split;
        }
    }
}

TEST(Forward, EmptyPromptIsBareInput) {
    auto lm = TinyLM::init(small_dims(), 4);
    std::vector<std::size_t> ids{10, 11, 2};
    auto got = forward(lm, Tensor(Shape{0, 16}), embed(lm, ids));
    auto ref = sequence_logits(lm, ids);
    for (std::size_t v = 0; v < 64; ++v) EXPECT_NEAR(got.data()[v], ref.at(2, v), 1e-12);
}

TEST(Forward, PromptRowOrderMatters) {
    auto lm = TinyLM::init(small_dims(), 5);
    auto prompt = random_prompt(3, 16, 2);
    Tensor swapped = concat_rows(slice_rows(prompt, 1, 3), slice_rows(prompt, 0, 1));
    std::vector<std::size_t> ids{4, 4, 8};
    auto a = forward(lm, prompt, embed(lm, ids));
    auto b = forward(lm, swapped, embed(lm, ids));
    double diff = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) diff = std::max(diff, std::abs(a.data()[i] - b.data()[i]));
    EXPECT_GT(diff, 1e-9);
}

TEST(Forward, TooLongThrows) {
    auto lm = TinyLM::init(small_dims(), 5);
    std::vector<std::size_t> ids(30, 3);
    EXPECT_THROW(forward(lm, random_prompt(3, 16, 0), embed(lm, ids)), std::length_error);
}

TEST(Forward, PromptGradientMatchesFiniteDifferences) {
    auto lm = TinyLM::init(small_dims(), 6);
    lm.freeze();
    auto prompt = random_prompt(3, 16, 9, true);
    std::vector<std::size_t> ids{2, 3, 3, 1};
    auto input = embed(lm, ids);
    std::vector<NamedTensor> params{{"X", prompt}};
    auto report = check_gradients(
        [&] { return softmax_cross_entropy(forward(lm, prompt, input), 6); }, params);
    EXPECT_TRUE(report.passed) << report.to_json().dump();
}

TEST(Pretrain, ZeroStepsOnlyFreezes) {
    auto lm = TinyLM::init(small_dims(), 1);
    const auto before = checksum(lm.parameters());
    std::vector<std::vector<std::size_t>> corpus{{2, 3, 1, 5}};
    PretrainOptions opts;
    opts.steps = 0;
    auto out = pretrain(lm, corpus, opts);
    EXPECT_TRUE(out.frozen());
    EXPECT_EQ(checksum(out.parameters()), before);
}

TEST(Pretrain, RejectsFrozenModel) {
    auto lm = TinyLM::init(small_dims(), 1);
    lm.freeze();
    std::vector<std::vector<std::size_t>> corpus{{2, 3, 1, 5}};
    EXPECT_THROW(pretrain(lm, corpus, {}), std::logic_error);
}

TEST(Pretrain, DeterministicAndLossDecreases) {
    auto vocab = Vocab::builtin();
    TaskSpec spec;
    spec.num_train = 256;
    spec.num_val = 0;
    spec.seed = 1000;
    auto corpus = pretraining_corpus(generate_task(spec, vocab).train, vocab,
                                     Verbalizer::builtin(vocab));
    PretrainOptions opts;
    opts.steps = 60;
    PretrainReport r1, r2;
    auto a = pretrain(TinyLM::init(small_dims(), 0), corpus, opts, &r1);
    auto b = pretrain(TinyLM::init(small_dims(), 0), corpus, opts, &r2);
    EXPECT_EQ(checksum(a.parameters()), checksum(b.parameters()));
    ASSERT_EQ(r1.losses.size(), 60u);
    EXPECT_LT(r1.losses.back(), r1.losses.front());
}

TEST(Checkpoint, SaveLoadRoundTrip) {
    auto lm = TinyLM::init(small_dims(), 11);
    lm.freeze();
    auto path = std::filesystem::temp_directory_path() / "lopt_test_lm.json";
    lm.save(path);
    auto back = TinyLM::load(path);
    std::filesystem::remove(path);
    EXPECT_EQ(back.dims(), lm.dims());
    EXPECT_TRUE(back.frozen());
    EXPECT_EQ(checksum(back.parameters()), checksum(lm.parameters()));
}
