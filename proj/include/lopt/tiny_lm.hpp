// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "lopt/checkpoint.hpp"
#include "lopt/ops.hpp"
#include "lopt/tensor.hpp"

namespace lopt {

struct ModelDims {
    std::size_t vocab_size = 64;
    std::size_t embed_dim = 64;
    std::size_t layers = 2;
    std::size_t heads = 2;
    std::size_t ffn_mult = 4;
    std::size_t max_seq = 64;

    void validate() const;
    bool operator==(const ModelDims&) const = default;
};

void to_json(nlohmann::json& j, const ModelDims& d);
void from_json(const nlohmann::json& j, ModelDims& d);

struct Block {
    Tensor ln1_gain, ln1_bias;
    Tensor w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o;
    Tensor ln2_gain, ln2_bias;
    Tensor w_up, b_up, w_down, b_down;
};

/// Pre-LN decoder-only transformer with sinusoidal positions and a GELU MLP.
class TinyLM {
public:
    /// Fresh trainable model, weights N(0, 0.02), layer-norm gains 1.
    static TinyLM init(const ModelDims& dims, std::uint64_t seed);

    TinyLM(const TinyLM& other);
    TinyLM& operator=(const TinyLM& other);
    TinyLM(TinyLM&&) noexcept = default;
    TinyLM& operator=(TinyLM&&) noexcept = default;

    const ModelDims& dims() const { return dims_; }
    std::uint64_t seed() const { return seed_; }
    bool frozen() const { return frozen_; }
    /// Clears requires_grad (and any gradient) on every parameter.
    void freeze();

    const Tensor& embedding() const { return embedding_; }
    const Tensor& positional() const { return positional_; }
    const std::vector<Block>& blocks() const { return blocks_; }
    const Tensor& final_gain() const { return lnf_gain_; }
    const Tensor& final_bias() const { return lnf_bias_; }
    const Tensor& unembedding() const { return unembed_; }

    /// Every learned tensor in a fixed order (positional table excluded).
    std::vector<NamedTensor> parameters() const;

    nlohmann::json to_json() const;
    static TinyLM from_json(const nlohmann::json& j);
    void save(const std::filesystem::path& path) const;
    static TinyLM load(const std::filesystem::path& path);

private:
    TinyLM() = default;

    ModelDims dims_;
    std::uint64_t seed_ = 0;
    bool frozen_ = false;
    Tensor embedding_, positional_;
    std::vector<Block> blocks_;
    Tensor lnf_gain_, lnf_bias_, unembed_;
};

/// sin/cos table, row p = position p.
Tensor sinusoidal_positions(std::size_t max_seq, std::size_t dim);

struct InputEmbeddings {
    Tensor matrix;  // t×d
    std::vector<std::size_t> token_ids;
};

InputEmbeddings embed(const TinyLM& lm, std::span<const std::size_t> token_ids);

/// Per-layer keys and values of the prompt rows. With causal attention the
/// prompt rows never see the input, so one cache serves a whole batch.
struct PrefixCache {
    std::size_t length = 0;
    std::vector<Tensor> keys;
    std::vector<Tensor> values;
};

PrefixCache encode_prefix(const TinyLM& lm, const Tensor& prompt);

/// Logits [V] at the final input position of [prompt; input].
Tensor forward(const TinyLM& lm, const PrefixCache& prefix, const InputEmbeddings& input);
Tensor forward(const TinyLM& lm, const Tensor& prompt, const InputEmbeddings& input);

/// Next-token logits [T×V] at every position of a bare token sequence.
Tensor sequence_logits(const TinyLM& lm, std::span<const std::size_t> token_ids);

struct PretrainOptions {
    std::size_t steps = 500;
    double lr = 2e-3;
    std::size_t batch_size = 16;
    std::uint64_t seed = 0;
};

struct PretrainReport {
    std::vector<double> losses;  // one per step, batch mean
};

/// Next-token training on `corpus`; the returned model is frozen.
TinyLM pretrain(TinyLM lm, std::span<const std::vector<std::size_t>> corpus,
                const PretrainOptions& opts, PretrainReport* report = nullptr);

}  // namespace lopt
