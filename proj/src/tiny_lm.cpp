// SPDX-License-Identifier: Apache-2.0
#include "lopt/tiny_lm.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>

#include "lopt/optimizer.hpp"
#include "lopt/rng.hpp"

namespace lopt {

void ModelDims::validate() const {
    if (vocab_size == 0 || embed_dim == 0 || layers == 0 || heads == 0 || ffn_mult == 0 ||
        max_seq == 0) {
        throw std::invalid_argument("model dims: all sizes must be positive");
    }
    if (embed_dim % heads != 0) {
        throw std::invalid_argument("model dims: embed_dim " + std::to_string(embed_dim) +
                                    " not divisible by " + std::to_string(heads) + " heads");
    }
}

void to_json(nlohmann::json& j, const ModelDims& d) {
    j = {{"vocab_size", d.vocab_size}, {"embed_dim", d.embed_dim}, {"layers", d.layers},
         {"heads", d.heads},           {"ffn_mult", d.ffn_mult},   {"max_seq", d.max_seq}};
}

void from_json(const nlohmann::json& j, ModelDims& d) {
    j.at("vocab_size").get_to(d.vocab_size);
    j.at("embed_dim").get_to(d.embed_dim);
    j.at("layers").get_to(d.layers);
    j.at("heads").get_to(d.heads);
    j.at("ffn_mult").get_to(d.ffn_mult);
    j.at("max_seq").get_to(d.max_seq);
}

Tensor sinusoidal_positions(std::size_t max_seq, std::size_t dim) {
    Tensor table(Shape{max_seq, dim});
    auto out = table.mutable_data();
    for (std::size_t p = 0; p < max_seq; ++p) {
        for (std::size_t i = 0; i < dim; i += 2) {
            const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(dim));
            out[p * dim + i] = std::sin(static_cast<double>(p) * freq);
            if (i + 1 < dim) out[p * dim + i + 1] = std::cos(static_cast<double>(p) * freq);
        }
    }
    return table;
}

TinyLM TinyLM::init(const ModelDims& dims, std::uint64_t seed) {
    dims.validate();
    TinyLM lm;
    lm.dims_ = dims;
    lm.seed_ = seed;
    Rng rng(mix_seed(seed, 0));
    const std::size_t d = dims.embed_dim, f = dims.embed_dim * dims.ffn_mult;
    auto normal = [&](Shape shape) {
        Tensor t(std::move(shape), 0.0, true);
        for (auto& v : t.mutable_data()) v = rng.normal(0.0, 0.02);
        return t;
    };
    auto constant = [](std::size_t n, double v) { return Tensor(Shape{n}, v, true); };

    lm.embedding_ = normal({dims.vocab_size, d});
    lm.positional_ = sinusoidal_positions(dims.max_seq, d);
    for (std::size_t l = 0; l < dims.layers; ++l) {
        Block b;
        b.ln1_gain = constant(d, 1.0);
        b.ln1_bias = constant(d, 0.0);
        b.w_q = normal({d, d});
        b.b_q = constant(d, 0.0);
        b.w_k = normal({d, d});
        b.b_k = constant(d, 0.0);
        b.w_v = normal({d, d});
        b.b_v = constant(d, 0.0);
        b.w_o = normal({d, d});
        b.b_o = constant(d, 0.0);
        b.ln2_gain = constant(d, 1.0);
        b.ln2_bias = constant(d, 0.0);
        b.w_up = normal({d, f});
        b.b_up = constant(f, 0.0);
        b.w_down = normal({f, d});
        b.b_down = constant(d, 0.0);
        lm.blocks_.push_back(std::move(b));
    }
    lm.lnf_gain_ = constant(d, 1.0);
    lm.lnf_bias_ = constant(d, 0.0);
    lm.unembed_ = normal({d, dims.vocab_size});
    return lm;
}

TinyLM::TinyLM(const TinyLM& other)
    : dims_(other.dims_), seed_(other.seed_), frozen_(other.frozen_) {
    // Deep copy: a copied model never aliases the original's weights.
    auto copy = [](const Tensor& t) { return t.clone(t.requires_grad()); };
    embedding_ = copy(other.embedding_);
    positional_ = copy(other.positional_);
    for (const auto& b : other.blocks_) {
        blocks_.push_back({copy(b.ln1_gain), copy(b.ln1_bias), copy(b.w_q), copy(b.b_q),
                           copy(b.w_k), copy(b.b_k), copy(b.w_v), copy(b.b_v), copy(b.w_o),
                           copy(b.b_o), copy(b.ln2_gain), copy(b.ln2_bias), copy(b.w_up),
                           copy(b.b_up), copy(b.w_down), copy(b.b_down)});
    }
    lnf_gain_ = copy(other.lnf_gain_);
    lnf_bias_ = copy(other.lnf_bias_);
    unembed_ = copy(other.unembed_);
}

TinyLM& TinyLM::operator=(const TinyLM& other) {
    if (this != &other) *this = TinyLM(other);
    return *this;
}

std::vector<NamedTensor> TinyLM::parameters() const {
    std::vector<NamedTensor> out;
    out.push_back({"embedding", embedding_});
    for (std::size_t l = 0; l < blocks_.size(); ++l) {
        const auto& b = blocks_[l];
        const std::string p = "block" + std::to_string(l) + ".";
        out.push_back({p + "ln1_gain", b.ln1_gain});
        out.push_back({p + "ln1_bias", b.ln1_bias});
        out.push_back({p + "w_q", b.w_q});
        out.push_back({p + "b_q", b.b_q});
        out.push_back({p + "w_k", b.w_k});
        out.push_back({p + "b_k", b.b_k});
        out.push_back({p + "w_v", b.w_v});
        out.push_back({p + "b_v", b.b_v});
        out.push_back({p + "w_o", b.w_o});
        out.push_back({p + "b_o", b.b_o});
        out.push_back({p + "ln2_gain", b.ln2_gain});
        out.push_back({p + "ln2_bias", b.ln2_bias});
        out.push_back({p + "w_up", b.w_up});
        out.push_back({p + "b_up", b.b_up});
        out.push_back({p + "w_down", b.w_down});
        out.push_back({p + "b_down", b.b_down});
    }
    out.push_back({"final_gain", lnf_gain_});
    out.push_back({"final_bias", lnf_bias_});
    out.push_back({"unembedding", unembed_});
    return out;
}

void TinyLM::freeze() {
    for (auto& p : parameters()) p.tensor.set_requires_grad(false);
    frozen_ = true;
}

nlohmann::json TinyLM::to_json() const {
    nlohmann::json tensors = nlohmann::json::object();
    for (const auto& p : parameters()) tensors[p.name] = tensor_to_json(p.tensor);
    return {{"format", kCheckpointFormat},
            {"dims", dims_},
            {"seed", seed_},
            {"frozen", frozen_},
            {"tensors", std::move(tensors)}};
}

TinyLM TinyLM::from_json(const nlohmann::json& j) {
    if (j.value("format", std::string()) != kCheckpointFormat) {
        throw std::runtime_error("model checkpoint: expected format '" +
                                 std::string(kCheckpointFormat) + "'");
    }
    TinyLM lm = init(j.at("dims").get<ModelDims>(), j.at("seed").get<std::uint64_t>());
    const auto& tensors = j.at("tensors");
    for (auto& p : lm.parameters()) {
        if (!tensors.contains(p.name)) {
            throw std::runtime_error("model checkpoint: missing tensor '" + p.name + "'");
        }
        Tensor loaded = tensor_from_json(tensors.at(p.name));
        if (loaded.shape() != p.tensor.shape()) {
            throw std::runtime_error("model checkpoint: tensor '" + p.name + "' has shape " +
                                     shape_str(loaded.shape()) + ", expected " +
                                     shape_str(p.tensor.shape()));
        }
        std::copy(loaded.data().begin(), loaded.data().end(), p.tensor.mutable_data().begin());
    }
    if (j.value("frozen", true)) lm.freeze();
    return lm;
}

void TinyLM::save(const std::filesystem::path& path) const { write_json_file(path, to_json()); }

TinyLM TinyLM::load(const std::filesystem::path& path) { return from_json(read_json_file(path)); }

InputEmbeddings embed(const TinyLM& lm, std::span<const std::size_t> token_ids) {
    for (auto id : token_ids) {
        if (id >= lm.dims().vocab_size) {
            throw std::out_of_range("embed: token id " + std::to_string(id) +
                                    " out of range for vocabulary of " +
                                    std::to_string(lm.dims().vocab_size));
        }
    }
    Tensor rows = gather_rows(lm.embedding(), token_ids);
    return {rows, std::vector<std::size_t>(token_ids.begin(), token_ids.end())};
}

namespace {

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    return add_row(matmul(x, w), b);
}

Tensor mlp(const Block& b, const Tensor& h) {
    static const Nonlinearity gelu{Activation::gelu, 1.0};
    Tensor a = layer_norm(h, b.ln2_gain, b.ln2_bias);
    return linear(apply_nonlinearity(linear(a, b.w_up, b.b_up), gelu), b.w_down, b.b_down);
}

Tensor positions(const TinyLM& lm, std::size_t begin, std::size_t count) {
    if (begin + count > lm.dims().max_seq) {
        throw std::length_error("sequence of " + std::to_string(begin + count) +
                                " positions exceeds max_seq " + std::to_string(lm.dims().max_seq));
    }
    return slice_rows(lm.positional(), begin, begin + count);
}

enum class Readout { last_row, all_rows };

// Runs rows at absolute positions [offset, offset + t) through every block.
Tensor run_blocks(const TinyLM& lm, Tensor h, const PrefixCache* prefix, Readout readout) {
    const auto& dims = lm.dims();
    const std::size_t offset = prefix ? prefix->length : 0;
    const std::size_t t = h.rows();
    for (std::size_t l = 0; l < lm.blocks().size(); ++l) {
        const Block& b = lm.blocks()[l];
        const bool last = l + 1 == lm.blocks().size();
        Tensor a = layer_norm(h, b.ln1_gain, b.ln1_bias);
        Tensor k = linear(a, b.w_k, b.b_k);
        Tensor v = linear(a, b.w_v, b.b_v);
        if (prefix && prefix->length > 0) {
            k = concat_rows(prefix->keys[l], k);
            v = concat_rows(prefix->values[l], v);
        }
        std::size_t query_offset = offset;
        if (last && readout == Readout::last_row) {
            a = slice_rows(a, t - 1, t);
            h = slice_rows(h, t - 1, t);
            query_offset = offset + t - 1;
        }
        Tensor q = linear(a, b.w_q, b.b_q);
        Tensor att = causal_attention(q, k, v, dims.heads, query_offset);
        h = add(h, linear(att, b.w_o, b.b_o));
        h = add(h, mlp(b, h));
    }
    h = layer_norm(h, lm.final_gain(), lm.final_bias());
    return matmul(h, lm.unembedding());
}

}  // namespace

PrefixCache encode_prefix(const TinyLM& lm, const Tensor& prompt) {
    const auto& dims = lm.dims();
    if (prompt.rank() != 2 || prompt.cols() != dims.embed_dim) {
        throw ShapeError("encode_prefix: prompt " + shape_str(prompt.shape()) +
                         " does not have width " + std::to_string(dims.embed_dim));
    }
    PrefixCache cache;
    cache.length = prompt.rows();
    if (cache.length == 0) {
        for (std::size_t l = 0; l < dims.layers; ++l) {
            cache.keys.emplace_back(Shape{0, dims.embed_dim});
            cache.values.emplace_back(Shape{0, dims.embed_dim});
        }
        return cache;
    }
    Tensor h = add(prompt, positions(lm, 0, cache.length));
    for (std::size_t l = 0; l < lm.blocks().size(); ++l) {
        const Block& b = lm.blocks()[l];
        Tensor a = layer_norm(h, b.ln1_gain, b.ln1_bias);
        Tensor k = linear(a, b.w_k, b.b_k);
        Tensor v = linear(a, b.w_v, b.b_v);
        cache.keys.push_back(k);
        cache.values.push_back(v);
        if (l + 1 == lm.blocks().size()) break;
        Tensor q = linear(a, b.w_q, b.b_q);
        h = add(h, linear(causal_attention(q, k, v, dims.heads, 0), b.w_o, b.b_o));
        h = add(h, mlp(b, h));
    }
    return cache;
}

Tensor forward(const TinyLM& lm, const PrefixCache& prefix, const InputEmbeddings& input) {
    const std::size_t t = input.matrix.rows();
    if (t == 0) throw std::invalid_argument("forward: input has no tokens");
    Tensor h = add(input.matrix, positions(lm, prefix.length, t));
    Tensor logits = run_blocks(lm, h, &prefix, Readout::last_row);
    return reshape(logits, Shape{lm.dims().vocab_size});
}

Tensor forward(const TinyLM& lm, const Tensor& prompt, const InputEmbeddings& input) {
    if (prompt.rank() == 2 && prompt.rows() + input.matrix.rows() > lm.dims().max_seq) {
        throw std::length_error("forward: prompt of " + std::to_string(prompt.rows()) +
                                " plus input of " + std::to_string(input.matrix.rows()) +
                                " exceeds max_seq " + std::to_string(lm.dims().max_seq));
    }
    return forward(lm, encode_prefix(lm, prompt), input);
}

Tensor sequence_logits(const TinyLM& lm, std::span<const std::size_t> token_ids) {
    if (token_ids.empty()) throw std::invalid_argument("sequence_logits: empty sequence");
    InputEmbeddings in = embed(lm, token_ids);
    Tensor h = add(in.matrix, positions(lm, 0, token_ids.size()));
    return run_blocks(lm, h, nullptr, Readout::all_rows);
}

TinyLM pretrain(TinyLM lm, std::span<const std::vector<std::size_t>> corpus,
                const PretrainOptions& opts, PretrainReport* report) {
    if (lm.frozen()) throw std::logic_error("pretrain: model is already frozen");
    if (opts.steps > 0 && corpus.empty()) throw std::invalid_argument("pretrain: empty corpus");
    for (const auto& seq : corpus) {
        if (seq.size() < 2) throw std::invalid_argument("pretrain: sequences need >= 2 tokens");
    }
    auto params = lm.parameters();
    Adafactor opt(AdafactorOptions{.lr = opts.lr});
    Rng rng(mix_seed(opts.seed, 1));
    std::vector<std::size_t> order(corpus.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::size_t cursor = order.size();
    const std::size_t batch = std::max<std::size_t>(1, opts.batch_size);

    for (std::size_t step = 0; step < opts.steps; ++step) {
        for (auto& p : params) p.tensor.zero_grad();
        Tensor total;
        for (std::size_t b = 0; b < batch; ++b) {
            if (cursor == order.size()) {
                rng.shuffle(std::span(order));
                cursor = 0;
            }
            const auto& seq = corpus[order[cursor++]];
            std::span<const std::size_t> ids(seq);
            Tensor logits = sequence_logits(lm, ids.first(ids.size() - 1));
            Tensor loss = mean_cross_entropy(logits, ids.subspan(1));
            total = b == 0 ? loss : add(total, loss);
        }
        Tensor mean = scale(total, 1.0 / static_cast<double>(batch));
        backward(mean);
        if (report) report->losses.push_back(mean.item());
        opt.step(params);
    }
    lm.freeze();
    return lm;
}

}  // namespace lopt
