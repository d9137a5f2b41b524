// SPDX-License-Identifier: Apache-2.0
#include "lopt/data.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "lopt/checkpoint.hpp"
#include "lopt/rng.hpp"

namespace lopt {

Vocab::Vocab(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
        const auto& tok = tokens_[i];
        if (tok.empty() || tok.find_first_of(" \t\r\n") != std::string::npos) {
            throw std::invalid_argument("vocab: token " + std::to_string(i) +
                                        " is empty or contains whitespace");
        }
        if (!index_.emplace(tok, i).second) {
            throw std::invalid_argument("vocab: duplicate token '" + tok + "'");
        }
    }
    for (const char* required : {"<pad>", "<eos>"}) {
        if (!contains(required)) {
            throw std::invalid_argument(std::string("vocab: missing reserved token ") + required);
        }
    }
}

Vocab Vocab::builtin() {
    std::vector<std::string> tokens{"<pad>", "<eos>", "a", "b", "key", "no", "yes"};
    for (int i = 0; tokens.size() < 64; ++i) {
        char buf[16];
        std::snprintf(buf, sizeof buf, "w%02d", i);
        tokens.emplace_back(buf);
    }
    return Vocab(std::move(tokens));
}

Vocab Vocab::load(const std::filesystem::path& path) {
    return Vocab(read_json_file(path).get<std::vector<std::string>>());
}

void Vocab::save(const std::filesystem::path& path) const {
    write_json_file(path, nlohmann::json(tokens_));
}

std::size_t Vocab::id(std::string_view token) const {
    auto it = index_.find(std::string(token));
    if (it == index_.end()) throw UnknownTokenError(std::string(token));
    return it->second;
}

bool Vocab::contains(std::string_view token) const {
    return index_.count(std::string(token)) > 0;
}

const std::string& Vocab::token(std::size_t id) const {
    if (id >= tokens_.size()) {
        throw std::out_of_range("vocab: id " + std::to_string(id) + " out of range");
    }
    return tokens_[id];
}

std::vector<std::size_t> Vocab::tokenize(std::string_view text) const {
    std::vector<std::size_t> ids;
    std::istringstream in{std::string(text)};
    std::string tok;
    while (in >> tok) ids.push_back(id(tok));
    return ids;
}

std::string Vocab::detokenize(const std::vector<std::size_t>& ids) const {
    std::string out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (i) out += ' ';
        out += token(ids[i]);
    }
    return out;
}

std::vector<std::size_t> Vocab::filler_ids() const {
    static const std::set<std::string> special{"<pad>", "<eos>", "a", "b", "key", "no", "yes"};
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
        if (!special.count(tokens_[i])) out.push_back(i);
    }
    return out;
}

Verbalizer Verbalizer::builtin(const Vocab& vocab) {
    return Verbalizer{{vocab.id("no"), vocab.id("yes")}};
}

void Verbalizer::validate(std::size_t vocab_size) const {
    std::set<std::size_t> seen;
    for (auto id : class_tokens) {
        if (id >= vocab_size) {
            throw std::invalid_argument("verbalizer: token id " + std::to_string(id) +
                                        " outside vocabulary");
        }
        if (!seen.insert(id).second) {
            throw std::invalid_argument("verbalizer: token id " + std::to_string(id) +
                                        " used for two classes");
        }
    }
}

std::string to_string(TaskKind k) { return k == TaskKind::majority ? "majority" : "keyword"; }

TaskKind parse_task_kind(std::string_view name) {
    if (name == "majority") return TaskKind::majority;
    if (name == "keyword") return TaskKind::keyword;
    throw std::invalid_argument("unknown task kind '" + std::string(name) + "'");
}

namespace {

std::vector<std::size_t> draw_majority(Rng& rng, std::size_t label, std::size_t seq_len,
                                       const Vocab& vocab,
                                       const std::vector<std::size_t>& fillers) {
    // Odd marker counts rule out ties.
    const std::size_t max_odd = seq_len % 2 ? seq_len : seq_len - 1;
    const std::size_t markers = 3 + 2 * rng.between(0, (max_odd - 3) / 2);
    const std::size_t winners = rng.between(markers / 2 + 1, markers);
    const std::size_t win_id = vocab.id(label == 0 ? "a" : "b");
    const std::size_t lose_id = vocab.id(label == 0 ? "b" : "a");

    std::vector<std::size_t> ids(seq_len);
    for (std::size_t i = 0; i < seq_len; ++i) {
        if (i < winners) {
            ids[i] = win_id;
        } else if (i < markers) {
            ids[i] = lose_id;
        } else {
            ids[i] = fillers[rng.between(0, fillers.size() - 1)];
        }
    }
    rng.shuffle(std::span(ids));
    return ids;
}

std::vector<std::size_t> draw_keyword(Rng& rng, std::size_t label, std::size_t seq_len,
                                      const Vocab& vocab,
                                      const std::vector<std::size_t>& fillers) {
    std::vector<std::size_t> ids(seq_len);
    for (auto& id : ids) id = fillers[rng.between(0, fillers.size() - 1)];
    if (label == 1) ids[rng.between(0, seq_len - 1)] = vocab.id("key");
    return ids;
}

}  // namespace

TaskSplit generate_task(const TaskSpec& spec, const Vocab& vocab) {
    if (spec.seq_len < 3) throw std::invalid_argument("generate_task: seq_len must be >= 3");
    if (spec.num_classes != 2) {
        throw std::invalid_argument("generate_task: built-in tasks are binary (num_classes=2)");
    }
    const auto fillers = vocab.filler_ids();
    if (fillers.empty()) throw std::invalid_argument("generate_task: vocabulary has no fillers");

    Rng rng(mix_seed(spec.seed, 3));
    std::set<std::vector<std::size_t>> seen;
    auto make_split = [&](std::size_t count) {
        std::vector<std::size_t> labels(count);
        for (std::size_t i = 0; i < count; ++i) labels[i] = i % 2;
        rng.shuffle(std::span(labels));
        Dataset ds;
        ds.reserve(count);
        for (auto label : labels) {
            std::vector<std::size_t> ids;
            std::size_t attempts = 0;
            do {
                if (++attempts > 10000) {
                    throw std::runtime_error(
                        "generate_task: cannot draw enough distinct sequences of length " +
                        std::to_string(spec.seq_len));
                }
                ids = spec.kind == TaskKind::majority
                          ? draw_majority(rng, label, spec.seq_len, vocab, fillers)
                          : draw_keyword(rng, label, spec.seq_len, vocab, fillers);
            } while (!seen.insert(ids).second);
            ds.push_back({ids, label, vocab.detokenize(ids)});
        }
        return ds;
    };
    TaskSplit split;
    split.train = make_split(spec.num_train);
    split.val = make_split(spec.num_val);
    return split;
}

std::size_t majority_label(const std::vector<std::size_t>& ids, const Vocab& vocab) {
    const auto a = static_cast<std::size_t>(std::count(ids.begin(), ids.end(), vocab.id("a")));
    const auto b = static_cast<std::size_t>(std::count(ids.begin(), ids.end(), vocab.id("b")));
    return a > b ? 0 : 1;
}

std::size_t keyword_label(const std::vector<std::size_t>& ids, const Vocab& vocab) {
    return std::find(ids.begin(), ids.end(), vocab.id("key")) != ids.end() ? 1 : 0;
}

Dataset load_jsonl(const std::filesystem::path& path, const Vocab& vocab) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    Dataset ds;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw DatasetFormatError(lineno, std::string("invalid JSON: ") + e.what());
        }
        if (!j.is_object()) throw DatasetFormatError(lineno, "expected an object");
        if (!j.contains("text") || !j["text"].is_string()) {
            throw DatasetFormatError(lineno, "missing string field \"text\"");
        }
        if (!j.contains("label") || !j["label"].is_number_integer() || j["label"].get<long long>() < 0) {
            throw DatasetFormatError(lineno, "missing non-negative integer field \"label\"");
        }
        Example ex;
        ex.raw_text = j["text"].get<std::string>();
        ex.label = j["label"].get<std::size_t>();
        try {
            ex.token_ids = vocab.tokenize(ex.raw_text);
        } catch (const UnknownTokenError& e) {
            throw DatasetFormatError(lineno, e.what());
        }
        ds.push_back(std::move(ex));
    }
    return ds;
}

void write_jsonl(const Dataset& ds, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    for (const auto& ex : ds) {
        out << nlohmann::json{{"text", ex.raw_text}, {"label", ex.label}}.dump() << '\n';
    }
}

std::vector<std::size_t> classification_input(const Example& ex, const Vocab& vocab) {
    auto ids = ex.token_ids;
    ids.push_back(vocab.eos_id());
    return ids;
}

std::vector<std::vector<std::size_t>> pretraining_corpus(const Dataset& ds, const Vocab& vocab,
                                                         const Verbalizer& verbalizer) {
    std::vector<std::vector<std::size_t>> corpus;
    corpus.reserve(ds.size());
    for (const auto& ex : ds) {
        if (ex.label >= verbalizer.class_tokens.size()) {
            throw std::invalid_argument("pretraining_corpus: label " + std::to_string(ex.label) +
                                        " has no verbalizer token");
        }
        auto ids = classification_input(ex, vocab);
        ids.push_back(verbalizer.class_tokens[ex.label]);
        corpus.push_back(std::move(ids));
    }
    return corpus;
}

std::size_t classify(const Tensor& logits, const Verbalizer& verbalizer) {
    if (verbalizer.class_tokens.empty()) throw std::invalid_argument("classify: empty verbalizer");
    const auto values = logits.data();
    std::size_t best = 0;
    for (std::size_t c = 0; c < verbalizer.class_tokens.size(); ++c) {
        const auto id = verbalizer.class_tokens[c];
        if (id >= values.size()) {
            throw std::out_of_range("classify: verbalizer token " + std::to_string(id) +
                                    " beyond " + std::to_string(values.size()) + " logits");
        }
        if (values[id] > values[verbalizer.class_tokens[best]]) best = c;
    }
    return best;
}

}  // namespace lopt
