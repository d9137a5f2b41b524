// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "lopt/tensor.hpp"

namespace lopt {

/// Closed whitespace-token vocabulary.
class Vocab {
public:
    explicit Vocab(std::vector<std::string> tokens);

    /// 64 symbols: <pad> <eos> a b key no yes w00..w56.
    static Vocab builtin();
    static Vocab load(const std::filesystem::path& path);
    void save(const std::filesystem::path& path) const;

    std::size_t size() const { return tokens_.size(); }
    std::size_t id(std::string_view token) const;
    bool contains(std::string_view token) const;
    const std::string& token(std::size_t id) const;
    const std::vector<std::string>& tokens() const { return tokens_; }

    std::size_t pad_id() const { return id("<pad>"); }
    std::size_t eos_id() const { return id("<eos>"); }

    std::vector<std::size_t> tokenize(std::string_view text) const;
    std::string detokenize(const std::vector<std::size_t>& ids) const;

    /// Ordinary tokens that carry no task meaning.
    std::vector<std::size_t> filler_ids() const;

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, std::size_t> index_;
};

class UnknownTokenError : public std::runtime_error {
public:
    explicit UnknownTokenError(const std::string& token)
        : std::runtime_error("unknown token '" + token + "'"), token_(token) {}
    const std::string& token() const { return token_; }

private:
    std::string token_;
};

struct Example {
    std::vector<std::size_t> token_ids;
    std::size_t label = 0;
    std::string raw_text;
};

using Dataset = std::vector<Example>;

struct Verbalizer {
    std::vector<std::size_t> class_tokens;

    /// class 0 -> "no", class 1 -> "yes".
    static Verbalizer builtin(const Vocab& vocab);
    void validate(std::size_t vocab_size) const;
};

enum class TaskKind { majority, keyword };

std::string to_string(TaskKind k);
TaskKind parse_task_kind(std::string_view name);

struct TaskSpec {
    TaskKind kind = TaskKind::majority;
    std::size_t num_train = 512;
    std::size_t num_val = 128;
    std::size_t seq_len = 12;
    std::size_t num_classes = 2;
    std::uint64_t seed = 0;
};

struct TaskSplit {
    Dataset train;
    Dataset val;
};

/// majority: an odd number (>= 3) of "a"/"b" markers among fillers, label 0
/// when "a" is more frequent. keyword: label 1 when "key" occurs. Splits are
/// class-balanced within one and contain no sequence twice.
TaskSplit generate_task(const TaskSpec& spec, const Vocab& vocab);

/// Label by direct counting; independent of the generator.
std::size_t majority_label(const std::vector<std::size_t>& ids, const Vocab& vocab);
std::size_t keyword_label(const std::vector<std::size_t>& ids, const Vocab& vocab);

class DatasetFormatError : public std::runtime_error {
public:
    DatasetFormatError(std::size_t line, const std::string& what)
        : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}
    std::size_t line() const { return line_; }

private:
    std::size_t line_;
};

/// One {"text": ..., "label": ...} object per line. Blank lines are skipped.
Dataset load_jsonl(const std::filesystem::path& path, const Vocab& vocab);
void write_jsonl(const Dataset& ds, const std::filesystem::path& path);

/// Model input for classification: the example followed by <eos>.
std::vector<std::size_t> classification_input(const Example& ex, const Vocab& vocab);
/// Pretraining sequence: classification input plus the label's verbalizer token.
std::vector<std::vector<std::size_t>> pretraining_corpus(const Dataset& ds, const Vocab& vocab,
                                                         const Verbalizer& verbalizer);

/// Argmax over the verbalizer tokens' logits; ties go to the lower class.
std::size_t classify(const Tensor& logits, const Verbalizer& verbalizer);

}  // namespace lopt
