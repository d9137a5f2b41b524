// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "lopt/checkpoint.hpp"
#include "lopt/ops.hpp"
#include "lopt/tensor.hpp"

namespace lopt {

enum class PromptMethod { full, lopt1, lopt2 };

std::string to_string(PromptMethod m);
PromptMethod parse_method(std::string_view name);

/// Trainable n×d prompt.
struct FullPrompt {
    Tensor x;
};

/// X = U·V with U:[n×r], V:[r×d].
struct LowRankPrompt {
    Tensor u, v;
};

/// X = sigma(X0·U)·V with fixed X0:[n×d], U:[d×r], V:[r×d].
struct ProjectedPrompt {
    Tensor x0, u, v;
    Nonlinearity sigma;
};

class PromptParameterization {
public:
    /// Every matrix (including X0) is drawn i.i.d. uniform in [-0.5, 0.5].
    /// `rank` is ignored for the full method.
    static PromptParameterization init(PromptMethod method, std::size_t n, std::size_t d,
                                       std::size_t rank, Nonlinearity sigma, std::uint64_t seed);

    PromptMethod method() const;
    std::size_t n() const { return n_; }
    std::size_t d() const { return d_; }
    /// 0 for the full method.
    std::size_t rank() const { return rank_; }
    Nonlinearity sigma() const { return sigma_; }
    const auto& state() const { return state_; }

    /// The n×d prompt, recorded on the graph when gradients are on.
    Tensor materialize() const;
    std::vector<NamedTensor> trainable_parameters() const;
    /// Trainable tensors plus fixed ones (X0).
    std::vector<NamedTensor> all_tensors() const;
    std::size_t parameter_count() const;

    nlohmann::json to_json() const;
    static PromptParameterization from_json(const nlohmann::json& j);
    void save(const std::filesystem::path& path) const;
    static PromptParameterization load(const std::filesystem::path& path);

private:
    PromptParameterization() = default;

    std::size_t n_ = 0, d_ = 0, rank_ = 0;
    Nonlinearity sigma_;
    std::variant<FullPrompt, LowRankPrompt, ProjectedPrompt> state_;
};

/// full: n·d, lopt1: r·(n+d), lopt2: 2·r·d.
std::size_t parameter_count(PromptMethod method, std::size_t n, std::size_t d, std::size_t r);

/// Percent change in trainable parameters against a full prompt of
/// baseline_n × baseline_d. Unrounded; see format_rate.
double reduction_rate(PromptMethod method, std::size_t n, std::size_t d, std::size_t r,
                      std::size_t baseline_n, std::size_t baseline_d);

/// Two-decimal percent string, e.g. "-79.84%".
std::string format_rate(double percent);
double round_to_cents(double percent);

/// floor(n/4), at least 1.
std::size_t default_rank(std::size_t n);

}  // namespace lopt
