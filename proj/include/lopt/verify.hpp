// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lopt/checkpoint.hpp"
#include "lopt/ops.hpp"
#include "lopt/prompt.hpp"
#include "lopt/tensor.hpp"

namespace lopt {

// ---------------------------------------------------------------------------
// Finite differences
// ---------------------------------------------------------------------------

/// Central differences (f(x + eps·e_i) - f(x - eps·e_i)) / 2eps for every
/// coordinate of every tensor. Values are perturbed in place and restored.
std::vector<std::vector<double>> finite_diff_grad(const std::function<double()>& f,
                                                  std::span<const NamedTensor> params,
                                                  double eps = 1e-5);

/// |a - b| / max(|a|, |b|, floor). The floor keeps coordinates whose true
/// derivative is zero from reporting noise as error.
double relative_error(double analytic, double numeric, double floor);

struct GradReport {
    struct Entry {
        std::string name;
        double max_rel_error = 0.0;
        double mean_rel_error = 0.0;
    };
    std::vector<Entry> params;
    double eps = 0.0;
    double threshold = 0.0;
    bool passed = false;

    double max_rel_error() const;
    nlohmann::json to_json() const;
};

struct GradcheckOptions {
    double eps = 1e-5;
    double threshold = 1e-4;
    double floor = 1e-8;
};

/// Compares the tape gradient of `loss_fn` against finite differences for
/// each tensor in `params`. `loss_fn` must rebuild its graph on every call.
GradReport check_gradients(const std::function<Tensor()>& loss_fn,
                           std::span<const NamedTensor> params,
                           const GradcheckOptions& opts = {});

/// End-to-end check through materialize + a frozen random tiny LM.
struct PromptGradcheckSpec {
    PromptMethod method = PromptMethod::lopt1;
    Nonlinearity sigma{Activation::elu, 1.0};
    std::size_t n = 4, d = 16, rank = 2;
    std::size_t layers = 1, heads = 2, vocab = 64;
    std::uint64_t seed = 0;
    GradcheckOptions options;
    /// Redraw parameters until every activation input is at least this far
    /// from a kink (relu/elu only).
    double kink_margin = 1e-4;
};

GradReport prompt_gradcheck(const PromptGradcheckSpec& spec);

// ---------------------------------------------------------------------------
// Singular values
// ---------------------------------------------------------------------------

/// min(rows, cols) singular values in descending order, by one-sided
/// (Hestenes) Jacobi rotations.
std::vector<double> singular_values(const Tensor& x);

/// Count of singular values above tol·σ₁; 0 for a zero matrix.
std::size_t effective_rank(const Tensor& x, double tol = 1e-6);

struct RankReport {
    std::vector<double> singular_values;
    std::size_t effective_rank = 0;
    double tolerance = 0.0;

    nlohmann::json to_json() const;
};

RankReport rank_report(const Tensor& x, double tol = 1e-6);

}  // namespace lopt
