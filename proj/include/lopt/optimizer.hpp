// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "lopt/checkpoint.hpp"
#include "lopt/tensor.hpp"

namespace lopt {

struct AdafactorOptions {
    double lr = 0.3;
    double eps1 = 1e-30;  // added to squared gradients
    double eps2 = 1e-3;   // floor on parameter RMS, relative step only
    double clip_threshold = 1.0;
    double decay_exponent = 0.8;
    /// Off by default: the step size is exactly `lr`. When on, the step is
    /// min(1e-2, 1/sqrt(t)) * max(eps2, rms(param)).
    bool relative_step = false;
};

/// Second-moment accumulators for one parameter. Matrices keep a row and a
/// column accumulator; anything else keeps a full one.
struct SecondMoment {
    bool factored = false;
    std::vector<double> row;   // length rows (factored)
    std::vector<double> col;   // length cols (factored)
    std::vector<double> full;  // length numel (unfactored)
};

struct StepResult {
    bool applied = true;
    std::string message;  // why the step was skipped
};

/// Adafactor without momentum. Accumulator state is keyed by position in
/// the parameter list, which must stay the same across steps.
class Adafactor {
public:
    explicit Adafactor(AdafactorOptions opts = {}) : opts_(opts) {}

    /// Updates every parameter from its own accumulated gradient.
    StepResult step(std::span<const NamedTensor> params);
    /// Same, with explicit gradients (one per parameter, same shape).
    StepResult step(std::span<const NamedTensor> params,
                    std::span<const std::vector<double>> grads);

    std::size_t t() const { return t_; }
    const AdafactorOptions& options() const { return opts_; }
    const std::vector<SecondMoment>& moments() const { return moments_; }

private:
    AdafactorOptions opts_;
    std::size_t t_ = 0;
    std::vector<SecondMoment> moments_;
};

/// Rank-1 reconstruction outer(row, col) / mean(row). Zero when row sums to 0.
std::vector<double> factored_second_moment(std::span<const double> row,
                                           std::span<const double> col);

double rms(std::span<const double> v);

struct SgdOptions {
    double lr = 0.1;
};

class Sgd {
public:
    explicit Sgd(SgdOptions opts = {}) : opts_(opts) {}
    StepResult step(std::span<const NamedTensor> params);
    StepResult step(std::span<const NamedTensor> params,
                    std::span<const std::vector<double>> grads);

private:
    SgdOptions opts_;
};

}  // namespace lopt
