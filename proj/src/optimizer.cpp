// SPDX-License-Identifier: Apache-2.0
#include "lopt/optimizer.hpp"

#include <algorithm>
#include <cmath>

namespace lopt {

namespace {

std::vector<std::vector<double>> collect_grads(std::span<const NamedTensor> params) {
    std::vector<std::vector<double>> grads;
    grads.reserve(params.size());
    for (const auto& p : params) {
        if (p.tensor.has_grad()) {
            grads.emplace_back(p.tensor.grad().begin(), p.tensor.grad().end());
        } else {
            grads.emplace_back(p.tensor.size(), 0.0);
        }
    }
    return grads;
}

// Shape and finiteness checks shared by both optimizers. Throws on shape
// mismatch; returns a skip message on non-finite values.
std::string check_grads(std::span<const NamedTensor> params,
                        std::span<const std::vector<double>> grads) {
    if (params.size() != grads.size()) {
        throw ShapeError("optimizer: " + std::to_string(grads.size()) + " gradients for " +
                         std::to_string(params.size()) + " parameters");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (grads[i].size() != params[i].tensor.size()) {
            throw ShapeError("optimizer: gradient for '" + params[i].name + "' has " +
                             std::to_string(grads[i].size()) + " values, parameter is " +
                             shape_str(params[i].tensor.shape()));
        }
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        for (double g : grads[i]) {
            if (!std::isfinite(g)) return "non-finite gradient in '" + params[i].name + "'";
        }
    }
    return {};
}

}  // namespace

double rms(std::span<const double> v) {
    if (v.empty()) return 0.0;
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s / static_cast<double>(v.size()));
}

std::vector<double> factored_second_moment(std::span<const double> row,
                                           std::span<const double> col) {
    std::vector<double> out(row.size() * col.size(), 0.0);
    double mean_row = 0.0;
    for (double r : row) mean_row += r;
    mean_row /= static_cast<double>(row.size());
    if (mean_row == 0.0) return out;
    for (std::size_t i = 0; i < row.size(); ++i)
        for (std::size_t j = 0; j < col.size(); ++j)
            out[i * col.size() + j] = row[i] * col[j] / mean_row;
    return out;
}

StepResult Adafactor::step(std::span<const NamedTensor> params) {
    const auto grads = collect_grads(params);
    return step(params, grads);
}

StepResult Adafactor::step(std::span<const NamedTensor> params,
                           std::span<const std::vector<double>> grads) {
    if (auto msg = check_grads(params, grads); !msg.empty()) return {false, msg};
    if (moments_.empty()) {
        moments_.resize(params.size());
        for (std::size_t i = 0; i < params.size(); ++i) {
            const auto& t = params[i].tensor;
            auto& m = moments_[i];
            m.factored = t.rank() == 2;
            if (m.factored) {
                m.row.assign(t.rows(), 0.0);
                m.col.assign(t.cols(), 0.0);
            } else {
                m.full.assign(t.size(), 0.0);
            }
        }
    } else if (moments_.size() != params.size()) {
        throw ShapeError("adafactor: parameter list changed between steps");
    }

    ++t_;
    const double decay = 1.0 - std::pow(static_cast<double>(t_), -opts_.decay_exponent);
    const double keep = 1.0 - decay;

    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Tensor param = params[pi].tensor;
        const auto& g = grads[pi];
        auto& m = moments_[pi];
        std::vector<double> v_hat;
        if (m.factored) {
            const std::size_t rows = m.row.size(), cols = m.col.size();
            std::vector<double> row_mean(rows, 0.0), col_mean(cols, 0.0);
            for (std::size_t i = 0; i < rows; ++i) {
                for (std::size_t j = 0; j < cols; ++j) {
                    const double sq = g[i * cols + j] * g[i * cols + j] + opts_.eps1;
                    row_mean[i] += sq;
                    col_mean[j] += sq;
                }
            }
            for (std::size_t i = 0; i < rows; ++i)
                m.row[i] = decay * m.row[i] + keep * row_mean[i] / static_cast<double>(cols);
            for (std::size_t j = 0; j < cols; ++j)
                m.col[j] = decay * m.col[j] + keep * col_mean[j] / static_cast<double>(rows);
            v_hat = factored_second_moment(m.row, m.col);
        } else {
            for (std::size_t i = 0; i < g.size(); ++i)
                m.full[i] = decay * m.full[i] + keep * (g[i] * g[i] + opts_.eps1);
            v_hat = m.full;
        }

        std::vector<double> update(g.size());
        for (std::size_t i = 0; i < g.size(); ++i) {
            update[i] = g[i] == 0.0 ? 0.0 : g[i] / std::sqrt(v_hat[i]);
        }
        const double denom = std::max(1.0, rms(update) / opts_.clip_threshold);
        double lr = opts_.lr;
        if (opts_.relative_step) {
            lr = std::min(1e-2, 1.0 / std::sqrt(static_cast<double>(t_))) *
                 std::max(opts_.eps2, rms(param.data()));
        }
        auto values = param.mutable_data();
        for (std::size_t i = 0; i < values.size(); ++i) values[i] -= lr * (update[i] / denom);
    }
    return {};
}

StepResult Sgd::step(std::span<const NamedTensor> params) {
    const auto grads = collect_grads(params);
    return step(params, grads);
}

StepResult Sgd::step(std::span<const NamedTensor> params,
                     std::span<const std::vector<double>> grads) {
    if (auto msg = check_grads(params, grads); !msg.empty()) return {false, msg};
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Tensor param = params[pi].tensor;
        auto values = param.mutable_data();
        for (std::size_t i = 0; i < values.size(); ++i) values[i] -= opts_.lr * grads[pi][i];
    }
    return {};
}

}  // namespace lopt
