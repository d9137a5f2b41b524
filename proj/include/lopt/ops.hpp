// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <string_view>

#include "lopt/tensor.hpp"

namespace lopt {

enum class Activation { relu, elu, gelu };

/// Elementwise nonlinearity. ELU uses `alpha`; GELU is the tanh
/// approximation. The derivative at exactly 0 is taken as 1 for relu/elu.
struct Nonlinearity {
    Activation kind = Activation::elu;
    double alpha = 1.0;

    double value(double x) const;
    double derivative(double x) const;
};

std::string to_string(Activation a);
Activation parse_activation(std::string_view name);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
/// a[m×n] + b[n] broadcast over rows.
Tensor add_row(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);
Tensor sum(const Tensor& a);

/// Embedding gather: out row j = table row ids[j].
Tensor gather_rows(const Tensor& table, std::span<const std::size_t> ids);
Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end);
Tensor concat_rows(const Tensor& top, const Tensor& bottom);

/// Row-wise layer normalization with affine gain/bias of length cols.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

Tensor apply_nonlinearity(const Tensor& x, const Nonlinearity& f);

/// Multi-head scaled dot-product attention. Query row i sits at absolute
/// position `offset + i`, key row j at position j; query i sees keys
/// j <= offset + i. q:[Tq×d], k,v:[Tk×d], d divisible by heads.
Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                        std::size_t offset);

/// -log softmax(logits)[target] for a single logit vector ([C] or [1×C]).
Tensor softmax_cross_entropy(const Tensor& logits, std::size_t target);
/// Mean over rows of per-row cross entropy; logits [m×C], one target per row.
Tensor mean_cross_entropy(const Tensor& logits, std::span<const std::size_t> targets);

}  // namespace lopt
