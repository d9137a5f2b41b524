// SPDX-License-Identifier: Apache-2.0
#include "lopt/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numbers>

namespace lopt {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

ConstMap as_mat(const std::vector<double>& v, std::size_t r, std::size_t c) {
    return ConstMap(v.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

MutMap as_mut(std::vector<double>& v, std::size_t r, std::size_t c) {
    return MutMap(v.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

using NodePtr = std::shared_ptr<detail::Node>;

// Builds an op result; links it into the graph only when recording is on
// and some input requires grad.
Tensor make_result(Shape shape, std::vector<double> data, std::vector<NodePtr> parents,
                   std::function<void(detail::Node&)> fn) {
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    bool needs = false;
    if (grad_enabled()) {
        for (const auto& p : parents) needs = needs || p->requires_grad;
    }
    if (needs) {
        node->requires_grad = true;
        node->parents = std::move(parents);
        node->backward_fn = std::move(fn);
    }
    return Tensor::from_node(std::move(node));
}

void require_matrix(const Tensor& t, const char* op) {
    if (t.rank() != 2) {
        throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_str(t.shape()));
    }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluK = 0.044715;

}  // namespace

double Nonlinearity::value(double x) const {
    switch (kind) {
        case Activation::relu:
            return x > 0.0 ? x : 0.0;
        case Activation::elu:
            return x > 0.0 ? x : alpha * std::expm1(x);
        case Activation::gelu: {
            const double t = std::tanh(kGeluC * (x + kGeluK * x * x * x));
            return 0.5 * x * (1.0 + t);
        }
    }
    return x;
}

double Nonlinearity::derivative(double x) const {
    switch (kind) {
        case Activation::relu:
            return x >= 0.0 ? 1.0 : 0.0;
        case Activation::elu:
            return x >= 0.0 ? 1.0 : alpha * std::exp(x);
        case Activation::gelu: {
            const double t = std::tanh(kGeluC * (x + kGeluK * x * x * x));
            return 0.5 * (1.0 + t) +
                   0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluK * x * x);
        }
    }
    return 1.0;
}

std::string to_string(Activation a) {
    switch (a) {
        case Activation::relu: return "relu";
        case Activation::elu: return "elu";
        case Activation::gelu: return "gelu";
    }
    return "?";
}

Activation parse_activation(std::string_view name) {
    if (name == "relu") return Activation::relu;
    if (name == "elu") return Activation::elu;
    if (name == "gelu") return Activation::gelu;
    throw std::invalid_argument("unknown nonlinearity '" + std::string(name) + "'");
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_matrix(a, "matmul");
    require_matrix(b, "matmul");
    const std::size_t m = a.rows(), k = a.cols(), p = b.cols();
    if (b.rows() != k) {
        throw ShapeError("matmul: inner dimensions disagree for " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    }
    std::vector<double> out(m * p, 0.0);
    if (m && p && k) {
        as_mut(out, m, p).noalias() = as_mat(a.node()->data, m, k) * as_mat(b.node()->data, k, p);
    }
    return make_result(Shape{m, p}, std::move(out), {a.node(), b.node()},
                       [m, k, p](detail::Node& self) {
                           auto& A = *self.parents[0];
                           auto& B = *self.parents[1];
                           auto dC = as_mat(self.grad, m, p);
                           if (A.requires_grad) {
                               as_mut(A.grad_buffer(), m, k).noalias() +=
                                   dC * as_mat(B.data, k, p).transpose();
                           }
                           if (B.requires_grad) {
                               as_mut(B.grad_buffer(), k, p).noalias() +=
                                   as_mat(A.data, m, k).transpose() * dC;
                           }
                       });
}

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    std::vector<double> out(a.size());
    const auto& x = a.node()->data;
    const auto& y = b.node()->data;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
    return make_result(a.shape(), std::move(out), {a.node(), b.node()}, [](detail::Node& self) {
        for (auto& parent : self.parents) {
            if (!parent->requires_grad) continue;
            auto& g = parent->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
    });
}

Tensor add_row(const Tensor& a, const Tensor& b) {
    require_matrix(a, "add_row");
    const std::size_t m = a.rows(), n = a.cols();
    if (b.size() != n) {
        throw ShapeError("add_row: bias " + shape_str(b.shape()) + " does not match " +
                         shape_str(a.shape()));
    }
    std::vector<double> out(a.data().begin(), a.data().end());
    const auto& bias = b.node()->data;
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] += bias[j];
    return make_result(a.shape(), std::move(out), {a.node(), b.node()},
                       [m, n](detail::Node& self) {
                           auto& A = *self.parents[0];
                           auto& B = *self.parents[1];
                           if (A.requires_grad) {
                               auto& g = A.grad_buffer();
                               for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                           }
                           if (B.requires_grad) {
                               auto& g = B.grad_buffer();
                               for (std::size_t i = 0; i < m; ++i)
                                   for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[i * n + j];
                           }
                       });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    std::vector<double> out(a.size());
    const auto& x = a.node()->data;
    const auto& y = b.node()->data;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
    return make_result(a.shape(), std::move(out), {a.node(), b.node()}, [](detail::Node& self) {
        auto& A = *self.parents[0];
        auto& B = *self.parents[1];
        if (A.requires_grad) {
            auto& g = A.grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * B.data[i];
        }
        if (B.requires_grad) {
            auto& g = B.grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * A.data[i];
        }
    });
}

Tensor scale(const Tensor& a, double s) {
    std::vector<double> out(a.data().begin(), a.data().end());
    for (auto& v : out) v *= s;
    return make_result(a.shape(), std::move(out), {a.node()}, [s](detail::Node& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
    });
}

Tensor transpose(const Tensor& a) {
    require_matrix(a, "transpose");
    const std::size_t m = a.rows(), n = a.cols();
    std::vector<double> out(m * n);
    const auto& x = a.node()->data;
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = x[i * n + j];
    return make_result(Shape{n, m}, std::move(out), {a.node()}, [m, n](detail::Node& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[j * m + i];
    });
}

Tensor reshape(const Tensor& a, Shape shape) {
    if (numel(shape) != a.size()) {
        throw ShapeError("reshape: " + shape_str(a.shape()) + " cannot become " + shape_str(shape));
    }
    std::vector<double> out(a.data().begin(), a.data().end());
    return make_result(std::move(shape), std::move(out), {a.node()}, [](detail::Node& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
}

Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (double v : a.data()) s += v;
    return make_result(Shape{}, {s}, {a.node()}, [](detail::Node& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (auto& v : g) v += self.grad[0];
    });
}

Tensor gather_rows(const Tensor& table, std::span<const std::size_t> ids) {
    require_matrix(table, "gather_rows");
    const std::size_t rows = table.rows(), d = table.cols();
    std::vector<std::size_t> idx(ids.begin(), ids.end());
    std::vector<double> out(idx.size() * d);
    const auto& src = table.node()->data;
    for (std::size_t j = 0; j < idx.size(); ++j) {
        if (idx[j] >= rows) {
            throw std::out_of_range("gather_rows: id " + std::to_string(idx[j]) +
                                    " out of range for " + std::to_string(rows) + " rows");
        }
        std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(idx[j] * d), d,
                    out.begin() + static_cast<std::ptrdiff_t>(j * d));
    }
    const std::size_t count = idx.size();
    return make_result(Shape{count, d}, std::move(out), {table.node()},
                       [idx = std::move(idx), d](detail::Node& self) {
                           auto& g = self.parents[0]->grad_buffer();
                           for (std::size_t j = 0; j < idx.size(); ++j)
                               for (std::size_t c = 0; c < d; ++c)
                                   g[idx[j] * d + c] += self.grad[j * d + c];
                       });
}

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end) {
    require_matrix(a, "slice_rows");
    const std::size_t d = a.cols();
    if (begin > end || end > a.rows()) {
        throw ShapeError("slice_rows: [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") outside " + shape_str(a.shape()));
    }
    std::vector<double> out(a.data().begin() + static_cast<std::ptrdiff_t>(begin * d),
                            a.data().begin() + static_cast<std::ptrdiff_t>(end * d));
    return make_result(Shape{end - begin, d}, std::move(out), {a.node()},
                       [begin, d](detail::Node& self) {
                           auto& g = self.parents[0]->grad_buffer();
                           for (std::size_t i = 0; i < self.grad.size(); ++i)
                               g[begin * d + i] += self.grad[i];
                       });
}

Tensor concat_rows(const Tensor& top, const Tensor& bottom) {
    require_matrix(top, "concat_rows");
    require_matrix(bottom, "concat_rows");
    if (top.cols() != bottom.cols()) {
        throw ShapeError("concat_rows: column mismatch " + shape_str(top.shape()) + " vs " +
                         shape_str(bottom.shape()));
    }
    const std::size_t split = top.size();
    std::vector<double> out;
    out.reserve(top.size() + bottom.size());
    out.insert(out.end(), top.data().begin(), top.data().end());
    out.insert(out.end(), bottom.data().begin(), bottom.data().end());
    return make_result(Shape{top.rows() + bottom.rows(), top.cols()}, std::move(out),
                       {top.node(), bottom.node()}, [split](detail::Node& self) {
                           auto& T = *self.parents[0];
                           auto& B = *self.parents[1];
                           if (T.requires_grad) {
                               auto& g = T.grad_buffer();
                               for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                           }
                           if (B.requires_grad) {
                               auto& g = B.grad_buffer();
                               for (std::size_t i = 0; i < g.size(); ++i)
                                   g[i] += self.grad[split + i];
                           }
                       });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    require_matrix(x, "layer_norm");
    const std::size_t m = x.rows(), n = x.cols();
    if (gain.size() != n || bias.size() != n) {
        throw ShapeError("layer_norm: affine params do not match " + shape_str(x.shape()));
    }
    const auto& src = x.node()->data;
    const auto& g = gain.node()->data;
    const auto& b = bias.node()->data;
    std::vector<double> xhat(m * n), rstd(m), out(m * n);
    for (std::size_t i = 0; i < m; ++i) {
        const double* row = src.data() + i * n;
        double mu = 0.0;
        for (std::size_t j = 0; j < n; ++j) mu += row[j];
        mu /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= static_cast<double>(n);
        rstd[i] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < n; ++j) {
            const double h = (row[j] - mu) * rstd[i];
            xhat[i * n + j] = h;
            out[i * n + j] = h * g[j] + b[j];
        }
    }
    return make_result(
        x.shape(), std::move(out), {x.node(), gain.node(), bias.node()},
        [m, n, xhat = std::move(xhat), rstd = std::move(rstd)](detail::Node& self) {
            auto& X = *self.parents[0];
            auto& G = *self.parents[1];
            auto& B = *self.parents[2];
            const auto& dy = self.grad;
            if (G.requires_grad) {
                auto& gg = G.grad_buffer();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) gg[j] += dy[i * n + j] * xhat[i * n + j];
            }
            if (B.requires_grad) {
                auto& gb = B.grad_buffer();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) gb[j] += dy[i * n + j];
            }
            if (X.requires_grad) {
                auto& gx = X.grad_buffer();
                const double inv_n = 1.0 / static_cast<double>(n);
                for (std::size_t i = 0; i < m; ++i) {
                    double mean_d = 0.0, mean_dh = 0.0;
                    for (std::size_t j = 0; j < n; ++j) {
                        const double dh = dy[i * n + j] * G.data[j];
                        mean_d += dh;
                        mean_dh += dh * xhat[i * n + j];
                    }
                    mean_d *= inv_n;
                    mean_dh *= inv_n;
                    for (std::size_t j = 0; j < n; ++j) {
                        const double dh = dy[i * n + j] * G.data[j];
                        gx[i * n + j] += rstd[i] * (dh - mean_d - xhat[i * n + j] * mean_dh);
                    }
                }
            }
        });
}

Tensor apply_nonlinearity(const Tensor& x, const Nonlinearity& f) {
    std::vector<double> out(x.size());
    const auto& src = x.node()->data;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f.value(src[i]);
    return make_result(x.shape(), std::move(out), {x.node()}, [f](detail::Node& self) {
        auto& X = *self.parents[0];
        auto& g = X.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * f.derivative(X.data[i]);
    });
}

Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                        std::size_t offset) {
    require_matrix(q, "causal_attention");
    require_matrix(k, "causal_attention");
    require_matrix(v, "causal_attention");
    const std::size_t tq = q.rows(), tk = k.rows(), d = q.cols();
    if (k.cols() != d || v.cols() != d || v.rows() != tk) {
        throw ShapeError("causal_attention: q " + shape_str(q.shape()) + ", k " +
                         shape_str(k.shape()) + ", v " + shape_str(v.shape()));
    }
    if (heads == 0 || d % heads != 0) {
        throw ShapeError("causal_attention: width " + std::to_string(d) + " not divisible by " +
                         std::to_string(heads) + " heads");
    }
    if (offset + tq > tk) {
        throw ShapeError("causal_attention: queries at offset " + std::to_string(offset) +
                         " reach past " + std::to_string(tk) + " keys");
    }
    const std::size_t hd = d / heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
    const auto& Q = q.node()->data;
    const auto& K = k.node()->data;
    const auto& Vd = v.node()->data;
    // probs[h][i][j], zero where masked
    std::vector<double> probs(heads * tq * tk, 0.0);
    std::vector<double> out(tq * d, 0.0);
    for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t c0 = h * hd;
        for (std::size_t i = 0; i < tq; ++i) {
            const std::size_t visible = offset + i + 1;
            double* p = probs.data() + (h * tq + i) * tk;
            const double* qi = Q.data() + i * d + c0;
            double mx = -INFINITY;
            for (std::size_t j = 0; j < visible; ++j) {
                const double* kj = K.data() + j * d + c0;
                double s = 0.0;
                for (std::size_t c = 0; c < hd; ++c) s += qi[c] * kj[c];
                p[j] = s * inv_sqrt;
                mx = std::max(mx, p[j]);
            }
            double z = 0.0;
            for (std::size_t j = 0; j < visible; ++j) {
                p[j] = std::exp(p[j] - mx);
                z += p[j];
            }
            double* oi = out.data() + i * d + c0;
            for (std::size_t j = 0; j < visible; ++j) {
                p[j] /= z;
                const double* vj = Vd.data() + j * d + c0;
                for (std::size_t c = 0; c < hd; ++c) oi[c] += p[j] * vj[c];
            }
        }
    }
    return make_result(
        Shape{tq, d}, std::move(out), {q.node(), k.node(), v.node()},
        [=, probs = std::move(probs)](detail::Node& self) {
            auto& Qn = *self.parents[0];
            auto& Kn = *self.parents[1];
            auto& Vn = *self.parents[2];
            std::vector<double> dq(tq * d, 0.0), dk(tk * d, 0.0), dv(tk * d, 0.0);
            std::vector<double> dp(tk);
            for (std::size_t h = 0; h < heads; ++h) {
                const std::size_t c0 = h * hd;
                for (std::size_t i = 0; i < tq; ++i) {
                    const std::size_t visible = offset + i + 1;
                    const double* p = probs.data() + (h * tq + i) * tk;
                    const double* go = self.grad.data() + i * d + c0;
                    double dot = 0.0;
                    for (std::size_t j = 0; j < visible; ++j) {
                        const double* vj = Vn.data.data() + j * d + c0;
                        double* dvj = dv.data() + j * d + c0;
                        double s = 0.0;
                        for (std::size_t c = 0; c < hd; ++c) {
                            s += go[c] * vj[c];
                            dvj[c] += p[j] * go[c];
                        }
                        dp[j] = s;
                        dot += p[j] * s;
                    }
                    const double* qi = Qn.data.data() + i * d + c0;
                    double* dqi = dq.data() + i * d + c0;
                    for (std::size_t j = 0; j < visible; ++j) {
                        const double ds = p[j] * (dp[j] - dot) * inv_sqrt;
                        const double* kj = Kn.data.data() + j * d + c0;
                        double* dkj = dk.data() + j * d + c0;
                        for (std::size_t c = 0; c < hd; ++c) {
                            dqi[c] += ds * kj[c];
                            dkj[c] += ds * qi[c];
                        }
                    }
                }
            }
            auto accumulate = [](detail::Node& n, const std::vector<double>& g) {
                if (!n.requires_grad) return;
                auto& buf = n.grad_buffer();
                for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += g[i];
            };
            accumulate(Qn, dq);
            accumulate(Kn, dk);
            accumulate(Vn, dv);
        });
}

namespace {

// Returns (loss, softmax probabilities) for one row.
double row_cross_entropy(const double* logits, std::size_t c, std::size_t target, double* probs) {
    std::size_t arg = 0;
    for (std::size_t j = 1; j < c; ++j) {
        if (logits[j] > logits[arg]) arg = j;
    }
    const double mx = logits[arg];
    // z = 1 + rest; log1p(rest) keeps precision when one logit dominates.
    double rest = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
        probs[j] = std::exp(logits[j] - mx);
        if (j != arg) rest += probs[j];
    }
    const double z = 1.0 + rest;
    for (std::size_t j = 0; j < c; ++j) probs[j] /= z;
    return std::log1p(rest) + (mx - logits[target]);
}

}  // namespace

Tensor softmax_cross_entropy(const Tensor& logits, std::size_t target) {
    const bool vector = logits.rank() == 1 || (logits.rank() == 2 && logits.dim(0) == 1);
    if (!vector) {
        throw ShapeError("softmax_cross_entropy: expected a logit vector, got " +
                         shape_str(logits.shape()));
    }
    const std::size_t c = logits.size();
    if (target >= c) {
        throw std::out_of_range("softmax_cross_entropy: target " + std::to_string(target) +
                                " out of range for " + std::to_string(c) + " classes");
    }
    std::vector<double> probs(c);
    const double loss = row_cross_entropy(logits.data().data(), c, target, probs.data());
    return make_result(Shape{}, {loss}, {logits.node()},
                       [target, probs = std::move(probs)](detail::Node& self) {
                           auto& g = self.parents[0]->grad_buffer();
                           const double up = self.grad[0];
                           for (std::size_t j = 0; j < g.size(); ++j)
                               g[j] += up * (probs[j] - (j == target ? 1.0 : 0.0));
                       });
}

Tensor mean_cross_entropy(const Tensor& logits, std::span<const std::size_t> targets) {
    require_matrix(logits, "mean_cross_entropy");
    const std::size_t m = logits.rows(), c = logits.cols();
    if (targets.size() != m) {
        throw ShapeError("mean_cross_entropy: " + std::to_string(targets.size()) +
                         " targets for " + shape_str(logits.shape()));
    }
    if (m == 0) throw ShapeError("mean_cross_entropy: no rows");
    std::vector<std::size_t> tgt(targets.begin(), targets.end());
    std::vector<double> probs(m * c);
    double total = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
        if (tgt[i] >= c) {
            throw std::out_of_range("mean_cross_entropy: target " + std::to_string(tgt[i]) +
                                    " out of range for " + std::to_string(c) + " classes");
        }
        total += row_cross_entropy(logits.data().data() + i * c, c, tgt[i], probs.data() + i * c);
    }
    const double inv_m = 1.0 / static_cast<double>(m);
    return make_result(Shape{}, {total * inv_m}, {logits.node()},
                       [=, tgt = std::move(tgt), probs = std::move(probs)](detail::Node& self) {
                           auto& g = self.parents[0]->grad_buffer();
                           const double up = self.grad[0] * inv_m;
                           for (std::size_t i = 0; i < m; ++i)
                               for (std::size_t j = 0; j < c; ++j)
                                   g[i * c + j] +=
                                       up * (probs[i * c + j] - (j == tgt[i] ? 1.0 : 0.0));
                       });
}

}  // namespace lopt
