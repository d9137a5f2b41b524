// SPDX-License-Identifier: Apache-2.0
#include "lopt/verify.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "lopt/data.hpp"
#include "lopt/rng.hpp"
#include "lopt/tiny_lm.hpp"

namespace lopt {

std::vector<std::vector<double>> finite_diff_grad(const std::function<double()>& f,
                                                  std::span<const NamedTensor> params,
                                                  double eps) {
    if (!(eps > 0.0)) throw std::invalid_argument("finite_diff_grad: eps must be positive");
    std::vector<std::vector<double>> out;
    out.reserve(params.size());
    for (const auto& p : params) {
        Tensor t = p.tensor;
        auto values = t.mutable_data();
        std::vector<double> g(values.size());
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double saved = values[i];
            values[i] = saved + eps;
            const double up = f();
            values[i] = saved - eps;
            const double down = f();
            values[i] = saved;
            g[i] = (up - down) / (2.0 * eps);
        }
        out.push_back(std::move(g));
    }
    return out;
}

double relative_error(double analytic, double numeric, double floor) {
    const double scale = std::max({std::abs(analytic), std::abs(numeric), floor});
    return std::abs(analytic - numeric) / scale;
}

double GradReport::max_rel_error() const {
    double m = 0.0;
    for (const auto& e : params) m = std::max(m, e.max_rel_error);
    return m;
}

nlohmann::json GradReport::to_json() const {
    nlohmann::json entries = nlohmann::json::array();
    for (const auto& e : params) {
        entries.push_back({{"name", e.name},
                           {"max_rel_error", e.max_rel_error},
                           {"mean_rel_error", e.mean_rel_error}});
    }
    return {{"eps", eps}, {"threshold", threshold}, {"passed", passed}, {"params", entries}};
}

GradReport check_gradients(const std::function<Tensor()>& loss_fn,
                           std::span<const NamedTensor> params, const GradcheckOptions& opts) {
    for (const auto& p : params) {
        Tensor t = p.tensor;
        t.zero_grad();
    }
    backward(loss_fn());
    auto numeric = finite_diff_grad(
        [&] {
            NoGradGuard guard;
            return loss_fn().item();
        },
        params, opts.eps);

    GradReport report;
    report.eps = opts.eps;
    report.threshold = opts.threshold;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        const auto& t = params[pi].tensor;
        GradReport::Entry entry{params[pi].name, 0.0, 0.0};
        for (std::size_t i = 0; i < t.size(); ++i) {
            const double a = t.has_grad() ? t.grad()[i] : 0.0;
            const double err = relative_error(a, numeric[pi][i], opts.floor);
            entry.max_rel_error = std::max(entry.max_rel_error, err);
            entry.mean_rel_error += err;
        }
        if (t.size()) entry.mean_rel_error /= static_cast<double>(t.size());
        report.params.push_back(entry);
    }
    report.passed = report.max_rel_error() < opts.threshold;
    return report;
}

namespace {

bool near_kink(const PromptParameterization& p, double margin) {
    const auto* proj = std::get_if<ProjectedPrompt>(&p.state());
    if (!proj || proj->sigma.kind == Activation::gelu) return false;
    NoGradGuard guard;
    Tensor pre = matmul(proj->x0, proj->u);
    return std::any_of(pre.data().begin(), pre.data().end(),
                       [margin](double z) { return std::abs(z) < margin; });
}

}  // namespace

GradReport prompt_gradcheck(const PromptGradcheckSpec& spec) {
    ModelDims dims;
    dims.vocab_size = spec.vocab;
    dims.embed_dim = spec.d;
    dims.layers = spec.layers;
    dims.heads = spec.heads;
    dims.max_seq = 32;
    TinyLM lm = TinyLM::init(dims, mix_seed(spec.seed, 10));
    // The N(0, 0.02) init leaves prompt gradients near finite-difference
    // round-off. Rescale matrices to std 1/sqrt(d) and jitter the vectors so
    // every path carries signal.
    {
        Rng jitter(mix_seed(spec.seed, 14));
        const double gain = 1.0 / (0.02 * std::sqrt(static_cast<double>(spec.d)));
        for (auto& p : lm.parameters()) {
            for (auto& v : p.tensor.mutable_data()) {
                v = p.tensor.rank() == 2 ? v * gain : v + jitter.uniform(-0.1, 0.1);
            }
        }
    }
    lm.freeze();

    std::uint64_t draw = 0;
    auto prompt = PromptParameterization::init(spec.method, spec.n, spec.d, spec.rank, spec.sigma,
                                               mix_seed(spec.seed, 11));
    while (near_kink(prompt, spec.kink_margin)) {
        prompt = PromptParameterization::init(spec.method, spec.n, spec.d, spec.rank, spec.sigma,
                                              mix_seed(spec.seed, 12 + draw++));
    }

    Rng rng(mix_seed(spec.seed, 13));
    std::vector<std::vector<std::size_t>> inputs(2, std::vector<std::size_t>(5));
    for (auto& in : inputs)
        for (auto& id : in) id = rng.between(0, spec.vocab - 1);
    const std::vector<std::size_t> targets{rng.between(0, spec.vocab - 1),
                                           rng.between(0, spec.vocab - 1)};

    auto loss_fn = [&] {
        PrefixCache prefix = encode_prefix(lm, prompt.materialize());
        Tensor total;
        for (std::size_t i = 0; i < inputs.size(); ++i) {
            Tensor loss = softmax_cross_entropy(forward(lm, prefix, embed(lm, inputs[i])), targets[i]);
            total = i == 0 ? loss : add(total, loss);
        }
        return scale(total, 1.0 / static_cast<double>(inputs.size()));
    };
    const auto params = prompt.trainable_parameters();
    return check_gradients(loss_fn, params, spec.options);
}

std::vector<double> singular_values(const Tensor& x) {
    if (x.rank() != 2) throw ShapeError("singular_values: expected a matrix, got " + shape_str(x.shape()));
    for (double v : x.data()) {
        if (!std::isfinite(v)) throw std::invalid_argument("singular_values: non-finite entry");
    }
    const std::size_t r = x.rows(), c = x.cols();
    // Orthogonalize the shorter side: columns of A (m×k, k = min(r, c)).
    const bool use_transpose = r < c;
    const std::size_t m = use_transpose ? c : r;
    const std::size_t k = use_transpose ? r : c;
    // Column-major copy: col j occupies a[j*m .. j*m+m).
    std::vector<double> a(m * k);
    for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) {
            const double v = x.data()[i * c + j];
            if (use_transpose) {
                a[i * m + j] = v;
            } else {
                a[j * m + i] = v;
            }
        }
    }

    constexpr double tol = 1e-15;
    constexpr int max_sweeps = 100;
    for (int sweep = 0; sweep < max_sweeps; ++sweep) {
        bool rotated = false;
        for (std::size_t p = 0; p + 1 < k; ++p) {
            for (std::size_t q = p + 1; q < k; ++q) {
                double* ap = a.data() + p * m;
                double* aq = a.data() + q * m;
                double alpha = 0.0, beta = 0.0, gamma = 0.0;
                for (std::size_t i = 0; i < m; ++i) {
                    alpha += ap[i] * ap[i];
                    beta += aq[i] * aq[i];
                    gamma += ap[i] * aq[i];
                }
                if (gamma == 0.0 || std::abs(gamma) <= tol * std::sqrt(alpha * beta)) continue;
                rotated = true;
                const double zeta = (beta - alpha) / (2.0 * gamma);
                const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double cs = 1.0 / std::sqrt(1.0 + t * t);
                const double sn = cs * t;
                for (std::size_t i = 0; i < m; ++i) {
                    const double u = ap[i], v = aq[i];
                    ap[i] = cs * u - sn * v;
                    aq[i] = sn * u + cs * v;
                }
            }
        }
        if (!rotated) break;
    }

    std::vector<double> sv(k);
    for (std::size_t j = 0; j < k; ++j) {
        double s = 0.0;
        for (std::size_t i = 0; i < m; ++i) s += a[j * m + i] * a[j * m + i];
        sv[j] = std::sqrt(s);
    }
    std::sort(sv.begin(), sv.end(), std::greater<>());
    return sv;
}

std::size_t effective_rank(const Tensor& x, double tol) {
    return rank_report(x, tol).effective_rank;
}

RankReport rank_report(const Tensor& x, double tol) {
    if (!(tol > 0.0)) throw std::invalid_argument("effective_rank: tolerance must be positive");
    RankReport report;
    report.tolerance = tol;
    report.singular_values = singular_values(x);
    if (!report.singular_values.empty() && report.singular_values.front() > 0.0) {
        const double cut = tol * report.singular_values.front();
        report.effective_rank = static_cast<std::size_t>(
            std::count_if(report.singular_values.begin(), report.singular_values.end(),
                          [cut](double s) { return s > cut; }));
    }
    return report;
}

nlohmann::json RankReport::to_json() const {
    return {{"singular_values", singular_values},
            {"effective_rank", effective_rank},
            {"tolerance", tolerance}};
}

}  // namespace lopt
