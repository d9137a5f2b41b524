// SPDX-License-Identifier: Apache-2.0
#include "lopt/prompt.hpp"

#include <cmath>
#include <cstdio>
#include <stdexcept>

#include "lopt/rng.hpp"

namespace lopt {

std::string to_string(PromptMethod m) {
    switch (m) {
        case PromptMethod::full: return "full";
        case PromptMethod::lopt1: return "lopt1";
        case PromptMethod::lopt2: return "lopt2";
    }
    return "?";
}

PromptMethod parse_method(std::string_view name) {
    if (name == "full") return PromptMethod::full;
    if (name == "lopt1") return PromptMethod::lopt1;
    if (name == "lopt2") return PromptMethod::lopt2;
    throw std::invalid_argument("unknown prompt method '" + std::string(name) +
                                "' (expected full, lopt1 or lopt2)");
}

namespace {

void validate_dims(PromptMethod method, std::size_t n, std::size_t d, std::size_t r) {
    if (n < 1) throw std::invalid_argument("prompt: n must be >= 1");
    if (d < 1) throw std::invalid_argument("prompt: d must be >= 1");
    if (method != PromptMethod::full && r < 1) {
        throw std::invalid_argument("prompt: rank must be >= 1 for " + to_string(method));
    }
}

}  // namespace

std::size_t parameter_count(PromptMethod method, std::size_t n, std::size_t d, std::size_t r) {
    validate_dims(method, n, d, r);
    switch (method) {
        case PromptMethod::full: return n * d;
        case PromptMethod::lopt1: return r * (n + d);
        case PromptMethod::lopt2: return 2 * r * d;
    }
    return 0;
}

double reduction_rate(PromptMethod method, std::size_t n, std::size_t d, std::size_t r,
                      std::size_t baseline_n, std::size_t baseline_d) {
    const std::size_t base = baseline_n * baseline_d;
    if (base == 0) throw std::invalid_argument("reduction_rate: zero baseline");
    const auto count = static_cast<double>(parameter_count(method, n, d, r));
    return 100.0 * (count / static_cast<double>(base) - 1.0);
}

double round_to_cents(double percent) { return std::round(percent * 100.0) / 100.0; }

std::string format_rate(double percent) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f%%", round_to_cents(percent));
    return buf;
}

std::size_t default_rank(std::size_t n) { return std::max<std::size_t>(1, n / 4); }

PromptParameterization PromptParameterization::init(PromptMethod method, std::size_t n,
                                                    std::size_t d, std::size_t rank,
                                                    Nonlinearity sigma, std::uint64_t seed) {
    validate_dims(method, n, d, rank);
    Rng rng(mix_seed(seed, 2));
    auto uniform = [&](Shape shape, bool trainable) {
        Tensor t(std::move(shape), 0.0, trainable);
        for (auto& v : t.mutable_data()) v = rng.uniform(-0.5, 0.5);
        return t;
    };
    PromptParameterization p;
    p.n_ = n;
    p.d_ = d;
    p.sigma_ = sigma;
    switch (method) {
        case PromptMethod::full:
            p.state_ = FullPrompt{uniform({n, d}, true)};
            break;
        case PromptMethod::lopt1: {
            p.rank_ = rank;
            Tensor u = uniform({n, rank}, true);
            Tensor v = uniform({rank, d}, true);
            p.state_ = LowRankPrompt{u, v};
            break;
        }
        case PromptMethod::lopt2: {
            p.rank_ = rank;
            Tensor x0 = uniform({n, d}, false);
            Tensor u = uniform({d, rank}, true);
            Tensor v = uniform({rank, d}, true);
            p.state_ = ProjectedPrompt{x0, u, v, sigma};
            break;
        }
    }
    return p;
}

PromptMethod PromptParameterization::method() const {
    return static_cast<PromptMethod>(state_.index());
}

Tensor PromptParameterization::materialize() const {
    struct Visitor {
        Tensor operator()(const FullPrompt& p) const { return p.x; }
        Tensor operator()(const LowRankPrompt& p) const { return matmul(p.u, p.v); }
        Tensor operator()(const ProjectedPrompt& p) const {
            return matmul(apply_nonlinearity(matmul(p.x0, p.u), p.sigma), p.v);
        }
    };
    return std::visit(Visitor{}, state_);
}

std::vector<NamedTensor> PromptParameterization::trainable_parameters() const {
    struct Visitor {
        std::vector<NamedTensor> operator()(const FullPrompt& p) const { return {{"X", p.x}}; }
        std::vector<NamedTensor> operator()(const LowRankPrompt& p) const {
            return {{"U", p.u}, {"V", p.v}};
        }
        std::vector<NamedTensor> operator()(const ProjectedPrompt& p) const {
            return {{"U", p.u}, {"V", p.v}};
        }
    };
    return std::visit(Visitor{}, state_);
}

std::vector<NamedTensor> PromptParameterization::all_tensors() const {
    auto out = trainable_parameters();
    if (const auto* p = std::get_if<ProjectedPrompt>(&state_)) out.push_back({"X0", p->x0});
    return out;
}

std::size_t PromptParameterization::parameter_count() const {
    return lopt::parameter_count(method(), n_, d_, rank_);
}

nlohmann::json PromptParameterization::to_json() const {
    nlohmann::json tensors = nlohmann::json::object();
    for (const auto& t : all_tensors()) tensors[t.name] = tensor_to_json(t.tensor);
    return {{"format", kCheckpointFormat},
            {"method", to_string(method())},
            {"n", n_},
            {"d", d_},
            {"r", rank_},
            {"sigma", to_string(sigma_.kind)},
            {"alpha", sigma_.alpha},
            {"tensors", std::move(tensors)}};
}

PromptParameterization PromptParameterization::from_json(const nlohmann::json& j) {
    if (j.value("format", std::string()) != kCheckpointFormat || !j.contains("method")) {
        throw std::runtime_error("prompt checkpoint: expected format '" +
                                 std::string(kCheckpointFormat) + "' with a 'method' field");
    }
    const PromptMethod method = parse_method(j.at("method").get<std::string>());
    const Nonlinearity sigma{parse_activation(j.value("sigma", std::string("elu"))),
                             j.value("alpha", 1.0)};
    auto p = init(method, j.at("n").get<std::size_t>(), j.at("d").get<std::size_t>(),
                  j.value("r", std::size_t{0}), sigma, 0);
    const auto& tensors = j.at("tensors");
    for (auto& t : p.all_tensors()) {
        if (!tensors.contains(t.name)) {
            throw std::runtime_error("prompt checkpoint: missing tensor '" + t.name + "'");
        }
        Tensor loaded = tensor_from_json(tensors.at(t.name));
        if (loaded.shape() != t.tensor.shape()) {
            throw std::runtime_error("prompt checkpoint: tensor '" + t.name + "' has shape " +
                                     shape_str(loaded.shape()) + ", expected " +
                                     shape_str(t.tensor.shape()));
        }
        std::copy(loaded.data().begin(), loaded.data().end(), t.tensor.mutable_data().begin());
    }
    return p;
}

void PromptParameterization::save(const std::filesystem::path& path) const {
    write_json_file(path, to_json());
}

PromptParameterization PromptParameterization::load(const std::filesystem::path& path) {
    return from_json(read_json_file(path));
}

}  // namespace lopt
