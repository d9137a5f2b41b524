// SPDX-License-Identifier: Apache-2.0
#include "lopt/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace lopt {

nlohmann::json tensor_to_json(const Tensor& t) {
    return {{"shape", t.shape()},
            {"data", std::vector<double>(t.data().begin(), t.data().end())}};
}

Tensor tensor_from_json(const nlohmann::json& j, bool requires_grad) {
    if (!j.contains("shape") || !j.contains("data")) {
        throw std::runtime_error("checkpoint: tensor entry needs 'shape' and 'data'");
    }
    return Tensor(j.at("shape").get<Shape>(), j.at("data").get<std::vector<double>>(),
                  requires_grad);
}

namespace {

void fnv_mix(std::uint64_t& h, std::span<const double> values) {
    for (double v : values) {
        unsigned char bytes[sizeof(double)];
        std::memcpy(bytes, &v, sizeof(double));
        for (unsigned char b : bytes) {
            h ^= b;
            h *= 0x100000001b3ULL;
        }
    }
}

constexpr std::uint64_t kFnvBasis = 0xcbf29ce484222325ULL;

}  // namespace

std::uint64_t checksum(std::span<const NamedTensor> tensors) {
    std::uint64_t h = kFnvBasis;
    for (const auto& nt : tensors) fnv_mix(h, nt.tensor.data());
    return h;
}

std::uint64_t checksum(const Tensor& t) {
    std::uint64_t h = kFnvBasis;
    fnv_mix(h, t.data());
    return h;
}

nlohmann::json read_json_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw std::runtime_error(path.string() + ": " + e.what());
    }
}

void write_json_file(const std::filesystem::path& path, const nlohmann::json& j) {
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp);
        if (!out) throw std::runtime_error("cannot write " + tmp.string());
        out << j.dump() << '\n';
        if (!out) throw std::runtime_error("write failed for " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

}  // namespace lopt
