// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>

#include <nlohmann/json.hpp>

#include "lopt/tensor.hpp"

namespace lopt {

inline constexpr const char* kCheckpointFormat = "lopt-ckpt/1";

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

nlohmann::json tensor_to_json(const Tensor& t);
Tensor tensor_from_json(const nlohmann::json& j, bool requires_grad = false);

/// FNV-1a over the raw bytes of every value, in list order.
std::uint64_t checksum(std::span<const NamedTensor> tensors);
std::uint64_t checksum(const Tensor& t);

nlohmann::json read_json_file(const std::filesystem::path& path);
/// Writes via a temporary file and rename so readers never see a partial file.
void write_json_file(const std::filesystem::path& path, const nlohmann::json& j);

}  // namespace lopt
