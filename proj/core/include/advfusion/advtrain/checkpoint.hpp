// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint file layout (all integers little-endian):
//
//   "ADVFCKPT"            8 bytes magic
//   u32 version           currently 1
//   u64 manifest_len
//   manifest              UTF-8 JSON, manifest_len bytes
//   payload               f64 values, concatenated in manifest order
//
// The manifest holds format_version, config, lineage, tensors[{name, shape,
// offset}], payload_bytes and payload_sha256.

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "advfusion/numcore/digest.hpp"
#include "advfusion/numcore/tensor.hpp"

namespace advfusion::advtrain {

using numcore::NamedTensor;
using numcore::Shape;
using numcore::Tensor;

inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class CheckpointErrorKind { io, corrupt_manifest, unsupported_version, shape_mismatch, checksum_mismatch,
                                 missing_tensor };

std::string_view to_string(CheckpointErrorKind kind);

class CheckpointError : public std::runtime_error {
public:
    CheckpointError(CheckpointErrorKind kind, const std::string& message)
        : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}
    CheckpointErrorKind kind() const { return kind_; }

private:
    CheckpointErrorKind kind_;
};

struct Checkpoint {
    nlohmann::json config = nlohmann::json::object();
    nlohmann::json lineage = nlohmann::json::object();
    std::vector<NamedTensor> tensors;

    bool has(std::string_view name) const;
    const Tensor& tensor(std::string_view name) const;
    /// Throws shape_mismatch unless `name` exists with `shape`.
    const Tensor& expect(std::string_view name, const Shape& shape) const;
    /// Tensors whose name starts with `prefix`, in stored order.
    std::vector<NamedTensor> group(std::string_view prefix) const;
    std::string kind() const { return config.value("kind", std::string()); }
};

std::vector<unsigned char> serialize_checkpoint(const Checkpoint& checkpoint);
/// `prefixes` limits which tensors are materialized; empty loads all. The
/// checksum always covers the full payload.
Checkpoint parse_checkpoint(std::span<const unsigned char> bytes, const std::vector<std::string>& prefixes = {});

/// Writes to a sibling temp file, then renames over `path`.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path, const std::vector<std::string>& prefixes = {});

/// Reads only the manifest (config, lineage, tensor index).
nlohmann::json read_manifest(const std::filesystem::path& path);

}  // namespace advfusion::advtrain
