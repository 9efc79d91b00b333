// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "advfusion/numcore/tensor.hpp"

namespace advfusion::numcore {

using NamedTensor = std::pair<std::string, Tensor>;

/// Lowercase hex SHA-256 of raw bytes.
std::string sha256_hex(std::span<const unsigned char> bytes);

/// SHA-256 over names, shapes and little-endian values, in the given order.
std::string content_hash(const std::vector<NamedTensor>& tensors);

/// Little-endian byte image of the values.
std::vector<unsigned char> to_le_bytes(std::span<const double> values);
std::vector<double> from_le_bytes(std::span<const unsigned char> bytes);

}  // namespace advfusion::numcore
