// SPDX-License-Identifier: Apache-2.0

#include "advfusion/numcore/digest.hpp"

#include <openssl/evp.h>

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <memory>
#include <stdexcept>

namespace advfusion::numcore {

namespace {

struct MdCtxDeleter {
    void operator()(EVP_MD_CTX* ctx) const { EVP_MD_CTX_free(ctx); }
};

class Sha256 {
public:
    Sha256() : ctx_(EVP_MD_CTX_new()) {
        if (!ctx_ || EVP_DigestInit_ex(ctx_.get(), EVP_sha256(), nullptr) != 1) {
            throw std::runtime_error("sha256: digest init failed");
        }
    }
    void update(const void* data, std::size_t size) {
        if (size && EVP_DigestUpdate(ctx_.get(), data, size) != 1) {
            throw std::runtime_error("sha256: digest update failed");
        }
    }
    std::string hex() {
        std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
        unsigned int len = 0;
        if (EVP_DigestFinal_ex(ctx_.get(), md.data(), &len) != 1) {
            throw std::runtime_error("sha256: digest final failed");
        }
        static constexpr char kHex[] = "0123456789abcdef";
        std::string out;
        out.reserve(len * 2);
        for (unsigned int i = 0; i < len; ++i) {
            out.push_back(kHex[md[i] >> 4]);
            out.push_back(kHex[md[i] & 0xF]);
        }
        return out;
    }

private:
    std::unique_ptr<EVP_MD_CTX, MdCtxDeleter> ctx_;
};

std::array<unsigned char, 8> le64(std::uint64_t v) {
    std::array<unsigned char, 8> b{};
    for (std::size_t i = 0; i < 8; ++i) {
        b[i] = static_cast<unsigned char>(v >> (8 * i));
    }
    return b;
}

}  // namespace

std::string sha256_hex(std::span<const unsigned char> bytes) {
    Sha256 h;
    h.update(bytes.data(), bytes.size());
    return h.hex();
}

std::vector<unsigned char> to_le_bytes(std::span<const double> values) {
    std::vector<unsigned char> out(values.size() * 8);
    for (std::size_t i = 0; i < values.size(); ++i) {
        auto b = le64(std::bit_cast<std::uint64_t>(values[i]));
        std::memcpy(out.data() + i * 8, b.data(), 8);
    }
    return out;
}

std::vector<double> from_le_bytes(std::span<const unsigned char> bytes) {
    if (bytes.size() % 8 != 0) {
        throw std::invalid_argument("from_le_bytes: length is not a multiple of 8");
    }
    std::vector<double> out(bytes.size() / 8);
    for (std::size_t i = 0; i < out.size(); ++i) {
        std::uint64_t v = 0;
        for (std::size_t k = 0; k < 8; ++k) {
            v |= static_cast<std::uint64_t>(bytes[i * 8 + k]) << (8 * k);
        }
        out[i] = std::bit_cast<double>(v);
    }
    return out;
}

std::string content_hash(const std::vector<NamedTensor>& tensors) {
    Sha256 h;
    for (const auto& [name, tensor] : tensors) {
        auto n = le64(name.size());
        h.update(n.data(), n.size());
        h.update(name.data(), name.size());
        auto r = le64(tensor.rank());
        h.update(r.data(), r.size());
        for (auto d : tensor.shape()) {
            auto b = le64(d);
            h.update(b.data(), b.size());
        }
        auto bytes = to_le_bytes(tensor.data());
        h.update(bytes.data(), bytes.size());
    }
    return h.hex();
}

}  // namespace advfusion::numcore
