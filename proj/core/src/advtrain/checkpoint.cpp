// SPDX-License-Identifier: Apache-2.0

#include "advfusion/advtrain/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <iterator>

namespace advfusion::advtrain {

namespace {

constexpr char kMagic[8] = {'A', 'D', 'V', 'F', 'C', 'K', 'P', 'T'};
constexpr std::size_t kHeaderBytes = sizeof(kMagic) + 4 + 8;

template <typename T>
void put_le(std::vector<unsigned char>& out, T value) {
    for (std::size_t i = 0; i < sizeof(T); ++i) {
        out.push_back(static_cast<unsigned char>((value >> (8 * i)) & 0xFF));
    }
}

template <typename T>
T get_le(const unsigned char* p) {
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
        v |= static_cast<T>(p[i]) << (8 * i);
    }
    return v;
}

bool wanted(const std::string& name, const std::vector<std::string>& prefixes) {
    if (prefixes.empty()) {
        return true;
    }
    for (const auto& p : prefixes) {
        if (name.compare(0, p.size(), p) == 0) {
            return true;
        }
    }
    return false;
}

[[noreturn]] void corrupt(const std::string& what) {
    throw CheckpointError(CheckpointErrorKind::corrupt_manifest, what);
}

struct Header {
    std::uint32_t version = 0;
    nlohmann::json manifest;
    std::size_t payload_offset = 0;
};

Header read_header(std::span<const unsigned char> bytes) {
    if (bytes.size() < kHeaderBytes || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
        corrupt("not a checkpoint file (bad magic or truncated header)");
    }
    Header h;
    h.version = get_le<std::uint32_t>(bytes.data() + 8);
    if (h.version != kCheckpointVersion) {
        throw CheckpointError(CheckpointErrorKind::unsupported_version,
                              "checkpoint version " + std::to_string(h.version) + " is not supported (expected " +
                                  std::to_string(kCheckpointVersion) + ")");
    }
    const auto len = get_le<std::uint64_t>(bytes.data() + 12);
    if (len > bytes.size() - kHeaderBytes) {
        corrupt("manifest length exceeds file size");
    }
    const auto* begin = reinterpret_cast<const char*>(bytes.data() + kHeaderBytes);
    try {
        h.manifest = nlohmann::json::parse(begin, begin + len);
    } catch (const nlohmann::json::exception& e) {
        corrupt(std::string("manifest is not valid JSON: ") + e.what());
    }
    if (!h.manifest.is_object() || !h.manifest.contains("tensors") || !h.manifest["tensors"].is_array() ||
        !h.manifest.contains("payload_bytes") || !h.manifest.contains("payload_sha256")) {
        corrupt("manifest lacks tensors, payload_bytes or payload_sha256");
    }
    if (h.manifest.value("format_version", 0u) != h.version) {
        corrupt("manifest format_version disagrees with the header");
    }
    h.payload_offset = kHeaderBytes + len;
    return h;
}

std::vector<unsigned char> read_all(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw CheckpointError(CheckpointErrorKind::io, "cannot open '" + path.string() + "'");
    }
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

std::string_view to_string(CheckpointErrorKind kind) {
    switch (kind) {
        case CheckpointErrorKind::io: return "io";
        case CheckpointErrorKind::corrupt_manifest: return "corrupt_manifest";
        case CheckpointErrorKind::unsupported_version: return "unsupported_version";
        case CheckpointErrorKind::shape_mismatch: return "shape_mismatch";
        case CheckpointErrorKind::checksum_mismatch: return "checksum_mismatch";
        case CheckpointErrorKind::missing_tensor: return "missing_tensor";
    }
    return "unknown";
}

bool Checkpoint::has(std::string_view name) const {
    for (const auto& [n, _] : tensors) {
        if (n == name) {
            return true;
        }
    }
    return false;
}

const Tensor& Checkpoint::tensor(std::string_view name) const {
    for (const auto& [n, t] : tensors) {
        if (n == name) {
            return t;
        }
    }
    throw CheckpointError(CheckpointErrorKind::missing_tensor, "checkpoint has no tensor '" + std::string(name) + "'");
}

const Tensor& Checkpoint::expect(std::string_view name, const Shape& shape) const {
    const Tensor& t = tensor(name);
    if (t.shape() != shape) {
        throw CheckpointError(CheckpointErrorKind::shape_mismatch,
                              "tensor '" + std::string(name) + "' has shape " + numcore::shape_str(t.shape()) +
                                  ", expected " + numcore::shape_str(shape));
    }
    return t;
}

std::vector<NamedTensor> Checkpoint::group(std::string_view prefix) const {
    std::vector<NamedTensor> out;
    for (const auto& nt : tensors) {
        if (nt.first.compare(0, prefix.size(), prefix) == 0) {
            out.push_back(nt);
        }
    }
    return out;
}

std::vector<unsigned char> serialize_checkpoint(const Checkpoint& checkpoint) {
    std::vector<unsigned char> payload;
    nlohmann::json index = nlohmann::json::array();
    for (const auto& [name, t] : checkpoint.tensors) {
        index.push_back({{"name", name}, {"shape", t.shape()}, {"offset", payload.size()}});
        const auto bytes = numcore::to_le_bytes(t.data());
        payload.insert(payload.end(), bytes.begin(), bytes.end());
    }
    nlohmann::json manifest{{"format_version", kCheckpointVersion},
                            {"config", checkpoint.config},
                            {"lineage", checkpoint.lineage},
                            {"tensors", std::move(index)},
                            {"payload_bytes", payload.size()},
                            {"payload_sha256", numcore::sha256_hex(payload)}};
    const std::string text = manifest.dump();
    std::vector<unsigned char> out(kMagic, kMagic + sizeof(kMagic));
    put_le<std::uint32_t>(out, kCheckpointVersion);
    put_le<std::uint64_t>(out, text.size());
    out.insert(out.end(), text.begin(), text.end());
    out.insert(out.end(), payload.begin(), payload.end());
    return out;
}

Checkpoint parse_checkpoint(std::span<const unsigned char> bytes, const std::vector<std::string>& prefixes) {
    const Header h = read_header(bytes);
    const auto payload = bytes.subspan(h.payload_offset);
    const auto declared = h.manifest["payload_bytes"].get<std::uint64_t>();
    if (payload.size() != declared) {
        throw CheckpointError(CheckpointErrorKind::checksum_mismatch,
                              "payload is " + std::to_string(payload.size()) + " bytes, manifest declares " +
                                  std::to_string(declared));
    }
    if (numcore::sha256_hex(payload) != h.manifest["payload_sha256"].get<std::string>()) {
        throw CheckpointError(CheckpointErrorKind::checksum_mismatch, "payload SHA-256 does not match the manifest");
    }
    Checkpoint ck;
    ck.config = h.manifest.value("config", nlohmann::json::object());
    ck.lineage = h.manifest.value("lineage", nlohmann::json::object());
    std::size_t expected_offset = 0;
    for (const auto& entry : h.manifest["tensors"]) {
        std::string name;
        Shape shape;
        std::size_t offset = 0;
        try {
            name = entry.at("name").get<std::string>();
            shape = entry.at("shape").get<Shape>();
            offset = entry.at("offset").get<std::size_t>();
        } catch (const nlohmann::json::exception& e) {
            corrupt(std::string("bad tensor index entry: ") + e.what());
        }
        if (shape.empty()) {
            throw CheckpointError(CheckpointErrorKind::shape_mismatch, "tensor '" + name + "' has an empty shape");
        }
        const std::size_t bytes_needed = numcore::numel(shape) * sizeof(double);
        if (offset != expected_offset || offset + bytes_needed > payload.size()) {
            throw CheckpointError(CheckpointErrorKind::shape_mismatch,
                                  "tensor '" + name + "' shape " + numcore::shape_str(shape) +
                                      " does not fit the payload at offset " + std::to_string(offset));
        }
        expected_offset = offset + bytes_needed;
        if (wanted(name, prefixes)) {
            ck.tensors.emplace_back(name, Tensor::from(shape, numcore::from_le_bytes(payload.subspan(offset, bytes_needed))));
        }
    }
    if (expected_offset != payload.size()) {
        throw CheckpointError(CheckpointErrorKind::shape_mismatch, "tensor index does not cover the whole payload");
    }
    return ck;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
    const auto bytes = serialize_checkpoint(checkpoint);
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw CheckpointError(CheckpointErrorKind::io, "cannot write '" + tmp.string() + "'");
        }
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!out) {
            throw CheckpointError(CheckpointErrorKind::io, "short write to '" + tmp.string() + "'");
        }
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        std::filesystem::remove(tmp, ec);
        throw CheckpointError(CheckpointErrorKind::io, "cannot move checkpoint into '" + path.string() + "'");
    }
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const std::vector<std::string>& prefixes) {
    const auto bytes = read_all(path);
    return parse_checkpoint(bytes, prefixes);
}

nlohmann::json read_manifest(const std::filesystem::path& path) {
    return read_header(read_all(path)).manifest;
}

}  // namespace advfusion::advtrain
