// SPDX-License-Identifier: Apache-2.0
//
// advfusion-lab entry points. Exit codes: 0 success, 2 usage or config
// error, 3 runtime failure.

#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "config.hpp"

namespace advfusion::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitRuntime = 3;

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

struct ProtocolRow {
    std::string name;
    std::size_t trainable = 0;
    std::size_t total = 0;
    std::map<std::string, double> bleu;   // per language
    std::map<std::string, double> rouge;
    double bleu_avg = 0.0;                // mean over languages
    double rouge_avg = 0.0;

    double ratio() const { return total ? static_cast<double>(trainable) / static_cast<double>(total) : 0.0; }
};

struct ProtocolResult {
    std::vector<std::string> languages;
    std::string target;
    std::vector<ProtocolRow> rows;
    std::string table_markdown;
    std::filesystem::path run_dir;
    std::vector<std::filesystem::path> traces;
    /// Artifact path (relative to the run directory) -> sha256 of its bytes.
    std::map<std::string, std::string> artifact_digests;
};

/// synth -> pretrain -> adapters for every method and language -> fusion and
/// advfusion over bottleneck and compacter adapters -> evaluation on the
/// test split -> attention traces -> comparison table.
ProtocolResult run_protocol(const RunConfig& config, std::ostream& log);

}  // namespace advfusion::cli
