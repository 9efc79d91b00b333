// SPDX-License-Identifier: Apache-2.0
//
// Run configuration: an INI file with [backbone], [peft], [training],
// [data], [output], [synth] and [analysis] sections. Precedence, lowest
// first: built-in defaults, the config file, then --set section.key=value.

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "advfusion/backbone/backbone.hpp"
#include "advfusion/corpus/corpus.hpp"
#include "advfusion/peft/adapter.hpp"

namespace advfusion::cli {

/// Usage and configuration problems; the CLI maps them to exit code 2.
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

struct TrainingConfig {
    std::uint64_t seed = 13;
    std::size_t batch_size = 4;
    std::size_t backbone_epochs = 30;
    double backbone_lr = 3e-3;
    std::size_t adapter_epochs = 10;
    double adapter_lr = 1e-3;
    std::size_t fusion_epochs = 4;  // per phase for advfusion
    double fusion_lr = 5e-4;
    bool reset_moments = false;
    std::string mask_mode = "exclude";
    std::size_t max_new_tokens = 16;
};

struct DataConfig {
    std::string train;  // empty: <run_dir>/data/train.jsonl
    std::string valid;
    std::string test;
};

struct OutputConfig {
    std::string run_dir = "run";
};

struct AnalysisConfig {
    std::string order = "aggregate_then_normalize";
};

struct RunConfig {
    backbone::BackboneConfig backbone;
    std::size_t vocab_max_size = 1024;
    peft::PeftConfig peft;
    TrainingConfig training;
    DataConfig data;
    OutputConfig output;
    AnalysisConfig analysis;
    corpus::SynthSpec synth;

    /// ADVFUSION_RUN_ROOT at load time (current directory when unset).
    std::filesystem::path run_root = ".";

    std::filesystem::path run_dir() const;
    /// Resolved path of data.<split>; relative paths sit under the run directory.
    std::filesystem::path data_path(const std::string& split) const;
    /// Relative paths resolve under the run directory.
    std::filesystem::path in_run_dir(const std::filesystem::path& p) const;
};

RunConfig load_config(const std::optional<std::filesystem::path>& file, const std::vector<std::string>& overrides);
/// Applies one "section.key=value" assignment.
void apply_override(RunConfig& config, const std::string& assignment);
void set_value(RunConfig& config, const std::string& section, const std::string& key, const std::string& value);
/// Every key, sorted by section then key, in INI form.
std::string render_config(const RunConfig& config);
/// Cross-field checks (backbone shape, peft divisibility, enums).
void validate(const RunConfig& config);

}  // namespace advfusion::cli
