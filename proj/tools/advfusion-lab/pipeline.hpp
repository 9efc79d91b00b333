// SPDX-License-Identifier: Apache-2.0
//
// Stage helpers shared by the subcommands and the protocol runner.

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <set>
#include <ostream>
#include <string>
#include <vector>

#include "advfusion/advtrain/trainer.hpp"
#include "advfusion/attnlab/attnlab.hpp"
#include "advfusion/backbone/backbone.hpp"
#include "advfusion/corpus/corpus.hpp"
#include "advfusion/fusion/fusion.hpp"
#include "advfusion/metrics/metrics.hpp"
#include "advfusion/peft/adapter.hpp"
#include "config.hpp"

namespace advfusion::cli {

/// Stable 64-bit label for seed derivation (FNV-1a).
std::uint64_t label(std::string_view text);

std::vector<corpus::Sample> load_split(const RunConfig& config, const std::string& split);

struct PretrainedBackbone {
    backbone::Backbone model;
    corpus::Vocabulary vocab;
};

PretrainedBackbone pretrain(const RunConfig& config, const std::vector<corpus::Sample>& train,
                            advtrain::EventLog* log);

peft::AdapterSet train_adapter(const RunConfig& config, backbone::Backbone& model, const corpus::Vocabulary& vocab,
                               const std::vector<corpus::Sample>& train, const std::string& language,
                               peft::AdapterKind kind, advtrain::EventLog* log);

struct FusionRun {
    fusion::FusionModel model;
    advtrain::TrainResult result;
};

/// `target` is required for advfusion and ignored for fusion.
FusionRun train_fusion(const RunConfig& config, backbone::Backbone& model, const corpus::Vocabulary& vocab,
                       const std::vector<corpus::Sample>& train, std::vector<peft::AdapterSet> adapters,
                       advtrain::TrainMode mode, const std::string& target, advtrain::EventLog* log);

/// Greedy predictions; `attachments_for` picks the attachments per sample
/// (nullptr entries decode with the bare backbone).
std::vector<metrics::ScoredPair> predict(const RunConfig& config, const backbone::Backbone& model,
                                         const corpus::Vocabulary& vocab, const std::vector<corpus::Sample>& samples,
                                         const std::function<const backbone::Attachments*(const corpus::Sample&)>&
                                             attachments_for);

/// Runs `samples` through the fusion model with capture enabled.
std::vector<fusion::SampleCapture> capture(const backbone::Backbone& model, const corpus::Vocabulary& vocab,
                                           fusion::FusionModel& fused,
                                           const std::vector<corpus::Sample>& samples);

/// Copy of `fused` whose fusion tensors come from `tensors` (e.g. a phase-1
/// snapshot), carrying `mask`.
fusion::FusionModel with_fusion_tensors(const fusion::FusionModel& fused, const std::vector<numcore::NamedTensor>& tensors,
                                        const std::set<std::string>& mask);

/// Parameter count of a single-adapter setup: backbone frozen, adapter trainable.
peft::ParamCount count_adapter_setup(backbone::Backbone& model, peft::AdapterSet& adapter);
/// Parameter count of a fusion setup: backbone and adapters frozen, fusion trainable.
peft::ParamCount count_fusion_setup(backbone::Backbone& model, fusion::FusionModel& fused);

/// Event log at `path`, creating parent directories.
advtrain::EventLog open_log(const std::filesystem::path& path);
void save_artifact(const std::filesystem::path& path, const advtrain::Checkpoint& ck);

/// Space-joined corpus tokens, the form references are scored in.
std::string token_text(const std::string& text);

void write_text(const std::filesystem::path& path, const std::string& text);

/// Loads a backbone checkpoint and checks the hash recorded in `lineage`
/// (when present) against it.
PretrainedBackbone load_backbone_for(const std::filesystem::path& path, const nlohmann::json& lineage);

}  // namespace advfusion::cli
