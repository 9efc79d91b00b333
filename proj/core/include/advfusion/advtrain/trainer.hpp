// SPDX-License-Identifier: Apache-2.0
//
// Training loops under the CLM objective: backbone pretraining, per-language
// adapters, AdapterFusion and the two-phase AdvFusion schedule.

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "advfusion/advtrain/checkpoint.hpp"
#include "advfusion/backbone/backbone.hpp"
#include "advfusion/corpus/corpus.hpp"
#include "advfusion/fusion/fusion.hpp"
#include "advfusion/peft/adapter.hpp"

namespace advfusion::advtrain {

inline constexpr std::int64_t kIgnoreIndex = -100;

class TrainingError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Adam with bias correction and a per-tensor step count. A tensor whose
/// gradient is identically zero is skipped entirely (moments untouched), so
/// a zero-gradient step never moves a parameter.
class Adam {
public:
    Adam(std::vector<NamedTensor> params, AdamConfig config);

    void step();
    void zero_grad();
    void reset_moments();
    void set_lr(double lr) { config_.lr = lr; }
    const AdamConfig& config() const { return config_; }
    const std::vector<NamedTensor>& parameters() const { return params_; }

private:
    struct Moments {
        std::vector<double> m, v;
        std::uint64_t t = 0;
    };
    std::vector<NamedTensor> params_;
    std::vector<Moments> moments_;
    AdamConfig config_;
};

/// Next-token targets; positions whose next token is outside the loss mask
/// get kIgnoreIndex. With `all_positions`, every next token counts.
std::vector<std::int64_t> clm_targets(const corpus::EncodedSample& sample, bool all_positions = false);

Tensor clm_loss(const backbone::Backbone& model, const corpus::EncodedSample& sample,
                const backbone::Attachments* attachments, bool all_positions = false);

enum class TrainMode { backbone, adapter, fusion, advfusion };

std::string_view to_string(TrainMode mode);
TrainMode parse_train_mode(std::string_view text);

struct TrainingPlan {
    TrainMode mode = TrainMode::adapter;
    std::string target_language;            // advfusion
    std::vector<std::string> adapter_tags;  // fusion, advfusion
    /// Epoch count of each phase; advfusion runs two phases.
    std::size_t epochs_per_phase = 1;
    AdamConfig optimizer;
    std::size_t batch_size = 1;
    std::uint64_t seed = 0;
    bool shuffle = true;
    bool reset_moments_between_phases = false;

    void validate() const;
    std::size_t total_epochs() const { return mode == TrainMode::advfusion ? 2 * epochs_per_phase : epochs_per_phase; }
};

void to_json(nlohmann::json& j, const TrainingPlan& p);

struct StepInfo {
    std::size_t step = 0;  // 1-based, global across phases
    std::size_t epoch = 0; // 1-based, global across phases
    int phase = 1;
    std::string language;
    std::vector<std::string> sample_ids;
    double loss = 0.0;     // unset in before_step
    double lr = 0.0;
    double frozen_grad_abs_max = 0.0;
};

struct TrainHooks {
    /// Before the forward pass of each step.
    std::function<void(const StepInfo&)> before_step;
    /// After backward, before the optimizer update; gradients are live.
    std::function<void(const StepInfo&)> after_backward;
};

/// JSON-lines event sink. Records are also kept in memory.
class EventLog {
public:
    EventLog() = default;
    explicit EventLog(const std::filesystem::path& path);

    void write(const nlohmann::json& record);
    const std::vector<nlohmann::json>& records() const { return records_; }
    std::size_t count(std::string_view type) const;

private:
    std::unique_ptr<std::ofstream> out_;
    std::vector<nlohmann::json> records_;
};

struct TrainResult {
    std::vector<double> step_losses;
    std::vector<double> epoch_losses;
    std::size_t steps = 0;
    std::size_t epochs = 0;
    std::vector<NamedTensor> phase1_snapshot;  // advfusion: fusion tensors at the phase boundary
};

/// Trains every backbone tensor; loss covers all next-token positions.
TrainResult pretrain_backbone(backbone::Backbone& model, const std::vector<corpus::EncodedSample>& data,
                              const TrainingPlan& plan, const TrainHooks& hooks = {}, EventLog* log = nullptr);

/// Only the adapter's tensors move; the backbone is frozen.
TrainResult train_language_adapter(backbone::Backbone& model, peft::AdapterSet& adapter,
                                   const std::vector<corpus::EncodedSample>& data, const TrainingPlan& plan,
                                   const TrainHooks& hooks = {}, EventLog* log = nullptr);

/// Needs >= 2 adapters with distinct tags; only fusion Q/K/V move.
TrainResult train_adapterfusion(backbone::Backbone& model, fusion::FusionModel& fused,
                                const std::vector<corpus::EncodedSample>& data, const TrainingPlan& plan,
                                const TrainHooks& hooks = {}, EventLog* log = nullptr);

/// Phase 1 masks the target adapter for epochs_per_phase epochs, then one
/// unmask event, then phase 2 for epochs_per_phase more epochs.
TrainResult train_advfusion(backbone::Backbone& model, fusion::FusionModel& fused,
                            const std::vector<corpus::EncodedSample>& data, const TrainingPlan& plan,
                            const TrainHooks& hooks = {}, EventLog* log = nullptr);

/// One phase of fusion training with whatever mask `fused` carries. No
/// adapter-count check, so a single-adapter fusion can be trained.
TrainResult fit_fusion(backbone::Backbone& model, fusion::FusionModel& fused,
                       const std::vector<corpus::EncodedSample>& data, const TrainingPlan& plan,
                       const TrainHooks& hooks = {}, EventLog* log = nullptr);

// Checkpoint conversion. Configs carry a "kind" of backbone, adapter or fusion.

Checkpoint backbone_checkpoint(const backbone::Backbone& model, const corpus::Vocabulary& vocab,
                               nlohmann::json lineage = nlohmann::json::object());
backbone::Backbone load_backbone(const Checkpoint& ck);
corpus::Vocabulary load_vocabulary(const Checkpoint& ck);

Checkpoint adapter_checkpoint(const peft::AdapterSet& adapter, const backbone::Backbone& model,
                              nlohmann::json lineage = nlohmann::json::object());
peft::AdapterSet load_adapter(const Checkpoint& ck);

/// Embeds the frozen adapter tensors; the backbone is referenced by hash.
Checkpoint fusion_checkpoint(const fusion::FusionModel& fused, const backbone::Backbone& model, TrainMode mode,
                             const std::string& target, nlohmann::json lineage = nlohmann::json::object());
fusion::FusionModel load_fusion(const Checkpoint& ck);

backbone::BackboneConfig checkpoint_backbone_config(const Checkpoint& ck);

}  // namespace advfusion::advtrain
