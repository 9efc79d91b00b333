// SPDX-License-Identifier: Apache-2.0
//
// Per-language PEFT modules: bottleneck adapters, Compacter (PHM) adapters
// and LoRA. An AdapterSet is one language's module stack across all layers
// and doubles as the Attachments that plug it into the backbone.

#pragma once

#include <cstddef>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "advfusion/backbone/backbone.hpp"
#include "advfusion/numcore/digest.hpp"
#include "advfusion/numcore/rng.hpp"
#include "advfusion/numcore/tensor.hpp"

namespace advfusion::peft {

using numcore::NamedTensor;
using numcore::Tensor;

class PeftError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

enum class AdapterKind { bottleneck, compacter, lora };

std::string_view to_string(AdapterKind kind);
AdapterKind parse_adapter_kind(std::string_view text);

struct PeftConfig {
    std::size_t bottleneck_dim = 0;  // 0 selects hidden_size / 4
    std::size_t phm_dim = 4;
    std::size_t lora_rank = 16;
    double lora_alpha = 16.0;
    double init_std = 0.02;

    std::size_t resolved_bottleneck_dim(std::size_t hidden_size) const;
    bool operator==(const PeftConfig&) const = default;
};

void to_json(nlohmann::json& j, const PeftConfig& c);
void from_json(const nlohmann::json& j, PeftConfig& c);

/// Trainable unit at one layer. Compacter modules hold handles to the
/// PHM rule matrices shared by their whole AdapterSet.
struct AdapterModule {
    AdapterKind kind = AdapterKind::bottleneck;
    std::string language;
    std::size_t layer_index = 0;
    std::size_t bottleneck_dim = 0;
    std::size_t phm_dim = 0;
    std::size_t lora_rank = 0;
    double lora_alpha = 0.0;
    /// Layer-local tensors, keyed by short names ("down", "up_bias", "q_A", ...).
    std::vector<NamedTensor> params;
    std::vector<Tensor> phm_rules;  // compacter only; shared

    const Tensor& param(std::string_view name) const;
    double lora_scale() const { return lora_alpha / static_cast<double>(lora_rank); }
};

/// z = U(ReLU(D h)) + r with biases, for bottleneck and compacter modules.
Tensor bottleneck_forward(const Tensor& ffn_out, const Tensor& residual, const AdapterModule& module);

/// W = sum_i rules[i] (x) factors[i]; rules are n x n, factors (in/n) x (out/n).
Tensor phm_compose(std::span<const Tensor> rules, std::span<const Tensor> factors);

/// Down (h x d) and up (d x h) projections of a compacter module, composed
/// from the shared rules and the rank-1 factors.
Tensor compacter_down(const AdapterModule& module);
Tensor compacter_up(const AdapterModule& module);

/// x W + (alpha / r) x A B for the LoRA pair targeting `target`.
Tensor lora_forward(const Tensor& x, const Tensor& base_weight, const AdapterModule& module,
                    backbone::Projection target);
/// Only the low-rank term (alpha / r) x A B.
Tensor lora_delta(const Tensor& x, const AdapterModule& module, backbone::Projection target);

/// LoRA adapts the attention query and value projections only.
bool lora_targets(backbone::Projection which);

class AdapterSet : public backbone::Attachments {
public:
    static AdapterSet create(AdapterKind kind, std::string language, const backbone::BackboneConfig& backbone,
                             const PeftConfig& peft, numcore::Rng& rng);
    /// Rebuilds from tensors named as parameters() names them.
    static AdapterSet from_tensors(AdapterKind kind, std::string language,
                                   const backbone::BackboneConfig& backbone, const PeftConfig& peft,
                                   const std::vector<NamedTensor>& tensors);

    AdapterKind kind() const { return kind_; }
    const std::string& language() const { return language_; }
    std::size_t num_layers() const { return layers_.size(); }
    const AdapterModule& layer(std::size_t index) const { return layers_.at(index); }
    const PeftConfig& config() const { return config_; }

    /// Unique tensors under "adapter.<kind>.<language>." names.
    std::vector<NamedTensor> parameters() const;
    std::string name_prefix() const;
    std::size_t parameter_count() const;
    void set_trainable(bool trainable);
    std::string content_hash() const { return numcore::content_hash(parameters()); }

    std::optional<Tensor> projection_delta(std::size_t layer, backbone::Projection which,
                                           const Tensor& x) const override;
    std::optional<Tensor> slot(std::size_t layer, const Tensor& ffn_out, const Tensor& residual,
                               backbone::LayerState& state) const override;

private:
    AdapterSet(AdapterKind kind, std::string language, PeftConfig config)
        : kind_(kind), language_(std::move(language)), config_(config) {}

    AdapterKind kind_;
    std::string language_;
    PeftConfig config_;
    std::vector<Tensor> phm_rules_;
    std::vector<AdapterModule> layers_;
};

struct ParamGroup {
    std::string name;
    std::vector<NamedTensor> tensors;
};

struct ParamCount {
    struct Entry {
        std::string name;
        std::size_t total = 0;
        std::size_t trainable = 0;
    };
    std::vector<Entry> groups;
    std::size_t total = 0;
    std::size_t trainable = 0;

    double trainable_ratio() const {
        return total ? static_cast<double>(trainable) / static_cast<double>(total) : 0.0;
    }
};

/// Exact counts; a tensor is trainable when it requires grad. Tensors shared
/// between groups are counted once.
ParamCount param_count(const std::vector<ParamGroup>& groups);
ParamCount param_count(const AdapterModule& module);
ParamCount param_count(const AdapterSet& set);

}  // namespace advfusion::peft
