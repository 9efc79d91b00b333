// SPDX-License-Identifier: Apache-2.0
//
// Attention over per-language adapter outputs. At layer l, with query
// h_l (the FFN output) and adapter outputs z_{l,n}:
//
//   score_n[t] = (h_l[t] Q_l) . (z_n[t] K_l)      unscaled
//   S[t, :]    = softmax over the active adapters
//   O_l[t]     = sum_n S[t, n] (z_n[t] V_l)
//
// O_l replaces the layer's slot output. Masked adapters are removed from the
// active set entirely; their outputs are never computed.

#pragma once

#include <cstddef>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "advfusion/backbone/backbone.hpp"
#include "advfusion/numcore/digest.hpp"
#include "advfusion/numcore/rng.hpp"
#include "advfusion/numcore/tensor.hpp"
#include "advfusion/peft/adapter.hpp"

namespace advfusion::fusion {

using numcore::NamedTensor;
using numcore::Tensor;

class FusionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// How a masked adapter is treated. `exclude` drops it from the softmax
/// index set. `zero_weights` is an experiment flag: the adapter stays in the
/// softmax with its weights treated as zero, so its output collapses to r_l.
enum class MaskMode { exclude, zero_weights };

std::string_view to_string(MaskMode mode);
MaskMode parse_mask_mode(std::string_view text);

class FusionBlock {
public:
    /// Q, K ~ N(0, 0.02); V = I + N(0, 0.01).
    FusionBlock(std::size_t layer_index, std::vector<std::string> adapter_order, std::size_t hidden_size,
                numcore::Rng& rng);
    FusionBlock(std::size_t layer_index, std::vector<std::string> adapter_order, Tensor query, Tensor key,
                Tensor value);

    std::size_t layer_index() const { return layer_; }
    const std::vector<std::string>& adapter_order() const { return order_; }
    const std::set<std::string>& mask() const { return mask_; }
    std::vector<std::string> active_tags() const;
    bool is_masked(const std::string& tag) const { return mask_.count(tag) > 0; }

    const Tensor& query() const { return query_; }
    const Tensor& key() const { return key_; }
    const Tensor& value() const { return value_; }

    /// Replaces the mask; at least one adapter must stay active.
    void set_mask(const std::set<std::string>& tags);

    std::vector<NamedTensor> parameters() const;
    void set_trainable(bool trainable);

private:
    std::size_t layer_;
    std::vector<std::string> order_;
    std::set<std::string> mask_;
    Tensor query_, key_, value_;
};

struct FusionOutput {
    Tensor output;                     // O_l  [T x h]
    Tensor weights;                    // S_l  [T x N_active]
    std::vector<std::string> columns;  // tag of each column of `weights`
};

/// `adapter_outputs` must hold z for every tag that takes part in the softmax:
/// unmasked tags, plus masked tags in zero_weights mode.
FusionOutput fusion_forward(const Tensor& ffn_out, const std::map<std::string, Tensor>& adapter_outputs,
                            const FusionBlock& block, MaskMode mode = MaskMode::exclude);

FusionBlock set_mask(FusionBlock block, const std::set<std::string>& tags);

/// Raw fusion weights for one layer of one sample: tokens x adapter_order,
/// masked columns exactly zero.
struct LayerCapture {
    std::size_t layer = 0;
    std::size_t tokens = 0;
    std::vector<std::string> tags;
    std::vector<double> weights;

    double at(std::size_t token, std::size_t adapter) const { return weights[token * tags.size() + adapter]; }
};

struct SampleCapture {
    std::string sample_id;
    std::vector<LayerCapture> layers;

    std::size_t entry_count() const;
};

/// Per-run capture buffer. Recording never alters fusion outputs.
class AttentionCapture {
public:
    void begin_sample(std::string sample_id);
    void record(const FusionBlock& block, const FusionOutput& out);

    const std::vector<SampleCapture>& samples() const { return samples_; }
    bool empty() const { return samples_.empty(); }
    void clear() { samples_.clear(); }

private:
    std::vector<SampleCapture> samples_;
};

/// Every recorded capture of `block`'s layer, one per sample.
std::vector<LayerCapture> capture_attention(const FusionBlock& block, const AttentionCapture& capture);

/// Fusion over a fixed, ordered set of frozen adapter stacks of one kind.
class FusionModel : public backbone::Attachments {
public:
    FusionModel(const backbone::BackboneConfig& backbone, std::vector<peft::AdapterSet> adapters,
                numcore::Rng& rng);
    FusionModel(std::vector<peft::AdapterSet> adapters, std::vector<FusionBlock> blocks);

    const std::vector<peft::AdapterSet>& adapters() const { return adapters_; }
    std::vector<peft::AdapterSet>& adapters() { return adapters_; }
    const std::vector<FusionBlock>& blocks() const { return blocks_; }
    std::vector<FusionBlock>& blocks() { return blocks_; }
    std::vector<std::string> adapter_order() const;
    peft::AdapterKind adapter_kind() const { return adapters_.front().kind(); }
    const peft::AdapterSet& adapter(const std::string& tag) const;

    void set_mask(const std::set<std::string>& tags);
    const std::set<std::string>& mask() const { return blocks_.front().mask(); }
    MaskMode mask_mode() const { return mode_; }
    void set_mask_mode(MaskMode mode) { mode_ = mode; }

    void set_capture(AttentionCapture* capture) { capture_ = capture; }

    /// Q/K/V of every layer, "fusion.layer<l>.{query,key,value}".
    std::vector<NamedTensor> parameters() const;
    std::size_t parameter_count() const;
    void set_trainable(bool trainable);

    std::optional<Tensor> slot(std::size_t layer, const Tensor& ffn_out, const Tensor& residual,
                               backbone::LayerState& state) const override;

private:
    void validate() const;

    std::vector<peft::AdapterSet> adapters_;
    std::vector<FusionBlock> blocks_;
    MaskMode mode_ = MaskMode::exclude;
    AttentionCapture* capture_ = nullptr;
};

}  // namespace advfusion::fusion
