// SPDX-License-Identifier: Apache-2.0

#include "advfusion/fusion/fusion.hpp"

#include <algorithm>
#include <unordered_set>

#include "advfusion/numcore/ops.hpp"

namespace advfusion::fusion {

namespace nc = numcore;

namespace {
constexpr double kQueryKeyStd = 0.02;
constexpr double kValueNoiseStd = 0.01;

void validate_order(const std::vector<std::string>& order) {
    if (order.empty()) {
        throw FusionError("fusion needs at least one adapter");
    }
    std::set<std::string> seen;
    for (const auto& tag : order) {
        if (!seen.insert(tag).second) {
            throw FusionError("duplicate adapter tag '" + tag + "' in fusion order");
        }
    }
}
}  // namespace

std::string_view to_string(MaskMode mode) { return mode == MaskMode::exclude ? "exclude" : "zero_weights"; }

MaskMode parse_mask_mode(std::string_view text) {
    if (text == "exclude") {
        return MaskMode::exclude;
    }
    if (text == "zero_weights") {
        return MaskMode::zero_weights;
    }
    throw FusionError("unknown mask mode '" + std::string(text) + "' (expected exclude|zero_weights)");
}

FusionBlock::FusionBlock(std::size_t layer_index, std::vector<std::string> adapter_order, std::size_t hidden_size,
                         nc::Rng& rng)
    : layer_(layer_index), order_(std::move(adapter_order)) {
    validate_order(order_);
    query_ = rng.normal_tensor({hidden_size, hidden_size}, kQueryKeyStd, true);
    key_ = rng.normal_tensor({hidden_size, hidden_size}, kQueryKeyStd, true);
    value_ = rng.normal_tensor({hidden_size, hidden_size}, kValueNoiseStd, true);
    auto v = value_.mutable_data();
    for (std::size_t i = 0; i < hidden_size; ++i) {
        v[i * hidden_size + i] += 1.0;
    }
}

FusionBlock::FusionBlock(std::size_t layer_index, std::vector<std::string> adapter_order, Tensor query, Tensor key,
                         Tensor value)
    : layer_(layer_index), order_(std::move(adapter_order)), query_(std::move(query)), key_(std::move(key)),
      value_(std::move(value)) {
    validate_order(order_);
    const auto& s = query_.shape();
    if (s.size() != 2 || s[0] != s[1] || key_.shape() != s || value_.shape() != s) {
        throw FusionError("fusion Q/K/V must be square and share one shape");
    }
}

std::vector<std::string> FusionBlock::active_tags() const {
    std::vector<std::string> out;
    for (const auto& tag : order_) {
        if (!is_masked(tag)) {
            out.push_back(tag);
        }
    }
    return out;
}

void FusionBlock::set_mask(const std::set<std::string>& tags) {
    for (const auto& tag : tags) {
        if (std::find(order_.begin(), order_.end(), tag) == order_.end()) {
            throw FusionError("cannot mask unknown adapter '" + tag + "'");
        }
    }
    if (tags.size() >= order_.size()) {
        throw FusionError("mask would exclude every adapter; at least one must stay active");
    }
    mask_ = tags;
}

FusionBlock set_mask(FusionBlock block, const std::set<std::string>& tags) {
    block.set_mask(tags);
    return block;
}

std::vector<NamedTensor> FusionBlock::parameters() const {
    const std::string prefix = "fusion.layer" + std::to_string(layer_) + ".";
    return {{prefix + "query", query_}, {prefix + "key", key_}, {prefix + "value", value_}};
}

void FusionBlock::set_trainable(bool trainable) {
    query_.set_requires_grad(trainable);
    key_.set_requires_grad(trainable);
    value_.set_requires_grad(trainable);
}

FusionOutput fusion_forward(const Tensor& ffn_out, const std::map<std::string, Tensor>& adapter_outputs,
                            const FusionBlock& block, MaskMode mode) {
    const std::size_t h = block.query().dim(0);
    if (ffn_out.rank() != 2 || ffn_out.dim(1) != h) {
        throw FusionError("fusion_forward: query input " + nc::shape_str(ffn_out.shape()) + " does not match width " +
                          std::to_string(h));
    }
    FusionOutput out;
    for (const auto& tag : block.adapter_order()) {
        if (mode == MaskMode::exclude && block.is_masked(tag)) {
            continue;
        }
        out.columns.push_back(tag);
    }
    if (out.columns.empty()) {
        throw FusionError("fusion_forward: every adapter is masked");
    }
    Tensor q = nc::matmul(ffn_out, block.query());
    std::vector<Tensor> scores, values;
    for (const auto& tag : out.columns) {
        auto it = adapter_outputs.find(tag);
        if (it == adapter_outputs.end()) {
            throw FusionError("fusion_forward: missing output for active adapter '" + tag + "'");
        }
        if (it->second.shape() != ffn_out.shape()) {
            throw FusionError("fusion_forward: adapter '" + tag + "' output " + nc::shape_str(it->second.shape()) +
                              " does not match " + nc::shape_str(ffn_out.shape()));
        }
        scores.push_back(nc::row_dot(q, nc::matmul(it->second, block.key())));
        values.push_back(nc::matmul(it->second, block.value()));
    }
    out.weights = nc::softmax(scores.size() == 1 ? scores.front() : nc::concat(scores, 1), 1);
    for (std::size_t j = 0; j < values.size(); ++j) {
        Tensor term = nc::scale_rows(values[j], nc::slice_cols(out.weights, j, 1));
        out.output = j == 0 ? term : nc::add(out.output, term);
    }
    return out;
}

std::size_t SampleCapture::entry_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) {
        n += l.weights.size();
    }
    return n;
}

void AttentionCapture::begin_sample(std::string sample_id) {
    samples_.push_back(SampleCapture{std::move(sample_id), {}});
}

void AttentionCapture::record(const FusionBlock& block, const FusionOutput& out) {
    if (samples_.empty()) {
        begin_sample("");
    }
    LayerCapture cap;
    cap.layer = block.layer_index();
    cap.tags = block.adapter_order();
    cap.tokens = out.weights.dim(0);
    cap.weights.assign(cap.tokens * cap.tags.size(), 0.0);
    auto S = out.weights.data();
    const std::size_t active = out.columns.size();
    for (std::size_t j = 0; j < active; ++j) {
        const auto col = static_cast<std::size_t>(
            std::find(cap.tags.begin(), cap.tags.end(), out.columns[j]) - cap.tags.begin());
        for (std::size_t t = 0; t < cap.tokens; ++t) {
            cap.weights[t * cap.tags.size() + col] = S[t * active + j];
        }
    }
    samples_.back().layers.push_back(std::move(cap));
}

std::vector<LayerCapture> capture_attention(const FusionBlock& block, const AttentionCapture& capture) {
    std::vector<LayerCapture> out;
    for (const auto& sample : capture.samples()) {
        for (const auto& layer : sample.layers) {
            if (layer.layer == block.layer_index()) {
                out.push_back(layer);
            }
        }
    }
    if (out.empty()) {
        throw FusionError("no attention captured for fusion layer " + std::to_string(block.layer_index()) +
                          "; run a forward pass with capture enabled first");
    }
    return out;
}

FusionModel::FusionModel(const backbone::BackboneConfig& backbone, std::vector<peft::AdapterSet> adapters,
                         nc::Rng& rng)
    : adapters_(std::move(adapters)) {
    if (adapters_.empty()) {
        throw FusionError("fusion needs at least one adapter");
    }
    const auto order = adapter_order();
    for (std::size_t l = 0; l < backbone.num_layers; ++l) {
        blocks_.emplace_back(l, order, backbone.hidden_size, rng);
    }
    validate();
    if (adapters_.front().num_layers() != backbone.num_layers) {
        throw FusionError("adapter stacks do not match the backbone depth");
    }
}

FusionModel::FusionModel(std::vector<peft::AdapterSet> adapters, std::vector<FusionBlock> blocks)
    : adapters_(std::move(adapters)), blocks_(std::move(blocks)) {
    validate();
}

void FusionModel::validate() const {
    if (adapters_.empty() || blocks_.empty()) {
        throw FusionError("fusion needs at least one adapter and one layer");
    }
    const auto kind = adapters_.front().kind();
    if (kind == peft::AdapterKind::lora) {
        throw FusionError("fusion composes slot adapters (bottleneck or compacter), not LoRA");
    }
    for (const auto& a : adapters_) {
        if (a.kind() != kind) {
            throw FusionError("fusion mixes adapter kinds: " + std::string(peft::to_string(kind)) + " and " +
                              std::string(peft::to_string(a.kind())));
        }
        if (a.num_layers() != blocks_.size()) {
            throw FusionError("adapter '" + a.language() + "' depth does not match the fusion layers");
        }
    }
    const auto order = adapter_order();
    validate_order(order);
    for (std::size_t l = 0; l < blocks_.size(); ++l) {
        if (blocks_[l].adapter_order() != order || blocks_[l].layer_index() != l) {
            throw FusionError("fusion block " + std::to_string(l) + " disagrees with the adapter order");
        }
    }
}

std::vector<std::string> FusionModel::adapter_order() const {
    std::vector<std::string> order;
    for (const auto& a : adapters_) {
        order.push_back(a.language());
    }
    return order;
}

const peft::AdapterSet& FusionModel::adapter(const std::string& tag) const {
    for (const auto& a : adapters_) {
        if (a.language() == tag) {
            return a;
        }
    }
    throw FusionError("fusion has no adapter '" + tag + "'");
}

void FusionModel::set_mask(const std::set<std::string>& tags) {
    for (auto& b : blocks_) {
        b.set_mask(tags);
    }
}

std::vector<NamedTensor> FusionModel::parameters() const {
    std::vector<NamedTensor> out;
    for (const auto& b : blocks_) {
        for (auto& p : b.parameters()) {
            out.push_back(std::move(p));
        }
    }
    return out;
}

std::size_t FusionModel::parameter_count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : parameters()) {
        n += t.numel();
    }
    return n;
}

void FusionModel::set_trainable(bool trainable) {
    for (auto& b : blocks_) {
        b.set_trainable(trainable);
    }
}

std::optional<Tensor> FusionModel::slot(std::size_t layer, const Tensor& ffn_out, const Tensor& residual,
                                        backbone::LayerState& state) const {
    const FusionBlock& block = blocks_.at(layer);
    std::map<std::string, Tensor> outputs;
    for (const auto& a : adapters_) {
        if (block.is_masked(a.language())) {
            if (mode_ == MaskMode::exclude) {
                continue;
            }
            outputs.emplace(a.language(), residual);
            continue;
        }
        Tensor z = peft::bottleneck_forward(ffn_out, residual, a.layer(layer));
        state.adapter_outputs.emplace_back(a.language(), z);
        outputs.emplace(a.language(), z);
    }
    FusionOutput out = fusion_forward(ffn_out, outputs, block, mode_);
    if (capture_) {
        capture_->record(block, out);
    }
    return out.output;
}

}  // namespace advfusion::fusion
