// SPDX-License-Identifier: Apache-2.0
//
// Miniature decoder-only transformer used as the frozen base model.
//
// Each layer is post-norm:
//
//   x1 = LN1(x + Attn(x))
//   h  = FFN(x1)            // "h_l", the query seen by fusion
//   r  = h + x1             // "r_l", what the slot hands to LN2 by default
//   x' = LN2(slot(h, r))    // slot(h, r) == r when nothing is attached
//
// Adapters return U(ReLU(D h)) + r, so a zero up-projection reproduces the
// bare layer exactly.

#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "advfusion/numcore/digest.hpp"
#include "advfusion/numcore/ops.hpp"
#include "advfusion/numcore/rng.hpp"
#include "advfusion/numcore/tensor.hpp"

namespace advfusion::backbone {

using numcore::NamedTensor;
using numcore::Tensor;

class BackboneError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

struct BackboneConfig {
    std::size_t num_layers = 4;
    std::size_t hidden_size = 64;
    std::size_t num_heads = 4;
    std::size_t ffn_size = 256;
    std::size_t vocab_size = 0;  // taken from the corpus vocabulary
    std::size_t max_seq_len = 256;
    double layer_norm_eps = numcore::kDefaultLayerNormEps;

    void validate() const;
    bool operator==(const BackboneConfig&) const = default;
};

void to_json(nlohmann::json& j, const BackboneConfig& c);
void from_json(const nlohmann::json& j, BackboneConfig& c);

enum class Projection { query, key, value, output };

/// Per-layer intermediate values exposed by a forward pass.
struct LayerState {
    Tensor ffn_out;   // h_l
    Tensor residual;  // r_l
    std::vector<std::pair<std::string, Tensor>> adapter_outputs;  // z_{l,n}
    Tensor slot_out;
};

struct ForwardResult {
    Tensor logits;  // [T x V]
    std::vector<LayerState> layers;
};

/// Hook points a PEFT configuration can occupy. Defaults leave the layer bare.
class Attachments {
public:
    virtual ~Attachments() = default;

    /// Additive delta for a frozen projection x W + b.
    virtual std::optional<Tensor> projection_delta(std::size_t layer, Projection which,
                                                   const Tensor& x) const;
    /// Replacement for the slot output; may record adapter outputs in `state`.
    virtual std::optional<Tensor> slot(std::size_t layer, const Tensor& ffn_out, const Tensor& residual,
                                       LayerState& state) const;
};

class Backbone {
public:
    /// Random initialization: weights N(0, 0.02), biases 0, norms at identity.
    Backbone(BackboneConfig config, numcore::Rng& rng);
    /// Rebuilds from named tensors, validating every expected name and shape.
    static Backbone from_tensors(BackboneConfig config, const std::vector<NamedTensor>& tensors);

    const BackboneConfig& config() const { return config_; }

    ForwardResult forward(std::span<const std::int64_t> tokens, const Attachments* attachments = nullptr) const;

    /// Greedy decoding: appends argmax tokens until `stop_token` or `max_new` tokens.
    std::vector<std::int64_t> generate_greedy(std::span<const std::int64_t> prompt, std::size_t max_new,
                                              std::int64_t stop_token,
                                              const Attachments* attachments = nullptr) const;

    const std::vector<NamedTensor>& parameters() const { return params_; }
    const Tensor& parameter(std::string_view name) const;
    std::size_t parameter_count() const;
    void set_trainable(bool trainable);
    std::string content_hash() const { return numcore::content_hash(params_); }

private:
    struct LayerWeights {
        Tensor wq, bq, wk, bk, wv, bv, wo, bo;
        Tensor ln1_gamma, ln1_beta;
        Tensor w1, b1, w2, b2;
        Tensor ln2_gamma, ln2_beta;
    };

    explicit Backbone(BackboneConfig config);
    void register_parameters();
    Tensor project(std::size_t layer, Projection which, const Tensor& x, const Tensor& w, const Tensor& b,
                   const Attachments* attachments) const;

    BackboneConfig config_;
    Tensor token_embedding_;
    Tensor position_embedding_;
    std::vector<LayerWeights> layers_;
    Tensor head_;
    std::vector<NamedTensor> params_;
};

}  // namespace advfusion::backbone
