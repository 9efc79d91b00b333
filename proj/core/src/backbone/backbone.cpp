// SPDX-License-Identifier: Apache-2.0

#include "advfusion/backbone/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

namespace advfusion::backbone {

namespace nc = numcore;

namespace {
constexpr double kInitStd = 0.02;

std::string layer_name(std::size_t layer, std::string_view leaf) {
    return "backbone.layer" + std::to_string(layer) + "." + std::string(leaf);
}
}  // namespace

void BackboneConfig::validate() const {
    if (num_layers == 0 || hidden_size == 0 || num_heads == 0 || ffn_size == 0 || vocab_size == 0 ||
        max_seq_len == 0) {
        throw BackboneError("backbone config: all sizes must be >= 1");
    }
    if (hidden_size % num_heads != 0) {
        throw BackboneError("backbone config: hidden_size " + std::to_string(hidden_size) +
                            " is not divisible by num_heads " + std::to_string(num_heads));
    }
    if (!(layer_norm_eps > 0.0)) {
        throw BackboneError("backbone config: layer_norm_eps must be positive");
    }
}

void to_json(nlohmann::json& j, const BackboneConfig& c) {
    j = nlohmann::json{{"num_layers", c.num_layers},   {"hidden_size", c.hidden_size},
                       {"num_heads", c.num_heads},     {"ffn_size", c.ffn_size},
                       {"vocab_size", c.vocab_size},   {"max_seq_len", c.max_seq_len},
                       {"layer_norm_eps", c.layer_norm_eps}};
}

void from_json(const nlohmann::json& j, BackboneConfig& c) {
    j.at("num_layers").get_to(c.num_layers);
    j.at("hidden_size").get_to(c.hidden_size);
    j.at("num_heads").get_to(c.num_heads);
    j.at("ffn_size").get_to(c.ffn_size);
    j.at("vocab_size").get_to(c.vocab_size);
    j.at("max_seq_len").get_to(c.max_seq_len);
    j.at("layer_norm_eps").get_to(c.layer_norm_eps);
}

std::optional<Tensor> Attachments::projection_delta(std::size_t, Projection, const Tensor&) const {
    return std::nullopt;
}

std::optional<Tensor> Attachments::slot(std::size_t, const Tensor&, const Tensor&, LayerState&) const {
    return std::nullopt;
}

Backbone::Backbone(BackboneConfig config) : config_(std::move(config)) { config_.validate(); }

Backbone::Backbone(BackboneConfig config, nc::Rng& rng) : Backbone(std::move(config)) {
    const auto h = config_.hidden_size, f = config_.ffn_size;
    token_embedding_ = rng.normal_tensor({config_.vocab_size, h}, kInitStd);
    position_embedding_ = rng.normal_tensor({config_.max_seq_len, h}, kInitStd);
    layers_.resize(config_.num_layers);
    for (auto& L : layers_) {
        L.wq = rng.normal_tensor({h, h}, kInitStd);
        L.bq = Tensor::zeros({h});
        L.wk = rng.normal_tensor({h, h}, kInitStd);
        L.bk = Tensor::zeros({h});
        L.wv = rng.normal_tensor({h, h}, kInitStd);
        L.bv = Tensor::zeros({h});
        L.wo = rng.normal_tensor({h, h}, kInitStd);
        L.bo = Tensor::zeros({h});
        L.ln1_gamma = Tensor::full({h}, 1.0);
        L.ln1_beta = Tensor::zeros({h});
        L.w1 = rng.normal_tensor({h, f}, kInitStd);
        L.b1 = Tensor::zeros({f});
        L.w2 = rng.normal_tensor({f, h}, kInitStd);
        L.b2 = Tensor::zeros({h});
        L.ln2_gamma = Tensor::full({h}, 1.0);
        L.ln2_beta = Tensor::zeros({h});
    }
    head_ = rng.normal_tensor({h, config_.vocab_size}, kInitStd);
    register_parameters();
}

void Backbone::register_parameters() {
    params_.clear();
    params_.emplace_back("backbone.embed.token", token_embedding_);
    params_.emplace_back("backbone.embed.position", position_embedding_);
    for (std::size_t l = 0; l < layers_.size(); ++l) {
        auto& L = layers_[l];
        const std::pair<const char*, Tensor*> entries[] = {
            {"attn.wq", &L.wq},        {"attn.bq", &L.bq},       {"attn.wk", &L.wk},
            {"attn.bk", &L.bk},        {"attn.wv", &L.wv},       {"attn.bv", &L.bv},
            {"attn.wo", &L.wo},        {"attn.bo", &L.bo},       {"ln1.gamma", &L.ln1_gamma},
            {"ln1.beta", &L.ln1_beta}, {"ffn.w1", &L.w1},        {"ffn.b1", &L.b1},
            {"ffn.w2", &L.w2},         {"ffn.b2", &L.b2},        {"ln2.gamma", &L.ln2_gamma},
            {"ln2.beta", &L.ln2_beta},
        };
        for (const auto& [leaf, t] : entries) {
            params_.emplace_back(layer_name(l, leaf), *t);
        }
    }
    params_.emplace_back("backbone.head", head_);
}

Backbone Backbone::from_tensors(BackboneConfig config, const std::vector<NamedTensor>& tensors) {
    nc::Rng rng(0);
    // Shapes come from a throwaway init; values are replaced below.
    Backbone model(std::move(config), rng);
    std::map<std::string, Tensor, std::less<>> by_name(tensors.begin(), tensors.end());
    auto take = [&](const std::string& name, Tensor& slot) {
        auto it = by_name.find(name);
        if (it == by_name.end()) {
            throw BackboneError("backbone tensors: missing '" + name + "'");
        }
        if (it->second.shape() != slot.shape()) {
            throw BackboneError("backbone tensors: '" + name + "' has shape " +
                                nc::shape_str(it->second.shape()) + ", expected " +
                                nc::shape_str(slot.shape()));
        }
        slot = it->second.clone(false);
    };
    take("backbone.embed.token", model.token_embedding_);
    take("backbone.embed.position", model.position_embedding_);
    for (std::size_t l = 0; l < model.layers_.size(); ++l) {
        auto& L = model.layers_[l];
        take(layer_name(l, "attn.wq"), L.wq);
        take(layer_name(l, "attn.bq"), L.bq);
        take(layer_name(l, "attn.wk"), L.wk);
        take(layer_name(l, "attn.bk"), L.bk);
        take(layer_name(l, "attn.wv"), L.wv);
        take(layer_name(l, "attn.bv"), L.bv);
        take(layer_name(l, "attn.wo"), L.wo);
        take(layer_name(l, "attn.bo"), L.bo);
        take(layer_name(l, "ln1.gamma"), L.ln1_gamma);
        take(layer_name(l, "ln1.beta"), L.ln1_beta);
        take(layer_name(l, "ffn.w1"), L.w1);
        take(layer_name(l, "ffn.b1"), L.b1);
        take(layer_name(l, "ffn.w2"), L.w2);
        take(layer_name(l, "ffn.b2"), L.b2);
        take(layer_name(l, "ln2.gamma"), L.ln2_gamma);
        take(layer_name(l, "ln2.beta"), L.ln2_beta);
    }
    take("backbone.head", model.head_);
    model.register_parameters();
    return model;
}

const Tensor& Backbone::parameter(std::string_view name) const {
    for (const auto& [n, t] : params_) {
        if (n == name) {
            return t;
        }
    }
    throw BackboneError("no backbone parameter named '" + std::string(name) + "'");
}

std::size_t Backbone::parameter_count() const {
    std::size_t total = 0;
    for (const auto& [_, t] : params_) {
        total += t.numel();
    }
    return total;
}

void Backbone::set_trainable(bool trainable) {
    for (auto& [_, t] : params_) {
        t.set_requires_grad(trainable);
    }
}

Tensor Backbone::project(std::size_t layer, Projection which, const Tensor& x, const Tensor& w, const Tensor& b,
                         const Attachments* attachments) const {
    Tensor out = nc::add_bias(nc::matmul(x, w), b);
    if (attachments) {
        if (auto delta = attachments->projection_delta(layer, which, x)) {
            out = nc::add(out, *delta);
        }
    }
    return out;
}

ForwardResult Backbone::forward(std::span<const std::int64_t> tokens, const Attachments* attachments) const {
    const std::size_t T = tokens.size();
    if (T == 0) {
        throw BackboneError("forward: empty token sequence");
    }
    if (T > config_.max_seq_len) {
        throw BackboneError("forward: sequence of " + std::to_string(T) + " tokens exceeds max_seq_len " +
                            std::to_string(config_.max_seq_len));
    }
    for (auto id : tokens) {
        if (id < 0 || static_cast<std::size_t>(id) >= config_.vocab_size) {
            throw BackboneError("forward: token " + std::to_string(id) + " outside vocabulary of " +
                                std::to_string(config_.vocab_size));
        }
    }
    std::vector<std::int64_t> positions(T);
    std::iota(positions.begin(), positions.end(), 0);

    const std::size_t heads = config_.num_heads;
    const std::size_t head_dim = config_.hidden_size / heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim));

    ForwardResult result;
    result.layers.resize(layers_.size());
    Tensor x = nc::add(nc::embedding(token_embedding_, tokens), nc::embedding(position_embedding_, positions));
    for (std::size_t l = 0; l < layers_.size(); ++l) {
        const auto& L = layers_[l];
        Tensor q = project(l, Projection::query, x, L.wq, L.bq, attachments);
        Tensor k = project(l, Projection::key, x, L.wk, L.bk, attachments);
        Tensor v = project(l, Projection::value, x, L.wv, L.bv, attachments);
        std::vector<Tensor> head_out;
        head_out.reserve(heads);
        for (std::size_t hd = 0; hd < heads; ++hd) {
            Tensor qh = nc::slice_cols(q, hd * head_dim, head_dim);
            Tensor kh = nc::slice_cols(k, hd * head_dim, head_dim);
            Tensor vh = nc::slice_cols(v, hd * head_dim, head_dim);
            Tensor probs = nc::causal_softmax(nc::scale(nc::matmul(qh, nc::transpose(kh)), inv_sqrt));
            head_out.push_back(nc::matmul(probs, vh));
        }
        Tensor attn = project(l, Projection::output, heads == 1 ? head_out.front() : nc::concat(head_out, 1),
                              L.wo, L.bo, attachments);
        Tensor x1 = nc::layer_norm(nc::add(x, attn), L.ln1_gamma, L.ln1_beta, config_.layer_norm_eps);
        Tensor ffn = nc::add_bias(nc::matmul(nc::relu(nc::add_bias(nc::matmul(x1, L.w1), L.b1)), L.w2), L.b2);
        Tensor residual = nc::add(ffn, x1);

        auto& state = result.layers[l];
        state.ffn_out = ffn;
        state.residual = residual;
        Tensor slot_out = residual;
        if (attachments) {
            if (auto replaced = attachments->slot(l, ffn, residual, state)) {
                slot_out = *replaced;
            }
        }
        state.slot_out = slot_out;
        x = nc::layer_norm(slot_out, L.ln2_gamma, L.ln2_beta, config_.layer_norm_eps);
    }
    result.logits = nc::matmul(x, head_);
    return result;
}

std::vector<std::int64_t> Backbone::generate_greedy(std::span<const std::int64_t> prompt, std::size_t max_new,
                                                    std::int64_t stop_token, const Attachments* attachments) const {
    if (prompt.empty()) {
        throw BackboneError("generate_greedy: empty prompt");
    }
    if (prompt.size() > config_.max_seq_len) {
        throw BackboneError("generate_greedy: prompt of " + std::to_string(prompt.size()) +
                            " tokens exceeds max_seq_len " + std::to_string(config_.max_seq_len));
    }
    nc::NoGradGuard no_grad;
    std::vector<std::int64_t> seq(prompt.begin(), prompt.end());
    for (std::size_t step = 0; step < max_new && seq.size() < config_.max_seq_len; ++step) {
        auto out = forward(seq, attachments);
        const std::size_t V = config_.vocab_size;
        auto row = out.logits.data().subspan((seq.size() - 1) * V, V);
        // First maximum wins ties, keeping decoding deterministic.
        const auto next = static_cast<std::int64_t>(std::max_element(row.begin(), row.end()) - row.begin());
        seq.push_back(next);
        if (next == stop_token) {
            break;
        }
    }
    return seq;
}

}  // namespace advfusion::backbone
