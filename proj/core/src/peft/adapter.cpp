// SPDX-License-Identifier: Apache-2.0

#include "advfusion/peft/adapter.hpp"

#include <algorithm>
#include <map>
#include <unordered_set>

#include "advfusion/numcore/ops.hpp"

namespace advfusion::peft {

namespace nc = numcore;
using backbone::Projection;

std::string_view to_string(AdapterKind kind) {
    switch (kind) {
    case AdapterKind::bottleneck:
        return "bottleneck";
    case AdapterKind::compacter:
        return "compacter";
    case AdapterKind::lora:
        return "lora";
    }
    return "unknown";
}

AdapterKind parse_adapter_kind(std::string_view text) {
    if (text == "bottleneck") {
        return AdapterKind::bottleneck;
    }
    if (text == "compacter") {
        return AdapterKind::compacter;
    }
    if (text == "lora") {
        return AdapterKind::lora;
    }
    throw PeftError("unknown adapter kind '" + std::string(text) + "' (expected bottleneck|compacter|lora)");
}

std::size_t PeftConfig::resolved_bottleneck_dim(std::size_t hidden_size) const {
    return bottleneck_dim ? bottleneck_dim : std::max<std::size_t>(1, hidden_size / 4);
}

void to_json(nlohmann::json& j, const PeftConfig& c) {
    j = nlohmann::json{{"bottleneck_dim", c.bottleneck_dim}, {"phm_dim", c.phm_dim},
                       {"lora_rank", c.lora_rank},           {"lora_alpha", c.lora_alpha},
                       {"init_std", c.init_std}};
}

void from_json(const nlohmann::json& j, PeftConfig& c) {
    j.at("bottleneck_dim").get_to(c.bottleneck_dim);
    j.at("phm_dim").get_to(c.phm_dim);
    j.at("lora_rank").get_to(c.lora_rank);
    j.at("lora_alpha").get_to(c.lora_alpha);
    j.at("init_std").get_to(c.init_std);
}

const Tensor& AdapterModule::param(std::string_view name) const {
    for (const auto& [n, t] : params) {
        if (n == name) {
            return t;
        }
    }
    throw PeftError("adapter module has no parameter '" + std::string(name) + "'");
}

Tensor phm_compose(std::span<const Tensor> rules, std::span<const Tensor> factors) {
    if (rules.empty() || rules.size() != factors.size()) {
        throw PeftError("phm_compose: need one factor per rule matrix, got " + std::to_string(rules.size()) +
                        " rules and " + std::to_string(factors.size()) + " factors");
    }
    const std::size_t n = rules.size();
    for (const auto& a : rules) {
        if (a.rank() != 2 || a.dim(0) != n || a.dim(1) != n) {
            throw PeftError("phm_compose: rule matrices must be " + std::to_string(n) + "x" + std::to_string(n) +
                            ", got " + nc::shape_str(a.shape()));
        }
    }
    for (const auto& b : factors) {
        if (b.rank() != 2 || b.shape() != factors.front().shape()) {
            throw PeftError("phm_compose: factors must share one rank-2 shape");
        }
    }
    Tensor w = nc::kron(rules[0], factors[0]);
    for (std::size_t i = 1; i < n; ++i) {
        w = nc::add(w, nc::kron(rules[i], factors[i]));
    }
    return w;
}

namespace {

Tensor compose_projection(const AdapterModule& m, const char* prefix) {
    std::vector<Tensor> factors;
    factors.reserve(m.phm_dim);
    for (std::size_t i = 0; i < m.phm_dim; ++i) {
        const std::string idx = std::to_string(i);
        factors.push_back(nc::outer(m.param(std::string(prefix) + "_s" + idx), m.param(std::string(prefix) + "_t" + idx)));
    }
    return phm_compose(m.phm_rules, factors);
}

void check_width(const Tensor& t, std::size_t width, const char* what) {
    if (t.rank() != 2 || t.dim(1) != width) {
        throw PeftError(std::string(what) + ": expected [T x " + std::to_string(width) + "], got " +
                        nc::shape_str(t.shape()));
    }
}

}  // namespace

Tensor compacter_down(const AdapterModule& module) {
    if (module.kind != AdapterKind::compacter) {
        throw PeftError("compacter_down on a " + std::string(to_string(module.kind)) + " module");
    }
    return compose_projection(module, "down");
}

Tensor compacter_up(const AdapterModule& module) {
    if (module.kind != AdapterKind::compacter) {
        throw PeftError("compacter_up on a " + std::string(to_string(module.kind)) + " module");
    }
    return compose_projection(module, "up");
}

Tensor bottleneck_forward(const Tensor& ffn_out, const Tensor& residual, const AdapterModule& module) {
    Tensor down, up;
    if (module.kind == AdapterKind::bottleneck) {
        down = module.param("down");
        up = module.param("up");
    } else if (module.kind == AdapterKind::compacter) {
        down = compacter_down(module);
        up = compacter_up(module);
    } else {
        throw PeftError("bottleneck_forward: LoRA modules have no slot output");
    }
    const std::size_t h = down.dim(0);
    check_width(ffn_out, h, "bottleneck_forward h_l");
    check_width(residual, h, "bottleneck_forward r_l");
    if (ffn_out.dim(0) != residual.dim(0)) {
        throw PeftError("bottleneck_forward: h_l and r_l have different lengths");
    }
    Tensor hidden = nc::relu(nc::add_bias(nc::matmul(ffn_out, down), module.param("down_bias")));
    Tensor delta = nc::add_bias(nc::matmul(hidden, up), module.param("up_bias"));
    return nc::add(delta, residual);
}

bool lora_targets(Projection which) { return which == Projection::query || which == Projection::value; }

Tensor lora_delta(const Tensor& x, const AdapterModule& module, Projection target) {
    if (module.kind != AdapterKind::lora) {
        throw PeftError("lora_delta on a " + std::string(to_string(module.kind)) + " module");
    }
    if (!lora_targets(target)) {
        throw PeftError("LoRA adapts only the query and value projections");
    }
    const char* p = target == Projection::query ? "q" : "v";
    const Tensor& a = module.param(std::string(p) + "_A");
    const Tensor& b = module.param(std::string(p) + "_B");
    check_width(x, a.dim(0), "lora input");
    return nc::scale(nc::matmul(nc::matmul(x, a), b), module.lora_scale());
}

Tensor lora_forward(const Tensor& x, const Tensor& base_weight, const AdapterModule& module, Projection target) {
    return nc::add(nc::matmul(x, base_weight), lora_delta(x, module, target));
}

namespace {

void validate_language(const std::string& language) {
    if (language.empty()) {
        throw PeftError("adapter language tag must be non-empty");
    }
    for (char c : language) {
        if (c == '.' || c == ' ' || c == '\t' || c == '\n' || c == '/') {
            throw PeftError("adapter language tag '" + language + "' contains a reserved character");
        }
    }
}

struct Dims {
    std::size_t h, d, n, r;
};

Dims validate(AdapterKind kind, const backbone::BackboneConfig& b, const PeftConfig& p) {
    Dims dims{b.hidden_size, p.resolved_bottleneck_dim(b.hidden_size), p.phm_dim, p.lora_rank};
    if (kind == AdapterKind::compacter) {
        if (dims.n == 0 || dims.h % dims.n != 0 || dims.d % dims.n != 0) {
            throw PeftError("compacter: hidden size " + std::to_string(dims.h) + " and bottleneck " +
                            std::to_string(dims.d) + " must both be divisible by phm_dim " + std::to_string(dims.n));
        }
    }
    if (kind == AdapterKind::lora) {
        if (dims.r == 0 || dims.r > dims.h) {
            throw PeftError("lora: rank " + std::to_string(dims.r) + " exceeds the adapted matrix dimensions (" +
                            std::to_string(dims.h) + "x" + std::to_string(dims.h) + ")");
        }
    }
    return dims;
}

// Layer-local tensor names and shapes, in canonical order.
std::vector<std::pair<std::string, nc::Shape>> layout(AdapterKind kind, const Dims& d) {
    std::vector<std::pair<std::string, nc::Shape>> out;
    switch (kind) {
    case AdapterKind::bottleneck:
        out = {{"down", {d.h, d.d}}, {"down_bias", {d.d}}, {"up", {d.d, d.h}}, {"up_bias", {d.h}}};
        break;
    case AdapterKind::compacter:
        for (std::size_t i = 0; i < d.n; ++i) {
            out.push_back({"down_s" + std::to_string(i), {d.h / d.n}});
            out.push_back({"down_t" + std::to_string(i), {d.d / d.n}});
        }
        out.push_back({"down_bias", {d.d}});
        for (std::size_t i = 0; i < d.n; ++i) {
            out.push_back({"up_s" + std::to_string(i), {d.d / d.n}});
            out.push_back({"up_t" + std::to_string(i), {d.h / d.n}});
        }
        out.push_back({"up_bias", {d.h}});
        break;
    case AdapterKind::lora:
        out = {{"q_A", {d.h, d.r}}, {"q_B", {d.r, d.h}}, {"v_A", {d.h, d.r}}, {"v_B", {d.r, d.h}}};
        break;
    }
    return out;
}

// Compacter draws rules from N(0, 1) and factors from N(0, 0.1) so that the
// composed down-projection entries have std ~ sqrt(n) * 0.01 (0.02 at n = 4).
constexpr double kPhmRuleStd = 1.0;
constexpr double kPhmFactorStd = 0.1;

Tensor init_tensor(AdapterKind kind, const std::string& name, const nc::Shape& shape, const PeftConfig& p,
                   nc::Rng& rng) {
    const bool is_bias = name.ends_with("_bias");
    if (is_bias) {
        return Tensor::zeros(shape, true);
    }
    switch (kind) {
    case AdapterKind::bottleneck:
        return name == "down" ? rng.normal_tensor(shape, p.init_std, true) : Tensor::zeros(shape, true);
    case AdapterKind::compacter:
        // Up-projection right factors start at zero, so W_up == 0 exactly.
        if (name.starts_with("up_t")) {
            return Tensor::zeros(shape, true);
        }
        return rng.normal_tensor(shape, kPhmFactorStd, true);
    case AdapterKind::lora:
        return name.ends_with("_A") ? rng.normal_tensor(shape, p.init_std, true) : Tensor::zeros(shape, true);
    }
    return Tensor::zeros(shape, true);
}

std::string layer_prefix(std::size_t layer) { return "layer" + std::to_string(layer) + "."; }

}  // namespace

AdapterSet AdapterSet::create(AdapterKind kind, std::string language, const backbone::BackboneConfig& backbone,
                              const PeftConfig& peft, nc::Rng& rng) {
    validate_language(language);
    const Dims dims = validate(kind, backbone, peft);
    AdapterSet set(kind, std::move(language), peft);
    if (kind == AdapterKind::compacter) {
        for (std::size_t i = 0; i < dims.n; ++i) {
            set.phm_rules_.push_back(rng.normal_tensor({dims.n, dims.n}, kPhmRuleStd, true));
        }
    }
    const auto names = layout(kind, dims);
    for (std::size_t l = 0; l < backbone.num_layers; ++l) {
        AdapterModule m;
        m.kind = kind;
        m.language = set.language_;
        m.layer_index = l;
        m.bottleneck_dim = kind == AdapterKind::lora ? 0 : dims.d;
        m.phm_dim = kind == AdapterKind::compacter ? dims.n : 0;
        m.lora_rank = kind == AdapterKind::lora ? dims.r : 0;
        m.lora_alpha = kind == AdapterKind::lora ? peft.lora_alpha : 0.0;
        for (const auto& [name, shape] : names) {
            m.params.emplace_back(name, init_tensor(kind, name, shape, peft, rng));
        }
        m.phm_rules = set.phm_rules_;
        set.layers_.push_back(std::move(m));
    }
    return set;
}

AdapterSet AdapterSet::from_tensors(AdapterKind kind, std::string language,
                                    const backbone::BackboneConfig& backbone, const PeftConfig& peft,
                                    const std::vector<NamedTensor>& tensors) {
    nc::Rng rng(0);
    AdapterSet set = create(kind, std::move(language), backbone, peft, rng);
    std::map<std::string, Tensor, std::less<>> by_name(tensors.begin(), tensors.end());
    const std::string prefix = set.name_prefix();
    auto take = [&](const std::string& name, const Tensor& like) {
        auto it = by_name.find(name);
        if (it == by_name.end()) {
            throw PeftError("adapter tensors: missing '" + name + "'");
        }
        if (it->second.shape() != like.shape()) {
            throw PeftError("adapter tensors: '" + name + "' has shape " + nc::shape_str(it->second.shape()) +
                            ", expected " + nc::shape_str(like.shape()));
        }
        return it->second.clone(true);
    };
    for (std::size_t i = 0; i < set.phm_rules_.size(); ++i) {
        set.phm_rules_[i] = take(prefix + "shared.phm_rule" + std::to_string(i), set.phm_rules_[i]);
    }
    for (auto& m : set.layers_) {
        for (auto& [name, t] : m.params) {
            t = take(prefix + layer_prefix(m.layer_index) + name, t);
        }
        m.phm_rules = set.phm_rules_;
    }
    return set;
}

std::string AdapterSet::name_prefix() const {
    return "adapter." + std::string(to_string(kind_)) + "." + language_ + ".";
}

std::vector<NamedTensor> AdapterSet::parameters() const {
    std::vector<NamedTensor> out;
    const std::string prefix = name_prefix();
    for (std::size_t i = 0; i < phm_rules_.size(); ++i) {
        out.emplace_back(prefix + "shared.phm_rule" + std::to_string(i), phm_rules_[i]);
    }
    for (const auto& m : layers_) {
        for (const auto& [name, t] : m.params) {
            out.emplace_back(prefix + layer_prefix(m.layer_index) + name, t);
        }
    }
    return out;
}

std::size_t AdapterSet::parameter_count() const {
    std::size_t total = 0;
    for (const auto& [_, t] : parameters()) {
        total += t.numel();
    }
    return total;
}

void AdapterSet::set_trainable(bool trainable) {
    for (auto& [_, t] : parameters()) {
        Tensor handle = t;
        handle.set_requires_grad(trainable);
    }
}

std::optional<Tensor> AdapterSet::projection_delta(std::size_t layer, Projection which, const Tensor& x) const {
    if (kind_ != AdapterKind::lora || !lora_targets(which)) {
        return std::nullopt;
    }
    return lora_delta(x, layers_.at(layer), which);
}

std::optional<Tensor> AdapterSet::slot(std::size_t layer, const Tensor& ffn_out, const Tensor& residual,
                                       backbone::LayerState& state) const {
    if (kind_ == AdapterKind::lora) {
        return std::nullopt;
    }
    Tensor z = bottleneck_forward(ffn_out, residual, layers_.at(layer));
    state.adapter_outputs.emplace_back(language_, z);
    return z;
}

ParamCount param_count(const std::vector<ParamGroup>& groups) {
    ParamCount out;
    std::unordered_set<const void*> seen;
    for (const auto& g : groups) {
        ParamCount::Entry e{g.name, 0, 0};
        for (const auto& [_, t] : g.tensors) {
            if (!seen.insert(t.node().get()).second) {
                continue;
            }
            e.total += t.numel();
            if (t.requires_grad()) {
                e.trainable += t.numel();
            }
        }
        out.total += e.total;
        out.trainable += e.trainable;
        out.groups.push_back(std::move(e));
    }
    return out;
}

ParamCount param_count(const AdapterModule& module) {
    return param_count({ParamGroup{"adapter." + module.language + ".layer" + std::to_string(module.layer_index),
                                   module.params}});
}

ParamCount param_count(const AdapterSet& set) {
    return param_count({ParamGroup{set.name_prefix(), set.parameters()}});
}

}  // namespace advfusion::peft
