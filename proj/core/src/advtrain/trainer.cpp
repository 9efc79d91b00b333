// SPDX-License-Identifier: Apache-2.0

#include "advfusion/advtrain/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <sstream>

#include "advfusion/numcore/ops.hpp"

namespace advfusion::advtrain {

namespace nc = numcore;
using backbone::Backbone;
using corpus::EncodedSample;

// ---------------------------------------------------------------- optimizer

Adam::Adam(std::vector<NamedTensor> params, AdamConfig config)
    : params_(std::move(params)), moments_(params_.size()), config_(config) {
    for (std::size_t i = 0; i < params_.size(); ++i) {
        moments_[i].m.assign(params_[i].second.numel(), 0.0);
        moments_[i].v.assign(params_[i].second.numel(), 0.0);
    }
}

void Adam::step() {
    const auto& c = config_;
    for (std::size_t i = 0; i < params_.size(); ++i) {
        Tensor& p = params_[i].second;
        if (!p.has_grad()) {
            continue;
        }
        const std::vector<double> g = p.grad();
        if (std::all_of(g.begin(), g.end(), [](double x) { return x == 0.0; })) {
            continue;
        }
        auto& mo = moments_[i];
        ++mo.t;
        const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(mo.t));
        const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(mo.t));
        auto w = p.mutable_data();
        for (std::size_t k = 0; k < w.size(); ++k) {
            mo.m[k] = c.beta1 * mo.m[k] + (1.0 - c.beta1) * g[k];
            mo.v[k] = c.beta2 * mo.v[k] + (1.0 - c.beta2) * g[k] * g[k];
            const double mhat = mo.m[k] / bc1;
            const double vhat = mo.v[k] / bc2;
            w[k] -= c.lr * mhat / (std::sqrt(vhat) + c.eps);
        }
    }
}

void Adam::zero_grad() {
    for (auto& [_, p] : params_) {
        p.zero_grad();
    }
}

void Adam::reset_moments() {
    for (auto& mo : moments_) {
        std::fill(mo.m.begin(), mo.m.end(), 0.0);
        std::fill(mo.v.begin(), mo.v.end(), 0.0);
        mo.t = 0;
    }
}

// ---------------------------------------------------------------- loss

std::vector<std::int64_t> clm_targets(const EncodedSample& sample, bool all_positions) {
    std::vector<std::int64_t> targets(sample.ids.size(), kIgnoreIndex);
    for (std::size_t t = 0; t + 1 < sample.ids.size(); ++t) {
        if (all_positions || sample.loss_mask[t + 1]) {
            targets[t] = sample.ids[t + 1];
        }
    }
    return targets;
}

Tensor clm_loss(const Backbone& model, const EncodedSample& sample, const backbone::Attachments* attachments,
                bool all_positions) {
    const auto result = model.forward(sample.ids, attachments);
    const auto targets = clm_targets(sample, all_positions);
    return nc::cross_entropy(result.logits, targets, kIgnoreIndex);
}

// ---------------------------------------------------------------- plan

std::string_view to_string(TrainMode mode) {
    switch (mode) {
        case TrainMode::backbone: return "backbone";
        case TrainMode::adapter: return "adapter";
        case TrainMode::fusion: return "fusion";
        case TrainMode::advfusion: return "advfusion";
    }
    return "unknown";
}

TrainMode parse_train_mode(std::string_view text) {
    for (auto m : {TrainMode::backbone, TrainMode::adapter, TrainMode::fusion, TrainMode::advfusion}) {
        if (text == to_string(m)) {
            return m;
        }
    }
    throw std::invalid_argument("unknown training mode '" + std::string(text) + "'");
}

void TrainingPlan::validate() const {
    if (epochs_per_phase < 1) {
        throw std::invalid_argument("epochs_per_phase must be >= 1");
    }
    if (batch_size < 1) {
        throw std::invalid_argument("batch_size must be >= 1");
    }
    if (!(optimizer.lr >= 0.0) || !(optimizer.eps > 0.0) || !(optimizer.beta1 >= 0.0 && optimizer.beta1 < 1.0) ||
        !(optimizer.beta2 >= 0.0 && optimizer.beta2 < 1.0)) {
        throw std::invalid_argument("optimizer needs lr >= 0, eps > 0 and betas in [0, 1)");
    }
    if (mode == TrainMode::advfusion && !adapter_tags.empty() &&
        std::find(adapter_tags.begin(), adapter_tags.end(), target_language) == adapter_tags.end()) {
        throw std::invalid_argument("advfusion target '" + target_language + "' is not among the adapter tags");
    }
}

void to_json(nlohmann::json& j, const TrainingPlan& p) {
    j = nlohmann::json{{"mode", to_string(p.mode)},
                       {"target_language", p.target_language},
                       {"adapter_tags", p.adapter_tags},
                       {"epochs_per_phase", p.epochs_per_phase},
                       {"lr", p.optimizer.lr},
                       {"beta1", p.optimizer.beta1},
                       {"beta2", p.optimizer.beta2},
                       {"eps", p.optimizer.eps},
                       {"batch_size", p.batch_size},
                       {"seed", p.seed},
                       {"shuffle", p.shuffle},
                       {"reset_moments_between_phases", p.reset_moments_between_phases}};
}

// ---------------------------------------------------------------- event log

EventLog::EventLog(const std::filesystem::path& path)
    : out_(std::make_unique<std::ofstream>(path, std::ios::binary | std::ios::trunc)) {
    if (!*out_) {
        throw TrainingError("cannot open event log '" + path.string() + "'");
    }
}

void EventLog::write(const nlohmann::json& record) {
    records_.push_back(record);
    if (out_) {
        *out_ << record.dump() << '\n';
        out_->flush();
    }
}

std::size_t EventLog::count(std::string_view type) const {
    return static_cast<std::size_t>(std::count_if(records_.begin(), records_.end(), [&](const nlohmann::json& r) {
        return r.value("type", std::string()) == type;
    }));
}

// ---------------------------------------------------------------- loops

namespace {

struct Session {
    Backbone& model;
    const backbone::Attachments* attachments = nullptr;
    std::vector<NamedTensor> frozen;
    bool all_positions = false;
    const std::vector<EncodedSample>& data;
    const TrainingPlan& plan;
    const TrainHooks& hooks;
    EventLog* log = nullptr;
    Adam& optimizer;
    TrainResult& result;
};

/// Language batches interleaved round-robin, languages in first-appearance order.
std::vector<std::vector<std::size_t>> epoch_batches(const std::vector<EncodedSample>& data, const TrainingPlan& plan,
                                                    std::size_t epoch) {
    std::vector<std::string> langs;
    std::map<std::string, std::vector<std::size_t>> by_lang;
    for (std::size_t i = 0; i < data.size(); ++i) {
        auto [it, inserted] = by_lang.try_emplace(data[i].language);
        if (inserted) {
            langs.push_back(data[i].language);
        }
        it->second.push_back(i);
    }
    nc::Rng rng(nc::Rng::derive(plan.seed, epoch));
    std::vector<std::vector<std::vector<std::size_t>>> per_lang;
    std::size_t rounds = 0;
    for (const auto& lang : langs) {
        auto idx = by_lang[lang];
        if (plan.shuffle) {
            rng.shuffle(idx);
        }
        std::vector<std::vector<std::size_t>> batches;
        for (std::size_t i = 0; i < idx.size(); i += plan.batch_size) {
            batches.emplace_back(idx.begin() + static_cast<long>(i),
                                 idx.begin() + static_cast<long>(std::min(idx.size(), i + plan.batch_size)));
        }
        rounds = std::max(rounds, batches.size());
        per_lang.push_back(std::move(batches));
    }
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t r = 0; r < rounds; ++r) {
        for (const auto& batches : per_lang) {
            if (r < batches.size()) {
                out.push_back(batches[r]);
            }
        }
    }
    return out;
}

double frozen_grad_abs_max(const std::vector<NamedTensor>& frozen) {
    double m = 0.0;
    for (const auto& [_, t] : frozen) {
        if (!t.has_grad()) {
            continue;
        }
        for (double g : t.grad()) {
            m = std::max(m, std::abs(g));
        }
    }
    return m;
}

std::string join_ids(const std::vector<std::string>& ids) {
    std::string out;
    for (const auto& id : ids) {
        out += (out.empty() ? "" : ",") + id;
    }
    return out;
}

[[noreturn]] void abort_non_finite(const StepInfo& info, const std::string& detail) {
    std::ostringstream msg;
    msg << "non-finite loss at step " << info.step << " (epoch " << info.epoch << ", phase " << info.phase
        << ", language " << info.language << ", samples [" << join_ids(info.sample_ids) << "], lr " << info.lr
        << "): " << detail;
    throw TrainingError(msg.str());
}

void run_epochs(Session& s, int phase, std::size_t first_epoch, std::size_t epochs) {
    for (std::size_t e = 0; e < epochs; ++e) {
        const std::size_t epoch = first_epoch + e;
        double epoch_sum = 0.0;
        std::size_t epoch_steps = 0;
        for (const auto& batch : epoch_batches(s.data, s.plan, epoch)) {
            StepInfo info;
            info.step = ++s.result.steps;
            info.epoch = epoch;
            info.phase = phase;
            info.language = s.data[batch.front()].language;
            info.lr = s.optimizer.config().lr;
            for (auto i : batch) {
                info.sample_ids.push_back(s.data[i].id);
            }
            if (s.hooks.before_step) {
                s.hooks.before_step(info);
            }
            s.optimizer.zero_grad();
            Tensor loss;
            try {
                for (auto i : batch) {
                    Tensor l = clm_loss(s.model, s.data[i], s.attachments, s.all_positions);
                    loss = loss.defined() ? nc::add(loss, l) : l;
                }
                if (batch.size() > 1) {
                    loss = nc::scale(loss, 1.0 / static_cast<double>(batch.size()));
                }
                info.loss = loss.item();
                if (!std::isfinite(info.loss)) {
                    abort_non_finite(info, "loss evaluated to " + std::to_string(info.loss));
                }
                loss.backward();
            } catch (const nc::OverflowError& e) {
                abort_non_finite(info, e.what());
            }
            info.frozen_grad_abs_max = frozen_grad_abs_max(s.frozen);
            if (s.hooks.after_backward) {
                s.hooks.after_backward(info);
            }
            s.optimizer.step();
            s.result.step_losses.push_back(info.loss);
            epoch_sum += info.loss;
            ++epoch_steps;
            if (s.log) {
                s.log->write({{"type", "step"},
                              {"step", info.step},
                              {"epoch", info.epoch},
                              {"phase", info.phase},
                              {"loss", info.loss},
                              {"lr", info.lr},
                              {"language", info.language},
                              {"frozen_grad_abs_max", info.frozen_grad_abs_max}});
            }
        }
        const double mean = epoch_steps ? epoch_sum / static_cast<double>(epoch_steps) : 0.0;
        s.result.epoch_losses.push_back(mean);
        ++s.result.epochs;
        if (s.log) {
            s.log->write({{"type", "epoch_end"}, {"epoch", epoch}, {"phase", phase}, {"mean_loss", mean},
                          {"steps", epoch_steps}});
        }
    }
}

void require_data(const std::vector<EncodedSample>& data, const char* what) {
    if (data.empty()) {
        throw TrainingError(std::string(what) + ": training corpus is empty");
    }
}

std::vector<NamedTensor> fusion_frozen(const Backbone& model, const fusion::FusionModel& fused) {
    std::vector<NamedTensor> frozen = model.parameters();
    for (const auto& a : fused.adapters()) {
        for (auto& p : a.parameters()) {
            frozen.push_back(std::move(p));
        }
    }
    return frozen;
}

void freeze_for_fusion(Backbone& model, fusion::FusionModel& fused) {
    model.set_trainable(false);
    for (auto& a : fused.adapters()) {
        a.set_trainable(false);
    }
    fused.set_trainable(true);
}

std::vector<NamedTensor> snapshot(const std::vector<NamedTensor>& tensors) {
    std::vector<NamedTensor> out;
    for (const auto& [n, t] : tensors) {
        out.emplace_back(n, t.clone());
    }
    return out;
}

void log_start(EventLog* log, const TrainingPlan& plan, std::string_view mode) {
    if (log) {
        nlohmann::json p = plan;
        p["mode"] = mode;
        log->write({{"type", "run_start"}, {"plan", p}});
    }
}

}  // namespace

TrainResult pretrain_backbone(Backbone& model, const std::vector<EncodedSample>& data, const TrainingPlan& plan,
                              const TrainHooks& hooks, EventLog* log) {
    plan.validate();
    require_data(data, "pretrain_backbone");
    model.set_trainable(true);
    Adam opt(model.parameters(), plan.optimizer);
    TrainResult result;
    Session s{model, nullptr, {}, true, data, plan, hooks, log, opt, result};
    log_start(log, plan, "backbone");
    run_epochs(s, 1, 1, plan.epochs_per_phase);
    model.set_trainable(false);
    return result;
}

TrainResult train_language_adapter(Backbone& model, peft::AdapterSet& adapter, const std::vector<EncodedSample>& data,
                                   const TrainingPlan& plan, const TrainHooks& hooks, EventLog* log) {
    plan.validate();
    require_data(data, "train_language_adapter");
    for (const auto& d : data) {
        if (d.language != adapter.language()) {
            throw TrainingError("adapter '" + adapter.language() + "' cannot train on sample '" + d.id +
                                "' of language '" + d.language + "'");
        }
    }
    model.set_trainable(false);
    adapter.set_trainable(true);
    Adam opt(adapter.parameters(), plan.optimizer);
    TrainResult result;
    Session s{model, &adapter, model.parameters(), false, data, plan, hooks, log, opt, result};
    log_start(log, plan, "adapter");
    run_epochs(s, 1, 1, plan.epochs_per_phase);
    return result;
}

TrainResult fit_fusion(Backbone& model, fusion::FusionModel& fused, const std::vector<EncodedSample>& data,
                       const TrainingPlan& plan, const TrainHooks& hooks, EventLog* log) {
    plan.validate();
    require_data(data, "fit_fusion");
    freeze_for_fusion(model, fused);
    Adam opt(fused.parameters(), plan.optimizer);
    TrainResult result;
    Session s{model, &fused, fusion_frozen(model, fused), false, data, plan, hooks, log, opt, result};
    log_start(log, plan, "fusion");
    run_epochs(s, 1, 1, plan.epochs_per_phase);
    return result;
}

namespace {
void check_fusion_adapters(const fusion::FusionModel& fused, const TrainingPlan& plan, const char* what) {
    const auto order = fused.adapter_order();
    if (std::set<std::string>(order.begin(), order.end()).size() != order.size()) {
        throw TrainingError(std::string(what) + ": duplicate adapter tags");
    }
    if (order.size() < 2) {
        throw TrainingError(std::string(what) + ": needs at least two adapters, got " + std::to_string(order.size()));
    }
    if (!plan.adapter_tags.empty() && plan.adapter_tags != order) {
        throw TrainingError(std::string(what) + ": plan adapter tags do not match the fusion's adapter order");
    }
}
}  // namespace

TrainResult train_adapterfusion(Backbone& model, fusion::FusionModel& fused, const std::vector<EncodedSample>& data,
                                const TrainingPlan& plan, const TrainHooks& hooks, EventLog* log) {
    check_fusion_adapters(fused, plan, "train_adapterfusion");
    fused.set_mask({});
    return fit_fusion(model, fused, data, plan, hooks, log);
}

TrainResult train_advfusion(Backbone& model, fusion::FusionModel& fused, const std::vector<EncodedSample>& data,
                            const TrainingPlan& plan, const TrainHooks& hooks, EventLog* log) {
    plan.validate();
    require_data(data, "train_advfusion");
    const auto order = fused.adapter_order();
    const std::string& m = plan.target_language;
    if (std::find(order.begin(), order.end(), m) == order.end()) {
        throw TrainingError("train_advfusion: target '" + m + "' is not among the fusion adapters");
    }
    if (order.size() < 2) {
        throw TrainingError("train_advfusion: needs N >= 2; masking the only adapter would leave nothing to attend");
    }
    check_fusion_adapters(fused, plan, "train_advfusion");

    freeze_for_fusion(model, fused);
    Adam opt(fused.parameters(), plan.optimizer);
    TrainResult result;
    Session s{model, &fused, fusion_frozen(model, fused), false, data, plan, hooks, log, opt, result};
    log_start(log, plan, "advfusion");

    fused.set_mask({m});
    if (log) {
        log->write({{"type", "phase_start"}, {"phase", 1}, {"mask", nlohmann::json::array({m})}});
    }
    run_epochs(s, 1, 1, plan.epochs_per_phase);
    result.phase1_snapshot = snapshot(fused.parameters());

    fused.set_mask({});
    if (plan.reset_moments_between_phases) {
        opt.reset_moments();
    }
    if (log) {
        log->write({{"type", "unmask"}, {"tag", m}, {"after_step", result.steps}, {"after_epoch", result.epochs},
                    {"moments_reset", plan.reset_moments_between_phases}});
        log->write({{"type", "phase_start"}, {"phase", 2}, {"mask", nlohmann::json::array()}});
    }
    run_epochs(s, 2, plan.epochs_per_phase + 1, plan.epochs_per_phase);
    return result;
}

// ---------------------------------------------------------------- checkpoints

namespace {

std::vector<NamedTensor> cloned(const std::vector<NamedTensor>& tensors) { return snapshot(tensors); }

void require_kind(const Checkpoint& ck, std::string_view kind) {
    if (ck.kind() != kind) {
        throw std::invalid_argument("checkpoint holds a '" + ck.kind() + "', expected a '" + std::string(kind) + "'");
    }
}

void expect_like(const Checkpoint& ck, const std::vector<NamedTensor>& like) {
    for (const auto& [name, t] : like) {
        ck.expect(name, t.shape());
    }
}

template <typename T>
T config_field(const Checkpoint& ck, const char* key) {
    try {
        return ck.config.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(CheckpointErrorKind::corrupt_manifest,
                              std::string("config field '") + key + "' missing or invalid: " + e.what());
    }
}

}  // namespace

backbone::BackboneConfig checkpoint_backbone_config(const Checkpoint& ck) {
    return config_field<backbone::BackboneConfig>(ck, "backbone");
}

Checkpoint backbone_checkpoint(const Backbone& model, const corpus::Vocabulary& vocab, nlohmann::json lineage) {
    Checkpoint ck;
    ck.config = {{"kind", "backbone"}, {"backbone", model.config()}, {"vocabulary", vocab.to_json()}};
    lineage["backbone_hash"] = model.content_hash();
    ck.lineage = std::move(lineage);
    ck.tensors = cloned(model.parameters());
    return ck;
}

Backbone load_backbone(const Checkpoint& ck) {
    require_kind(ck, "backbone");
    const auto cfg = checkpoint_backbone_config(ck);
    nc::Rng rng(0);
    expect_like(ck, Backbone(cfg, rng).parameters());
    return Backbone::from_tensors(cfg, ck.tensors);
}

corpus::Vocabulary load_vocabulary(const Checkpoint& ck) {
    require_kind(ck, "backbone");
    return corpus::Vocabulary::from_json(config_field<nlohmann::json>(ck, "vocabulary"));
}

Checkpoint adapter_checkpoint(const peft::AdapterSet& adapter, const Backbone& model, nlohmann::json lineage) {
    Checkpoint ck;
    ck.config = {{"kind", "adapter"},
                 {"adapter_kind", peft::to_string(adapter.kind())},
                 {"language", adapter.language()},
                 {"peft", adapter.config()},
                 {"backbone", model.config()}};
    lineage["backbone_hash"] = model.content_hash();
    lineage["adapter_hash"] = adapter.content_hash();
    ck.lineage = std::move(lineage);
    ck.tensors = cloned(adapter.parameters());
    return ck;
}

peft::AdapterSet load_adapter(const Checkpoint& ck) {
    require_kind(ck, "adapter");
    const auto kind = peft::parse_adapter_kind(config_field<std::string>(ck, "adapter_kind"));
    const auto language = config_field<std::string>(ck, "language");
    const auto peft_cfg = config_field<peft::PeftConfig>(ck, "peft");
    const auto bcfg = checkpoint_backbone_config(ck);
    nc::Rng rng(0);
    expect_like(ck, peft::AdapterSet::create(kind, language, bcfg, peft_cfg, rng).parameters());
    return peft::AdapterSet::from_tensors(kind, language, bcfg, peft_cfg, ck.tensors);
}

Checkpoint fusion_checkpoint(const fusion::FusionModel& fused, const Backbone& model, TrainMode mode,
                             const std::string& target, nlohmann::json lineage) {
    Checkpoint ck;
    const auto& mask = fused.mask();
    ck.config = {{"kind", "fusion"},
                 {"mode", to_string(mode)},
                 {"target", target},
                 {"adapter_kind", peft::to_string(fused.adapter_kind())},
                 {"adapter_order", fused.adapter_order()},
                 {"peft", fused.adapters().front().config()},
                 {"backbone", model.config()},
                 {"mask", std::vector<std::string>(mask.begin(), mask.end())},
                 {"mask_mode", fusion::to_string(fused.mask_mode())}};
    lineage["backbone_hash"] = model.content_hash();
    nlohmann::json adapters = nlohmann::json::array();
    for (const auto& a : fused.adapters()) {
        adapters.push_back(
            {{"language", a.language()}, {"kind", peft::to_string(a.kind())}, {"hash", a.content_hash()}});
    }
    lineage["adapters"] = std::move(adapters);
    lineage["fusion_hash"] = nc::content_hash(fused.parameters());
    ck.lineage = std::move(lineage);
    ck.tensors = cloned(fused.parameters());
    for (const auto& a : fused.adapters()) {
        for (auto& t : cloned(a.parameters())) {
            ck.tensors.push_back(std::move(t));
        }
    }
    return ck;
}

fusion::FusionModel load_fusion(const Checkpoint& ck) {
    require_kind(ck, "fusion");
    const auto kind = peft::parse_adapter_kind(config_field<std::string>(ck, "adapter_kind"));
    const auto order = config_field<std::vector<std::string>>(ck, "adapter_order");
    const auto peft_cfg = config_field<peft::PeftConfig>(ck, "peft");
    const auto bcfg = checkpoint_backbone_config(ck);
    std::vector<peft::AdapterSet> adapters;
    nc::Rng rng(0);
    for (const auto& tag : order) {
        expect_like(ck, peft::AdapterSet::create(kind, tag, bcfg, peft_cfg, rng).parameters());
        adapters.push_back(peft::AdapterSet::from_tensors(kind, tag, bcfg, peft_cfg, ck.tensors));
    }
    const nc::Shape square{bcfg.hidden_size, bcfg.hidden_size};
    std::vector<fusion::FusionBlock> blocks;
    for (std::size_t l = 0; l < bcfg.num_layers; ++l) {
        const std::string p = "fusion.layer" + std::to_string(l) + ".";
        blocks.emplace_back(l, order, ck.expect(p + "query", square).clone(true),
                            ck.expect(p + "key", square).clone(true), ck.expect(p + "value", square).clone(true));
    }
    fusion::FusionModel model(std::move(adapters), std::move(blocks));
    const auto mask = config_field<std::vector<std::string>>(ck, "mask");
    model.set_mask({mask.begin(), mask.end()});
    model.set_mask_mode(fusion::parse_mask_mode(config_field<std::string>(ck, "mask_mode")));
    return model;
}

}  // namespace advfusion::advtrain
