// SPDX-License-Identifier: Apache-2.0

#include "pipeline.hpp"

#include <algorithm>
#include <fstream>

namespace advfusion::cli {

std::uint64_t label(std::string_view text) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : text) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

std::vector<corpus::Sample> load_split(const RunConfig& config, const std::string& split) {
    const auto path = config.data_path(split);
    if (!std::filesystem::exists(path)) {
        throw ConfigError("data." + split + ": corpus file '" + path.string() + "' does not exist");
    }
    return corpus::load_corpus(path);
}

namespace {
advtrain::TrainingPlan base_plan(const RunConfig& config, advtrain::TrainMode mode, std::size_t epochs, double lr,
                                 std::uint64_t seed_label) {
    advtrain::TrainingPlan plan;
    plan.mode = mode;
    plan.epochs_per_phase = epochs;
    plan.optimizer.lr = lr;
    plan.batch_size = config.training.batch_size;
    plan.seed = numcore::Rng::derive(config.training.seed, seed_label);
    plan.reset_moments_between_phases = config.training.reset_moments;
    return plan;
}
}  // namespace

PretrainedBackbone pretrain(const RunConfig& config, const std::vector<corpus::Sample>& train,
                            advtrain::EventLog* log) {
    auto vocab = corpus::Vocabulary::build(train, config.vocab_max_size);
    auto bcfg = config.backbone;
    bcfg.vocab_size = vocab.size();
    numcore::Rng rng(numcore::Rng::derive(config.training.seed, label("init:backbone")));
    backbone::Backbone model(bcfg, rng);
    const auto data = corpus::encode_all(train, vocab, bcfg.max_seq_len);
    if (config.training.backbone_epochs > 0) {
        advtrain::pretrain_backbone(model, data,
                                    base_plan(config, advtrain::TrainMode::backbone, config.training.backbone_epochs,
                                              config.training.backbone_lr, label("plan:backbone")),
                                    {}, log);
    }
    model.set_trainable(false);
    return {std::move(model), std::move(vocab)};
}

peft::AdapterSet train_adapter(const RunConfig& config, backbone::Backbone& model, const corpus::Vocabulary& vocab,
                               const std::vector<corpus::Sample>& train, const std::string& language,
                               peft::AdapterKind kind, advtrain::EventLog* log) {
    const auto mine = corpus::filter_language(train, language);
    if (mine.empty()) {
        throw ConfigError("language '" + language + "' has no samples in the training corpus");
    }
    const std::string tag = std::string(peft::to_string(kind)) + ":" + language;
    numcore::Rng rng(numcore::Rng::derive(config.training.seed, label("init:" + tag)));
    auto adapter = peft::AdapterSet::create(kind, language, model.config(), config.peft, rng);
    if (config.training.adapter_epochs > 0) {
        advtrain::train_language_adapter(
            model, adapter, corpus::encode_all(mine, vocab, model.config().max_seq_len),
            base_plan(config, advtrain::TrainMode::adapter, config.training.adapter_epochs, config.training.adapter_lr,
                      label("plan:" + tag)),
            {}, log);
    }
    adapter.set_trainable(false);
    return adapter;
}

FusionRun train_fusion(const RunConfig& config, backbone::Backbone& model, const corpus::Vocabulary& vocab,
                       const std::vector<corpus::Sample>& train, std::vector<peft::AdapterSet> adapters,
                       advtrain::TrainMode mode, const std::string& target, advtrain::EventLog* log) {
    std::vector<std::string> tags;
    for (const auto& a : adapters) {
        tags.push_back(a.language());
    }
    std::vector<corpus::Sample> mixed;
    for (const auto& s : train) {
        if (std::find(tags.begin(), tags.end(), s.language) != tags.end()) {
            mixed.push_back(s);
        }
    }
    if (mixed.empty()) {
        throw ConfigError("training corpus has no samples for the fused adapters' languages");
    }
    const std::string tag = std::string(advtrain::to_string(mode)) + ":" +
                            std::string(peft::to_string(adapters.front().kind())) + ":" + target;
    numcore::Rng rng(numcore::Rng::derive(config.training.seed, label("init:" + tag)));
    fusion::FusionModel fused(model.config(), std::move(adapters), rng);
    fused.set_mask_mode(fusion::parse_mask_mode(config.training.mask_mode));
    auto plan = base_plan(config, mode, config.training.fusion_epochs, config.training.fusion_lr, label("plan:" + tag));
    plan.adapter_tags = tags;
    plan.target_language = target;
    const auto data = corpus::encode_all(mixed, vocab, model.config().max_seq_len);
    advtrain::TrainResult result = mode == advtrain::TrainMode::advfusion
                                       ? advtrain::train_advfusion(model, fused, data, plan, {}, log)
                                       : advtrain::train_adapterfusion(model, fused, data, plan, {}, log);
    fused.set_trainable(false);
    return {std::move(fused), std::move(result)};
}

std::string token_text(const std::string& text) {
    std::string out;
    for (const auto& t : corpus::tokenize(text)) {
        out += (out.empty() ? "" : " ") + t;
    }
    return out;
}

std::vector<metrics::ScoredPair> predict(const RunConfig& config, const backbone::Backbone& model,
                                         const corpus::Vocabulary& vocab, const std::vector<corpus::Sample>& samples,
                                         const std::function<const backbone::Attachments*(const corpus::Sample&)>&
                                             attachments_for) {
    std::vector<metrics::ScoredPair> out;
    const std::size_t max_len = model.config().max_seq_len;
    for (const auto& s : samples) {
        const auto enc = corpus::encode(s, vocab, max_len);
        const auto prompt = enc.prompt();
        const std::size_t room = max_len > prompt.size() ? max_len - prompt.size() : 0;
        const auto seq = model.generate_greedy(prompt, std::min(room, config.training.max_new_tokens),
                                               corpus::Vocabulary::eos, attachments_for(s));
        std::vector<std::int64_t> generated(seq.begin() + static_cast<long>(prompt.size()), seq.end());
        if (!generated.empty() && generated.back() == corpus::Vocabulary::eos) {
            generated.pop_back();
        }
        out.push_back({s.id, s.language, vocab.decode_text(generated), token_text(s.target)});
    }
    return out;
}

std::vector<fusion::SampleCapture> capture(const backbone::Backbone& model, const corpus::Vocabulary& vocab,
                                           fusion::FusionModel& fused, const std::vector<corpus::Sample>& samples) {
    fusion::AttentionCapture cap;
    fused.set_capture(&cap);
    numcore::NoGradGuard no_grad;
    try {
        for (const auto& s : samples) {
            const auto enc = corpus::encode(s, vocab, model.config().max_seq_len);
            cap.begin_sample(s.id);
            model.forward(enc.ids, &fused);
        }
    } catch (...) {
        fused.set_capture(nullptr);
        throw;
    }
    fused.set_capture(nullptr);
    return cap.samples();
}

fusion::FusionModel with_fusion_tensors(const fusion::FusionModel& fused, const std::vector<numcore::NamedTensor>& tensors,
                                        const std::set<std::string>& mask) {
    std::map<std::string, numcore::Tensor> by_name(tensors.begin(), tensors.end());
    auto get = [&](const std::string& name) {
        auto it = by_name.find(name);
        if (it == by_name.end()) {
            throw std::runtime_error("fusion snapshot lacks '" + name + "'");
        }
        return it->second.clone();
    };
    std::vector<fusion::FusionBlock> blocks;
    for (const auto& b : fused.blocks()) {
        const std::string p = "fusion.layer" + std::to_string(b.layer_index()) + ".";
        blocks.emplace_back(b.layer_index(), b.adapter_order(), get(p + "query"), get(p + "key"), get(p + "value"));
    }
    fusion::FusionModel out(fused.adapters(), std::move(blocks));
    out.set_mask(mask);
    out.set_mask_mode(fused.mask_mode());
    return out;
}

peft::ParamCount count_adapter_setup(backbone::Backbone& model, peft::AdapterSet& adapter) {
    model.set_trainable(false);
    adapter.set_trainable(true);
    const auto count = peft::param_count(
        {{"backbone", model.parameters()}, {"adapter:" + adapter.language(), adapter.parameters()}});
    adapter.set_trainable(false);
    return count;
}

peft::ParamCount count_fusion_setup(backbone::Backbone& model, fusion::FusionModel& fused) {
    model.set_trainable(false);
    std::vector<peft::ParamGroup> groups{{"backbone", model.parameters()}};
    for (auto& a : fused.adapters()) {
        a.set_trainable(false);
        groups.push_back({"adapter:" + a.language(), a.parameters()});
    }
    fused.set_trainable(true);
    groups.push_back({"fusion", fused.parameters()});
    const auto count = peft::param_count(groups);
    fused.set_trainable(false);
    return count;
}

advtrain::EventLog open_log(const std::filesystem::path& path) {
    std::filesystem::create_directories(path.parent_path());
    return advtrain::EventLog(path);
}

void save_artifact(const std::filesystem::path& path, const advtrain::Checkpoint& ck) {
    std::filesystem::create_directories(path.parent_path());
    advtrain::save_checkpoint(path, ck);
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw std::runtime_error("cannot write '" + path.string() + "'");
    }
    out << text;
}

PretrainedBackbone load_backbone_for(const std::filesystem::path& path, const nlohmann::json& lineage) {
    if (!std::filesystem::exists(path)) {
        throw ConfigError("backbone checkpoint '" + path.string() + "' does not exist");
    }
    const auto ck = advtrain::load_checkpoint(path);
    auto model = advtrain::load_backbone(ck);
    auto vocab = advtrain::load_vocabulary(ck);
    if (lineage.contains("backbone_hash") && lineage["backbone_hash"].get<std::string>() != model.content_hash()) {
        throw ConfigError("checkpoint was trained against a different backbone than '" + path.string() + "'");
    }
    return {std::move(model), std::move(vocab)};
}

}  // namespace advfusion::cli
