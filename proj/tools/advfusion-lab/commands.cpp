// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include <CLI11.hpp>

#include "lab.hpp"
#include "pipeline.hpp"

namespace advfusion::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Globals {
    std::string config_file;
    std::vector<std::string> sets;
    std::string backbone;
};

RunConfig resolve(const Globals& g) {
    std::optional<fs::path> file;
    if (!g.config_file.empty()) {
        file = g.config_file;
    }
    return load_config(file, g.sets);
}

void echo_config(const RunConfig& config) {
    write_text(config.run_dir() / "config.resolved.ini", render_config(config));
}

fs::path backbone_path(const RunConfig& config, const Globals& g) {
    return g.backbone.empty() ? config.run_dir() / "backbone.ckpt" : config.in_run_dir(g.backbone);
}

/// Lineage paths are relative to the run directory when they sit inside it,
/// so identical runs under different roots write identical checkpoints.
std::string lineage_path(const RunConfig& config, const fs::path& path) {
    const auto rel = fs::weakly_canonical(path).lexically_relative(fs::weakly_canonical(config.run_dir()));
    if (rel.empty() || *rel.begin() == "..") {
        return path.string();
    }
    return rel.generic_string();
}

void require_file(const fs::path& path, const std::string& what) {
    if (!fs::exists(path)) {
        throw ConfigError(what + " '" + path.string() + "' does not exist");
    }
}

std::string fixed(double x, int digits = 2) {
    std::ostringstream s;
    s << std::fixed << std::setprecision(digits) << x;
    return s.str();
}

std::vector<metrics::Metric> parse_metrics(const std::string& list) {
    try {
        return metrics::parse_metric_list(list);
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
}

advtrain::TrainMode parse_fusion_mode(const std::string& text) {
    if (text == "fusion") {
        return advtrain::TrainMode::fusion;
    }
    if (text == "advfusion") {
        return advtrain::TrainMode::advfusion;
    }
    throw ConfigError("--mode must be fusion or advfusion, got '" + text + "'");
}

peft::AdapterKind parse_method(const std::string& text) {
    try {
        return peft::parse_adapter_kind(text);
    } catch (const std::invalid_argument&) {
        throw ConfigError("unknown method '" + text + "' (expected bottleneck, compacter or lora)");
    }
}

void print_reports(std::ostream& out, const std::vector<metrics::MetricReport>& reports) {
    for (const auto& r : reports) {
        out << r.metric << " " << fixed(r.aggregate, 4) << " (n=" << r.per_sample.size() << ")";
        for (const auto& [lang, v] : r.per_language) {
            out << " " << lang << "=" << fixed(v, 4);
        }
        out << "\n";
    }
}

std::string predictions_jsonl(const std::vector<metrics::ScoredPair>& pairs) {
    std::string text;
    for (const auto& p : pairs) {
        text += json{{"id", p.id}, {"language", p.language}, {"prediction", p.candidate}, {"reference", p.reference}}
                    .dump() +
                "\n";
    }
    return text;
}

// ---- synth ----------------------------------------------------------------

int cmd_synth(const Globals& g, std::ostream& out) {
    const auto config = resolve(g);
    try {
        config.synth.validate();
    } catch (const corpus::CorpusError& e) {
        throw ConfigError(std::string("[synth] ") + e.what());
    }
    const auto split = corpus::synth_corpus(config.synth);
    echo_config(config);
    for (const auto* name : {"train", "valid", "test"}) {
        const auto& samples = std::string(name) == "train" ? split.train
                              : std::string(name) == "valid" ? split.valid
                                                             : split.test;
        const auto path = config.data_path(name);
        fs::create_directories(path.parent_path());
        corpus::save_corpus(path, samples);
        out << name << ": " << samples.size() << " samples ->" << " " << path.string() << "\n";
    }
    return kExitOk;
}

// ---- pretrain-backbone ----------------------------------------------------

int cmd_pretrain(const Globals& g, std::ostream& out) {
    const auto config = resolve(g);
    const auto train = load_split(config, "train");
    echo_config(config);
    auto log = open_log(config.run_dir() / "logs" / "backbone.events.jsonl");
    auto pre = pretrain(config, train, &log);
    const auto path = backbone_path(config, g);
    save_artifact(path, advtrain::backbone_checkpoint(pre.model, pre.vocab,
                                                      {{"train_corpus", lineage_path(config, config.data_path("train"))}}));
    out << "backbone " << pre.model.content_hash() << " -> " << path.string() << "\n";
    return kExitOk;
}

// ---- train-adapter --------------------------------------------------------

struct AdapterArgs {
    std::string language;
    std::string method;
};

int cmd_train_adapter(const Globals& g, const AdapterArgs& a, std::ostream& out) {
    const auto config = resolve(g);
    const auto kind = parse_method(a.method);
    const auto bpath = backbone_path(config, g);
    require_file(bpath, "backbone checkpoint");
    const auto train = load_split(config, "train");
    if (corpus::filter_language(train, a.language).empty()) {
        throw ConfigError("language '" + a.language + "' has no samples in the training corpus");
    }
    echo_config(config);
    auto pre = load_backbone_for(bpath, json::object());
    const std::string stem = std::string(peft::to_string(kind)) + "-" + a.language;
    auto log = open_log(config.run_dir() / "logs" / (stem + ".events.jsonl"));
    auto adapter = train_adapter(config, pre.model, pre.vocab, train, a.language, kind, &log);
    const auto path = config.run_dir() / "adapters" / (stem + ".ckpt");
    save_artifact(path, advtrain::adapter_checkpoint(adapter, pre.model,
                                                     {{"backbone_checkpoint", lineage_path(config, bpath)},
                                                      {"backbone_hash", pre.model.content_hash()}}));
    out << "adapter " << stem << " " << adapter.content_hash() << " -> " << path.string() << "\n";
    return kExitOk;
}

// ---- train-fusion ---------------------------------------------------------

struct FusionArgs {
    std::string mode;
    std::string target;
    std::string adapters_dir;
    std::string method;
};

struct AdapterFile {
    fs::path path;
    std::string language;
    std::string kind;
};

std::vector<AdapterFile> scan_adapters(const fs::path& dir, const std::string& method) {
    if (!fs::is_directory(dir)) {
        throw ConfigError("adapter directory '" + dir.string() + "' does not exist");
    }
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (e.is_regular_file() && e.path().extension() == ".ckpt") {
            files.push_back(e.path());
        }
    }
    std::sort(files.begin(), files.end());
    std::vector<AdapterFile> found;
    for (const auto& f : files) {
        const auto manifest = advtrain::read_manifest(f);
        const auto& cfg = manifest.at("config");
        if (cfg.value("kind", "") != "adapter") {
            continue;
        }
        AdapterFile a{f, cfg.at("language").get<std::string>(), cfg.at("adapter_kind").get<std::string>()};
        if (method.empty() || a.kind == method) {
            found.push_back(std::move(a));
        }
    }
    if (found.size() < 2) {
        throw ConfigError("fusion needs at least 2 adapter checkpoints in '" + dir.string() + "'" +
                          (method.empty() ? std::string() : " for method " + method) + ", found " +
                          std::to_string(found.size()));
    }
    std::set<std::string> kinds;
    for (const auto& a : found) {
        kinds.insert(a.kind);
    }
    if (kinds.size() > 1) {
        std::string list;
        for (const auto& k : kinds) {
            list += (list.empty() ? "" : ", ") + k;
        }
        throw ConfigError("adapters mix kinds (" + list + "); pass --method to pick one family");
    }
    std::set<std::string> languages;
    for (const auto& a : found) {
        if (!languages.insert(a.language).second) {
            throw ConfigError("two adapter checkpoints for language '" + a.language + "' in '" + dir.string() + "'");
        }
    }
    if (*kinds.begin() == "lora") {
        throw ConfigError("fusion composes bottleneck or compacter adapters, not lora");
    }
    return found;
}

int cmd_train_fusion(const Globals& g, const FusionArgs& a, std::ostream& out) {
    const auto config = resolve(g);
    const auto mode = parse_fusion_mode(a.mode);
    if (mode == advtrain::TrainMode::advfusion && a.target.empty()) {
        throw ConfigError("--mode advfusion requires --target");
    }
    if (!a.method.empty()) {
        parse_method(a.method);
    }
    const fs::path dir = a.adapters_dir.empty() ? config.run_dir() / "adapters" : config.in_run_dir(a.adapters_dir);
    const auto files = scan_adapters(dir, a.method);
    if (mode == advtrain::TrainMode::advfusion &&
        std::none_of(files.begin(), files.end(), [&](const AdapterFile& f) { return f.language == a.target; })) {
        throw ConfigError("--target '" + a.target + "' has no adapter in '" + dir.string() + "'");
    }
    const auto bpath = backbone_path(config, g);
    require_file(bpath, "backbone checkpoint");
    const auto train = load_split(config, "train");
    echo_config(config);

    auto pre = load_backbone_for(bpath, json::object());
    std::vector<peft::AdapterSet> adapters;
    json sources = json::array();
    for (const auto& f : files) {
        const auto ck = advtrain::load_checkpoint(f.path);
        if (ck.lineage.value("backbone_hash", "") != pre.model.content_hash()) {
            throw ConfigError("adapter '" + f.path.string() + "' was trained against a different backbone");
        }
        adapters.push_back(advtrain::load_adapter(ck));
        sources.push_back(lineage_path(config, f.path));
    }
    const std::string kind = files.front().kind;
    const std::string stem =
        std::string(advtrain::to_string(mode)) + "-" + kind + (a.target.empty() ? "" : "-" + a.target);
    const std::string target = mode == advtrain::TrainMode::advfusion ? a.target : std::string();
    auto log = open_log(config.run_dir() / "logs" / (stem + ".events.jsonl"));
    auto run = train_fusion(config, pre.model, pre.vocab, train, std::move(adapters), mode, target, &log);

    const std::size_t e = config.training.fusion_epochs;
    json phases = json::array();
    if (mode == advtrain::TrainMode::advfusion) {
        phases.push_back({{"phase", 1}, {"mask", {target}}, {"epochs", e}});
        phases.push_back({{"phase", 2}, {"mask", json::array()}, {"epochs", e}});
    } else {
        phases.push_back({{"phase", 1}, {"mask", json::array()}, {"epochs", e}});
    }
    const json lineage{{"backbone_checkpoint", lineage_path(config, bpath)},
                       {"adapter_checkpoints", sources},
                       {"phases", phases}};
    const auto path = config.run_dir() / "fusion" / (stem + ".ckpt");
    save_artifact(path, advtrain::fusion_checkpoint(run.model, pre.model, mode, target, lineage));
    out << stem << " " << run.result.steps << " steps, final loss " << fixed(run.result.epoch_losses.back(), 4)
        << " -> " << path.string() << "\n";
    if (mode == advtrain::TrainMode::advfusion) {
        const auto snap = with_fusion_tensors(run.model, run.result.phase1_snapshot, {target});
        json l1 = lineage;
        l1["phases"] = json::array({phases[0]});
        const auto p1 = config.run_dir() / "fusion" / (stem + ".phase1.ckpt");
        save_artifact(p1, advtrain::fusion_checkpoint(snap, pre.model, mode, target, l1));
        out << "phase-1 snapshot -> " << p1.string() << "\n";
    }
    return kExitOk;
}

// ---- evaluate -------------------------------------------------------------

struct EvalArgs {
    std::string checkpoint;
    std::string metrics = "bleu4,rougeL,prf";
    std::string split = "test";
    bool corpus_bleu = false;
};

struct LoadedModel {
    PretrainedBackbone base;
    std::optional<peft::AdapterSet> adapter;
    std::optional<fusion::FusionModel> fused;
    std::set<std::string> languages;  // empty: every language
};

LoadedModel load_model(const RunConfig& config, const Globals& g, const fs::path& path) {
    require_file(path, "checkpoint");
    auto ck = advtrain::load_checkpoint(path);
    const auto kind = ck.kind();
    if (kind == "backbone") {
        return {{advtrain::load_backbone(ck), advtrain::load_vocabulary(ck)}, std::nullopt, std::nullopt, {}};
    }
    const auto bpath = backbone_path(config, g);
    if (kind == "adapter") {
        auto base = load_backbone_for(bpath, ck.lineage);
        auto adapter = advtrain::load_adapter(ck);
        std::set<std::string> langs{adapter.language()};
        return {std::move(base), std::move(adapter), std::nullopt, std::move(langs)};
    }
    if (kind == "fusion") {
        auto base = load_backbone_for(bpath, ck.lineage);
        auto fused = advtrain::load_fusion(ck);
        fused.set_trainable(false);
        const auto order = fused.adapter_order();
        std::set<std::string> langs(order.begin(), order.end());
        return {std::move(base), std::nullopt, std::move(fused), std::move(langs)};
    }
    throw ConfigError("checkpoint '" + path.string() + "' has unknown kind '" + kind + "'");
}

std::vector<corpus::Sample> restrict(const std::vector<corpus::Sample>& samples, const std::set<std::string>& langs) {
    if (langs.empty()) {
        return samples;
    }
    std::vector<corpus::Sample> out;
    std::copy_if(samples.begin(), samples.end(), std::back_inserter(out),
                 [&](const corpus::Sample& s) { return langs.count(s.language) > 0; });
    return out;
}

int cmd_evaluate(const Globals& g, const EvalArgs& a, std::ostream& out) {
    const auto config = resolve(g);
    const auto metric_list = parse_metrics(a.metrics);
    const fs::path path = config.in_run_dir(a.checkpoint);
    require_file(path, "checkpoint");
    const auto all = load_split(config, a.split);
    auto m = load_model(config, g, path);
    const auto samples = restrict(all, m.languages);
    if (samples.empty()) {
        throw ConfigError("split '" + a.split + "' has no samples for the checkpoint's languages");
    }
    echo_config(config);
    const backbone::Attachments* att = m.adapter ? static_cast<const backbone::Attachments*>(&*m.adapter)
                                       : m.fused ? static_cast<const backbone::Attachments*>(&*m.fused)
                                                 : nullptr;
    const auto pairs = predict(config, m.base.model, m.base.vocab, samples, [&](const corpus::Sample&) { return att; });
    metrics::EvalOptions opts;
    opts.corpus_bleu = a.corpus_bleu;
    const auto reports = metrics::evaluate(pairs, metric_list, opts);
    const std::string stem = path.stem().string() + "." + a.split;
    const auto report_path = config.run_dir() / "reports" / (stem + ".metrics.jsonl");
    write_text(report_path, metrics::reports_to_jsonl(reports));
    write_text(config.run_dir() / "reports" / (stem + ".predictions.jsonl"), predictions_jsonl(pairs));
    print_reports(out, reports);
    out << "report -> " << report_path.string() << "\n";
    return kExitOk;
}

// ---- analyze-attention ----------------------------------------------------

struct AnalyzeArgs {
    std::string checkpoint;
    std::string split = "test";
    std::string out;
    std::string language;
};

int cmd_analyze(const Globals& g, const AnalyzeArgs& a, std::ostream& out) {
    const auto config = resolve(g);
    const auto order = attnlab::parse_order(config.analysis.order);
    const fs::path path = config.in_run_dir(a.checkpoint);
    require_file(path, "checkpoint");
    const auto manifest = advtrain::read_manifest(path);
    if (manifest.at("config").value("kind", "") != "fusion") {
        throw ConfigError("analyze-attention needs a fusion or advfusion checkpoint, '" + path.string() + "' is " +
                          manifest.at("config").value("kind", "unknown"));
    }
    const auto all = load_split(config, a.split);
    auto m = load_model(config, g, path);
    std::string language = a.language;
    if (language.empty()) {
        language = manifest.at("config").value("target", "");
    }
    if (!language.empty() && m.languages.count(language) == 0) {
        throw ConfigError("language '" + language + "' is not one of the checkpoint's adapters");
    }
    const auto samples = restrict(all, language.empty() ? m.languages : std::set<std::string>{language});
    if (samples.empty()) {
        throw ConfigError("split '" + a.split + "' has no samples for language '" + language + "'");
    }
    const fs::path csv = a.out.empty() ? config.run_dir() / "traces" / (path.stem().string() + "." + a.split + ".csv")
                                       : config.in_run_dir(a.out);
    echo_config(config);
    const auto caps = capture(m.base.model, m.base.vocab, *m.fused, samples);
    const auto trace = attnlab::build_trace(caps, order);
    fs::create_directories(csv.parent_path());
    attnlab::export_trace(trace, csv);
    const auto top = trace.top_contributors();
    for (std::size_t l = 0; l < trace.layers.size(); ++l) {
        const auto& e = trace.layers[l];
        const auto it = std::find(e.tags.begin(), e.tags.end(), top[l]);
        out << "layer " << e.layer << ": top " << top[l] << " ("
            << fixed(e.percent[static_cast<std::size_t>(it - e.tags.begin())]) << "%)"
            << (e.degenerate ? " [degenerate]" : "") << "\n";
    }
    out << "trace -> " << csv.string() << "\n";
    return kExitOk;
}

// ---- score ----------------------------------------------------------------

struct ScoreArgs {
    std::string predictions;
    std::string references;
    std::string metrics = "bleu4,rougeL,prf";
    std::string out;
};

int cmd_score(const Globals& g, const ScoreArgs& a, std::ostream& out) {
    const auto config = resolve(g);
    const auto metric_list = parse_metrics(a.metrics);
    const fs::path pred_path = config.in_run_dir(a.predictions);
    const fs::path ref_path = config.in_run_dir(a.references);
    require_file(pred_path, "predictions file");
    require_file(ref_path, "references file");
    const auto refs = corpus::load_corpus(ref_path);
    std::map<std::string, const corpus::Sample*> by_id;
    for (const auto& s : refs) {
        by_id[s.id] = &s;
    }
    std::ifstream in(pred_path);
    std::vector<metrics::ScoredPair> pairs;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) {
            continue;
        }
        json rec;
        try {
            rec = json::parse(line);
        } catch (const json::exception& e) {
            throw ConfigError(pred_path.string() + ":" + std::to_string(line_no) + ": " + e.what());
        }
        if (!rec.contains("id") || !rec.contains("prediction")) {
            throw ConfigError(pred_path.string() + ":" + std::to_string(line_no) + ": needs id and prediction");
        }
        const auto id = rec["id"].get<std::string>();
        auto it = by_id.find(id);
        if (it == by_id.end()) {
            throw ConfigError(pred_path.string() + ":" + std::to_string(line_no) + ": id '" + id +
                              "' is not in the references");
        }
        pairs.push_back({id, it->second->language, rec["prediction"].get<std::string>(),
                         token_text(it->second->target)});
    }
    if (pairs.empty()) {
        throw ConfigError("predictions file '" + pred_path.string() + "' is empty");
    }
    echo_config(config);
    const auto reports = metrics::evaluate(pairs, metric_list);
    const fs::path report_path =
        a.out.empty() ? config.run_dir() / "reports" / (pred_path.stem().string() + ".score.jsonl")
                      : config.in_run_dir(a.out);
    write_text(report_path, metrics::reports_to_jsonl(reports));
    print_reports(out, reports);
    out << "report -> " << report_path.string() << "\n";
    return kExitOk;
}

// ---- param-count ----------------------------------------------------------

int cmd_param_count(const Globals& g, std::ostream& out) {
    const auto config = resolve(g);
    auto bcfg = config.backbone;
    const auto bpath = backbone_path(config, g);
    std::vector<std::string> languages = config.synth.languages;
    if (fs::exists(bpath)) {
        bcfg = advtrain::checkpoint_backbone_config(advtrain::load_checkpoint(bpath, {"__none__"}));
    } else {
        const auto train = load_split(config, "train");
        bcfg.vocab_size = corpus::Vocabulary::build(train, config.vocab_max_size).size();
        languages = corpus::languages_of(train);
    }
    if (languages.size() < 2) {
        throw ConfigError("param-count needs at least 2 languages for the fusion setups");
    }
    echo_config(config);
    numcore::Rng rng(0);
    backbone::Backbone model(bcfg, rng);
    struct Line {
        std::string setup;
        peft::ParamCount count;
    };
    std::vector<Line> lines;
    for (auto kind : {peft::AdapterKind::bottleneck, peft::AdapterKind::compacter, peft::AdapterKind::lora}) {
        auto a = peft::AdapterSet::create(kind, languages.front(), bcfg, config.peft, rng);
        lines.push_back({std::string("adapter:") + std::string(peft::to_string(kind)), count_adapter_setup(model, a)});
    }
    for (auto kind : {peft::AdapterKind::bottleneck, peft::AdapterKind::compacter}) {
        std::vector<peft::AdapterSet> adapters;
        for (const auto& lang : languages) {
            adapters.push_back(peft::AdapterSet::create(kind, lang, bcfg, config.peft, rng));
        }
        fusion::FusionModel fused(bcfg, std::move(adapters), rng);
        const auto c = count_fusion_setup(model, fused);
        lines.push_back({std::string("fusion:") + std::string(peft::to_string(kind)), c});
        lines.push_back({std::string("advfusion:") + std::string(peft::to_string(kind)), c});
    }
    out << std::left << std::setw(22) << "setup" << std::right << std::setw(12) << "trainable" << std::setw(12)
        << "total" << std::setw(10) << "ratio" << "\n";
    for (const auto& l : lines) {
        out << std::left << std::setw(22) << l.setup << std::right << std::setw(12) << l.count.trainable
            << std::setw(12) << l.count.total << std::setw(10) << fixed(l.count.trainable_ratio(), 4) << "\n";
    }
    return kExitOk;
}

// ---- protocol -------------------------------------------------------------

int cmd_protocol(const Globals& g, std::ostream& out) {
    const auto config = resolve(g);
    const auto result = run_protocol(config, out);
    out << "\n" << result.table_markdown;
    return kExitOk;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"advfusion-lab: adapter fusion experiments on a small decoder-only model", "advfusion-lab"};
    app.require_subcommand(1);
    app.fallthrough();
    Globals g;
    app.add_option("--config", g.config_file, "INI config file");
    app.add_option("--set", g.sets, "override one key, section.key=value (repeatable)");
    app.add_option("--backbone", g.backbone, "backbone checkpoint (default <run_dir>/backbone.ckpt)");

    auto* synth = app.add_subcommand("synth", "write the synthetic multi-language corpus");
    auto* pre = app.add_subcommand("pretrain-backbone", "train the backbone on the training corpus");

    AdapterArgs adapter_args;
    auto* ta = app.add_subcommand("train-adapter", "train one language adapter on the frozen backbone");
    ta->add_option("--language", adapter_args.language, "language tag")->required();
    ta->add_option("--method", adapter_args.method, "bottleneck, compacter or lora")->required();

    FusionArgs fusion_args;
    auto* tf = app.add_subcommand("train-fusion", "train AdapterFusion or AdvFusion over trained adapters");
    tf->add_option("--mode", fusion_args.mode, "fusion or advfusion")->required();
    tf->add_option("--target", fusion_args.target, "target language (advfusion)");
    tf->add_option("--adapters", fusion_args.adapters_dir, "adapter checkpoint directory");
    tf->add_option("--method", fusion_args.method, "only use adapters of this kind");

    EvalArgs eval_args;
    auto* ev = app.add_subcommand("evaluate", "greedy-decode a split and score it");
    ev->add_option("--checkpoint", eval_args.checkpoint, "backbone, adapter or fusion checkpoint")->required();
    ev->add_option("--metrics", eval_args.metrics, "comma-separated: bleu4, rougeL, prf");
    ev->add_option("--split", eval_args.split, "train, valid or test");
    ev->add_flag("--corpus-bleu", eval_args.corpus_bleu, "corpus-level BLEU aggregate");

    AnalyzeArgs analyze_args;
    auto* an = app.add_subcommand("analyze-attention", "export per-layer fusion attention contributions");
    an->add_option("--checkpoint", analyze_args.checkpoint, "fusion checkpoint")->required();
    an->add_option("--split", analyze_args.split, "train, valid or test");
    an->add_option("--out", analyze_args.out, "trace CSV path");
    an->add_option("--language", analyze_args.language, "samples to feed (default: the checkpoint's target)");

    ScoreArgs score_args;
    auto* sc = app.add_subcommand("score", "score a predictions JSONL against a reference corpus");
    sc->add_option("--predictions", score_args.predictions, "JSONL with id and prediction")->required();
    sc->add_option("--references", score_args.references, "corpus JSONL")->required();
    sc->add_option("--metrics", score_args.metrics, "comma-separated: bleu4, rougeL, prf");
    sc->add_option("--out", score_args.out, "report path");

    auto* pc = app.add_subcommand("param-count", "trainable and total parameters per setup");
    auto* proto = app.add_subcommand("protocol", "run every stage and write the comparison table");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (synth->parsed()) return cmd_synth(g, out);
        if (pre->parsed()) return cmd_pretrain(g, out);
        if (ta->parsed()) return cmd_train_adapter(g, adapter_args, out);
        if (tf->parsed()) return cmd_train_fusion(g, fusion_args, out);
        if (ev->parsed()) return cmd_evaluate(g, eval_args, out);
        if (an->parsed()) return cmd_analyze(g, analyze_args, out);
        if (sc->parsed()) return cmd_score(g, score_args, out);
        if (pc->parsed()) return cmd_param_count(g, out);
        if (proto->parsed()) return cmd_protocol(g, out);
    } catch (const std::invalid_argument& e) {
        err << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
    return kExitUsage;
}

}  // namespace advfusion::cli
