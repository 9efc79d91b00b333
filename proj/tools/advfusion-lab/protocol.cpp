// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <iterator>
#include <sstream>

#include "advfusion/numcore/digest.hpp"
#include "lab.hpp"
#include "pipeline.hpp"

namespace advfusion::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string fixed(double x, int digits = 2) {
    std::ostringstream s;
    s << std::fixed << std::setprecision(digits) << x;
    return s.str();
}

std::string file_digest(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    const std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return numcore::sha256_hex(bytes);
}

std::string rel(const fs::path& p, const fs::path& root) { return fs::relative(p, root).generic_string(); }

void fill_scores(ProtocolRow& row, const std::vector<metrics::MetricReport>& reports,
                 const std::vector<std::string>& languages) {
    for (const auto& r : reports) {
        auto& dst = r.metric == "bleu4" ? row.bleu : row.rouge;
        if (r.metric != "bleu4" && r.metric != "rougeL") {
            continue;
        }
        for (const auto& [lang, v] : r.per_language) {
            dst[lang] = v;
        }
    }
    for (const auto& lang : languages) {
        row.bleu_avg += row.bleu.at(lang) / static_cast<double>(languages.size());
        row.rouge_avg += row.rouge.at(lang) / static_cast<double>(languages.size());
    }
}

std::string render_table(const std::vector<ProtocolRow>& rows, const std::vector<std::string>& languages,
                         const std::string& target) {
    std::string md = "| Configuration |";
    std::string rule = "|---|";
    for (const auto* metric : {"BLEU-4", "ROUGE-L"}) {
        for (const auto& lang : languages) {
            md += " " + std::string(metric) + " " + lang + (lang == target ? "*" : "") + " |";
            rule += "---:|";
        }
        md += " " + std::string(metric) + " avg |";
        rule += "---:|";
    }
    md += " Trainable | Total | Ratio |\n";
    rule += "---:|---:|---:|\n";
    md += rule;
    for (const auto& r : rows) {
        md += "| " + r.name + " |";
        for (const auto* scores : {&r.bleu, &r.rouge}) {
            for (const auto& lang : languages) {
                md += " " + fixed(scores->at(lang)) + " |";
            }
            md += " " + fixed(scores == &r.bleu ? r.bleu_avg : r.rouge_avg) + " |";
        }
        md += " " + std::to_string(r.trainable) + " | " + std::to_string(r.total) + " | " + fixed(r.ratio(), 4) +
              " |\n";
    }
    md += "\n`*` low-resource target language.\n";
    return md;
}

json rows_json(const ProtocolResult& result) {
    json rows = json::array();
    for (const auto& r : result.rows) {
        rows.push_back({{"configuration", r.name},
                        {"bleu4", r.bleu},
                        {"rougeL", r.rouge},
                        {"bleu4_avg", r.bleu_avg},
                        {"rougeL_avg", r.rouge_avg},
                        {"trainable", r.trainable},
                        {"total", r.total},
                        {"ratio", r.ratio()}});
    }
    return {{"languages", result.languages}, {"target", result.target}, {"rows", rows}};
}

}  // namespace

ProtocolResult run_protocol(const RunConfig& input, std::ostream& log) {
    RunConfig config = input;
    const fs::path root = config.run_dir();
    // The protocol owns its data: the synthetic corpus lands in <run_dir>/data.
    config.data = {};
    try {
        config.synth.validate();
    } catch (const corpus::CorpusError& e) {
        throw ConfigError(std::string("[synth] ") + e.what());
    }
    if (config.synth.languages.size() < 2) {
        throw ConfigError("synth.languages needs at least 2 languages for fusion");
    }
    fs::create_directories(root);
    write_text(root / "config.resolved.ini", render_config(config));

    ProtocolResult result;
    result.run_dir = root;
    result.languages = config.synth.languages;
    std::sort(result.languages.begin(), result.languages.end());
    result.target = config.synth.low_resource;
    const auto& languages = result.languages;
    const std::string& target = result.target;

    const auto split = corpus::synth_corpus(config.synth);
    for (const auto& [name, samples] : {std::pair{"train", &split.train}, std::pair{"valid", &split.valid},
                                        std::pair{"test", &split.test}}) {
        fs::create_directories(root / "data");
        corpus::save_corpus(config.data_path(name), *samples);
    }
    log << "synth: " << split.train.size() << "/" << split.valid.size() << "/" << split.test.size()
        << " train/valid/test samples, target " << target << "\n";

    auto backbone_log = open_log(root / "logs" / "backbone.events.jsonl");
    auto pre = pretrain(config, split.train, &backbone_log);
    save_artifact(root / "backbone.ckpt",
                  advtrain::backbone_checkpoint(pre.model, pre.vocab, {{"train_corpus", "data/train.jsonl"}}));
    log << "backbone: " << backbone_log.count("step") << " steps, hash " << pre.model.content_hash().substr(0, 12)
        << "\n";
    const std::string backbone_hash = pre.model.content_hash();

    std::map<peft::AdapterKind, std::vector<peft::AdapterSet>> adapters;
    for (auto kind : {peft::AdapterKind::bottleneck, peft::AdapterKind::compacter, peft::AdapterKind::lora}) {
        for (const auto& lang : languages) {
            const std::string stem = std::string(peft::to_string(kind)) + "-" + lang;
            auto alog = open_log(root / "logs" / (stem + ".events.jsonl"));
            auto a = train_adapter(config, pre.model, pre.vocab, split.train, lang, kind, &alog);
            save_artifact(root / "adapters" / (stem + ".ckpt"),
                          advtrain::adapter_checkpoint(
                              a, pre.model, {{"backbone_checkpoint", "backbone.ckpt"}, {"backbone_hash", backbone_hash}}));
            log << "adapter " << stem << ": final loss "
                << fixed(alog.records().empty() ? 0.0 : alog.records().back().value("mean_loss", 0.0), 4) << "\n";
            adapters[kind].push_back(std::move(a));
        }
    }

    struct FusionSetup {
        std::string name;
        advtrain::TrainMode mode;
        peft::AdapterKind kind;
    };
    const std::vector<FusionSetup> fusion_setups{
        {"AdvFusion", advtrain::TrainMode::advfusion, peft::AdapterKind::bottleneck},
        {"AdvFusion+Compacter", advtrain::TrainMode::advfusion, peft::AdapterKind::compacter},
        {"AdapterFusion", advtrain::TrainMode::fusion, peft::AdapterKind::bottleneck},
        {"AdapterFusion+Compacter", advtrain::TrainMode::fusion, peft::AdapterKind::compacter},
    };
    const auto target_test = corpus::filter_language(split.test, target);
    const auto order = attnlab::parse_order(config.analysis.order);

    auto evaluate_rows = [&](ProtocolRow& row, const std::string& stem,
                             const std::function<const backbone::Attachments*(const corpus::Sample&)>& pick) {
        const auto pairs = predict(config, pre.model, pre.vocab, split.test, pick);
        const auto reports = metrics::evaluate(pairs, {metrics::Metric::bleu4, metrics::Metric::rouge_l});
        write_text(root / "reports" / (stem + ".test.metrics.jsonl"), metrics::reports_to_jsonl(reports));
        fill_scores(row, reports, languages);
    };
    auto export_trace = [&](fusion::FusionModel& fused, const std::string& stem) {
        const auto trace = attnlab::build_trace(capture(pre.model, pre.vocab, fused, target_test), order);
        const auto path = root / "traces" / (stem + ".test.csv");
        fs::create_directories(path.parent_path());
        attnlab::export_trace(trace, path);
        result.traces.push_back(path);
    };

    for (const auto& setup : fusion_setups) {
        const std::string stem = std::string(advtrain::to_string(setup.mode)) + "-" +
                                 std::string(peft::to_string(setup.kind)) +
                                 (setup.mode == advtrain::TrainMode::advfusion ? "-" + target : "");
        const std::string run_target = setup.mode == advtrain::TrainMode::advfusion ? target : std::string();
        auto flog = open_log(root / "logs" / (stem + ".events.jsonl"));
        auto run = train_fusion(config, pre.model, pre.vocab, split.train, adapters.at(setup.kind), setup.mode,
                                run_target, &flog);
        json sources = json::array();
        for (const auto& lang : languages) {
            sources.push_back("adapters/" + std::string(peft::to_string(setup.kind)) + "-" + lang + ".ckpt");
        }
        const std::size_t e = config.training.fusion_epochs;
        json phases = json::array({{{"phase", 1}, {"mask", json::array()}, {"epochs", e}}});
        if (setup.mode == advtrain::TrainMode::advfusion) {
            phases = json::array({{{"phase", 1}, {"mask", {target}}, {"epochs", e}},
                                  {{"phase", 2}, {"mask", json::array()}, {"epochs", e}}});
        }
        const json lineage{
            {"backbone_checkpoint", "backbone.ckpt"}, {"adapter_checkpoints", sources}, {"phases", phases}};
        save_artifact(root / "fusion" / (stem + ".ckpt"),
                      advtrain::fusion_checkpoint(run.model, pre.model, setup.mode, run_target, lineage));
        log << setup.name << ": " << run.result.steps << " steps, final loss "
            << fixed(run.result.epoch_losses.back(), 4) << "\n";

        ProtocolRow row;
        row.name = setup.name;
        const auto count = count_fusion_setup(pre.model, run.model);
        row.trainable = count.trainable;
        row.total = count.total;
        const backbone::Attachments* att = &run.model;
        evaluate_rows(row, stem, [&](const corpus::Sample&) { return att; });
        export_trace(run.model, stem);
        if (setup.mode == advtrain::TrainMode::advfusion) {
            auto snap = with_fusion_tensors(run.model, run.result.phase1_snapshot, {target});
            json l1 = lineage;
            l1["phases"] = json::array({phases[0]});
            save_artifact(root / "fusion" / (stem + ".phase1.ckpt"),
                          advtrain::fusion_checkpoint(snap, pre.model, setup.mode, target, l1));
            export_trace(snap, stem + ".phase1");
        }
        result.rows.push_back(std::move(row));
    }

    const std::vector<std::pair<std::string, peft::AdapterKind>> single{
        {"Compacter", peft::AdapterKind::compacter},
        {"TaskAdapter", peft::AdapterKind::bottleneck},
        {"LoRA", peft::AdapterKind::lora},
    };
    for (const auto& [name, kind] : single) {
        auto& sets = adapters.at(kind);
        ProtocolRow row;
        row.name = name;
        auto it = std::find_if(sets.begin(), sets.end(), [&](const peft::AdapterSet& a) { return a.language() == target; });
        const auto count = count_adapter_setup(pre.model, it != sets.end() ? *it : sets.front());
        row.trainable = count.trainable;
        row.total = count.total;
        std::map<std::string, const backbone::Attachments*> by_lang;
        for (const auto& a : sets) {
            by_lang[a.language()] = &a;
        }
        evaluate_rows(row, std::string(peft::to_string(kind)), [&](const corpus::Sample& s) {
            return by_lang.at(s.language);
        });
        result.rows.push_back(std::move(row));
    }
    log << "evaluated " << result.rows.size() << " configurations on " << split.test.size() << " test samples\n";

    result.table_markdown = render_table(result.rows, languages, target);
    write_text(root / "protocol" / "comparison.md", result.table_markdown);
    write_text(root / "protocol" / "comparison.json", rows_json(result).dump(2) + "\n");

    for (const auto& e : fs::recursive_directory_iterator(root)) {
        if (e.is_regular_file()) {
            result.artifact_digests[rel(e.path(), root)] = file_digest(e.path());
        }
    }
    return result;
}

}  // namespace advfusion::cli
