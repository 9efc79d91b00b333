// SPDX-License-Identifier: Apache-2.0

#include "config.hpp"

#include <cstdio>
#include <cstdlib>
#include <functional>
#include <map>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "advfusion/attnlab/attnlab.hpp"
#include "advfusion/fusion/fusion.hpp"

namespace advfusion::cli {

namespace {

struct Field {
    std::function<std::string(const RunConfig&)> get;
    std::function<void(RunConfig&, const std::string&)> set;
};

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const char* expected) {
    throw ConfigError("invalid value '" + value + "' for " + key + " (expected " + expected + ")");
}

std::size_t parse_size(const std::string& key, const std::string& v) {
    std::size_t pos = 0;
    try {
        if (!v.empty() && v[0] != '-') {
            const auto x = std::stoull(v, &pos);
            if (pos == v.size()) {
                return static_cast<std::size_t>(x);
            }
        }
    } catch (const std::exception&) {
    }
    bad_value(key, v, "a non-negative integer");
}

double parse_double(const std::string& key, const std::string& v) {
    std::size_t pos = 0;
    try {
        const double x = std::stod(v, &pos);
        if (pos == v.size()) {
            return x;
        }
    } catch (const std::exception&) {
    }
    bad_value(key, v, "a number");
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes" || v == "on") {
        return true;
    }
    if (v == "false" || v == "0" || v == "no" || v == "off") {
        return false;
    }
    bad_value(key, v, "true or false");
}

std::string fmt_double(double x) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", x);
    return buf;
}

std::vector<std::string> split_list(const std::string& v) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : v) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (c != ' ') {
            cur += c;
        }
    }
    if (!cur.empty() || !out.empty()) {
        out.push_back(cur);
    }
    return out;
}

std::string join_list(const std::vector<std::string>& v) {
    std::string out;
    for (const auto& s : v) {
        out += (out.empty() ? "" : ",") + s;
    }
    return out;
}

#define SIZE_FIELD(expr) \
    Field { [](const RunConfig& c) { return std::to_string(c.expr); }, \
            [](RunConfig& c, const std::string& v) { c.expr = parse_size(#expr, v); } }
#define DOUBLE_FIELD(expr) \
    Field { [](const RunConfig& c) { return fmt_double(c.expr); }, \
            [](RunConfig& c, const std::string& v) { c.expr = parse_double(#expr, v); } }
#define STRING_FIELD(expr) \
    Field { [](const RunConfig& c) { return c.expr; }, [](RunConfig& c, const std::string& v) { c.expr = v; } }
#define BOOL_FIELD(expr) \
    Field { [](const RunConfig& c) { return std::string(c.expr ? "true" : "false"); }, \
            [](RunConfig& c, const std::string& v) { c.expr = parse_bool(#expr, v); } }

const std::map<std::string, std::map<std::string, Field>>& fields() {
    static const std::map<std::string, std::map<std::string, Field>> table{
        {"backbone",
         {{"num_layers", SIZE_FIELD(backbone.num_layers)},
          {"hidden_size", SIZE_FIELD(backbone.hidden_size)},
          {"num_heads", SIZE_FIELD(backbone.num_heads)},
          {"ffn_size", SIZE_FIELD(backbone.ffn_size)},
          {"max_seq_len", SIZE_FIELD(backbone.max_seq_len)},
          {"layer_norm_eps", DOUBLE_FIELD(backbone.layer_norm_eps)},
          {"vocab_max_size", SIZE_FIELD(vocab_max_size)}}},
        {"peft",
         {{"bottleneck_dim", SIZE_FIELD(peft.bottleneck_dim)},
          {"phm_dim", SIZE_FIELD(peft.phm_dim)},
          {"lora_rank", SIZE_FIELD(peft.lora_rank)},
          {"lora_alpha", DOUBLE_FIELD(peft.lora_alpha)},
          {"init_std", DOUBLE_FIELD(peft.init_std)}}},
        {"training",
         {{"seed", SIZE_FIELD(training.seed)},
          {"batch_size", SIZE_FIELD(training.batch_size)},
          {"backbone_epochs", SIZE_FIELD(training.backbone_epochs)},
          {"backbone_lr", DOUBLE_FIELD(training.backbone_lr)},
          {"adapter_epochs", SIZE_FIELD(training.adapter_epochs)},
          {"adapter_lr", DOUBLE_FIELD(training.adapter_lr)},
          {"fusion_epochs", SIZE_FIELD(training.fusion_epochs)},
          {"fusion_lr", DOUBLE_FIELD(training.fusion_lr)},
          {"reset_moments", BOOL_FIELD(training.reset_moments)},
          {"mask_mode", STRING_FIELD(training.mask_mode)},
          {"max_new_tokens", SIZE_FIELD(training.max_new_tokens)}}},
        {"data", {{"train", STRING_FIELD(data.train)}, {"valid", STRING_FIELD(data.valid)},
                  {"test", STRING_FIELD(data.test)}}},
        {"output", {{"run_dir", STRING_FIELD(output.run_dir)}}},
        {"analysis", {{"order", STRING_FIELD(analysis.order)}}},
        {"synth",
         {{"languages", Field{[](const RunConfig& c) { return join_list(c.synth.languages); },
                              [](RunConfig& c, const std::string& v) { c.synth.languages = split_list(v); }}},
          {"low_resource", STRING_FIELD(synth.low_resource)},
          {"overlap", DOUBLE_FIELD(synth.overlap)},
          {"concepts", SIZE_FIELD(synth.concepts)},
          {"train_size", SIZE_FIELD(synth.train_size)},
          {"low_resource_divisor", SIZE_FIELD(synth.low_resource_divisor)},
          {"min_length", SIZE_FIELD(synth.min_length)},
          {"max_length", SIZE_FIELD(synth.max_length)},
          {"seed", SIZE_FIELD(synth.seed)}}},
    };
    return table;
}

#undef SIZE_FIELD
#undef DOUBLE_FIELD
#undef STRING_FIELD
#undef BOOL_FIELD

}  // namespace

std::filesystem::path RunConfig::run_dir() const {
    const std::filesystem::path p(output.run_dir);
    return p.is_absolute() ? p : run_root / p;
}

std::filesystem::path RunConfig::in_run_dir(const std::filesystem::path& p) const {
    return p.is_absolute() ? p : run_dir() / p;
}

std::filesystem::path RunConfig::data_path(const std::string& split) const {
    const std::string* v = split == "train" ? &data.train : split == "valid" ? &data.valid : &data.test;
    if (split != "train" && split != "valid" && split != "test") {
        throw ConfigError("unknown split '" + split + "' (expected train, valid or test)");
    }
    if (v->empty()) {
        return run_dir() / "data" / (split + ".jsonl");
    }
    return in_run_dir(*v);
}

void set_value(RunConfig& config, const std::string& section, const std::string& key, const std::string& value) {
    const auto& table = fields();
    auto s = table.find(section);
    if (s == table.end()) {
        throw ConfigError("unknown config section [" + section + "]");
    }
    auto k = s->second.find(key);
    if (k == s->second.end()) {
        throw ConfigError("unknown config key '" + section + "." + key + "'");
    }
    try {
        k->second.set(config, value);
    } catch (const ConfigError& e) {
        // Re-label with the dotted key the user wrote.
        throw ConfigError("invalid value '" + value + "' for " + section + "." + key);
    }
}

void apply_override(RunConfig& config, const std::string& assignment) {
    const auto eq = assignment.find('=');
    const auto dot = assignment.find('.');
    if (eq == std::string::npos || dot == std::string::npos || dot > eq) {
        throw ConfigError("--set expects section.key=value, got '" + assignment + "'");
    }
    set_value(config, assignment.substr(0, dot), assignment.substr(dot + 1, eq - dot - 1),
              assignment.substr(eq + 1));
}

RunConfig load_config(const std::optional<std::filesystem::path>& file, const std::vector<std::string>& overrides) {
    RunConfig config;
    if (const char* root = std::getenv("ADVFUSION_RUN_ROOT"); root && *root) {
        config.run_root = root;
    }
    if (file) {
        if (!std::filesystem::exists(*file)) {
            throw ConfigError("config file '" + file->string() + "' does not exist");
        }
        boost::property_tree::ptree tree;
        try {
            boost::property_tree::ini_parser::read_ini(file->string(), tree);
        } catch (const boost::property_tree::ini_parser_error& e) {
            throw ConfigError(std::string("cannot parse config: ") + e.what());
        }
        for (const auto& [section, body] : tree) {
            if (body.empty() && !body.data().empty()) {
                throw ConfigError("config key '" + section + "' must sit inside a [section]");
            }
            for (const auto& [key, value] : body) {
                set_value(config, section, key, value.data());
            }
        }
    }
    for (const auto& o : overrides) {
        apply_override(config, o);
    }
    validate(config);
    return config;
}

std::string render_config(const RunConfig& config) {
    std::string out;
    for (const auto& [section, keys] : fields()) {
        out += "[" + section + "]\n";
        for (const auto& [key, field] : keys) {
            out += key + " = " + field.get(config) + "\n";
        }
        out += "\n";
    }
    return out;
}

void validate(const RunConfig& config) {
    auto b = config.backbone;
    b.vocab_size = 1;  // only known once a vocabulary exists
    try {
        b.validate();
    } catch (const std::exception& e) {
        throw ConfigError(std::string("[backbone] ") + e.what());
    }
    if (config.vocab_max_size < corpus::Vocabulary::special_count + 1) {
        throw ConfigError("backbone.vocab_max_size must exceed the 5 special tokens");
    }
    const auto& p = config.peft;
    const auto d = p.resolved_bottleneck_dim(b.hidden_size);
    if (p.phm_dim == 0 || b.hidden_size % p.phm_dim != 0 || d % p.phm_dim != 0) {
        throw ConfigError("peft.phm_dim must divide backbone.hidden_size and the bottleneck dimension");
    }
    if (p.lora_rank == 0 || p.lora_rank > b.hidden_size) {
        throw ConfigError("peft.lora_rank must lie in [1, hidden_size]");
    }
    const auto& t = config.training;
    if (t.batch_size == 0 || t.fusion_epochs == 0) {
        throw ConfigError("training.batch_size and training.fusion_epochs must be >= 1");
    }
    try {
        fusion::parse_mask_mode(t.mask_mode);
        attnlab::parse_order(config.analysis.order);
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    if (config.output.run_dir.empty()) {
        throw ConfigError("output.run_dir must not be empty");
    }
}

}  // namespace advfusion::cli
