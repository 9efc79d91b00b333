// SPDX-License-Identifier: Apache-2.0

#include "advfusion/corpus/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "advfusion/numcore/rng.hpp"

namespace advfusion::corpus {

namespace {

const std::set<std::string> kKnownFields{"id", "language", "input", "target"};

std::string trim(std::string_view s) {
    const auto first = s.find_first_not_of(" \t\r\n");
    if (first == std::string_view::npos) {
        return {};
    }
    const auto last = s.find_last_not_of(" \t\r\n");
    return std::string(s.substr(first, last - first + 1));
}

bool is_word_char(unsigned char c) { return std::isalnum(c) || c == '_' || c >= 0x80; }

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw CorpusError("cannot open corpus file '" + path.string() + "'");
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw CorpusError("cannot write corpus file '" + path.string() + "'");
    }
    out << text;
    if (!out) {
        throw CorpusError("failed writing corpus file '" + path.string() + "'");
    }
}

}  // namespace

void to_json(nlohmann::json& j, const Sample& s) {
    j = nlohmann::json{{"id", s.id}, {"language", s.language}, {"input", s.input}, {"target", s.target}};
}

std::vector<Sample> parse_corpus(std::string_view text, LoadReport* report) {
    std::vector<Sample> out;
    std::set<std::string> ids;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        const auto end = std::min(text.find('\n', pos), text.size());
        const std::string line = trim(text.substr(pos, end - pos));
        ++line_no;
        pos = end + 1;
        if (line.empty()) {
            if (end == text.size()) {
                break;
            }
            continue;
        }
        nlohmann::json rec;
        try {
            rec = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw CorpusError(std::string("malformed JSON: ") + e.what(), line_no);
        }
        if (!rec.is_object()) {
            throw CorpusError("record is not a JSON object", line_no);
        }
        Sample s;
        for (const auto* field : {"id", "language", "input", "target"}) {
            auto it = rec.find(field);
            if (it == rec.end()) {
                throw CorpusError(std::string("missing field '") + field + "'", line_no);
            }
            if (!it->is_string()) {
                throw CorpusError(std::string("field '") + field + "' is not a string", line_no);
            }
        }
        s.id = rec["id"].get<std::string>();
        s.language = rec["language"].get<std::string>();
        s.input = rec["input"].get<std::string>();
        s.target = rec["target"].get<std::string>();
        if (trim(s.id).empty()) {
            throw CorpusError("empty id", line_no);
        }
        if (trim(s.language).empty()) {
            throw CorpusError("empty language tag", line_no);
        }
        if (trim(s.input).empty()) {
            throw CorpusError("empty input after trimming", line_no);
        }
        if (trim(s.target).empty()) {
            throw CorpusError("empty target after trimming", line_no);
        }
        if (!ids.insert(s.id).second) {
            throw CorpusError("duplicate id '" + s.id + "'", line_no);
        }
        if (report) {
            for (const auto& [key, _] : rec.items()) {
                if (!kKnownFields.count(key)) {
                    report->warnings.push_back("line " + std::to_string(line_no) + ": unknown field '" + key +
                                               "' ignored");
                }
            }
            ++report->per_language[s.language];
        }
        out.push_back(std::move(s));
        if (end == text.size()) {
            break;
        }
    }
    return out;
}

std::vector<Sample> load_corpus(const std::filesystem::path& path, LoadReport* report) {
    return parse_corpus(read_file(path), report);
}

std::string serialize_corpus(const std::vector<Sample>& samples) {
    std::string out;
    for (const auto& s : samples) {
        out += nlohmann::json(s).dump();
        out += '\n';
    }
    return out;
}

void save_corpus(const std::filesystem::path& path, const std::vector<Sample>& samples) {
    write_file(path, serialize_corpus(samples));
}

std::map<std::string, std::size_t> count_by_language(const std::vector<Sample>& samples) {
    std::map<std::string, std::size_t> out;
    for (const auto& s : samples) {
        ++out[s.language];
    }
    return out;
}

std::vector<Sample> filter_language(const std::vector<Sample>& samples, std::string_view language) {
    std::vector<Sample> out;
    std::copy_if(samples.begin(), samples.end(), std::back_inserter(out),
                 [&](const Sample& s) { return s.language == language; });
    return out;
}

std::vector<std::string> languages_of(const std::vector<Sample>& samples) {
    std::vector<std::string> out;
    for (const auto& s : samples) {
        if (std::find(out.begin(), out.end(), s.language) == out.end()) {
            out.push_back(s.language);
        }
    }
    return out;
}

std::vector<std::string> tokenize(std::string_view text) {
    std::vector<std::string> out;
    std::size_t i = 0;
    while (i < text.size()) {
        const auto c = static_cast<unsigned char>(text[i]);
        if (std::isspace(c)) {
            ++i;
        } else if (is_word_char(c)) {
            std::size_t j = i;
            while (j < text.size() && is_word_char(static_cast<unsigned char>(text[j]))) {
                ++j;
            }
            out.emplace_back(text.substr(i, j - i));
            i = j;
        } else {
            out.emplace_back(1, text[i]);
            ++i;
        }
    }
    return out;
}

Vocabulary Vocabulary::from_tokens(std::vector<std::string> tokens) {
    static const std::vector<std::string> specials{"<pad>", "<bos>", "<eos>", "<sep>", "<unk>"};
    if (tokens.size() < special_count || !std::equal(specials.begin(), specials.end(), tokens.begin())) {
        throw CorpusError("vocabulary must start with the five special tokens");
    }
    Vocabulary v;
    v.tokens_ = std::move(tokens);
    for (std::size_t i = 0; i < v.tokens_.size(); ++i) {
        if (!v.index_.emplace(v.tokens_[i], static_cast<std::int64_t>(i)).second) {
            throw CorpusError("duplicate vocabulary token '" + v.tokens_[i] + "'");
        }
    }
    return v;
}

Vocabulary Vocabulary::build(const std::vector<Sample>& samples, std::size_t max_size) {
    if (max_size < special_count) {
        throw CorpusError("vocabulary max_size " + std::to_string(max_size) + " cannot hold the " +
                          std::to_string(special_count) + " special tokens");
    }
    if (samples.empty()) {
        throw CorpusError("cannot build a vocabulary from an empty corpus");
    }
    std::map<std::string, std::size_t> freq;
    for (const auto& s : samples) {
        for (const auto* text : {&s.input, &s.target}) {
            for (auto& t : tokenize(*text)) {
                ++freq[t];
            }
        }
    }
    std::vector<std::pair<std::string, std::size_t>> ranked(freq.begin(), freq.end());
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });
    std::vector<std::string> tokens{"<pad>", "<bos>", "<eos>", "<sep>", "<unk>"};
    for (const auto& [tok, _] : ranked) {
        if (tokens.size() >= max_size) {
            break;
        }
        tokens.push_back(tok);
    }
    return from_tokens(std::move(tokens));
}

Vocabulary Vocabulary::from_json(const nlohmann::json& j) {
    if (!j.is_array()) {
        throw CorpusError("vocabulary JSON must be an array of tokens");
    }
    return from_tokens(j.get<std::vector<std::string>>());
}

bool Vocabulary::contains(std::string_view token) const { return index_.count(std::string(token)) > 0; }

std::int64_t Vocabulary::id(std::string_view token) const {
    auto it = index_.find(std::string(token));
    return it == index_.end() ? unk : it->second;
}

const std::string& Vocabulary::token(std::int64_t id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
        throw CorpusError("token id " + std::to_string(id) + " outside vocabulary of size " +
                          std::to_string(tokens_.size()));
    }
    return tokens_[static_cast<std::size_t>(id)];
}

std::vector<std::int64_t> Vocabulary::encode_text(std::string_view text, std::size_t* unk_count) const {
    std::vector<std::int64_t> out;
    for (const auto& t : tokenize(text)) {
        auto it = index_.find(t);
        if (it != index_.end()) {
            out.push_back(it->second);
            continue;
        }
        for (char c : t) {
            auto ct = index_.find(std::string(1, c));
            if (ct != index_.end()) {
                out.push_back(ct->second);
            } else {
                out.push_back(unk);
                if (unk_count) {
                    ++*unk_count;
                }
            }
        }
    }
    return out;
}

std::vector<std::string> Vocabulary::decode(const std::vector<std::int64_t>& ids, bool skip_specials) const {
    std::vector<std::string> out;
    for (auto id : ids) {
        if (skip_specials && id >= 0 && static_cast<std::size_t>(id) < special_count && id != unk) {
            continue;
        }
        out.push_back(token(id));
    }
    return out;
}

std::string Vocabulary::decode_text(const std::vector<std::int64_t>& ids) const {
    std::string out;
    for (const auto& t : decode(ids)) {
        if (!out.empty()) {
            out += ' ';
        }
        out += t;
    }
    return out;
}

std::vector<std::int64_t> EncodedSample::target_ids() const {
    std::vector<std::int64_t> out;
    for (std::size_t i = prompt_length; i < ids.size(); ++i) {
        if (ids[i] == Vocabulary::eos) {
            break;
        }
        out.push_back(ids[i]);
    }
    return out;
}

EncodedSample encode(const Sample& sample, const Vocabulary& vocab, std::size_t max_seq_len) {
    if (max_seq_len < 4) {
        throw CorpusError("max_seq_len must leave room for bos, sep, one target token and eos");
    }
    EncodedSample e;
    e.id = sample.id;
    e.language = sample.language;
    auto input = vocab.encode_text(sample.input, &e.unk_count);
    auto target = vocab.encode_text(sample.target, &e.unk_count);
    const std::size_t fixed = 3;  // bos, sep, eos
    while (input.size() + target.size() + fixed > max_seq_len && !input.empty()) {
        input.pop_back();
    }
    while (input.size() + target.size() + fixed > max_seq_len && target.size() > 1) {
        target.pop_back();
    }
    e.ids.push_back(Vocabulary::bos);
    e.ids.insert(e.ids.end(), input.begin(), input.end());
    e.ids.push_back(Vocabulary::sep);
    e.prompt_length = e.ids.size();
    e.ids.insert(e.ids.end(), target.begin(), target.end());
    e.ids.push_back(Vocabulary::eos);
    e.loss_mask.assign(e.ids.size(), false);
    std::fill(e.loss_mask.begin() + static_cast<long>(e.prompt_length), e.loss_mask.end(), true);
    return e;
}

std::vector<EncodedSample> encode_all(const std::vector<Sample>& samples, const Vocabulary& vocab,
                                      std::size_t max_seq_len) {
    std::vector<EncodedSample> out;
    out.reserve(samples.size());
    for (const auto& s : samples) {
        out.push_back(encode(s, vocab, max_seq_len));
    }
    return out;
}

SplitSizes scaled_split_sizes(std::size_t train) {
    constexpr double kTrain = 5106.0, kValid = 615.0, kTest = 613.0;
    SplitSizes s;
    s.train = train;
    s.valid = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(train * kValid / kTrain)));
    s.test = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(train * kTest / kTrain)));
    return s;
}

Split split_samples(std::vector<Sample> samples, const SplitSizes& sizes, std::uint64_t seed) {
    if (sizes.train + sizes.valid + sizes.test > samples.size()) {
        throw CorpusError("split sizes exceed the " + std::to_string(samples.size()) + " available samples");
    }
    numcore::Rng rng(seed);
    rng.shuffle(samples);
    Split out;
    auto it = samples.begin();
    out.train.assign(it, it + static_cast<long>(sizes.train));
    it += static_cast<long>(sizes.train);
    out.valid.assign(it, it + static_cast<long>(sizes.valid));
    it += static_cast<long>(sizes.valid);
    out.test.assign(it, it + static_cast<long>(sizes.test));
    return out;
}

void SynthSpec::validate() const {
    if (languages.empty()) {
        throw CorpusError("synth: at least one language is required");
    }
    if (std::set<std::string>(languages.begin(), languages.end()).size() != languages.size()) {
        throw CorpusError("synth: duplicate language tags");
    }
    if (!(overlap >= 0.0 && overlap <= 1.0)) {
        throw CorpusError("synth: overlap must lie in [0, 1]");
    }
    if (concepts < 1 || train_size < 1 || low_resource_divisor < 1) {
        throw CorpusError("synth: concepts, train_size and low_resource_divisor must be >= 1");
    }
    if (min_length < 1 || max_length < min_length) {
        throw CorpusError("synth: need 1 <= min_length <= max_length");
    }
    if (!low_resource.empty() && std::find(languages.begin(), languages.end(), low_resource) == languages.end()) {
        throw CorpusError("synth: low-resource language '" + low_resource + "' is not among the languages");
    }
}

Split synth_corpus(const SynthSpec& spec) {
    spec.validate();
    numcore::Rng perm_rng(numcore::Rng::derive(spec.seed, 0));
    std::vector<std::size_t> position(spec.concepts);
    {
        std::vector<std::size_t> order(spec.concepts);
        for (std::size_t i = 0; i < spec.concepts; ++i) {
            order[i] = i;
        }
        perm_rng.shuffle(order);
        for (std::size_t p = 0; p < order.size(); ++p) {
            position[order[p]] = p;
        }
    }
    const double shared_cut = spec.overlap * static_cast<double>(spec.concepts);
    auto surface = [&](char prefix, std::size_t index, const std::string& lang) {
        std::string s = prefix + std::to_string(index);
        if (static_cast<double>(position[index]) >= shared_cut) {
            s += "_" + lang;
        }
        return s;
    };

    Split out;
    for (std::size_t li = 0; li < spec.languages.size(); ++li) {
        const auto& lang = spec.languages[li];
        std::size_t train = spec.train_size;
        if (lang == spec.low_resource) {
            train = std::max<std::size_t>(1, train / spec.low_resource_divisor);
        }
        const SplitSizes sizes = scaled_split_sizes(train);
        numcore::Rng rng(numcore::Rng::derive(spec.seed, 1 + li));
        auto make = [&](const std::string& split, std::size_t index) {
            const std::size_t len = spec.min_length + rng.below(spec.max_length - spec.min_length + 1);
            Sample s;
            s.id = lang + "-" + split + "-" + std::to_string(index);
            s.language = lang;
            for (std::size_t k = 0; k < len; ++k) {
                const std::size_t c = rng.below(spec.concepts);
                if (k) {
                    s.input += ' ';
                    s.target += ' ';
                }
                s.input += surface('w', c, lang);
                s.target += surface('k', c, lang);
            }
            return s;
        };
        for (std::size_t i = 0; i < sizes.train; ++i) {
            out.train.push_back(make("train", i));
        }
        for (std::size_t i = 0; i < sizes.valid; ++i) {
            out.valid.push_back(make("valid", i));
        }
        for (std::size_t i = 0; i < sizes.test; ++i) {
            out.test.push_back(make("test", i));
        }
    }
    return out;
}

void write_split(const Split& split, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    save_corpus(dir / "train.jsonl", split.train);
    save_corpus(dir / "valid.jsonl", split.valid);
    save_corpus(dir / "test.jsonl", split.test);
}

}  // namespace advfusion::corpus
