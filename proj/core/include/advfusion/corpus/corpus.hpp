// SPDX-License-Identifier: Apache-2.0
//
// Paired-sample corpora in JSON-lines form, word/punctuation tokenization,
// frequency-ranked vocabularies and the CLM encoding used for training.

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

namespace advfusion::corpus {

class CorpusError : public std::runtime_error {
public:
    CorpusError(std::string message, std::size_t line = 0)
        : std::runtime_error(line ? "line " + std::to_string(line) + ": " + message : message), line_(line) {}
    /// 1-based line of the offending record, 0 when not tied to one.
    std::size_t line() const { return line_; }

private:
    std::size_t line_;
};

struct Sample {
    std::string id;
    std::string language;
    std::string input;
    std::string target;

    bool operator==(const Sample&) const = default;
};

void to_json(nlohmann::json& j, const Sample& s);

struct LoadReport {
    std::map<std::string, std::size_t> per_language;
    std::vector<std::string> warnings;
};

/// Throws CorpusError naming the line for malformed or invalid records and
/// for duplicate ids. Unknown fields are kept out of the sample and reported
/// as warnings.
std::vector<Sample> load_corpus(const std::filesystem::path& path, LoadReport* report = nullptr);
std::vector<Sample> parse_corpus(std::string_view text, LoadReport* report = nullptr);
void save_corpus(const std::filesystem::path& path, const std::vector<Sample>& samples);
std::string serialize_corpus(const std::vector<Sample>& samples);

std::map<std::string, std::size_t> count_by_language(const std::vector<Sample>& samples);
std::vector<Sample> filter_language(const std::vector<Sample>& samples, std::string_view language);
/// Languages in first-appearance order.
std::vector<std::string> languages_of(const std::vector<Sample>& samples);

/// Runs of [A-Za-z0-9_] and non-ASCII bytes form words; every other
/// non-space character is a token of its own.
std::vector<std::string> tokenize(std::string_view text);

class Vocabulary {
public:
    static constexpr std::int64_t pad = 0;
    static constexpr std::int64_t bos = 1;
    static constexpr std::int64_t eos = 2;
    static constexpr std::int64_t sep = 3;
    static constexpr std::int64_t unk = 4;
    static constexpr std::size_t special_count = 5;

    /// Ranks tokens by descending frequency, ties broken lexicographically,
    /// keeping at most max_size entries in total (specials included).
    static Vocabulary build(const std::vector<Sample>& samples, std::size_t max_size);
    static Vocabulary from_tokens(std::vector<std::string> tokens);

    std::size_t size() const { return tokens_.size(); }
    bool contains(std::string_view token) const;
    std::int64_t id(std::string_view token) const;  // unk when absent
    const std::string& token(std::int64_t id) const;
    const std::vector<std::string>& tokens() const { return tokens_; }

    /// OOV words fall back to their characters, then to unk.
    std::vector<std::int64_t> encode_text(std::string_view text, std::size_t* unk_count = nullptr) const;
    std::vector<std::string> decode(const std::vector<std::int64_t>& ids, bool skip_specials = true) const;
    std::string decode_text(const std::vector<std::int64_t>& ids) const;

    nlohmann::json to_json() const { return tokens_; }
    static Vocabulary from_json(const nlohmann::json& j);

    bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, std::int64_t> index_;
};

struct EncodedSample {
    std::string id;
    std::string language;
    std::vector<std::int64_t> ids;
    std::vector<bool> loss_mask;     // true on target-segment and eos positions
    std::size_t prompt_length = 0;   // bos + input + sep
    std::size_t unk_count = 0;

    /// [bos, input..., sep], the decoding prompt.
    std::vector<std::int64_t> prompt() const { return {ids.begin(), ids.begin() + static_cast<long>(prompt_length)}; }
    /// Target ids without eos.
    std::vector<std::int64_t> target_ids() const;
};

/// [bos, input, sep, target, eos]. Sequences longer than max_seq_len lose
/// input tokens first, then target tokens, so the sep boundary survives.
EncodedSample encode(const Sample& sample, const Vocabulary& vocab, std::size_t max_seq_len);
std::vector<EncodedSample> encode_all(const std::vector<Sample>& samples, const Vocabulary& vocab,
                                      std::size_t max_seq_len);

struct Split {
    std::vector<Sample> train;
    std::vector<Sample> valid;
    std::vector<Sample> test;
};

/// Train/valid/test sizes proportional to 5106/615/613, each at least 1
/// for valid and test.
struct SplitSizes {
    std::size_t train = 0;
    std::size_t valid = 0;
    std::size_t test = 0;
};
SplitSizes scaled_split_sizes(std::size_t train);

/// Seeded shuffle, then consecutive train/valid/test slices.
Split split_samples(std::vector<Sample> samples, const SplitSizes& sizes, std::uint64_t seed);

struct SynthSpec {
    std::vector<std::string> languages{"go", "java", "python", "ruby"};
    std::string low_resource = "ruby";  // empty: none
    double overlap = 0.5;
    std::size_t concepts = 24;
    std::size_t train_size = 60;        // per language
    std::size_t low_resource_divisor = 10;
    std::size_t min_length = 2;
    std::size_t max_length = 4;
    std::uint64_t seed = 7;

    void validate() const;
};

/// Concept i of language L surfaces as "w<i>" in inputs and "k<i>" in
/// targets when shared, else as "w<i>_<L>" / "k<i>_<L>". Concept i is shared
/// when its position in a seeded permutation is below overlap * concepts.
/// Targets spell the input concepts in code form, in order.
Split synth_corpus(const SynthSpec& spec);
void write_split(const Split& split, const std::filesystem::path& dir);

}  // namespace advfusion::corpus
