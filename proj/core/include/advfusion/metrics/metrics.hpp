// SPDX-License-Identifier: Apache-2.0
//
// Smooth BLEU-4, ROUGE-L and multiset token precision/recall/F1.

#pragma once

#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace advfusion::metrics {

using Tokens = std::vector<std::string>;

class MetricError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Sentence BLEU-4 in [0, 100]. Unigram precision is unsmoothed; orders 2..4
/// use (matches + 1) / (candidate n-grams + 1). Brevity penalty exp(1 - r/c)
/// when c < r. Empty candidate or reference scores 0.
double smooth_bleu4(const Tokens& candidate, const Tokens& reference);

/// Corpus-level BLEU-4: clipped counts and lengths summed before combining.
double corpus_bleu4(const std::vector<Tokens>& candidates, const std::vector<Tokens>& references,
                    bool smooth = true);

std::size_t lcs_length(const Tokens& a, const Tokens& b);

/// LCS F-measure in [0, 100]; beta weighs recall over precision.
double rouge_l(const Tokens& candidate, const Tokens& reference, double beta = 1.0);

struct PRF {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
};

/// Multiset intersection counts as true positives.
PRF token_prf(const Tokens& predicted, const Tokens& truth);

Tokens whitespace_tokens(std::string_view text);
/// Splits on whitespace, '_' and camelCase boundaries, then lowercases:
/// "getUserName" and "get_user_name" both give {get, user, name}.
Tokens subtokens(std::string_view text);

enum class Metric { bleu4, rouge_l, prf };

std::string_view to_string(Metric m);
/// Comma-separated list of bleu4, rougeL, prf.
std::vector<Metric> parse_metric_list(std::string_view text);

struct MetricReport {
    std::string metric;
    nlohmann::json parameters = nlohmann::json::object();
    std::vector<std::string> ids;
    std::vector<std::string> languages;
    std::vector<double> per_sample;
    double aggregate = 0.0;                   // mean of per_sample
    std::map<std::string, double> per_language;
};

struct ScoredPair {
    std::string id;
    std::string language;
    std::string candidate;
    std::string reference;
};

struct EvalOptions {
    bool corpus_bleu = false;   // aggregate BLEU at corpus level instead of the sentence mean
    double rouge_beta = 1.0;
    bool prf_subtokens = true;  // token_prf over subtokens() rather than whitespace tokens
};

/// One report per metric name: "bleu4", "rougeL", and for prf "precision",
/// "recall", "f1".
std::vector<MetricReport> evaluate(const std::vector<ScoredPair>& pairs, const std::vector<Metric>& metrics,
                                   const EvalOptions& options = {});

/// Summary record per report, then per-sample records, one JSON object per line.
std::string reports_to_jsonl(const std::vector<MetricReport>& reports);
void write_reports(const std::filesystem::path& path, const std::vector<MetricReport>& reports);

}  // namespace advfusion::metrics
