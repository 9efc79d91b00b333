// SPDX-License-Identifier: Apache-2.0

#include "advfusion/metrics/metrics.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>

namespace advfusion::metrics {

namespace {

constexpr int kMaxOrder = 4;

using NgramCounts = std::map<std::vector<std::string>, std::size_t>;

NgramCounts ngrams(const Tokens& t, std::size_t n) {
    NgramCounts out;
    for (std::size_t i = 0; i + n <= t.size(); ++i) {
        ++out[Tokens(t.begin() + static_cast<long>(i), t.begin() + static_cast<long>(i + n))];
    }
    return out;
}

struct NgramStats {
    std::size_t matches[kMaxOrder] = {};
    std::size_t totals[kMaxOrder] = {};
    std::size_t cand_len = 0;
    std::size_t ref_len = 0;

    void add(const Tokens& cand, const Tokens& ref) {
        cand_len += cand.size();
        ref_len += ref.size();
        for (int n = 1; n <= kMaxOrder; ++n) {
            const auto c = ngrams(cand, n);
            const auto r = ngrams(ref, n);
            for (const auto& [g, count] : c) {
                auto it = r.find(g);
                if (it != r.end()) {
                    matches[n - 1] += std::min(count, it->second);
                }
                totals[n - 1] += count;
            }
        }
    }

    double score(bool smooth) const {
        if (cand_len == 0 || ref_len == 0) {
            return 0.0;
        }
        double log_sum = 0.0;
        for (int n = 0; n < kMaxOrder; ++n) {
            double p;
            if (n > 0 && smooth) {
                p = (static_cast<double>(matches[n]) + 1.0) / (static_cast<double>(totals[n]) + 1.0);
            } else {
                p = totals[n] ? static_cast<double>(matches[n]) / static_cast<double>(totals[n]) : 0.0;
            }
            if (p == 0.0) {
                return 0.0;
            }
            log_sum += std::log(p);
        }
        double bp = 1.0;
        if (cand_len < ref_len) {
            bp = std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(cand_len));
        }
        return 100.0 * bp * std::exp(log_sum / kMaxOrder);
    }
};

double mean(const std::vector<double>& v) {
    if (v.empty()) {
        return 0.0;
    }
    double s = 0.0;
    for (double x : v) {
        s += x;
    }
    return s / static_cast<double>(v.size());
}

}  // namespace

double smooth_bleu4(const Tokens& candidate, const Tokens& reference) {
    NgramStats s;
    s.add(candidate, reference);
    return s.score(true);
}

double corpus_bleu4(const std::vector<Tokens>& candidates, const std::vector<Tokens>& references, bool smooth) {
    if (candidates.size() != references.size()) {
        throw MetricError("corpus_bleu4: " + std::to_string(candidates.size()) + " candidates vs " +
                          std::to_string(references.size()) + " references");
    }
    NgramStats s;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        s.add(candidates[i], references[i]);
    }
    return s.score(smooth);
}

std::size_t lcs_length(const Tokens& a, const Tokens& b) {
    std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
    for (std::size_t i = 1; i <= a.size(); ++i) {
        for (std::size_t j = 1; j <= b.size(); ++j) {
            cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
        }
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

double rouge_l(const Tokens& candidate, const Tokens& reference, double beta) {
    if (candidate.empty() || reference.empty()) {
        return 0.0;
    }
    const double lcs = static_cast<double>(lcs_length(candidate, reference));
    if (lcs == 0.0) {
        return 0.0;
    }
    const double p = lcs / static_cast<double>(candidate.size());
    const double r = lcs / static_cast<double>(reference.size());
    const double b2 = beta * beta;
    return 100.0 * (1.0 + b2) * p * r / (r + b2 * p);
}

PRF token_prf(const Tokens& predicted, const Tokens& truth) {
    std::map<std::string, std::size_t> pc, tc;
    for (const auto& t : predicted) {
        ++pc[t];
    }
    for (const auto& t : truth) {
        ++tc[t];
    }
    std::size_t tp = 0;
    for (const auto& [tok, n] : pc) {
        auto it = tc.find(tok);
        if (it != tc.end()) {
            tp += std::min(n, it->second);
        }
    }
    PRF out;
    out.precision = predicted.empty() ? 0.0 : static_cast<double>(tp) / static_cast<double>(predicted.size());
    out.recall = truth.empty() ? 0.0 : static_cast<double>(tp) / static_cast<double>(truth.size());
    const double denom = out.precision + out.recall;
    out.f1 = denom == 0.0 ? 0.0 : 2.0 * out.precision * out.recall / denom;
    return out;
}

Tokens whitespace_tokens(std::string_view text) {
    Tokens out;
    std::size_t i = 0;
    while (i < text.size()) {
        while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) {
            ++i;
        }
        std::size_t j = i;
        while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) {
            ++j;
        }
        if (j > i) {
            out.emplace_back(text.substr(i, j - i));
        }
        i = j;
    }
    return out;
}

Tokens subtokens(std::string_view text) {
    Tokens out;
    std::string cur;
    auto flush = [&] {
        if (!cur.empty()) {
            out.push_back(cur);
            cur.clear();
        }
    };
    for (std::size_t i = 0; i < text.size(); ++i) {
        const auto c = static_cast<unsigned char>(text[i]);
        if (std::isspace(c) || c == '_') {
            flush();
            continue;
        }
        if (std::isupper(c) && !cur.empty()) {
            const auto prev = static_cast<unsigned char>(text[i - 1]);
            const bool next_lower = i + 1 < text.size() && std::islower(static_cast<unsigned char>(text[i + 1]));
            // "userName" -> user|Name; "HTTPServer" -> HTTP|Server
            if (std::islower(prev) || std::isdigit(prev) || (std::isupper(prev) && next_lower)) {
                flush();
            }
        }
        cur += static_cast<char>(std::tolower(c));
    }
    flush();
    return out;
}

std::string_view to_string(Metric m) {
    switch (m) {
        case Metric::bleu4: return "bleu4";
        case Metric::rouge_l: return "rougeL";
        case Metric::prf: return "prf";
    }
    return "unknown";
}

std::vector<Metric> parse_metric_list(std::string_view text) {
    std::vector<Metric> out;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        const auto end = std::min(text.find(',', pos), text.size());
        const auto name = text.substr(pos, end - pos);
        Metric m;
        if (name == "bleu4") {
            m = Metric::bleu4;
        } else if (name == "rougeL") {
            m = Metric::rouge_l;
        } else if (name == "prf") {
            m = Metric::prf;
        } else {
            throw MetricError("unknown metric '" + std::string(name) + "' (expected bleu4, rougeL, prf)");
        }
        if (std::find(out.begin(), out.end(), m) == out.end()) {
            out.push_back(m);
        }
        pos = end + 1;
    }
    return out;
}

std::vector<MetricReport> evaluate(const std::vector<ScoredPair>& pairs, const std::vector<Metric>& metrics,
                                   const EvalOptions& options) {
    std::vector<MetricReport> out;
    auto base = [&](std::string name, nlohmann::json params) {
        MetricReport r;
        r.metric = std::move(name);
        r.parameters = std::move(params);
        for (const auto& p : pairs) {
            r.ids.push_back(p.id);
            r.languages.push_back(p.language);
        }
        return r;
    };
    auto finish = [&](MetricReport& r) {
        r.aggregate = mean(r.per_sample);
        std::map<std::string, std::vector<double>> by_lang;
        for (std::size_t i = 0; i < r.per_sample.size(); ++i) {
            by_lang[r.languages[i]].push_back(r.per_sample[i]);
        }
        for (const auto& [lang, v] : by_lang) {
            r.per_language[lang] = mean(v);
        }
    };
    for (auto m : metrics) {
        if (m == Metric::bleu4) {
            auto r = base("bleu4", {{"smoothing", "add-one n>=2"},
                                    {"aggregation", options.corpus_bleu ? "corpus" : "sentence-mean"}});
            std::vector<Tokens> cands, refs;
            for (const auto& p : pairs) {
                cands.push_back(whitespace_tokens(p.candidate));
                refs.push_back(whitespace_tokens(p.reference));
                r.per_sample.push_back(smooth_bleu4(cands.back(), refs.back()));
            }
            finish(r);
            if (options.corpus_bleu) {
                r.aggregate = corpus_bleu4(cands, refs);
                std::map<std::string, std::pair<std::vector<Tokens>, std::vector<Tokens>>> by_lang;
                for (std::size_t i = 0; i < pairs.size(); ++i) {
                    by_lang[pairs[i].language].first.push_back(cands[i]);
                    by_lang[pairs[i].language].second.push_back(refs[i]);
                }
                for (const auto& [lang, cr] : by_lang) {
                    r.per_language[lang] = corpus_bleu4(cr.first, cr.second);
                }
            }
            out.push_back(std::move(r));
        } else if (m == Metric::rouge_l) {
            auto r = base("rougeL", {{"beta", options.rouge_beta}});
            for (const auto& p : pairs) {
                r.per_sample.push_back(
                    rouge_l(whitespace_tokens(p.candidate), whitespace_tokens(p.reference), options.rouge_beta));
            }
            finish(r);
            out.push_back(std::move(r));
        } else {
            const nlohmann::json params{{"tokens", options.prf_subtokens ? "subtokens" : "whitespace"},
                                        {"matching", "multiset"}};
            auto rp = base("precision", params), rr = base("recall", params), rf = base("f1", params);
            for (const auto& p : pairs) {
                const auto split = options.prf_subtokens ? subtokens : whitespace_tokens;
                const PRF s = token_prf(split(p.candidate), split(p.reference));
                rp.per_sample.push_back(s.precision);
                rr.per_sample.push_back(s.recall);
                rf.per_sample.push_back(s.f1);
            }
            for (auto* r : {&rp, &rr, &rf}) {
                finish(*r);
                out.push_back(std::move(*r));
            }
        }
    }
    return out;
}

std::string reports_to_jsonl(const std::vector<MetricReport>& reports) {
    std::string out;
    for (const auto& r : reports) {
        nlohmann::json summary{{"type", "summary"},
                               {"metric", r.metric},
                               {"parameters", r.parameters},
                               {"count", r.per_sample.size()},
                               {"aggregate", r.aggregate},
                               {"per_language", r.per_language}};
        out += summary.dump() + "\n";
    }
    for (const auto& r : reports) {
        for (std::size_t i = 0; i < r.per_sample.size(); ++i) {
            nlohmann::json rec{{"type", "sample"},
                               {"metric", r.metric},
                               {"id", r.ids[i]},
                               {"language", r.languages[i]},
                               {"score", r.per_sample[i]}};
            out += rec.dump() + "\n";
        }
    }
    return out;
}

void write_reports(const std::filesystem::path& path, const std::vector<MetricReport>& reports) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw std::runtime_error("cannot write metric report '" + path.string() + "'");
    }
    out << reports_to_jsonl(reports);
}

}  // namespace advfusion::metrics
