// SPDX-License-Identifier: Apache-2.0

#include "advfusion/attnlab/attnlab.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

namespace advfusion::attnlab {

namespace {

void check_consistent(const std::vector<fusion::SampleCapture>& captures) {
    if (captures.empty()) {
        throw AttnlabError("no attention captures to analyze");
    }
    const auto& ref = captures.front();
    if (ref.layers.empty()) {
        throw AttnlabError("capture of sample '" + ref.sample_id + "' holds no layers");
    }
    for (const auto& c : captures) {
        if (c.layers.size() != ref.layers.size()) {
            throw AttnlabError("sample '" + c.sample_id + "' has " + std::to_string(c.layers.size()) +
                               " layers, expected " + std::to_string(ref.layers.size()));
        }
        for (std::size_t l = 0; l < c.layers.size(); ++l) {
            if (c.layers[l].tags != ref.layers[0].tags || c.layers[l].layer != ref.layers[l].layer) {
                throw AttnlabError("sample '" + c.sample_id + "' layer " + std::to_string(l) +
                                   " has a different adapter set or layer order");
            }
        }
    }
}

/// min-max normalization; returns false when every value is equal.
bool min_max(const std::vector<double>& v, std::vector<double>& out) {
    const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
    out.assign(v.size(), 0.0);
    if (*hi == *lo) {
        return false;
    }
    for (std::size_t i = 0; i < v.size(); ++i) {
        out[i] = (v[i] - *lo) / (*hi - *lo);
    }
    return true;
}

}  // namespace

std::string_view to_string(Order order) {
    return order == Order::aggregate_then_normalize ? "aggregate_then_normalize" : "normalize_then_aggregate";
}

Order parse_order(std::string_view text) {
    if (text == "aggregate_then_normalize") {
        return Order::aggregate_then_normalize;
    }
    if (text == "normalize_then_aggregate") {
        return Order::normalize_then_aggregate;
    }
    throw AttnlabError("unknown order '" + std::string(text) +
                       "' (expected aggregate_then_normalize|normalize_then_aggregate)");
}

std::vector<LayerMeans> aggregate_scores(const std::vector<fusion::SampleCapture>& captures) {
    check_consistent(captures);
    const auto& ref = captures.front();
    std::vector<LayerMeans> out;
    for (std::size_t l = 0; l < ref.layers.size(); ++l) {
        LayerMeans m;
        m.layer = ref.layers[l].layer;
        m.tags = ref.layers[l].tags;
        m.mean.assign(m.tags.size(), 0.0);
        m.sample_count = captures.size();
        for (const auto& c : captures) {
            const auto& lc = c.layers[l];
            for (std::size_t t = 0; t < lc.tokens; ++t) {
                for (std::size_t a = 0; a < m.tags.size(); ++a) {
                    m.mean[a] += lc.at(t, a);
                }
            }
            m.token_count += lc.tokens;
        }
        if (m.token_count == 0) {
            throw AttnlabError("captures for layer " + std::to_string(m.layer) + " hold no tokens");
        }
        for (auto& x : m.mean) {
            x /= static_cast<double>(m.token_count);
        }
        out.push_back(std::move(m));
    }
    return out;
}

LayerEntry contribution_percentages(const LayerMeans& means) {
    if (means.tags.empty() || means.tags.size() != means.mean.size()) {
        throw AttnlabError("contribution_percentages needs one mean per adapter and at least one adapter");
    }
    LayerEntry e;
    e.layer = means.layer;
    e.tags = means.tags;
    e.raw = means.mean;
    e.sample_count = means.sample_count;
    e.token_count = means.token_count;
    const std::size_t n = e.tags.size();
    e.degenerate = !min_max(e.raw, e.normalized);
    if (e.degenerate) {
        e.percent.assign(n, 100.0 / static_cast<double>(n));
        return e;
    }
    const double total = std::accumulate(e.normalized.begin(), e.normalized.end(), 0.0);
    e.percent.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        e.percent[i] = 100.0 * e.normalized[i] / total;
    }
    return e;
}

std::vector<std::string> AttentionTrace::top_contributors() const {
    std::vector<std::string> out;
    for (const auto& l : layers) {
        const auto it = std::max_element(l.percent.begin(), l.percent.end());
        out.push_back(l.tags[static_cast<std::size_t>(it - l.percent.begin())]);
    }
    return out;
}

AttentionTrace build_trace(const std::vector<fusion::SampleCapture>& captures, Order order) {
    AttentionTrace trace;
    trace.order = order;
    const auto means = aggregate_scores(captures);
    if (order == Order::aggregate_then_normalize) {
        for (const auto& m : means) {
            trace.layers.push_back(contribution_percentages(m));
        }
        return trace;
    }
    for (std::size_t l = 0; l < means.size(); ++l) {
        LayerMeans normalized = means[l];
        std::fill(normalized.mean.begin(), normalized.mean.end(), 0.0);
        for (const auto& c : captures) {
            const auto per_sample = aggregate_scores({c});
            std::vector<double> norm;
            min_max(per_sample[l].mean, norm);
            for (std::size_t a = 0; a < norm.size(); ++a) {
                normalized.mean[a] += norm[a] / static_cast<double>(captures.size());
            }
        }
        LayerEntry e = contribution_percentages(normalized);
        e.raw = means[l].mean;
        trace.layers.push_back(std::move(e));
    }
    return trace;
}

Heatmap token_heatmap(const std::vector<fusion::SampleCapture>& captures, std::optional<std::size_t> layer) {
    if (captures.size() != 1) {
        throw AttnlabError("token_heatmap takes exactly one sample's capture, got " + std::to_string(captures.size()));
    }
    check_consistent(captures);
    const auto& c = captures.front();
    Heatmap h;
    h.layer = layer;
    h.tags = c.layers.front().tags;
    h.tokens = c.layers.front().tokens;
    h.values.assign(h.tokens * h.tags.size(), 0.0);
    if (layer) {
        auto it = std::find_if(c.layers.begin(), c.layers.end(), [&](const auto& lc) { return lc.layer == *layer; });
        if (it == c.layers.end()) {
            throw AttnlabError("no capture for layer " + std::to_string(*layer));
        }
        h.values = it->weights;
        return h;
    }
    for (const auto& lc : c.layers) {
        for (std::size_t i = 0; i < h.values.size(); ++i) {
            h.values[i] += lc.weights[i];
        }
    }
    for (auto& v : h.values) {
        v /= static_cast<double>(c.layers.size());
    }
    return h;
}

std::string trace_csv(const AttentionTrace& trace) {
    std::vector<const LayerEntry*> layers;
    for (const auto& l : trace.layers) {
        layers.push_back(&l);
    }
    std::stable_sort(layers.begin(), layers.end(), [](const auto* a, const auto* b) { return a->layer < b->layer; });
    std::string out = "layer,tag,raw,normalized,percent\n";
    char buf[128];
    for (const auto* l : layers) {
        std::vector<std::size_t> idx(l->tags.size());
        std::iota(idx.begin(), idx.end(), 0);
        std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return l->tags[a] < l->tags[b]; });
        for (auto i : idx) {
            std::snprintf(buf, sizeof(buf), ",%.12g,%.12g,%.12g\n", l->raw[i], l->normalized[i], l->percent[i]);
            out += std::to_string(l->layer) + "," + l->tags[i] + buf;
        }
    }
    return out;
}

void export_trace(const AttentionTrace& trace, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw std::runtime_error("cannot write attention trace '" + path.string() + "'");
    }
    out << trace_csv(trace);
    if (!out) {
        throw std::runtime_error("failed writing attention trace '" + path.string() + "'");
    }
}

std::vector<CsvRow> parse_trace_csv(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line) || line != "layer,tag,raw,normalized,percent") {
        throw AttnlabError("attention trace CSV lacks the expected header");
    }
    std::vector<CsvRow> rows;
    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        std::vector<std::string> f;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) {
            f.push_back(cell);
        }
        if (f.size() != 5) {
            throw AttnlabError("attention trace CSV row has " + std::to_string(f.size()) + " fields: " + line);
        }
        rows.push_back({std::stoul(f[0]), f[1], std::stod(f[2]), std::stod(f[3]), std::stod(f[4])});
    }
    return rows;
}

}  // namespace advfusion::attnlab
