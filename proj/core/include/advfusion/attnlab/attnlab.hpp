// SPDX-License-Identifier: Apache-2.0
//
// Per-layer language contribution analysis over captured fusion weights:
// mean aggregation, min-max normalization within a layer, then shares that
// sum to 100.

#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "advfusion/fusion/fusion.hpp"

namespace advfusion::attnlab {

class AttnlabError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

enum class Order { aggregate_then_normalize, normalize_then_aggregate };

std::string_view to_string(Order order);
Order parse_order(std::string_view text);

struct LayerMeans {
    std::size_t layer = 0;
    std::vector<std::string> tags;
    std::vector<double> mean;
    std::size_t sample_count = 0;
    std::size_t token_count = 0;
};

/// Flat mean over every token of every sample, per (layer, adapter).
std::vector<LayerMeans> aggregate_scores(const std::vector<fusion::SampleCapture>& captures);

struct LayerEntry {
    std::size_t layer = 0;
    std::vector<std::string> tags;
    std::vector<double> raw;
    std::vector<double> normalized;
    std::vector<double> percent;
    bool degenerate = false;  // all raw equal: equal shares substituted
    std::size_t sample_count = 0;
    std::size_t token_count = 0;
};

/// Min-max across the layer's adapters, then normalized / sum * 100. An
/// all-equal layer gets 100 / N each and is flagged degenerate.
LayerEntry contribution_percentages(const LayerMeans& means);

struct AttentionTrace {
    Order order = Order::aggregate_then_normalize;
    std::vector<LayerEntry> layers;

    /// Tag with the largest share in each layer (first on ties).
    std::vector<std::string> top_contributors() const;
};

AttentionTrace build_trace(const std::vector<fusion::SampleCapture>& captures,
                           Order order = Order::aggregate_then_normalize);

struct Heatmap {
    std::optional<std::size_t> layer;  // nullopt: averaged over layers
    std::vector<std::string> tags;
    std::size_t tokens = 0;
    std::vector<double> values;  // tokens x tags, raw fusion weights

    double at(std::size_t token, std::size_t tag) const { return values[token * tags.size() + tag]; }
};

/// Exactly one sample's capture.
Heatmap token_heatmap(const std::vector<fusion::SampleCapture>& captures, std::optional<std::size_t> layer);

/// Header "layer,tag,raw,normalized,percent"; rows by layer, then tag;
/// values printed with %.12g.
std::string trace_csv(const AttentionTrace& trace);
void export_trace(const AttentionTrace& trace, const std::filesystem::path& path);

struct CsvRow {
    std::size_t layer = 0;
    std::string tag;
    double raw = 0.0;
    double normalized = 0.0;
    double percent = 0.0;
};
std::vector<CsvRow> parse_trace_csv(const std::string& text);

}  // namespace advfusion::attnlab
