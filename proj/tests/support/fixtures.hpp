// SPDX-License-Identifier: Apache-2.0
//
// Small models and corpora shared by the test binaries.

#pragma once

#include <string>
#include <vector>

#include "advfusion/backbone/backbone.hpp"
#include "advfusion/corpus/corpus.hpp"
#include "advfusion/fusion/fusion.hpp"
#include "advfusion/numcore/rng.hpp"
#include "advfusion/peft/adapter.hpp"

namespace advfusion::fixtures {

inline backbone::BackboneConfig tiny_config(std::size_t vocab) {
    backbone::BackboneConfig c;
    c.num_layers = 2;
    c.hidden_size = 8;
    c.num_heads = 2;
    c.ffn_size = 16;
    c.vocab_size = vocab;
    c.max_seq_len = 32;
    return c;
}

inline peft::PeftConfig tiny_peft() {
    peft::PeftConfig p;
    p.bottleneck_dim = 4;
    p.phm_dim = 2;
    p.lora_rank = 2;
    p.lora_alpha = 2.0;
    return p;
}

/// Overwrites every tensor with N(0, stddev) draws.
inline void scramble(std::vector<numcore::NamedTensor> tensors, numcore::Rng& rng, double stddev) {
    for (auto& [_, t] : tensors) {
        for (auto& x : t.mutable_data()) {
            x = rng.normal(0.0, stddev);
        }
    }
}

/// Adapters with every tensor randomized, so their outputs differ.
inline std::vector<peft::AdapterSet> scrambled_adapters(peft::AdapterKind kind, const std::vector<std::string>& tags,
                                                        const backbone::BackboneConfig& cfg,
                                                        const peft::PeftConfig& peft, numcore::Rng& rng,
                                                        double stddev = 0.3) {
    std::vector<peft::AdapterSet> out;
    for (const auto& tag : tags) {
        auto a = peft::AdapterSet::create(kind, tag, cfg, peft, rng);
        scramble(a.parameters(), rng, stddev);
        a.set_trainable(false);
        out.push_back(std::move(a));
    }
    return out;
}

inline corpus::SynthSpec small_synth() {
    corpus::SynthSpec s;
    s.languages = {"go", "python", "ruby"};
    s.low_resource = "ruby";
    s.concepts = 8;
    s.train_size = 12;
    s.low_resource_divisor = 3;
    s.seed = 3;
    return s;
}

}  // namespace advfusion::fixtures
