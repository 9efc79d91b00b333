// SPDX-License-Identifier: Apache-2.0
//
// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any
// fails. Pass criterion numbers as arguments to run a subset.

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <numbers>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "advfusion/advtrain/trainer.hpp"
#include "advfusion/attnlab/attnlab.hpp"
#include "advfusion/backbone/backbone.hpp"
#include "advfusion/corpus/corpus.hpp"
#include "advfusion/fusion/fusion.hpp"
#include "advfusion/metrics/metrics.hpp"
#include "advfusion/numcore/ops.hpp"
#include "advfusion/peft/adapter.hpp"
#include "fixtures.hpp"
#include "lab.hpp"
#include "oracles.hpp"
#include "pipeline.hpp"

namespace nc = advfusion::numcore;
namespace fs = std::filesystem;
using namespace advfusion;
using nc::Tensor;

namespace {

struct Outcome {
    bool pass = true;
    std::vector<std::string> notes;

    void check(bool ok, const std::string& what) {
        if (!ok) {
            pass = false;
            notes.push_back("failed: " + what);
        }
    }
    void note(const std::string& what) { notes.push_back(what); }
};

std::string num(double x, int digits = 6) {
    std::ostringstream s;
    s << std::setprecision(digits) << x;
    return s.str();
}

double seconds_since(std::chrono::steady_clock::time_point start) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

Tensor random_matrix(nc::Rng& rng, std::size_t r, std::size_t c, double stddev = 1.0) {
    return rng.normal_tensor({r, c}, stddev);
}

std::size_t dim(nc::Rng& rng, std::size_t lo, std::size_t hi) { return lo + rng.below(hi - lo + 1); }

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
    double m = a.size() == b.size() ? 0.0 : INFINITY;
    for (std::size_t i = 0; i < std::min(a.size(), b.size()); ++i) {
        m = std::max(m, std::abs(a[i] - b[i]));
    }
    return m;
}

bool bitwise_equal(std::span<const double> a, std::span<const double> b) {
    return a.size() == b.size() && std::equal(a.begin(), a.end(), b.begin());
}

std::vector<std::int64_t> random_ids(nc::Rng& rng, std::size_t n, std::size_t vocab) {
    std::vector<std::int64_t> ids(n);
    for (auto& x : ids) {
        x = static_cast<std::int64_t>(rng.below(vocab));
    }
    return ids;
}

// ---- 1. gradient correctness ------------------------------------------------

using GradFn = std::function<Tensor(const std::vector<Tensor>&)>;
struct GradCase {
    std::string name;
    std::function<std::pair<GradFn, std::vector<Tensor>>(nc::Rng&)> make;
};

std::vector<GradCase> grad_cases() {
    using In = std::vector<Tensor>;
    std::vector<GradCase> cases;
    auto add_case = [&](std::string name, auto make) { cases.push_back({std::move(name), make}); };

    add_case("matmul", [](nc::Rng& rng) {
        const auto m = dim(rng, 1, 4), k = dim(rng, 1, 4), n = dim(rng, 1, 4);
        return std::pair{GradFn([](const In& x) { return oracle::probe(nc::matmul(x[0], x[1]), 1); }),
                         In{random_matrix(rng, m, k), random_matrix(rng, k, n)}};
    });
    add_case("transpose", [](nc::Rng& rng) {
        return std::pair{GradFn([](const In& x) { return oracle::probe(nc::transpose(x[0]), 2); }),
                         In{random_matrix(rng, dim(rng, 1, 4), dim(rng, 1, 4))}};
    });
    for (const auto* op : {"add", "sub", "mul"}) {
        add_case(op, [op = std::string(op)](nc::Rng& rng) {
            const auto r = dim(rng, 1, 4), c = dim(rng, 1, 4);
            return std::pair{GradFn([op](const In& x) {
                                 const Tensor y = op == "add"   ? nc::add(x[0], x[1])
                                                  : op == "sub" ? nc::sub(x[0], x[1])
                                                                : nc::mul(x[0], x[1]);
                                 return oracle::probe(y, 3);
                             }),
                             In{random_matrix(rng, r, c), random_matrix(rng, r, c)}};
        });
    }
    add_case("scale", [](nc::Rng& rng) {
        const double f = rng.normal();
        return std::pair{GradFn([f](const In& x) { return oracle::probe(nc::scale(x[0], f), 4); }),
                         In{random_matrix(rng, dim(rng, 1, 4), dim(rng, 1, 4))}};
    });
    add_case("add_bias", [](nc::Rng& rng) {
        const auto r = dim(rng, 1, 4), c = dim(rng, 1, 4);
        return std::pair{GradFn([](const In& x) { return oracle::probe(nc::add_bias(x[0], x[1]), 5); }),
                         In{random_matrix(rng, r, c), rng.normal_tensor({c}, 1.0)}};
    });
    add_case("relu", [](nc::Rng& rng) {
        // Keep entries away from the kink at 0.
        auto x = random_matrix(rng, dim(rng, 1, 4), dim(rng, 1, 4));
        for (auto& v : x.mutable_data()) {
            v = (v < 0 ? -0.1 : 0.1) + v;
        }
        return std::pair{GradFn([](const In& x) { return oracle::probe(nc::relu(x[0]), 6); }), In{x}};
    });
    add_case("layer_norm", [](nc::Rng& rng) {
        const auto t = dim(rng, 1, 4), h = dim(rng, 2, 5);
        return std::pair{GradFn([](const In& x) { return oracle::probe(nc::layer_norm(x[0], x[1], x[2]), 7); }),
                         In{random_matrix(rng, t, h), rng.normal_tensor({h}, 1.0), rng.normal_tensor({h}, 1.0)}};
    });
    add_case("embedding", [](nc::Rng& rng) {
        const auto v = dim(rng, 2, 6), h = dim(rng, 1, 4);
        const auto ids = random_ids(rng, dim(rng, 1, 5), v);
        return std::pair{GradFn([ids](const In& x) { return oracle::probe(nc::embedding(x[0], ids), 8); }),
                         In{random_matrix(rng, v, h)}};
    });
    for (std::size_t axis : {0u, 1u}) {
        add_case("concat(axis " + std::to_string(axis) + ")", [axis](nc::Rng& rng) {
            const auto a = dim(rng, 1, 3), b = dim(rng, 1, 3), c = dim(rng, 1, 3);
            In in = axis == 0 ? In{random_matrix(rng, a, c), random_matrix(rng, b, c)}
                              : In{random_matrix(rng, c, a), random_matrix(rng, c, b)};
            return std::pair{GradFn([axis](const In& x) { return oracle::probe(nc::concat({x[0], x[1]}, axis), 9); }),
                             in};
        });
    }
    add_case("slice_cols", [](nc::Rng& rng) {
        const auto c = dim(rng, 2, 6);
        const auto start = rng.below(c);
        const auto count = 1 + rng.below(c - start);
        return std::pair{
            GradFn([start, count](const In& x) { return oracle::probe(nc::slice_cols(x[0], start, count), 10); }),
            In{random_matrix(rng, dim(rng, 1, 4), c)}};
    });
    for (std::size_t axis : {0u, 1u}) {
        add_case("softmax(axis " + std::to_string(axis) + ")", [axis](nc::Rng& rng) {
            return std::pair{GradFn([axis](const In& x) { return oracle::probe(nc::softmax(x[0], axis), 11); }),
                             In{random_matrix(rng, dim(rng, 1, 4), dim(rng, 1, 4), 2.0)}};
        });
    }
    add_case("softmax(rank 1)", [](nc::Rng& rng) {
        return std::pair{GradFn([](const In& x) { return oracle::probe(nc::softmax(x[0], 0), 12); }),
                         In{rng.normal_tensor({dim(rng, 1, 6)}, 2.0)}};
    });
    add_case("causal_softmax", [](nc::Rng& rng) {
        const auto t = dim(rng, 1, 5);
        return std::pair{GradFn([](const In& x) { return oracle::probe(nc::causal_softmax(x[0]), 13); }),
                         In{random_matrix(rng, t, t, 2.0)}};
    });
    add_case("cross_entropy", [](nc::Rng& rng) {
        const auto t = dim(rng, 1, 5), v = dim(rng, 2, 6);
        auto targets = random_ids(rng, t, v);
        targets[rng.below(t)] = advtrain::kIgnoreIndex;
        if (t > 1) {
            targets[0] = static_cast<std::int64_t>(rng.below(v));
        }
        return std::pair{GradFn([targets](const In& x) { return nc::cross_entropy(x[0], targets); }),
                         In{random_matrix(rng, t, v, 2.0)}};
    });
    add_case("sum", [](nc::Rng& rng) {
        return std::pair{GradFn([](const In& x) { return nc::sum(nc::mul(x[0], x[0])); }),
                         In{random_matrix(rng, dim(rng, 1, 4), dim(rng, 1, 4))}};
    });
    add_case("mean", [](nc::Rng& rng) {
        return std::pair{GradFn([](const In& x) { return nc::mean(nc::mul(x[0], x[0])); }),
                         In{random_matrix(rng, dim(rng, 1, 4), dim(rng, 1, 4))}};
    });
    add_case("row_dot", [](nc::Rng& rng) {
        const auto t = dim(rng, 1, 4), h = dim(rng, 1, 4);
        return std::pair{GradFn([](const In& x) { return oracle::probe(nc::row_dot(x[0], x[1]), 14); }),
                         In{random_matrix(rng, t, h), random_matrix(rng, t, h)}};
    });
    add_case("scale_rows", [](nc::Rng& rng) {
        const auto t = dim(rng, 1, 4), h = dim(rng, 1, 4);
        return std::pair{GradFn([](const In& x) { return oracle::probe(nc::scale_rows(x[0], x[1]), 15); }),
                         In{random_matrix(rng, t, h), random_matrix(rng, t, 1)}};
    });
    add_case("kron", [](nc::Rng& rng) {
        return std::pair{GradFn([](const In& x) { return oracle::probe(nc::kron(x[0], x[1]), 16); }),
                         In{random_matrix(rng, dim(rng, 1, 3), dim(rng, 1, 3)),
                            random_matrix(rng, dim(rng, 1, 3), dim(rng, 1, 3))}};
    });
    add_case("outer", [](nc::Rng& rng) {
        return std::pair{GradFn([](const In& x) { return oracle::probe(nc::outer(x[0], x[1]), 17); }),
                         In{rng.normal_tensor({dim(rng, 1, 4)}, 1.0), rng.normal_tensor({dim(rng, 1, 4)}, 1.0)}};
    });
    add_case("phm_compose", [](nc::Rng& rng) {
        const std::size_t n = dim(rng, 1, 3), p = dim(rng, 1, 3), q = dim(rng, 1, 3);
        In in;
        for (std::size_t i = 0; i < n; ++i) in.push_back(random_matrix(rng, n, n));
        for (std::size_t i = 0; i < n; ++i) in.push_back(random_matrix(rng, p, q));
        return std::pair{GradFn([n](const In& x) {
                             std::vector<Tensor> rules(x.begin(), x.begin() + static_cast<long>(n));
                             std::vector<Tensor> factors(x.begin() + static_cast<long>(n), x.end());
                             return oracle::probe(peft::phm_compose(rules, factors), 18);
                         }),
                         in};
    });
    add_case("bottleneck_forward", [](nc::Rng& rng) {
        const auto t = dim(rng, 1, 4), h = dim(rng, 2, 5), d = dim(rng, 1, 4);
        auto down = random_matrix(rng, h, d);
        return std::pair{GradFn([d](const In& x) {
                             peft::AdapterModule m;
                             m.bottleneck_dim = d;
                             m.params = {{"down", x[2]}, {"down_bias", x[3]}, {"up", x[4]}, {"up_bias", x[5]}};
                             return oracle::probe(peft::bottleneck_forward(x[0], x[1], m), 19);
                         }),
                         In{random_matrix(rng, t, h), random_matrix(rng, t, h), down, rng.normal_tensor({d}, 1.0),
                            random_matrix(rng, d, h), rng.normal_tensor({h}, 1.0)}};
    });
    add_case("lora_delta", [](nc::Rng& rng) {
        const auto t = dim(rng, 1, 4), h = dim(rng, 2, 5), r = dim(rng, 1, 2);
        const double alpha = rng.uniform(0.5, 4.0);
        return std::pair{GradFn([r, alpha](const In& x) {
                             peft::AdapterModule m;
                             m.kind = peft::AdapterKind::lora;
                             m.lora_rank = r;
                             m.lora_alpha = alpha;
                             m.params = {{"q_A", x[1]}, {"q_B", x[2]}};
                             return oracle::probe(peft::lora_delta(x[0], m, backbone::Projection::query), 20);
                         }),
                         In{random_matrix(rng, t, h), random_matrix(rng, h, r), random_matrix(rng, r, h)}};
    });
    add_case("fusion_forward", [](nc::Rng& rng) {
        const auto t = dim(rng, 1, 4), h = dim(rng, 1, 4);
        In in{random_matrix(rng, t, h), random_matrix(rng, t, h), random_matrix(rng, t, h), random_matrix(rng, t, h),
              random_matrix(rng, h, h), random_matrix(rng, h, h), random_matrix(rng, h, h)};
        return std::pair{GradFn([](const In& x) {
                             fusion::FusionBlock block(0, {"a", "b", "c"}, x[4], x[5], x[6]);
                             const auto out = fusion::fusion_forward(x[0], {{"a", x[1]}, {"b", x[2]}, {"c", x[3]}},
                                                                     block);
                             return oracle::probe(out.output, 21);
                         }),
                         in};
    });
    add_case("backbone forward + clm loss", [](nc::Rng& rng) {
        backbone::BackboneConfig cfg;
        cfg.num_layers = 1;
        cfg.hidden_size = 4;
        cfg.num_heads = 2;
        cfg.ffn_size = 6;
        cfg.vocab_size = 5;
        cfg.max_seq_len = 4;
        auto model = std::make_shared<backbone::Backbone>(cfg, rng);
        fixtures::scramble(model->parameters(), rng, 0.5);
        const auto ids = random_ids(rng, dim(rng, 2, 4), cfg.vocab_size);
        std::vector<std::int64_t> targets(ids.begin() + 1, ids.end());
        targets.push_back(advtrain::kIgnoreIndex);
        In in;
        for (const auto& [_, p] : model->parameters()) in.push_back(p);
        return std::pair{GradFn([model, ids, targets](const In&) {
                             return nc::cross_entropy(model->forward(ids).logits, targets);
                         }),
                         in};
    });
    return cases;
}

Outcome criterion_gradients() {
    Outcome o;
    const auto start = std::chrono::steady_clock::now();
    nc::Rng rng(101);
    std::size_t entries = 0;
    for (const auto& c : grad_cases()) {
        double worst = 0.0;
        std::string where;
        for (int instance = 0; instance < 20; ++instance) {
            auto [f, inputs] = c.make(rng);
            const auto r = oracle::grad_check(f, inputs, 1e-5);
            entries += r.entries;
            if (r.worst > worst) {
                worst = r.worst;
                where = "instance " + std::to_string(instance) + " " + r.where;
            }
        }
        o.check(worst <= 1e-4, c.name + " worst relative error " + num(worst) + " at " + where);
    }
    const double secs = seconds_since(start);
    o.check(secs < 60.0, "runtime " + num(secs) + " s");
    o.note(std::to_string(grad_cases().size()) + " ops x 20 instances, " + std::to_string(entries) +
           " gradient entries, " + num(secs, 3) + " s");
    return o;
}

// ---- 2. bottleneck adapter equation -----------------------------------------

peft::AdapterModule module_2x2(Tensor down, Tensor down_bias, Tensor up, Tensor up_bias) {
    peft::AdapterModule m;
    m.bottleneck_dim = 2;
    m.params = {{"down", down}, {"down_bias", down_bias}, {"up", up}, {"up_bias", up_bias}};
    return m;
}

Outcome criterion_bottleneck() {
    Outcome o;
    const auto h = Tensor::matrix({{1, -1}, {0.5, 2}});
    const auto r = Tensor::matrix({{10, 20}, {30, 40}});
    {
        const auto m = module_2x2(Tensor::matrix({{1, 2}, {3, 4}}), Tensor::vector({0.5, -1}),
                                  Tensor::matrix({{1, 0}, {2, 1}}), Tensor::vector({0.25, 0}));
        // Row 1: hD+b = [-1.5, -3] -> ReLU 0 -> z = up_bias + r = [10.25, 20].
        // Row 2: hD+b = [7, 8] -> [7, 8]U = [23, 8] -> + [0.25, 0] + r = [53.25, 48].
        const std::vector<double> expected{10.25, 20, 53.25, 48};
        const auto z = peft::bottleneck_forward(h, r, m);
        o.check(bitwise_equal(z.data(), expected), "biased 2x2 instance");
    }
    const auto zero2 = Tensor::vector({0, 0});
    {
        const auto pos = Tensor::matrix({{1, 2}, {3, 0.5}});
        const auto m = module_2x2(Tensor::identity(2), zero2, Tensor::identity(2), zero2);
        const std::vector<double> expected{11, 22, 33, 40.5};
        o.check(bitwise_equal(peft::bottleneck_forward(pos, r, m).data(), expected), "D=U=I, h > 0 gives h + r");
        const auto neg = Tensor::matrix({{-1, -2}, {-3, -0.5}});
        o.check(bitwise_equal(peft::bottleneck_forward(neg, r, m).data(), r.data()), "ReLU kill gives r");
    }
    {
        const auto m = module_2x2(Tensor::matrix({{1, 2}, {3, 4}}), Tensor::vector({0.5, -1}),
                                  Tensor::zeros({2, 2}), zero2);
        o.check(bitwise_equal(peft::bottleneck_forward(h, r, m).data(), r.data()), "U = 0 gives r");
    }
    // Logit-level pass-through at the default model size.
    nc::Rng rng(202);
    backbone::BackboneConfig cfg;
    cfg.vocab_size = 40;
    backbone::Backbone model(cfg, rng);
    const auto ids = random_ids(rng, 12, cfg.vocab_size);
    const auto bare = model.forward(ids).logits;
    for (auto kind : {peft::AdapterKind::bottleneck, peft::AdapterKind::compacter}) {
        auto a = peft::AdapterSet::create(kind, "go", cfg, {}, rng);
        const auto with = model.forward(ids, &a).logits;
        const double diff = max_abs_diff(bare.data(), with.data());
        o.check(diff <= 1e-9, std::string(peft::to_string(kind)) + " zero-up pass-through diff " + num(diff));
        o.note(std::string(peft::to_string(kind)) + " pass-through max |diff| = " + num(diff));
    }
    return o;
}

// ---- 3. fusion equation -------------------------------------------------------

Outcome criterion_fusion() {
    Outcome o;
    fusion::FusionBlock block(0, {"a", "b"}, Tensor::matrix({{1}}), Tensor::matrix({{1}}), Tensor::matrix({{1}}));
    const auto out = fusion::fusion_forward(Tensor::matrix({{1}}),
                                            {{"a", Tensor::matrix({{0}})}, {"b", Tensor::matrix({{std::log(3.0)}})}},
                                            block);
    // scores 0 and ln 3 -> weights 1/4, 3/4 -> O = 3/4 ln 3.
    const double expected = 0.75 * std::log(3.0);
    o.check(std::abs(out.output.item() - expected) <= 1e-12, "scalar oracle output " + num(out.output.item(), 17));
    o.check(std::abs(out.weights.at(0, 0) - 0.25) <= 1e-12 && std::abs(out.weights.at(0, 1) - 0.75) <= 1e-12,
            "scalar oracle weights");

    nc::Rng rng(303);
    double worst = 0.0;
    for (int i = 0; i < 1000; ++i) {
        const auto t = dim(rng, 1, 6), h = dim(rng, 1, 8), n = dim(rng, 1, 5);
        std::vector<std::string> tags;
        std::map<std::string, Tensor> z;
        for (std::size_t k = 0; k < n; ++k) {
            tags.push_back("l" + std::to_string(k));
            z[tags.back()] = random_matrix(rng, t, h);
        }
        fusion::FusionBlock b(0, tags, random_matrix(rng, h, h, 0.5), random_matrix(rng, h, h, 0.5),
                              random_matrix(rng, h, h, 0.5));
        const auto f = fusion::fusion_forward(random_matrix(rng, t, h), z, b);
        for (std::size_t row = 0; row < t; ++row) {
            double s = 0.0;
            for (std::size_t c = 0; c < f.weights.dim(1); ++c) s += f.weights.at(row, c);
            worst = std::max(worst, std::abs(s - 1.0));
        }
    }
    o.check(worst <= 1e-12, "row sums deviate by " + num(worst));
    o.note("O = " + num(out.output.item(), 17) + ", 1000 random forwards, max |row sum - 1| = " + num(worst));
    return o;
}

// ---- 4 and 5. advfusion schedule and frozen discipline ------------------------

struct FusionWorld {
    backbone::Backbone model;
    corpus::Vocabulary vocab;
    std::vector<corpus::EncodedSample> data;
    std::vector<peft::AdapterSet> adapters;
};

FusionWorld make_world(peft::AdapterKind kind, std::uint64_t seed) {
    const auto split = corpus::synth_corpus(fixtures::small_synth());
    auto vocab = corpus::Vocabulary::build(split.train, 256);
    const auto cfg = fixtures::tiny_config(vocab.size());
    nc::Rng rng(seed);
    backbone::Backbone model(cfg, rng);
    model.set_trainable(false);
    auto data = corpus::encode_all(split.train, vocab, cfg.max_seq_len);
    auto adapters = fixtures::scrambled_adapters(kind, {"go", "python", "ruby"}, cfg, fixtures::tiny_peft(), rng);
    return {std::move(model), std::move(vocab), std::move(data), std::move(adapters)};
}

advtrain::TrainingPlan fusion_plan(advtrain::TrainMode mode, std::size_t epochs) {
    advtrain::TrainingPlan plan;
    plan.mode = mode;
    plan.epochs_per_phase = epochs;
    plan.optimizer.lr = 5e-3;
    plan.batch_size = 4;
    plan.seed = 17;
    plan.adapter_tags = {"go", "python", "ruby"};
    plan.target_language = mode == advtrain::TrainMode::advfusion ? "ruby" : "";
    return plan;
}

struct Trace {
    std::vector<double> losses;
    std::vector<std::vector<double>> grads;  // per phase-1 step, fusion grads concatenated
};

Outcome criterion_mask() {
    Outcome o;
    const std::size_t epochs = 3;
    auto run = [&](bool perturb) {
        auto w = make_world(peft::AdapterKind::bottleneck, 404);
        nc::Rng noise(405);
        fusion::FusionModel fused(w.model.config(), w.adapters, noise);
        Trace trace;
        advtrain::EventLog log;
        advtrain::TrainHooks hooks;
        hooks.before_step = [&](const advtrain::StepInfo& s) {
            if (perturb && s.phase == 1) {
                fixtures::scramble(fused.adapter("ruby").parameters(), noise, 1.0);
            }
        };
        hooks.after_backward = [&](const advtrain::StepInfo& s) {
            if (s.phase != 1) return;
            std::vector<double> g;
            for (const auto& [_, p] : fused.parameters()) {
                auto v = p.grad();
                v.resize(p.numel(), 0.0);
                g.insert(g.end(), v.begin(), v.end());
            }
            trace.grads.push_back(std::move(g));
        };
        const auto before = fused.adapter("ruby").content_hash();
        const auto result = advtrain::train_advfusion(w.model, fused, w.data,
                                                      fusion_plan(advtrain::TrainMode::advfusion, epochs), hooks, &log);
        const std::size_t phase1_steps = trace.grads.size();
        trace.losses.assign(result.step_losses.begin(), result.step_losses.begin() + static_cast<long>(phase1_steps));
        return std::tuple{trace, log.records(), before != fused.adapter("ruby").content_hash()};
    };
    const auto [clean, clean_log, clean_changed] = run(false);
    const auto [noisy, noisy_log, noisy_changed] = run(true);
    o.check(noisy_changed && !clean_changed, "perturbation actually altered the target adapter");
    o.check(!clean.losses.empty() && clean.losses.size() == noisy.losses.size(), "phase-1 step counts match");
    o.check(bitwise_equal(clean.losses, noisy.losses), "phase-1 losses bitwise equal");
    bool grads_equal = clean.grads.size() == noisy.grads.size();
    for (std::size_t i = 0; grads_equal && i < clean.grads.size(); ++i) {
        grads_equal = bitwise_equal(clean.grads[i], noisy.grads[i]);
    }
    o.check(grads_equal, "phase-1 gradients bitwise equal");

    std::size_t unmask = 0, epoch_ends = 0;
    for (const auto& r : noisy_log) {
        unmask += r.at("type") == "unmask";
        epoch_ends += r.at("type") == "epoch_end";
    }
    o.check(unmask == 1, "unmask events: " + std::to_string(unmask));
    o.check(epoch_ends == 2 * epochs, "epoch_end events: " + std::to_string(epoch_ends));
    o.note(std::to_string(clean.losses.size()) + " phase-1 steps compared bitwise; " + std::to_string(unmask) +
           " unmask event; " + std::to_string(epoch_ends) + " epochs for epochs_per_phase=" + std::to_string(epochs));
    return o;
}

Outcome criterion_frozen() {
    Outcome o;
    std::size_t steps_checked = 0;
    for (auto kind : {peft::AdapterKind::bottleneck, peft::AdapterKind::compacter}) {
        for (auto mode : {advtrain::TrainMode::fusion, advtrain::TrainMode::advfusion}) {
            auto w = make_world(kind, 505);
            const std::string label = std::string(advtrain::to_string(mode)) + "/" + std::string(peft::to_string(kind));
            nc::Rng rng(506);
            fusion::FusionModel fused(w.model.config(), w.adapters, rng);
            const auto backbone_before = w.model.content_hash();
            std::vector<std::string> adapters_before;
            for (const auto& a : fused.adapters()) adapters_before.push_back(a.content_hash());
            const auto fusion_before = nc::content_hash(fused.parameters());

            std::vector<nc::NamedTensor> frozen = w.model.parameters();
            for (const auto& a : fused.adapters())
                for (const auto& p : a.parameters()) frozen.push_back(p);
            double worst = 0.0;
            advtrain::TrainHooks hooks;
            hooks.after_backward = [&](const advtrain::StepInfo&) {
                for (const auto& [_, p] : frozen)
                    for (double g : p.grad()) worst = std::max(worst, std::abs(g));
            };
            advtrain::EventLog log;
            const auto plan = fusion_plan(mode, 2);
            if (mode == advtrain::TrainMode::advfusion) {
                advtrain::train_advfusion(w.model, fused, w.data, plan, hooks, &log);
            } else {
                advtrain::train_adapterfusion(w.model, fused, w.data, plan, hooks, &log);
            }
            o.check(w.model.content_hash() == backbone_before, label + " backbone hash changed");
            for (std::size_t i = 0; i < fused.adapters().size(); ++i) {
                o.check(fused.adapters()[i].content_hash() == adapters_before[i],
                        label + " adapter " + fused.adapters()[i].language() + " hash changed");
            }
            o.check(nc::content_hash(fused.parameters()) != fusion_before, label + " fusion weights never moved");
            o.check(worst == 0.0, label + " frozen gradient magnitude " + num(worst));
            for (const auto& r : log.records()) {
                if (r.at("type") == "step") {
                    ++steps_checked;
                    o.check(r.at("frozen_grad_abs_max").get<double>() == 0.0,
                            label + " logged frozen grad at step " + r.at("step").dump());
                }
            }
        }
    }
    o.note("4 runs, " + std::to_string(steps_checked) + " logged steps with zero frozen gradients, hashes unchanged");
    return o;
}

// ---- 6. parameter efficiency ----------------------------------------------

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) {
        path = fs::temp_directory_path() / ("advfusion-acceptance-" + name + "-" + std::to_string(::getpid()));
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path, ec);
    }
};

int run_cli(const fs::path& root, std::vector<std::string> args, std::string& out_text) {
    ::setenv("ADVFUSION_RUN_ROOT", root.c_str(), 1);
    args.insert(args.begin(), "advfusion-lab");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
    out_text = out.str() + err.str();
    return code;
}

Outcome criterion_params() {
    Outcome o;
    TempDir dir("params");
    std::string text;
    o.check(run_cli(dir.path, {"synth"}, text) == 0, "synth: " + text);
    const int code = run_cli(dir.path, {"param-count"}, text);
    o.check(code == 0, "param-count exit " + std::to_string(code) + ": " + text);
    std::istringstream lines(text);
    std::string line;
    std::getline(lines, line);  // header
    std::set<std::string> seen;
    while (std::getline(lines, line)) {
        std::istringstream row(line);
        std::string setup;
        std::size_t trainable = 0, total = 0;
        double ratio = 0.0;
        if (!(row >> setup >> trainable >> total >> ratio)) continue;
        seen.insert(setup.substr(0, setup.find(':')));
        const double exact = static_cast<double>(trainable) / static_cast<double>(total);
        o.check(exact <= 0.20 && trainable > 0, setup + " ratio " + num(exact));
        o.note(setup + " " + std::to_string(trainable) + "/" + std::to_string(total) + " = " + num(exact, 4));
    }
    o.check(seen == std::set<std::string>{"adapter", "fusion", "advfusion"}, "printed setups incomplete");
    return o;
}

// ---- 7. compacter -----------------------------------------------------------

Outcome criterion_compacter() {
    Outcome o;
    nc::Rng rng(707);
    std::size_t exact = 0;
    for (std::size_t n : {1u, 2u, 4u}) {
        for (int i = 0; i < 50; ++i) {
            const auto p = dim(rng, 1, 4), q = dim(rng, 1, 4);
            std::vector<Tensor> rules, factors;
            for (std::size_t k = 0; k < n; ++k) {
                rules.push_back(random_matrix(rng, n, n));
                factors.push_back(random_matrix(rng, p, q));
            }
            const auto w = peft::phm_compose(rules, factors);
            const auto expected = oracle::phm(rules, factors);
            const bool ok = w.shape() == nc::Shape{n * p, n * q} && bitwise_equal(w.data(), expected);
            exact += ok;
            o.check(ok, "n=" + std::to_string(n) + " instance " + std::to_string(i));
        }
    }
    const peft::PeftConfig defaults;
    o.check(defaults.phm_dim == 4, "default phm_dim " + std::to_string(defaults.phm_dim));
    nc::Rng r2(708);
    backbone::BackboneConfig cfg;
    cfg.vocab_size = 16;
    const auto set = peft::AdapterSet::create(peft::AdapterKind::compacter, "go", cfg, defaults, r2);
    o.check(set.layer(0).phm_dim == 4, "compacter built with phm_dim " + std::to_string(set.layer(0).phm_dim));
    o.note(std::to_string(exact) + "/150 exact matches; default n = " + std::to_string(defaults.phm_dim));
    return o;
}

// ---- 8. LoRA ----------------------------------------------------------------

Outcome criterion_lora() {
    Outcome o;
    const peft::PeftConfig defaults;
    o.check(defaults.lora_rank == 16 && defaults.lora_alpha == 16.0, "defaults r=16, alpha=16");
    nc::Rng rng(808);
    backbone::BackboneConfig cfg;
    cfg.vocab_size = 40;
    backbone::Backbone model(cfg, rng);
    auto lora = peft::AdapterSet::create(peft::AdapterKind::lora, "go", cfg, defaults, rng);
    o.check(lora.layer(0).lora_scale() == 1.0, "scale alpha/r = " + num(lora.layer(0).lora_scale()));
    const auto ids = random_ids(rng, 10, cfg.vocab_size);
    o.check(bitwise_equal(model.forward(ids).logits.data(), model.forward(ids, &lora).logits.data()),
            "fresh LoRA changes logits");
    const auto x = random_matrix(rng, 5, cfg.hidden_size);
    const auto w = random_matrix(rng, cfg.hidden_size, cfg.hidden_size);
    for (auto which : {backbone::Projection::query, backbone::Projection::value}) {
        o.check(bitwise_equal(peft::lora_forward(x, w, lora.layer(0), which).data(), nc::matmul(x, w).data()),
                "fresh lora_forward differs from x W");
    }
    // Rank-1 hand case: x = [1, 1], A = [1, 2]^T, B = [3, 4], alpha = 2 -> 2 * 3 * [3, 4].
    peft::AdapterModule m;
    m.kind = peft::AdapterKind::lora;
    m.lora_rank = 1;
    m.lora_alpha = 2.0;
    m.params = {{"q_A", Tensor::matrix({{1}, {2}})}, {"q_B", Tensor::matrix({{3, 4}})}};
    const auto y = peft::lora_forward(Tensor::matrix({{1, 1}}), Tensor::zeros({2, 2}), m, backbone::Projection::query);
    o.check(bitwise_equal(y.data(), std::vector<double>{18, 24}), "rank-1 outer-product case");
    o.note("fresh LoRA is a bitwise no-op; scale = " + num(lora.layer(0).lora_scale()));
    return o;
}

// ---- 9. metrics ---------------------------------------------------------------

bool dp4(double a, double b) { return std::abs(a - b) < 5e-5; }

Outcome criterion_metrics() {
    Outcome o;
    using metrics::whitespace_tokens;
    const auto bleu = metrics::smooth_bleu4(whitespace_tokens("a b c d"), whitespace_tokens("a b c d e"));
    o.check(dp4(bleu, 100.0 * std::exp(1.0 - 5.0 / 4.0)), "BLEU worked example " + num(bleu));
    o.check(dp4(bleu, 77.8801), "BLEU 77.8801 at 4 dp");
    o.check(metrics::smooth_bleu4(whitespace_tokens("x y z w v"), whitespace_tokens("x y z w v")) == 100.0,
            "BLEU identity");
    o.check(metrics::smooth_bleu4(whitespace_tokens("p q r s"), whitespace_tokens("a b c d")) == 0.0, "BLEU disjoint");

    const auto rouge = metrics::rouge_l(whitespace_tokens("a c e"), whitespace_tokens("a b c d e"));
    o.check(dp4(rouge, 75.0), "ROUGE-L worked example " + num(rouge));
    o.check(metrics::rouge_l(whitespace_tokens("a b c"), whitespace_tokens("a b c")) == 100.0, "ROUGE-L identity");
    o.check(metrics::rouge_l(whitespace_tokens("a b"), whitespace_tokens("c d")) == 0.0, "ROUGE-L disjoint");

    const auto prf = metrics::token_prf({"get", "name"}, {"get", "user", "name"});
    o.check(dp4(prf.precision, 1.0) && dp4(prf.recall, 0.6667) && dp4(prf.f1, 0.8), "P/R/F1 worked example");
    const auto same = metrics::token_prf({"a", "b"}, {"a", "b"});
    o.check(same.precision == 1.0 && same.recall == 1.0 && same.f1 == 1.0, "P/R/F1 identity");
    const auto none = metrics::token_prf({"a"}, {"b"});
    o.check(none.precision == 0.0 && none.recall == 0.0 && none.f1 == 0.0, "P/R/F1 disjoint");

    nc::Rng rng(909);
    for (int i = 0; i < 200; ++i) {
        metrics::Tokens a(dim(rng, 0, 8)), b(dim(rng, 0, 8));
        for (auto& t : a) t = std::string(1, static_cast<char>('a' + rng.below(4)));
        for (auto& t : b) t = std::string(1, static_cast<char>('a' + rng.below(4)));
        o.check(metrics::lcs_length(a, b) == oracle::lcs_brute(a, b), "LCS vs subsequence enumeration");
    }
    o.note("BLEU " + num(bleu, 8) + ", ROUGE-L " + num(rouge, 8) + ", P/R/F1 " + num(prf.precision, 5) + "/" +
           num(prf.recall, 5) + "/" + num(prf.f1, 5));
    return o;
}

// ---- 10. attention contributions ----------------------------------------------

Outcome criterion_attention() {
    Outcome o;
    const auto entry = attnlab::contribution_percentages({0, {"a", "b", "c"}, {2, 4, 6}, 1, 1});
    o.check(entry.normalized == std::vector<double>{0, 0.5, 1}, "[2,4,6] normalized");
    o.check(entry.percent[0] == 0.0 && std::abs(entry.percent[1] - 100.0 / 3) <= 1e-9 &&
                std::abs(entry.percent[2] - 200.0 / 3) <= 1e-9,
            "[2,4,6] shares");

    auto w = make_world(peft::AdapterKind::bottleneck, 1010);
    nc::Rng rng(1011);
    fusion::FusionModel fused(w.model.config(), w.adapters, rng);
    fixtures::scramble(fused.parameters(), rng, 0.4);
    const auto split = corpus::synth_corpus(fixtures::small_synth());
    const auto test = split.test;
    double worst = 0.0;
    std::size_t layers = 0;
    for (const std::set<std::string>& mask : {std::set<std::string>{}, std::set<std::string>{"ruby"}}) {
        fused.set_mask(mask);
        const auto caps = cli::capture(w.model, w.vocab, fused, test);
        const auto flat = oracle::flat_means(caps);
        for (const auto& lm : attnlab::aggregate_scores(caps)) {
            for (std::size_t i = 0; i < lm.tags.size(); ++i) {
                o.check(std::abs(lm.mean[i] - flat.at({lm.layer, lm.tags[i]})) <= 1e-12, "flat-average oracle");
            }
        }
        const auto trace = attnlab::build_trace(caps);
        const auto rows = attnlab::parse_trace_csv(attnlab::trace_csv(trace));
        std::map<std::size_t, double> file_sums;
        for (const auto& r : rows) {
            file_sums[r.layer] += r.percent;
            if (mask.count(r.tag)) {
                o.check(r.percent == 0.0, "masked adapter share " + num(r.percent));
            }
        }
        for (const auto& [layer, s] : file_sums) {
            worst = std::max(worst, std::abs(s - 100.0));
            ++layers;
        }
        for (const auto& e : trace.layers) {
            double s = 0.0;
            for (double p : e.percent) s += p;
            worst = std::max(worst, std::abs(s - 100.0));
        }
    }
    o.check(worst <= 1e-9, "share sums deviate by " + num(worst));
    o.note(std::to_string(layers) + " layers from real traces (unmasked and ruby-masked), max |sum - 100| = " +
           num(worst) + "; [2,4,6] -> [" + num(entry.percent[0]) + ", " + num(entry.percent[1]) + ", " +
           num(entry.percent[2]) + "]");
    return o;
}

// ---- 11. end-to-end protocol --------------------------------------------------

Outcome criterion_protocol() {
    Outcome o;
    std::vector<cli::ProtocolResult> runs;
    std::vector<double> times;
    for (const char* name : {"protocol-a", "protocol-b"}) {
        TempDir dir(name);
        ::setenv("ADVFUSION_RUN_ROOT", dir.path.c_str(), 1);
        const auto config = cli::load_config(std::nullopt, {});
        std::ostringstream log;
        const auto start = std::chrono::steady_clock::now();
        runs.push_back(cli::run_protocol(config, log));
        times.push_back(seconds_since(start));
        o.check(times.back() < 15 * 60, "protocol took " + num(times.back()) + " s");
        o.check(fs::exists(runs.back().run_dir / "protocol" / "comparison.md"), "comparison table written");
        for (const auto& t : runs.back().traces) {
            o.check(fs::exists(t), "trace " + t.string());
        }
    }
    const auto& r = runs.front();
    const std::vector<std::string> expected{"AdvFusion",   "AdvFusion+Compacter", "AdapterFusion",
                                            "AdapterFusion+Compacter", "Compacter", "TaskAdapter", "LoRA"};
    std::vector<std::string> names;
    for (const auto& row : r.rows) {
        names.push_back(row.name);
        o.check(row.bleu.size() == r.languages.size() && row.rouge.size() == r.languages.size(),
                row.name + " lacks per-language scores");
        o.check(r.table_markdown.find("| " + row.name + " |") != std::string::npos, row.name + " missing from table");
    }
    o.check(names == expected, "row set");
    o.check(r.languages.size() == 4, "4 languages");
    o.check(!r.traces.empty(), "attention traces exported");
    o.check(r.artifact_digests == runs.back().artifact_digests, "two runs produced different artifacts");
    o.check(r.table_markdown == runs.back().table_markdown, "two runs produced different tables");
    o.note("7 configurations x " + std::to_string(r.languages.size()) + " languages; " +
           std::to_string(r.artifact_digests.size()) + " artifacts identical across two runs; " + num(times[0], 3) +
           " s and " + num(times[1], 3) + " s");
    return o;
}

// ---- 12. overfit sanity -------------------------------------------------------

// Small code-like corpus that shares the memorized pair's vocabulary but
// never contains the pair itself.
std::vector<corpus::Sample> code_background() {
    struct Op {
        const char* name;
        const char* symbol;
        const char* noun;
    };
    const std::vector<Op> ops{{"add", "+", "sum"},      {"sub", "-", "difference"}, {"mul", "*", "product"},
                              {"div", "/", "quotient"}, {"mod", "%", "remainder"},  {"pow", "**", "power"}};
    const std::vector<std::pair<const char*, const char*>> args{{"a", "b"}, {"x", "y"}, {"m", "n"}, {"p", "q"}};
    std::vector<corpus::Sample> out;
    for (const auto& op : ops) {
        for (const auto& [u, v] : args) {
            const std::string target = std::string("def ") + op.name + " ( " + u + " , " + v + " ) : return " + u +
                                       " " + op.symbol + " " + v;
            if (target == "def add ( a , b ) : return a + b") continue;
            out.push_back({std::string("bg-") + op.name + "-" + u, "python",
                           std::string(op.noun) + " of " + u + " and " + v, target});
        }
    }
    return out;
}

Outcome criterion_overfit() {
    Outcome o;
    const std::vector<corpus::Sample> one{
        {"only-1", "ruby", "sum of two numbers", "def add ( a , b ) : return a + b"}};
    // The PEFT configurations sit on a backbone pretrained on other text: a
    // frozen random head cannot separate logits enough for any adapter.
    const auto background = code_background();
    std::vector<corpus::Sample> everything = background;
    everything.insert(everything.end(), one.begin(), one.end());
    const auto vocab = corpus::Vocabulary::build(everything, 256);
    backbone::BackboneConfig cfg;
    cfg.vocab_size = vocab.size();
    const auto data = corpus::encode_all(one, vocab, cfg.max_seq_len);
    cli::RunConfig rc;
    rc.training.max_new_tokens = 32;
    const std::size_t budget = 500;

    auto plan_for = [&](advtrain::TrainMode mode, double lr) {
        advtrain::TrainingPlan p;
        p.mode = mode;
        p.epochs_per_phase = mode == advtrain::TrainMode::advfusion ? budget / 2 : budget;
        p.optimizer.lr = lr;
        p.batch_size = 1;
        p.seed = 12;
        p.adapter_tags = {"go", "ruby"};
        p.target_language = mode == advtrain::TrainMode::advfusion ? "ruby" : "";
        return p;
    };
    auto judge = [&](const std::string& name, const backbone::Backbone& model, const backbone::Attachments* att,
                     const advtrain::TrainResult& result) {
        std::size_t first = 0;
        for (std::size_t i = 0; i < result.step_losses.size(); ++i) {
            if (result.step_losses[i] < 0.01) {
                first = i + 1;
                break;
            }
        }
        const double last = result.step_losses.back();
        const auto pairs = cli::predict(rc, model, vocab, one, [&](const corpus::Sample&) { return att; });
        const double bleu = metrics::smooth_bleu4(metrics::whitespace_tokens(pairs[0].candidate),
                                                  metrics::whitespace_tokens(pairs[0].reference));
        o.check(result.step_losses.front() > 0.5, name + " starts already memorized");
        o.check(result.steps <= budget, name + " used " + std::to_string(result.steps) + " steps");
        o.check(first > 0 && last < 0.01, name + " loss " + num(last) + " (first < 0.01 at step " +
                                              std::to_string(first) + ")");
        o.check(bleu == 100.0, name + " BLEU " + num(bleu) + " decoded '" + pairs[0].candidate + "'");
        o.note(name + ": loss " + num(result.step_losses.front(), 3) + " -> < 0.01 at step " +
               std::to_string(first) + ", final " + num(last, 3) + ", BLEU " + num(bleu));
    };

    nc::Rng rng(1212);
    backbone::Backbone model(cfg, rng);
    {
        backbone::Backbone pre(cfg, rng);
        const auto r = advtrain::pretrain_backbone(pre, data, plan_for(advtrain::TrainMode::backbone, 1e-3));
        judge("backbone", pre, nullptr, r);
    }
    {
        auto p = plan_for(advtrain::TrainMode::backbone, 1e-3);
        p.epochs_per_phase = 300;
        p.batch_size = 4;
        advtrain::pretrain_backbone(model, corpus::encode_all(background, vocab, cfg.max_seq_len), p);
    }
    model.set_trainable(false);
    for (auto kind : {peft::AdapterKind::bottleneck, peft::AdapterKind::compacter, peft::AdapterKind::lora}) {
        auto a = peft::AdapterSet::create(kind, "ruby", cfg, {}, rng);
        const auto r = advtrain::train_language_adapter(model, a, data, plan_for(advtrain::TrainMode::adapter, 3e-2));
        judge(std::string("adapter/") + std::string(peft::to_string(kind)), model, &a, r);
    }
    for (auto kind : {peft::AdapterKind::bottleneck, peft::AdapterKind::compacter}) {
        for (auto mode : {advtrain::TrainMode::fusion, advtrain::TrainMode::advfusion}) {
            std::vector<peft::AdapterSet> adapters;
            for (const auto* tag : {"go", "ruby"}) {
                adapters.push_back(peft::AdapterSet::create(kind, tag, cfg, {}, rng));
                adapters.back().set_trainable(false);
            }
            fusion::FusionModel fused(cfg, std::move(adapters), rng);
            const auto plan = plan_for(mode, 1e-3);
            const auto r = mode == advtrain::TrainMode::advfusion
                               ? advtrain::train_advfusion(model, fused, data, plan)
                               : advtrain::train_adapterfusion(model, fused, data, plan);
            judge(std::string(advtrain::to_string(mode)) + "/" + std::string(peft::to_string(kind)), model, &fused, r);
        }
    }
    return o;
}

}  // namespace

int main(int argc, char** argv) {
    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
        {"gradient correctness (finite differences)", criterion_gradients},
        {"bottleneck adapter equation and pass-through", criterion_bottleneck},
        {"fusion scalar oracle and softmax rows", criterion_fusion},
        {"advfusion phase-1 mask semantics and schedule", criterion_mask},
        {"frozen backbone and adapters during fusion", criterion_frozen},
        {"trainable parameter ratio <= 0.20", criterion_params},
        {"compacter phm_compose vs Kronecker expansion", criterion_compacter},
        {"LoRA zero-init no-op and scale", criterion_lora},
        {"metric oracles", criterion_metrics},
        {"attention contribution pipeline", criterion_attention},
        {"end-to-end protocol run", criterion_protocol},
        {"overfit sanity on a 1-sample corpus", criterion_overfit},
    };
    std::set<std::size_t> only;
    for (int i = 1; i < argc; ++i) only.insert(static_cast<std::size_t>(std::atoi(argv[i])));

    bool all = true;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const std::size_t id = i + 1;
        if (!only.empty() && !only.count(id)) continue;
        Outcome outcome;
        const auto start = std::chrono::steady_clock::now();
        try {
            outcome = criteria[i].second();
        } catch (const std::exception& e) {
            outcome.pass = false;
            outcome.notes.push_back(std::string("exception: ") + e.what());
        }
        all = all && outcome.pass;
        std::cout << (outcome.pass ? "PASS" : "FAIL") << " [" << id << "] " << criteria[i].first << " ("
                  << num(seconds_since(start), 3) << " s)\n";
        for (const auto& n : outcome.notes) {
            std::cout << "       " << n << "\n";
        }
        std::cout.flush();
    }
    return all ? 0 : 1;
}
