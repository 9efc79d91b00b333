// SPDX-License-Identifier: Apache-2.0

#include <benchmark/benchmark.h>

#include "advfusion/backbone/backbone.hpp"
#include "advfusion/fusion/fusion.hpp"
#include "advfusion/numcore/ops.hpp"
#include "advfusion/peft/adapter.hpp"

namespace nc = advfusion::numcore;
using namespace advfusion;

namespace {

void BM_matmul(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    nc::Rng rng(1);
    const auto a = rng.normal_tensor({n, n}, 1.0);
    const auto b = rng.normal_tensor({n, n}, 1.0);
    for (auto _ : state) {
        benchmark::DoNotOptimize(nc::matmul(a, b));
    }
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}
BENCHMARK(BM_matmul)->Arg(16)->Arg(64)->Arg(128);

backbone::BackboneConfig bench_config() {
    backbone::BackboneConfig cfg;
    cfg.vocab_size = 256;
    return cfg;
}

std::vector<std::int64_t> bench_tokens(std::size_t n) {
    std::vector<std::int64_t> ids(n);
    for (std::size_t i = 0; i < n; ++i) ids[i] = static_cast<std::int64_t>((i * 37) % 256);
    return ids;
}

void BM_backbone_forward(benchmark::State& state) {
    nc::Rng rng(2);
    const backbone::Backbone model(bench_config(), rng);
    const auto ids = bench_tokens(static_cast<std::size_t>(state.range(0)));
    nc::NoGradGuard guard;
    for (auto _ : state) {
        benchmark::DoNotOptimize(model.forward(ids).logits);
    }
}
BENCHMARK(BM_backbone_forward)->Arg(16)->Arg(64);

void BM_fusion_forward(benchmark::State& state) {
    const auto cfg = bench_config();
    nc::Rng rng(3);
    const backbone::Backbone model(cfg, rng);
    std::vector<peft::AdapterSet> adapters;
    for (const auto* tag : {"go", "java", "python", "ruby"}) {
        adapters.push_back(peft::AdapterSet::create(peft::AdapterKind::bottleneck, tag, cfg, {}, rng));
    }
    const fusion::FusionModel fused(cfg, std::move(adapters), rng);
    const auto ids = bench_tokens(static_cast<std::size_t>(state.range(0)));
    nc::NoGradGuard guard;
    for (auto _ : state) {
        benchmark::DoNotOptimize(model.forward(ids, &fused).logits);
    }
}
BENCHMARK(BM_fusion_forward)->Arg(16)->Arg(64);

void BM_fusion_train_step(benchmark::State& state) {
    const auto cfg = bench_config();
    nc::Rng rng(4);
    const backbone::Backbone model(cfg, rng);
    std::vector<peft::AdapterSet> adapters;
    for (const auto* tag : {"go", "ruby"}) {
        adapters.push_back(peft::AdapterSet::create(peft::AdapterKind::bottleneck, tag, cfg, {}, rng));
    }
    fusion::FusionModel fused(cfg, std::move(adapters), rng);
    fused.set_trainable(true);
    const auto ids = bench_tokens(32);
    std::vector<std::int64_t> targets(ids.begin() + 1, ids.end());
    targets.push_back(-100);
    for (auto _ : state) {
        auto loss = nc::cross_entropy(model.forward(ids, &fused).logits, targets);
        loss.backward();
        for (const auto& [_, p] : fused.parameters()) nc::Tensor(p).zero_grad();
    }
}
BENCHMARK(BM_fusion_train_step);

}  // namespace
BENCHMARK_MAIN();
