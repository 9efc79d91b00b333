// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>

#include "advfusion/fusion/fusion.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

namespace nc = advfusion::numcore;
namespace bb = advfusion::backbone;
namespace peft = advfusion::peft;
namespace fusion = advfusion::fusion;
namespace fixtures = advfusion::fixtures;
namespace oracle = advfusion::oracle;
using nc::Tensor;

namespace {

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

fusion::FusionBlock random_block(nc::Rng& rng, std::vector<std::string> tags, std::size_t h) {
    return {0, std::move(tags), rng.normal_tensor({h, h}, 0.5), rng.normal_tensor({h, h}, 0.5),
            rng.normal_tensor({h, h}, 0.5)};
}

TEST(FusionBlock, Invariants) {
    nc::Rng rng(1);
    EXPECT_THROW(fusion::FusionBlock(0, {}, 4, rng), fusion::FusionError);
    EXPECT_THROW(fusion::FusionBlock(0, {"go", "go"}, 4, rng), fusion::FusionError);
    fusion::FusionBlock b(0, {"go", "ruby"}, 4, rng);
    EXPECT_THROW(b.set_mask({"go", "ruby"}), fusion::FusionError);
    EXPECT_THROW(b.set_mask({"java"}), fusion::FusionError);
    b.set_mask({"ruby"});
    EXPECT_EQ(b.active_tags(), std::vector<std::string>{"go"});
}

TEST(FusionBlock, InitialisationScales) {
    nc::Rng rng(2);
    const fusion::FusionBlock b(0, {"a", "b"}, 64, rng);
    double q2 = 0, off = 0, diag = 0;
    for (std::size_t i = 0; i < 64; ++i) {
        for (std::size_t j = 0; j < 64; ++j) {
            q2 += b.query().at(i, j) * b.query().at(i, j);
            (i == j ? diag : off) += i == j ? b.value().at(i, j) : b.value().at(i, j) * b.value().at(i, j);
        }
    }
    EXPECT_NEAR(std::sqrt(q2 / 4096), 0.02, 0.002);
    EXPECT_NEAR(diag / 64, 1.0, 0.01);
    EXPECT_NEAR(std::sqrt(off / (4096 - 64)), 0.01, 0.001);
}

TEST(FusionForward, IdenticalAdaptersGiveUniformWeights) {
    nc::Rng rng(3);
    const auto z = rng.normal_tensor({3, 4}, 1.0);
    const auto block = random_block(rng, {"a", "b", "c"}, 4);
    const auto out = fusion::fusion_forward(rng.normal_tensor({3, 4}, 1.0), {{"a", z}, {"b", z}, {"c", z}}, block);
    for (double w : out.weights.data()) EXPECT_NEAR(w, 1.0 / 3.0, 1e-15);
    const auto expected = nc::matmul(z, block.value());
    for (std::size_t i = 0; i < expected.numel(); ++i) EXPECT_NEAR(out.output.data()[i], expected.data()[i], 1e-12);
}

TEST(FusionForward, SingleActiveAdapterGetsAllWeight) {
    nc::Rng rng(4);
    auto block = random_block(rng, {"a", "b"}, 4);
    block.set_mask({"a"});
    const auto zb = rng.normal_tensor({2, 4}, 1.0);
    const auto out = fusion::fusion_forward(rng.normal_tensor({2, 4}, 1.0), {{"b", zb}}, block);
    EXPECT_EQ(out.columns, std::vector<std::string>{"b"});
    EXPECT_EQ(values(out.weights), (std::vector<double>{1.0, 1.0}));
    EXPECT_EQ(values(out.output), values(nc::matmul(zb, block.value())));
}

TEST(FusionForward, ScalarHandOracle) {
    const fusion::FusionBlock block(0, {"a", "b"}, Tensor::matrix({{1}}), Tensor::matrix({{1}}),
                                    Tensor::matrix({{1}}));
    const auto out = fusion::fusion_forward(
        Tensor::matrix({{1}}), {{"a", Tensor::matrix({{0}})}, {"b", Tensor::matrix({{std::log(3.0)}})}}, block);
    // Scores 0 and ln 3 give e^0 / (1 + 3) and 3 / 4.
    EXPECT_NEAR(out.weights.at(0, 0), 0.25, 1e-15);
    EXPECT_NEAR(out.weights.at(0, 1), 0.75, 1e-15);
    EXPECT_NEAR(out.output.item(), 0.75 * std::log(3.0), 1e-15);
}

TEST(FusionForward, MissingOrWrongInputs) {
    nc::Rng rng(5);
    const auto block = random_block(rng, {"a", "b"}, 4);
    const auto z = rng.normal_tensor({2, 4}, 1.0);
    EXPECT_THROW(fusion::fusion_forward(z, {{"a", z}}, block), fusion::FusionError);
    EXPECT_THROW(fusion::fusion_forward(z, {{"a", z}, {"b", Tensor::zeros({3, 4})}}, block), std::invalid_argument);
}

TEST(FusionForward, RowsSumToOneInEveryMaskState) {
    nc::Rng rng(6);
    for (int i = 0; i < 100; ++i) {
        auto block = random_block(rng, {"a", "b", "c", "d"}, 5);
        const std::vector<std::set<std::string>> masks{{}, {"a"}, {"b", "d"}, {"a", "b", "c"}};
        const auto& mask = masks[rng.below(masks.size())];
        block.set_mask(mask);
        std::map<std::string, Tensor> z;
        for (const auto& t : block.active_tags()) z[t] = rng.normal_tensor({4, 5}, 3.0);
        const auto out = fusion::fusion_forward(rng.normal_tensor({4, 5}, 3.0), z, block);
        for (std::size_t r = 0; r < 4; ++r) {
            double s = 0;
            for (std::size_t c = 0; c < out.weights.dim(1); ++c) s += out.weights.at(r, c);
            EXPECT_NEAR(s, 1.0, 1e-12);
        }
    }
}

TEST(FusionForward, ZeroWeightsModeKeepsMaskedColumn) {
    nc::Rng rng(7);
    auto block = random_block(rng, {"a", "b"}, 3);
    block.set_mask({"a"});
    const auto z = rng.normal_tensor({2, 3}, 1.0);
    const auto out = fusion::fusion_forward(z, {{"a", z}, {"b", z}}, block, fusion::MaskMode::zero_weights);
    EXPECT_EQ(out.weights.dim(1), 2u);
    EXPECT_EQ(fusion::parse_mask_mode(fusion::to_string(fusion::MaskMode::zero_weights)),
              fusion::MaskMode::zero_weights);
    EXPECT_THROW(fusion::parse_mask_mode("soft"), std::invalid_argument);
}

TEST(FusionForward, GradientsReachQueryKeyValue) {
    nc::Rng rng(8);
    const auto r = oracle::grad_check(
        [](const std::vector<Tensor>& x) {
            const fusion::FusionBlock b(0, {"a", "b"}, x[0], x[1], x[2]);
            return oracle::probe(fusion::fusion_forward(x[3], {{"a", x[4]}, {"b", x[5]}}, b).output, 4);
        },
        {rng.normal_tensor({3, 3}, 1.0), rng.normal_tensor({3, 3}, 1.0), rng.normal_tensor({3, 3}, 1.0),
         rng.normal_tensor({2, 3}, 1.0), rng.normal_tensor({2, 3}, 1.0), rng.normal_tensor({2, 3}, 1.0)});
    EXPECT_LT(r.worst, 1e-4) << r.where;
}

struct World {
    bb::Backbone model;
    std::vector<std::int64_t> ids;
    fusion::FusionModel fused;
};

World world(peft::AdapterKind kind, std::uint64_t seed) {
    const auto cfg = fixtures::tiny_config(12);
    nc::Rng rng(seed);
    bb::Backbone model(cfg, rng);
    auto adapters = fixtures::scrambled_adapters(kind, {"go", "python", "ruby"}, cfg, fixtures::tiny_peft(), rng);
    fusion::FusionModel fused(cfg, std::move(adapters), rng);
    fixtures::scramble(fused.parameters(), rng, 0.3);
    return {std::move(model), {1, 5, 7, 3, 9, 2}, std::move(fused)};
}

TEST(FusionModel, MaskedAdapterIsIrrelevant) {
    for (auto kind : {peft::AdapterKind::bottleneck, peft::AdapterKind::compacter}) {
        auto w = world(kind, 9);
        w.fused.set_mask({"ruby"});
        const auto before = w.model.forward(w.ids, &w.fused).logits;
        nc::Rng rng(10);
        fixtures::scramble(w.fused.adapter("ruby").parameters(), rng, 5.0);
        const auto after = w.model.forward(w.ids, &w.fused).logits;
        EXPECT_EQ(values(before), values(after));
    }
}

TEST(FusionModel, EmptyMaskAndUnmaskRestoreOutputs) {
    auto w = world(peft::AdapterKind::bottleneck, 11);
    const auto plain = w.model.forward(w.ids, &w.fused).logits;
    w.fused.set_mask({});
    EXPECT_EQ(values(plain), values(w.model.forward(w.ids, &w.fused).logits));
    w.fused.set_mask({"go"});
    EXPECT_NE(values(plain), values(w.model.forward(w.ids, &w.fused).logits));
    w.fused.set_mask({});
    EXPECT_EQ(values(plain), values(w.model.forward(w.ids, &w.fused).logits));
}

TEST(FusionModel, FrozenAdaptersGetNoGradient) {
    auto w = world(peft::AdapterKind::compacter, 12);
    w.model.set_trainable(false);
    for (auto& a : w.fused.adapters()) a.set_trainable(false);
    w.fused.set_trainable(true);
    std::vector<std::int64_t> targets(w.ids.begin() + 1, w.ids.end());
    targets.push_back(-100);
    nc::cross_entropy(w.model.forward(w.ids, &w.fused).logits, targets).backward();
    for (const auto& [name, p] : w.fused.parameters()) {
        double m = 0;
        for (double g : p.grad()) m = std::max(m, std::abs(g));
        EXPECT_GT(m, 0.0) << name;
    }
    for (const auto& a : w.fused.adapters())
        for (const auto& [name, p] : a.parameters())
            for (double g : p.grad()) ASSERT_EQ(g, 0.0) << name;
    for (const auto& [name, p] : w.model.parameters())
        for (double g : p.grad()) ASSERT_EQ(g, 0.0) << name;
}

TEST(FusionModel, SingleAdapterFusionRuns) {
    const auto cfg = fixtures::tiny_config(12);
    nc::Rng rng(13);
    bb::Backbone model(cfg, rng);
    auto adapters = fixtures::scrambled_adapters(peft::AdapterKind::bottleneck, {"go"}, cfg, fixtures::tiny_peft(), rng);
    fusion::FusionModel fused(cfg, std::move(adapters), rng);
    const std::vector<std::int64_t> ids{1, 2, 3};
    EXPECT_NO_THROW(model.forward(ids, &fused));
}

TEST(FusionModel, RejectsMixedKindsAndDuplicates) {
    const auto cfg = fixtures::tiny_config(12);
    nc::Rng rng(14);
    std::vector<peft::AdapterSet> mixed;
    mixed.push_back(peft::AdapterSet::create(peft::AdapterKind::bottleneck, "go", cfg, fixtures::tiny_peft(), rng));
    mixed.push_back(peft::AdapterSet::create(peft::AdapterKind::compacter, "ruby", cfg, fixtures::tiny_peft(), rng));
    EXPECT_THROW(fusion::FusionModel(cfg, std::move(mixed), rng), fusion::FusionError);
    std::vector<peft::AdapterSet> dup;
    dup.push_back(peft::AdapterSet::create(peft::AdapterKind::bottleneck, "go", cfg, fixtures::tiny_peft(), rng));
    dup.push_back(peft::AdapterSet::create(peft::AdapterKind::bottleneck, "go", cfg, fixtures::tiny_peft(), rng));
    EXPECT_THROW(fusion::FusionModel(cfg, std::move(dup), rng), fusion::FusionError);
    std::vector<peft::AdapterSet> lora;
    lora.push_back(peft::AdapterSet::create(peft::AdapterKind::lora, "go", cfg, fixtures::tiny_peft(), rng));
    lora.push_back(peft::AdapterSet::create(peft::AdapterKind::lora, "ruby", cfg, fixtures::tiny_peft(), rng));
    EXPECT_THROW(fusion::FusionModel(cfg, std::move(lora), rng), fusion::FusionError);
}

TEST(FusionModel, ParameterNamesAndCount) {
    auto w = world(peft::AdapterKind::bottleneck, 15);
    const auto params = w.fused.parameters();
    ASSERT_EQ(params.size(), 6u);
    EXPECT_EQ(params[0].first, "fusion.layer0.query");
    EXPECT_EQ(params[5].first, "fusion.layer1.value");
    EXPECT_EQ(w.fused.parameter_count(), 2u * 3 * 8 * 8);
}

TEST(Capture, ObserverNeutralAndShaped) {
    auto w = world(peft::AdapterKind::bottleneck, 16);
    const auto plain = w.model.forward(w.ids, &w.fused).logits;
    fusion::AttentionCapture cap;
    w.fused.set_capture(&cap);
    cap.begin_sample("s1");
    const auto observed = w.model.forward(w.ids, &w.fused).logits;
    w.fused.set_capture(nullptr);
    EXPECT_EQ(values(plain), values(observed));
    ASSERT_EQ(cap.samples().size(), 1u);
    EXPECT_EQ(cap.samples()[0].entry_count(), w.ids.size() * 3 * 2);
    EXPECT_EQ(fusion::capture_attention(w.fused.blocks()[1], cap).size(), 1u);
}

TEST(Capture, MaskedColumnIsZeroAndUniformWhenIdentical) {
    auto w = world(peft::AdapterKind::bottleneck, 17);
    w.fused.set_mask({"python"});
    fusion::AttentionCapture cap;
    w.fused.set_capture(&cap);
    cap.begin_sample("s1");
    w.model.forward(w.ids, &w.fused);
    for (const auto& l : cap.samples()[0].layers) {
        for (std::size_t t = 0; t < l.tokens; ++t) EXPECT_EQ(l.at(t, 1), 0.0);
    }

    // Uniform case: all three adapters hold the same tensors.
    const auto cfg = fixtures::tiny_config(12);
    nc::Rng rng(18);
    auto base = peft::AdapterSet::create(peft::AdapterKind::bottleneck, "go", cfg, fixtures::tiny_peft(), rng);
    fixtures::scramble(base.parameters(), rng, 0.3);
    std::vector<peft::AdapterSet> same;
    for (const auto* tag : {"go", "python", "ruby"}) {
        std::vector<nc::NamedTensor> renamed;
        for (const auto& [name, t] : base.parameters()) {
            renamed.emplace_back(std::string(name).replace(name.find(".go."), 4, std::string(".") + tag + "."), t);
        }
        same.push_back(peft::AdapterSet::from_tensors(peft::AdapterKind::bottleneck, tag, cfg, fixtures::tiny_peft(),
                                                      renamed));
    }
    fusion::FusionModel uniform(cfg, std::move(same), rng);
    fusion::AttentionCapture cap2;
    uniform.set_capture(&cap2);
    cap2.begin_sample("s");
    w.model.forward(w.ids, &uniform);
    for (const auto& l : cap2.samples()[0].layers)
        for (double v : l.weights) EXPECT_NEAR(v, 1.0 / 3.0, 1e-12);
}

TEST(Capture, BlockNeverRunIsAnError) {
    auto w = world(peft::AdapterKind::bottleneck, 19);
    const fusion::AttentionCapture empty;
    EXPECT_THROW(fusion::capture_attention(w.fused.blocks()[0], empty), fusion::FusionError);
}

}  // namespace
