// Copyright (C) 2026 The roundattn Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "roundattn/engine.hpp"
#include "roundattn/error.hpp"
#include "support/oracles.hpp"

namespace roundattn {
namespace {

ModelConfig small_config(std::uint64_t seed = 42) {
    ModelConfig c;
    c.layers = 4;
    c.heads = 2;
    c.d_model = 16;
    c.seed = seed;
    return c;
}

std::vector<TokenId> random_tokens(std::mt19937_64& rng, std::size_t n) {
    std::vector<TokenId> t(n);
    for (auto& v : t) v = static_cast<TokenId>(rng() % kVocabSize);
    return t;
}

TEST(InitModel, SameSeedSameWeights) {
    const Model a(small_config(5));
    const Model b(small_config(5));
    EXPECT_EQ(a.embedding().data, b.embedding().data);
    EXPECT_EQ(a.layer(0).wq.data, b.layer(0).wq.data);
}

TEST(InitModel, DifferentSeedsDiffer) {
    const Model a(small_config(5));
    const Model b(small_config(6));
    EXPECT_NE(a.layer(0).wq.data, b.layer(0).wq.data);
}

TEST(InitModel, RejectsIndivisibleWidth) {
    ModelConfig c;
    c.d_model = 6;
    c.heads = 4;
    EXPECT_THROW(Model{c}, ConfigError);
    c.d_model = 6;
    c.heads = 2;  // odd head dim
    EXPECT_THROW(Model{c}, ConfigError);
    c.layers = 0;
    c.heads = 1;
    EXPECT_THROW(Model{c}, ConfigError);
}

TEST(AttentionLayer, SingleQuerySingleKey) {
    Matrix q(1, 4), k(1, 4), v(1, 4);
    q.data = {1, 2, 3, 4};
    k.data = {0.5f, -1, 2, 0};
    v.data = {1, 1, 1, 1};
    const AttentionOutput out = attention_layer(q, k, v, 2);
    ASSERT_TRUE(out.scores);
    EXPECT_EQ(out.scores->scores, std::vector<float>{1.0f});
    EXPECT_EQ(out.output.data, v.data);
}

TEST(AttentionLayer, RowsSumToOneAndAreCausal) {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<float> u(-1, 1);
    for (HeadReduction red : {HeadReduction::sum_renormalize, HeadReduction::max_renormalize}) {
        Matrix q(6, 8), k(6, 8), v(6, 8);
        for (auto* m : {&q, &k, &v})
            for (auto& x : m->data) x = u(rng);
        const AttentionOutput out = attention_layer(q, k, v, 4, red);
        for (std::size_t r = 0; r < 6; ++r) {
            double sum = 0.0;
            for (std::size_t c = 0; c < 6; ++c) {
                sum += out.scores->at(r, c);
                if (c > r) {
                    EXPECT_EQ(out.scores->at(r, c), 0.0f);
                }
            }
            EXPECT_NEAR(sum, 1.0, 1e-5);
        }
    }
}

TEST(AttentionLayer, RejectsShapeMismatch) {
    EXPECT_THROW(attention_layer(Matrix(2, 4), Matrix(2, 4), Matrix(3, 4), 2), ShapeError);
    EXPECT_THROW(attention_layer(Matrix(2, 4), Matrix(2, 6), Matrix(2, 6), 2), ShapeError);
}

TEST(Engine, MatchesNaiveReferenceOnShortSequences) {
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 12; ++trial) {
        const Model model(small_config(rng()));
        const std::size_t n = 1 + rng() % 8;
        const auto tokens = random_tokens(rng, n);
        KVCache cache = make_cache(model.config());
        ForwardOptions opts;
        opts.capture = LayerRange{0, model.config().layers};
        const ForwardResult fr = model.prefill(tokens, 0, cache, opts);
        const testing::NaiveResult ref = testing::naive_forward(model, tokens, testing::causal_visible);
        for (std::size_t t = 0; t < n; ++t)
            for (std::size_t i = 0; i < model.config().d_model; ++i)
                EXPECT_NEAR(fr.output.hidden(t, i), ref.hidden[t][i], 1e-5 * (1.0 + std::abs(ref.hidden[t][i])));
        for (std::size_t l = 0; l < model.config().layers; ++l)
            for (std::size_t r = 0; r < n; ++r)
                for (std::size_t c = 0; c < n; ++c) EXPECT_NEAR(fr.captures[l].at(r, c), ref.scores[l][r][c], 1e-5);
    }
}

TEST(Engine, RangeCompositionEqualsWholeForward) {
    std::mt19937_64 rng(12);
    const Model model(small_config());
    const auto tokens = random_tokens(rng, 10);
    KVCache whole = make_cache(model.config());
    const ForwardResult a = model.prefill(tokens, 0, whole);
    for (std::size_t split = 1; split < model.config().layers; ++split) {
        KVCache parts = make_cache(model.config());
        const ForwardResult lo = model.forward_range(model.embed(tokens, 0), parts, {0, split});
        const ForwardResult hi = model.forward_range(lo.output, parts, {split, model.config().layers});
        for (std::size_t i = 0; i < a.output.hidden.data.size(); ++i)
            EXPECT_NEAR(a.output.hidden.data[i], hi.output.hidden.data[i], 1e-6);
    }
}

TEST(Engine, EmptyInputLeavesCacheUnchanged) {
    const Model model(small_config());
    KVCache cache = make_cache(model.config());
    ForwardOptions opts;
    opts.capture = LayerRange{0, 4};
    const ForwardResult r = model.forward_range(model.embed({}, 0), cache, {0, 4}, opts);
    EXPECT_TRUE(r.captures.empty());
    for (const LayerKV& kv : cache) EXPECT_TRUE(kv.empty());
}

TEST(Engine, RangeErrors) {
    const Model model(small_config());
    KVCache cache = make_cache(model.config());
    const std::vector<TokenId> t{1, 2};
    EXPECT_THROW(model.forward_range(model.embed(t, 0), cache, {0, 5}), ShapeError);
    KVCache short_cache(2, LayerKV(16));
    EXPECT_THROW(model.forward_range(model.embed(t, 0), short_cache, {0, 4}), ShapeError);
}

TEST(Engine, IncrementalDecodeMatchesBatchPrefill) {
    std::mt19937_64 rng(13);
    const Model model(small_config());
    const auto tokens = random_tokens(rng, 9);
    KVCache batch = make_cache(model.config());
    const ForwardResult full = model.prefill(tokens, 0, batch);
    const auto last = full.output.hidden.row(8);
    const std::vector<float> want = model.logits(last);

    KVCache inc = make_cache(model.config());
    model.prefill(std::span<const TokenId>(tokens).first(8), 0, inc);
    const DecodeResult d = model.decode_step(inc, tokens[8], 8);
    ASSERT_EQ(d.logits.size(), want.size());
    for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(d.logits[i], want[i], 1e-5);
}

TEST(Engine, DecodeIsDeterministicAndGrowsCacheByOne) {
    const Model model(small_config());
    const std::vector<TokenId> t{10, 20, 30};
    KVCache a = make_cache(model.config());
    KVCache b = make_cache(model.config());
    model.prefill(t, 0, a);
    model.prefill(t, 0, b);
    const DecodeResult x = model.decode_step(a, 40, 3);
    const DecodeResult y = model.decode_step(b, 40, 3);
    EXPECT_EQ(x.next, y.next);
    EXPECT_EQ(x.logits, y.logits);
    for (const LayerKV& kv : a) EXPECT_EQ(kv.rows(), 4u);
}

TEST(Engine, DecodeOnEmptyCacheFails) {
    const Model model(small_config());
    KVCache cache = make_cache(model.config());
    EXPECT_THROW(model.decode_step(cache, 1, 0), ConsistencyError);
}

TEST(Engine, ArgmaxTiesGoToSmallestId) {
    const std::vector<float> l{0.1f, 0.7f, 0.3f, 0.7f};
    EXPECT_EQ(argmax_token(l), 1);
    EXPECT_THROW(argmax_token({}), ShapeError);
}

TEST(Engine, BitwiseDeterministicPrefill) {
    std::mt19937_64 rng(14);
    const auto tokens = random_tokens(rng, 12);
    const Model m1(small_config(99));
    const Model m2(small_config(99));
    KVCache c1 = make_cache(m1.config()), c2 = make_cache(m2.config());
    EXPECT_EQ(m1.prefill(tokens, 0, c1).output.hidden.data, m2.prefill(tokens, 0, c2).output.hidden.data);
}

// Masked decode over a full cache equals decode over a cache holding only the kept rows.
TEST(Engine, MaskedDecodeEqualsTruncatedCache) {
    std::mt19937_64 rng(15);
    const Model model(small_config());
    const std::vector<Round> rounds = testing::make_rounds({{3, 3}, {2, 4}, {3, 2}, {2, 0}});
    const auto tokens = random_tokens(rng, static_cast<std::size_t>(rounds.back().question.end));
    const std::size_t lw = 2;
    const std::int64_t cur = rounds.back().question.begin;
    const std::vector<TokenSpan> kept{rounds[1].span()};

    KVCache full = make_cache(model.config());
    model.prefill(tokens, 0, full);
    const VisibilityMask mask = VisibilityMask::restricted(kept, cur);
    // Recompute the current round's upper rows under the mask so both caches agree on them.
    KVCache masked = make_cache(model.config());
    model.prefill(std::span<const TokenId>(tokens).first(static_cast<std::size_t>(cur)), 0, masked);
    ForwardOptions opts;
    opts.restriction = &mask;
    opts.restrict_from_layer = lw;
    const auto question = std::span<const TokenId>(tokens).subspan(static_cast<std::size_t>(cur));
    model.forward_range(model.embed(question, cur), masked, {0, 4}, opts);

    KVCache spliced = make_cache(model.config());
    model.prefill(std::span<const TokenId>(tokens).first(static_cast<std::size_t>(cur)), 0, spliced);
    for (std::size_t l = lw; l < 4; ++l) spliced[l] = spliced[l].slice(kept[0]);
    model.forward_range(model.embed(question, cur), spliced, {0, 4});

    const auto pos = rounds.back().question.end;
    const DecodeResult a = model.decode_step(masked, 7, pos, opts);
    const DecodeResult b = model.decode_step(spliced, 7, pos);
    for (std::size_t i = 0; i < a.logits.size(); ++i) EXPECT_NEAR(a.logits[i], b.logits[i], 1e-6);
    EXPECT_EQ(a.next, b.next);
}

TEST(Engine, MaskedForwardMatchesNaiveMaskedReference) {
    std::mt19937_64 rng(16);
    const Model model(small_config());
    const std::vector<Round> rounds = testing::make_rounds({{2, 2}, {2, 2}, {2, 0}});
    const auto tokens = random_tokens(rng, 10);
    const std::size_t lw = 2;
    const VisibilityMask mask = VisibilityMask::restricted({rounds[0].span()}, 8);
    ForwardOptions opts;
    opts.restriction = &mask;
    opts.restrict_from_layer = lw;
    KVCache cache = make_cache(model.config());
    const ForwardResult fr = model.prefill(tokens, 0, cache, opts);
    const testing::NaiveResult ref = testing::naive_forward(model, tokens, [&](std::size_t l, std::int64_t, std::int64_t k) {
        return l < lw || mask.key_allowed(k);
    });
    for (std::size_t t = 0; t < tokens.size(); ++t)
        for (std::size_t i = 0; i < 16; ++i)
            EXPECT_NEAR(fr.output.hidden(t, i), ref.hidden[t][i], 1e-5 * (1.0 + std::abs(ref.hidden[t][i])));
}

TEST(VisibilityMaskTest, RestrictedKeepsCurrentRoundVisible) {
    const VisibilityMask m = VisibilityMask::restricted({{2, 4}}, 10);
    EXPECT_FALSE(m.key_allowed(0));
    EXPECT_TRUE(m.key_allowed(2));
    EXPECT_TRUE(m.key_allowed(3));
    EXPECT_FALSE(m.key_allowed(4));
    EXPECT_TRUE(m.key_allowed(10));
    EXPECT_FALSE(m.visible(10, 11));
    EXPECT_TRUE(VisibilityMask::causal().key_allowed(0));
}

TEST(LayerKVTest, AppendRequiresIncreasingPositions) {
    LayerKV kv(2);
    const std::vector<float> row{1, 2};
    kv.append(row, row, 3);
    EXPECT_THROW(kv.append(row, row, 3), ShapeError);
    EXPECT_THROW(kv.append(std::vector<float>{1}, row, 4), ShapeError);
}

}  // namespace
}  // namespace roundattn
