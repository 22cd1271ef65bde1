// Copyright (C) 2026 The roundattn Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include "roundattn/cost_model.hpp"
#include "roundattn/error.hpp"
#include "support/oracles.hpp"

namespace roundattn {
namespace {

using testing::BreakevenScenario;

TEST(CostModel, ConservationAcrossEntries) {
    const BreakevenScenario sc;
    const CostModel model;
    for (std::int64_t n : {0, 1, 7, 40}) {
        for (const TurnShape& shape : {sc.round_shape(n), sc.baseline_shape(n)}) {
            const CostBreakdown b = simulate_costs(shape, model);
            ASSERT_EQ(b.entries.size(), 2u * 4u * shape.layers);
            double sum = 0.0;
            for (const CostEntry& e : b.entries) {
                EXPECT_GE(e.cost, 0.0);
                sum += e.cost;
            }
            EXPECT_NEAR(sum, b.step_total, 1e-9);
            EXPECT_NEAR(b.phase_total(Phase::append) + b.phase_total(Phase::decode), b.step_total, 1e-9);
            EXPECT_NEAR(b.step_total + b.transfer_total, b.total, 1e-9);
        }
    }
}

TEST(CostModel, SelectionSpikeAtFirstUpperLayer) {
    const BreakevenScenario sc;
    const CostBreakdown b = simulate_costs(sc.round_shape(4), CostModel{});
    const double spike = b.at(sc.watershed, Step::update_cache, Phase::append);
    for (std::size_t l = 0; l < sc.layers; ++l) {
        if (l != sc.watershed) {
            EXPECT_GT(spike, b.at(l, Step::update_cache, Phase::append));
        }
    }
    EXPECT_DOUBLE_EQ(b.at(sc.watershed, Step::update_cache, Phase::decode),
                     b.at(sc.watershed + 1, Step::update_cache, Phase::decode));
}

TEST(CostModel, AllRoundsKeptMatchesBaselineOutsideTheSpike) {
    BreakevenScenario sc;
    sc.kept_rounds = sc.rounds;
    TurnShape ra = sc.round_shape(6);
    TurnShape base = sc.baseline_shape(6);
    const CostBreakdown a = simulate_costs(ra, CostModel{});
    const CostBreakdown b = simulate_costs(base, CostModel{});
    for (std::size_t i = 0; i < a.entries.size(); ++i) {
        const CostEntry& e = a.entries[i];
        if (e.layer == sc.watershed && e.step == Step::update_cache && e.phase == Phase::append) continue;
        EXPECT_DOUBLE_EQ(e.cost, b.entries[i].cost);
    }
}

TEST(CostModel, DecodeAttentionCheaperInUpperLayers) {
    const BreakevenScenario sc;
    const CostBreakdown a = simulate_costs(sc.round_shape(16), CostModel{});
    const CostBreakdown b = simulate_costs(sc.baseline_shape(16), CostModel{});
    for (std::size_t l = 0; l < sc.layers; ++l) {
        if (l < sc.watershed)
            EXPECT_DOUBLE_EQ(a.at(l, Step::attn_forward, Phase::decode), b.at(l, Step::attn_forward, Phase::decode));
        else
            EXPECT_LT(a.at(l, Step::attn_forward, Phase::decode), b.at(l, Step::attn_forward, Phase::decode));
    }
}

TEST(CostModel, VisibleKeyCounts) {
    TurnShape s;
    s.layers = 2;
    s.watershed = 1;
    s.d_model = 4;
    s.history_tokens = 10;
    s.kept_tokens = 3;
    s.question_tokens = 2;
    s.decode_tokens = 3;
    CostModel m;
    m.step_overhead_us = 0.0;
    m.ns_per_1024_macs = 1024.0 * 1000.0;
    const CostBreakdown b = simulate_costs(s, m);
    // append: rows see history plus a causal question prefix
    EXPECT_DOUBLE_EQ(b.at(0, Step::attn_forward, Phase::append), 2.0 * 4 * (2 * 10 + 3));
    EXPECT_DOUBLE_EQ(b.at(1, Step::attn_forward, Phase::append), 2.0 * 4 * (2 * 3 + 3));
    EXPECT_DOUBLE_EQ(b.at(1, Step::attn_forward, Phase::decode), 2.0 * 4 * (3 * (3 + 2) + 6));
    EXPECT_DOUBLE_EQ(b.at(0, Step::calc_qkv_and_rope, Phase::decode), 3.0 * 3 * 16);
    EXPECT_DOUBLE_EQ(b.at(0, Step::attn_output, Phase::append), 2.0 * 16);
}

TEST(CostModel, RejectsBadShapes) {
    TurnShape s;
    s.kept_tokens = 5;
    EXPECT_THROW(simulate_costs(s, CostModel{}), ConfigError);
    TurnShape w;
    w.watershed = w.layers;
    EXPECT_THROW(simulate_costs(w, CostModel{}), ConfigError);
    CostModel neg;
    neg.h2d_us_per_kib = -1.0;
    EXPECT_THROW(simulate_costs(TurnShape{}, neg), ConfigError);
}

TEST(CostModel, BreakevenMatchesClosedForm) {
    const BreakevenScenario sc;
    const CostModel model;
    const std::int64_t star = sc.closed_form_breakeven(model);
    ASSERT_GT(star, 1);
    auto gap = [&](std::int64_t n) {
        return simulate_costs(sc.round_shape(n), model).total - simulate_costs(sc.baseline_shape(n), model).total;
    };
    EXPECT_GT(gap(0), 0.0);
    EXPECT_GE(gap(star - 1), 0.0);
    for (std::int64_t n = star; n < star + 64; ++n) EXPECT_LT(gap(n), 0.0) << n;
}

}  // namespace
}  // namespace roundattn
