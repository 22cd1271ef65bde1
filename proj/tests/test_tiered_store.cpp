// Copyright (C) 2026 The roundattn Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <random>
#include <thread>

#include "roundattn/error.hpp"
#include "roundattn/memory_model.hpp"
#include "roundattn/tiered_store.hpp"

namespace roundattn {
namespace {

StoreConfig config_8_3() {
    StoreConfig c;
    c.layers = 8;
    c.watershed = 3;
    c.hidden = 64;
    return c;
}

void put(TieredStore& s, ConversationId conv, std::size_t round, TokenSpan span, Placement p = {}) {
    const StoreConfig& c = s.config();
    s.put_round(conv, round, span, std::vector<float>(payload_floats(c.watershed, span.size(), c.hidden), 1.0f),
                std::vector<float>(payload_floats(c.layers - c.watershed, span.size(), c.hidden), 2.0f), p);
}

TEST(PutRound, BlockSizes) {
    TieredStore s(config_8_3());
    put(s, 1, 0, {0, 10});
    EXPECT_EQ(s.block({1, 0, Half::lower}).byte_size, 7680u);
    EXPECT_EQ(s.block({1, 0, Half::upper}).byte_size, 12800u);
    EXPECT_EQ(s.tier({1, 0, Half::lower}), Tier::device);
    EXPECT_EQ(s.tier({1, 0, Half::upper}), Tier::host);
    EXPECT_EQ(s.device_used_bytes(), 7680u);
}

TEST(PutRound, OneWriteEvent) {
    TieredStore s(config_8_3());
    put(s, 1, 0, {0, 10});
    const ConversationLedger l = s.ledger(1);
    EXPECT_EQ(l.totals.d2h_events, 1u);
    EXPECT_EQ(l.totals.d2h_bytes, 12800u);
    EXPECT_EQ(l.totals.h2d_events, 0u);
}

TEST(PutRound, SecondPutIsRejected) {
    TieredStore s(config_8_3());
    put(s, 1, 0, {0, 10});
    EXPECT_THROW(put(s, 1, 0, {0, 10}), ConsistencyError);
    EXPECT_NO_THROW(put(s, 2, 0, {0, 10}));
}

TEST(PutRound, PayloadShapeChecked) {
    TieredStore s(config_8_3());
    EXPECT_THROW(s.put_round(1, 0, {0, 10}, std::vector<float>(5), std::vector<float>(5)), ShapeError);
}

TEST(PutRound, CapacityErrorNamesBytes) {
    StoreConfig c = config_8_3();
    c.device_capacity_bytes = 10000;
    TieredStore s(c);
    put(s, 1, 0, {0, 10});
    try {
        put(s, 1, 1, {10, 20});
        FAIL() << "expected a capacity error";
    } catch (const CapacityError& e) {
        EXPECT_EQ(e.required(), 15360u);
        EXPECT_EQ(e.available(), 10000u);
    }
}

TEST(FetchLowerAll, NoOpCases) {
    TieredStore s(config_8_3());
    EXPECT_EQ(s.fetch_lower_all(1, {}).events, 0u);
    put(s, 1, 0, {0, 10});
    const std::vector<std::size_t> r{0};
    EXPECT_EQ(s.fetch_lower_all(1, r).events, 0u);
    EXPECT_EQ(s.ledger(1).totals.h2d_events, 0u);
}

TEST(FetchLowerAll, BatchesHostBlocks) {
    TieredStore s(config_8_3());
    std::uint64_t total = 0;
    std::vector<std::size_t> rounds;
    for (std::size_t r = 0; r < 5; ++r) {
        put(s, 1, r, {static_cast<std::int64_t>(r * 10), static_cast<std::int64_t>(r * 10 + 3 + r)},
            {Tier::host, Tier::host});
        total += s.block({1, r, Half::lower}).byte_size;
        rounds.push_back(r);
    }
    const TransferResult t = s.fetch_lower_all(1, rounds);
    EXPECT_EQ(t.events, 1u);
    EXPECT_EQ(t.bytes, total);
    EXPECT_EQ(s.ledger(1).totals.h2d_events, 1u);
    EXPECT_EQ(s.ledger(1).totals.h2d_bytes, total);
}

TEST(FetchUpper, OneEventForSelection) {
    TieredStore s(config_8_3());
    for (std::size_t r = 0; r < 6; ++r) put(s, 1, r, {static_cast<std::int64_t>(r * 10), static_cast<std::int64_t>(r * 10 + 10)});
    const std::vector<std::size_t> kept{1, 3, 4};
    const TransferResult t = s.fetch_upper(1, kept);
    EXPECT_EQ(t.events, 1u);
    EXPECT_EQ(t.bytes, 3u * 12800u);
    EXPECT_EQ(s.fetch_upper(1, {}).events, 0u);
}

TEST(FetchUpper, DroppedRoundIsConsistencyError) {
    TieredStore s(config_8_3());
    put(s, 1, 0, {0, 10});
    s.drop_upper(1, 0);
    EXPECT_EQ(s.tier({1, 0, Half::upper}), Tier::dropped);
    EXPECT_TRUE(s.block({1, 0, Half::upper}).payload.empty());
    const std::vector<std::size_t> kept{0};
    EXPECT_THROW(s.fetch_upper(1, kept), ConsistencyError);
}

TEST(WritebackUpper, OneEventReleasesDeviceBytes) {
    TieredStore s(config_8_3());
    std::vector<std::size_t> rounds;
    for (std::size_t r = 0; r < 4; ++r) {
        put(s, 1, r, {static_cast<std::int64_t>(r * 10), static_cast<std::int64_t>(r * 10 + 10)}, {Tier::device, Tier::device});
        rounds.push_back(r);
    }
    const std::uint64_t before = s.device_used_bytes();
    const TransferResult t = s.writeback_upper(1, rounds);
    EXPECT_EQ(t.events, 1u);
    EXPECT_EQ(before - s.device_used_bytes(), 4u * 12800u);
    EXPECT_EQ(s.writeback_upper(1, {}).events, 0u);
}

TEST(Store, ConservationAndLedgerReplay) {
    TieredStore s(config_8_3());
    std::mt19937_64 rng(1);
    std::size_t rounds = 0;
    for (int step = 0; step < 200; ++step) {
        const int op = static_cast<int>(rng() % 5);
        std::vector<std::size_t> pick;
        for (std::size_t r = 0; r < rounds; ++r)
            if (rng() % 2 && !(s.tier({1, r, Half::upper}) == Tier::dropped)) pick.push_back(r);
        if (op == 0 || rounds == 0) {
            const auto begin = static_cast<std::int64_t>(rounds * 8);
            put(s, 1, rounds, {begin, begin + 1 + static_cast<std::int64_t>(rng() % 7)},
                {rng() % 2 ? Tier::device : Tier::host, rng() % 2 ? Tier::device : Tier::host});
            ++rounds;
        } else if (op == 1) {
            s.fetch_upper(1, pick);
        } else if (op == 2) {
            s.writeback_upper(1, pick);
        } else if (op == 3) {
            s.fetch_lower_all(1, pick);
        } else if (!pick.empty()) {
            s.drop_upper(1, pick.front());
        }
    }
    std::uint64_t device = 0;
    for (std::size_t r = 0; r < rounds; ++r)
        for (Half h : {Half::lower, Half::upper}) {
            const KVBlock& b = s.block({1, r, h});
            if (b.tier == Tier::device) device += b.byte_size;
            if (b.tier == Tier::dropped) {
                EXPECT_TRUE(b.payload.empty());
            }
        }
    EXPECT_EQ(device, s.device_used_bytes());

    const ConversationLedger l = s.ledger(1);
    std::uint64_t h2d = 0, d2h = 0;
    std::uint64_t h2d_events = 0;
    for (const TransferEvent& e : l.events) {
        std::uint64_t sum = 0;
        for (const BlockKey& k : e.blocks) sum += s.block(k).byte_size;
        EXPECT_EQ(sum, e.bytes);
        (e.direction == Direction::h2d ? h2d : d2h) += e.bytes;
        h2d_events += e.direction == Direction::h2d ? 1 : 0;
    }
    EXPECT_EQ(h2d, l.totals.h2d_bytes);
    EXPECT_EQ(d2h, l.totals.d2h_bytes);
    EXPECT_EQ(h2d_events, l.totals.h2d_events);
}

TEST(Store, PerTurnRecords) {
    TieredStore s(config_8_3());
    s.begin_turn(1);
    put(s, 1, 0, {0, 10});
    const TurnTransferRecord a = s.close_turn(1, 0);
    EXPECT_EQ(a.delta.d2h_events, 1u);
    s.begin_turn(1);
    const std::vector<std::size_t> kept{0};
    s.fetch_upper(1, kept);
    const TurnTransferRecord b = s.close_turn(1, 1);
    EXPECT_EQ(b.delta.d2h_events, 0u);
    EXPECT_EQ(b.delta.h2d_events, 1u);
    EXPECT_EQ(s.ledger(1).turns.size(), 2u);
}

TEST(Store, ConcurrentConversationsKeepExactCounts) {
    StoreConfig c = config_8_3();
    c.device_capacity_bytes = 1ull << 30;
    TieredStore s(c);
    constexpr int kThreads = 8;
    constexpr int kRounds = 50;
    std::vector<std::thread> workers;
    for (int t = 0; t < kThreads; ++t)
        workers.emplace_back([&s, t] {
            for (int r = 0; r < kRounds; ++r) {
                put(s, static_cast<ConversationId>(t), static_cast<std::size_t>(r), {r * 4, r * 4 + 4});
                const std::vector<std::size_t> one{static_cast<std::size_t>(r)};
                s.fetch_upper(static_cast<ConversationId>(t), one);
                s.writeback_upper(static_cast<ConversationId>(t), one);
            }
        });
    for (auto& w : workers) w.join();
    const TransferCounters totals = s.totals();
    EXPECT_EQ(totals.h2d_events, static_cast<std::uint64_t>(kThreads * kRounds));
    EXPECT_EQ(totals.d2h_events, static_cast<std::uint64_t>(2 * kThreads * kRounds));
    EXPECT_EQ(totals.h2d_bytes, static_cast<std::uint64_t>(kThreads * kRounds) * 4 * 4 * 64 * 5);
}

TEST(PackBlock, RoundTripsThroughCache) {
    KVCache cache(4, LayerKV(2));
    for (std::size_t l = 0; l < 4; ++l)
        for (std::int64_t p = 0; p < 6; ++p) {
            const std::vector<float> k{static_cast<float>(l), static_cast<float>(p)};
            const std::vector<float> v{static_cast<float>(p), -static_cast<float>(l)};
            cache[l].append(k, v, p);
        }
    KVBlock b;
    b.layers = {1, 3};
    b.tokens = {2, 5};
    b.payload = pack_block(cache, b.layers, b.tokens);
    EXPECT_EQ(b.payload.size(), payload_floats(2, 3, 2));
    KVCache out(4, LayerKV(2));
    unpack_block(b, out);
    EXPECT_TRUE(out[0].empty());
    ASSERT_EQ(out[1].rows(), 3u);
    EXPECT_EQ(out[2].position(0), 2);
    EXPECT_EQ(out[2].key(1)[1], 3.0f);
    EXPECT_EQ(out[2].value(2)[1], -2.0f);
}

TEST(MemoryRatio, Examples) {
    EXPECT_NEAR(memory_ratio(28, 5, 0, 1), 5.0 / 28.0, 1e-12);
    EXPECT_EQ(save_percent(28, 5, 0, 1), 82);
    EXPECT_DOUBLE_EQ(memory_ratio(24, 11, 10, 10), 1.0);
    EXPECT_EQ(save_percent(24, 11, 10, 10), 0);
    EXPECT_NEAR(memory_ratio(24, 11, 2, 10), 136.0 / 240.0, 1e-12);
}

TEST(MemoryRatio, DomainErrors) {
    EXPECT_THROW(memory_ratio(24, 0, 0, 1), ConfigError);
    EXPECT_THROW(memory_ratio(24, 24, 0, 1), ConfigError);
    EXPECT_THROW(memory_ratio(24, 11, 3, 2), ConfigError);
    EXPECT_THROW(memory_ratio(24, 11, 0, 0), ConfigError);
}

TEST(MemoryRatio, MonotoneWithFloorAtWatershedShare) {
    for (std::size_t lw = 1; lw < 24; ++lw)
        for (std::size_t k = 0; k < 20; ++k) {
            EXPECT_LT(memory_ratio(24, lw, k, 20), memory_ratio(24, lw, k + 1, 20));
            if (lw + 1 < 24) {
                EXPECT_LT(memory_ratio(24, lw, k, 20), memory_ratio(24, lw + 1, k, 20));
            }
            EXPECT_GE(memory_ratio(24, lw, k, 20), static_cast<double>(lw) / 24.0);
        }
}

TEST(Footprint, OriginalBytes) {
    const FootprintReport r = footprint_report({1, 1024, 896, 24, 11, 0, 1});
    EXPECT_EQ(r.original_bytes, 88080384.0);
}

TEST(Footprint, RatioMatchesMemoryRatio) {
    std::mt19937_64 rng(2);
    for (int t = 0; t < 100; ++t) {
        FootprintParams p;
        p.batch = 1 + rng() % 8;
        p.seq_len = 1 + rng() % 8192;
        p.hidden = 64 * (1 + rng() % 128);
        p.layers = 2 + rng() % 100;
        p.watershed = 1 + rng() % (p.layers - 1);
        p.total_rounds = 1 + rng() % 200;
        p.kept = rng() % (p.total_rounds + 1);
        EXPECT_NEAR(footprint_report(p).ratio, memory_ratio(p.layers, p.watershed, p.kept, p.total_rounds), 1e-12);
    }
}

TEST(ReferenceRows, ReportedSavingsReproduce) {
    ASSERT_EQ(reference_rows().size(), 10u);
    for (const ReferenceModelRow& r : reference_rows())
        EXPECT_EQ(save_percent(r.layers, r.watershed, 0, 1), r.reported_save_percent) << r.family << " " << r.size;
    // 1 - 18/80 = 77.5% rounds half up.
    EXPECT_EQ(save_percent(80, 18, 0, 1), 78);
    EXPECT_EQ(save_percent(36, 12, 0, 1), 67);
}

}  // namespace
}  // namespace roundattn
