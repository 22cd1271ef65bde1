// Copyright (C) 2026 The roundattn Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <atomic>
#include <compare>
#include <cstddef>
#include <cstdint>
#include <map>
#include <shared_mutex>
#include <span>
#include <vector>

#include "roundattn/conversation.hpp"
#include "roundattn/engine.hpp"

namespace roundattn {

using ConversationId = std::uint64_t;

/// Lower blocks hold layers [0, L_w), upper blocks [L_w, L).
enum class Half : std::uint8_t { lower, upper };
enum class Tier : std::uint8_t { device, host, dropped };

const char* to_string(Half h) noexcept;
const char* to_string(Tier t) noexcept;

struct BlockKey {
    ConversationId conversation = 0;
    std::size_t round = 0;
    Half half = Half::lower;

    auto operator<=>(const BlockKey&) const = default;
};

/// One round's KV rows for a contiguous layer range, stored as a single payload:
/// for each layer, all key rows then all value rows.
struct KVBlock {
    BlockKey key;
    LayerRange layers;
    TokenSpan tokens;
    std::uint64_t byte_size = 0;
    Tier tier = Tier::host;
    std::vector<float> payload;
};

struct StoreConfig {
    std::size_t layers = 8;
    std::size_t watershed = 3;
    /// Hidden size H used for byte accounting.
    std::size_t hidden = 64;
    std::uint64_t device_capacity_bytes = 64ull << 20;
    /// Modelled bytes per element (float16).
    std::uint64_t element_bytes = 2;

    void validate() const;
    LayerRange lower() const noexcept { return {0, watershed}; }
    LayerRange upper() const noexcept { return {watershed, layers}; }
};

struct TransferCounters {
    std::uint64_t h2d_events = 0;
    std::uint64_t h2d_bytes = 0;
    std::uint64_t d2h_events = 0;
    std::uint64_t d2h_bytes = 0;

    friend bool operator==(const TransferCounters&, const TransferCounters&) = default;
    TransferCounters operator-(const TransferCounters& o) const {
        return {h2d_events - o.h2d_events, h2d_bytes - o.h2d_bytes, d2h_events - o.d2h_events, d2h_bytes - o.d2h_bytes};
    }
};

enum class Direction : std::uint8_t { h2d, d2h };

struct TransferEvent {
    Direction direction = Direction::h2d;
    std::uint64_t bytes = 0;
    std::vector<BlockKey> blocks;
};

struct TurnTransferRecord {
    std::size_t turn = 0;
    TransferCounters delta;
    std::uint64_t device_used_bytes = 0;
};

/// Transfer history of one conversation.
struct ConversationLedger {
    TransferCounters totals;
    std::vector<TransferEvent> events;
    std::vector<TurnTransferRecord> turns;
};

/// Process-wide transfer counters. Increments are atomic.
class TransferLedger {
public:
    void record(Direction d, std::uint64_t bytes);
    TransferCounters totals() const;

private:
    std::atomic<std::uint64_t> m_h2d_events{0};
    std::atomic<std::uint64_t> m_h2d_bytes{0};
    std::atomic<std::uint64_t> m_d2h_events{0};
    std::atomic<std::uint64_t> m_d2h_bytes{0};
};

struct Placement {
    Tier lower = Tier::device;
    Tier upper = Tier::host;
};

struct TransferResult {
    std::size_t events = 0;
    std::uint64_t bytes = 0;
    std::size_t blocks_moved = 0;
};

/// Simulated two-tier KV store addressed by (conversation, round, half). Blocks move between
/// tiers whole; every batched move is one ledger event.
class TieredStore {
public:
    explicit TieredStore(const StoreConfig& config);

    const StoreConfig& config() const noexcept { return m_config; }

    /// Modelled size: 2 (K and V) * element_bytes * tokens * H * layers.
    std::uint64_t block_bytes(std::int64_t tokens, std::size_t layers) const noexcept;

    /// Stores both halves of round `round`. Halves placed on the host are written in one d2h event.
    void put_round(ConversationId conv, std::size_t round, TokenSpan tokens, std::vector<float> lower_payload,
                   std::vector<float> upper_payload, Placement placement = {});

    /// Moves every host-resident lower block of `rounds` to the device in one h2d event.
    TransferResult fetch_lower_all(ConversationId conv, std::span<const std::size_t> rounds);
    /// Moves the host-resident upper blocks of `rounds` to the device in one h2d event.
    TransferResult fetch_upper(ConversationId conv, std::span<const std::size_t> rounds);
    /// Moves the device-resident upper blocks of `rounds` to the host in one d2h event.
    TransferResult writeback_upper(ConversationId conv, std::span<const std::size_t> rounds);
    TransferResult writeback_lower(ConversationId conv, std::span<const std::size_t> rounds);

    /// Purges an upper block; it keeps its key but no payload.
    void drop_upper(ConversationId conv, std::size_t round);

    bool contains(const BlockKey& key) const;
    const KVBlock& block(const BlockKey& key) const;
    Tier tier(const BlockKey& key) const { return block(key).tier; }

    std::uint64_t device_used_bytes() const;
    std::uint64_t device_capacity_bytes() const noexcept { return m_config.device_capacity_bytes; }

    /// Snapshot of the conversation's counters; the next close_turn reports the delta since then.
    void begin_turn(ConversationId conv);
    TurnTransferRecord close_turn(ConversationId conv, std::size_t turn);

    ConversationLedger ledger(ConversationId conv) const;
    TransferCounters totals() const { return m_global.totals(); }

private:
    TransferResult move(ConversationId conv, std::span<const std::size_t> rounds, Half half, Tier from, Tier to);
    void record(ConversationId conv, Direction d, std::uint64_t bytes, std::vector<BlockKey> blocks);
    KVBlock& find(const BlockKey& key);

    StoreConfig m_config;
    mutable std::shared_mutex m_mutex;
    std::map<BlockKey, KVBlock> m_blocks;
    std::uint64_t m_device_used = 0;
    std::map<ConversationId, ConversationLedger> m_ledgers;
    std::map<ConversationId, TransferCounters> m_turn_start;
    TransferLedger m_global;
};

/// Number of floats in a payload covering `layers` for `tokens` rows of width `d_model`.
std::size_t payload_floats(std::size_t layers, std::int64_t tokens, std::size_t d_model);
/// Copies the rows of `cache` at positions in `tokens` for every layer in `layers`.
std::vector<float> pack_block(const KVCache& cache, LayerRange layers, TokenSpan tokens);
/// Appends the block's rows to the matching layers of `cache`.
void unpack_block(const KVBlock& block, KVCache& cache);

}  // namespace roundattn
