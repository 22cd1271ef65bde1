// Copyright (C) 2026 The roundattn Authors
// SPDX-License-Identifier: Apache-2.0

#include "roundattn/tiered_store.hpp"

#include <algorithm>
#include <mutex>
#include <string>

#include "roundattn/error.hpp"

namespace roundattn {

const char* to_string(Half h) noexcept { return h == Half::lower ? "lower" : "upper"; }

const char* to_string(Tier t) noexcept {
    switch (t) {
    case Tier::device: return "device";
    case Tier::host: return "host";
    case Tier::dropped: return "dropped";
    }
    return "unknown";
}

namespace {

std::string describe(const BlockKey& k) {
    return "conversation " + std::to_string(k.conversation) + " round " + std::to_string(k.round) + " " +
           to_string(k.half) + " block";
}

}  // namespace

void StoreConfig::validate() const {
    if (layers == 0) throw ConfigError("store needs at least one layer");
    if (watershed == 0 || watershed >= layers)
        throw ConfigError("watershed layer must satisfy 0 < L_w < L (got L_w=" + std::to_string(watershed) +
                          ", L=" + std::to_string(layers) + ")");
    if (hidden == 0) throw ConfigError("hidden size must be positive");
    if (element_bytes == 0) throw ConfigError("element width must be positive");
}

void TransferLedger::record(Direction d, std::uint64_t bytes) {
    if (d == Direction::h2d) {
        m_h2d_events.fetch_add(1, std::memory_order_relaxed);
        m_h2d_bytes.fetch_add(bytes, std::memory_order_relaxed);
    } else {
        m_d2h_events.fetch_add(1, std::memory_order_relaxed);
        m_d2h_bytes.fetch_add(bytes, std::memory_order_relaxed);
    }
}

TransferCounters TransferLedger::totals() const {
    return {m_h2d_events.load(), m_h2d_bytes.load(), m_d2h_events.load(), m_d2h_bytes.load()};
}

TieredStore::TieredStore(const StoreConfig& config) : m_config(config) { m_config.validate(); }

std::uint64_t TieredStore::block_bytes(std::int64_t tokens, std::size_t layers) const noexcept {
    return 2ull * m_config.element_bytes * static_cast<std::uint64_t>(std::max<std::int64_t>(tokens, 0)) *
           m_config.hidden * layers;
}

std::size_t payload_floats(std::size_t layers, std::int64_t tokens, std::size_t d_model) {
    return 2 * layers * static_cast<std::size_t>(std::max<std::int64_t>(tokens, 0)) * d_model;
}

void TieredStore::put_round(ConversationId conv, std::size_t round, TokenSpan tokens, std::vector<float> lower_payload,
                            std::vector<float> upper_payload, Placement placement) {
    if (placement.lower == Tier::dropped || placement.upper == Tier::dropped)
        throw ConsistencyError("new blocks cannot be placed in the dropped tier");
    const LayerRange lo = m_config.lower();
    const LayerRange up = m_config.upper();
    const std::size_t lo_floats = payload_floats(lo.size(), tokens.size(), m_config.hidden);
    const std::size_t up_floats = payload_floats(up.size(), tokens.size(), m_config.hidden);
    if (lower_payload.size() != lo_floats || upper_payload.size() != up_floats)
        throw ShapeError("round " + std::to_string(round) + " payload sizes (" + std::to_string(lower_payload.size()) +
                         ", " + std::to_string(upper_payload.size()) + ") do not match " +
                         std::to_string(tokens.size()) + " tokens split at layer " +
                         std::to_string(m_config.watershed) + " (expected " + std::to_string(lo_floats) + ", " +
                         std::to_string(up_floats) + ")");

    std::unique_lock lock(m_mutex);
    const BlockKey lk{conv, round, Half::lower};
    const BlockKey uk{conv, round, Half::upper};
    if (m_blocks.contains(lk) || m_blocks.contains(uk))
        throw ConsistencyError("round " + std::to_string(round) + " of conversation " + std::to_string(conv) +
                               " is already stored");

    KVBlock lower{lk, lo, tokens, block_bytes(tokens.size(), lo.size()), placement.lower, std::move(lower_payload)};
    KVBlock upper{uk, up, tokens, block_bytes(tokens.size(), up.size()), placement.upper, std::move(upper_payload)};

    std::uint64_t device_add = 0;
    if (lower.tier == Tier::device) device_add += lower.byte_size;
    if (upper.tier == Tier::device) device_add += upper.byte_size;
    if (m_device_used + device_add > m_config.device_capacity_bytes)
        throw CapacityError(m_device_used + device_add, m_config.device_capacity_bytes);

    std::uint64_t d2h_bytes = 0;
    std::vector<BlockKey> written;
    for (const KVBlock* b : {&lower, &upper})
        if (b->tier == Tier::host) {
            d2h_bytes += b->byte_size;
            written.push_back(b->key);
        }

    m_device_used += device_add;
    m_blocks.emplace(lk, std::move(lower));
    m_blocks.emplace(uk, std::move(upper));
    if (!written.empty()) record(conv, Direction::d2h, d2h_bytes, std::move(written));
}

TransferResult TieredStore::move(ConversationId conv, std::span<const std::size_t> rounds, Half half, Tier from,
                                 Tier to) {
    std::unique_lock lock(m_mutex);
    std::vector<KVBlock*> moving;
    std::uint64_t bytes = 0;
    for (std::size_t r : rounds) {
        KVBlock& b = find({conv, r, half});
        if (b.tier == Tier::dropped)
            throw ConsistencyError(describe(b.key) + " was dropped and cannot be transferred");
        if (b.tier != from) continue;
        if (std::find(moving.begin(), moving.end(), &b) != moving.end()) continue;
        moving.push_back(&b);
        bytes += b.byte_size;
    }
    if (moving.empty()) return {};

    const Direction dir = to == Tier::device ? Direction::h2d : Direction::d2h;
    if (dir == Direction::h2d) {
        if (m_device_used + bytes > m_config.device_capacity_bytes)
            throw CapacityError(m_device_used + bytes, m_config.device_capacity_bytes);
        m_device_used += bytes;
    } else {
        m_device_used -= bytes;
    }
    std::vector<BlockKey> keys;
    keys.reserve(moving.size());
    for (KVBlock* b : moving) {
        b->tier = to;
        keys.push_back(b->key);
    }
    record(conv, dir, bytes, std::move(keys));
    return {1, bytes, moving.size()};
}

TransferResult TieredStore::fetch_lower_all(ConversationId conv, std::span<const std::size_t> rounds) {
    return move(conv, rounds, Half::lower, Tier::host, Tier::device);
}

TransferResult TieredStore::fetch_upper(ConversationId conv, std::span<const std::size_t> rounds) {
    return move(conv, rounds, Half::upper, Tier::host, Tier::device);
}

TransferResult TieredStore::writeback_upper(ConversationId conv, std::span<const std::size_t> rounds) {
    return move(conv, rounds, Half::upper, Tier::device, Tier::host);
}

TransferResult TieredStore::writeback_lower(ConversationId conv, std::span<const std::size_t> rounds) {
    return move(conv, rounds, Half::lower, Tier::device, Tier::host);
}

void TieredStore::drop_upper(ConversationId conv, std::size_t round) {
    std::unique_lock lock(m_mutex);
    KVBlock& b = find({conv, round, Half::upper});
    if (b.tier == Tier::device) m_device_used -= b.byte_size;
    b.tier = Tier::dropped;
    b.payload.clear();
    b.payload.shrink_to_fit();
}

bool TieredStore::contains(const BlockKey& key) const {
    std::shared_lock lock(m_mutex);
    return m_blocks.contains(key);
}

const KVBlock& TieredStore::block(const BlockKey& key) const {
    std::shared_lock lock(m_mutex);
    auto it = m_blocks.find(key);
    if (it == m_blocks.end()) throw ConsistencyError(describe(key) + " does not exist");
    return it->second;
}

KVBlock& TieredStore::find(const BlockKey& key) {
    auto it = m_blocks.find(key);
    if (it == m_blocks.end()) throw ConsistencyError(describe(key) + " does not exist");
    return it->second;
}

std::uint64_t TieredStore::device_used_bytes() const {
    std::shared_lock lock(m_mutex);
    return m_device_used;
}

void TieredStore::record(ConversationId conv, Direction d, std::uint64_t bytes, std::vector<BlockKey> blocks) {
    ConversationLedger& l = m_ledgers[conv];
    if (d == Direction::h2d) {
        ++l.totals.h2d_events;
        l.totals.h2d_bytes += bytes;
    } else {
        ++l.totals.d2h_events;
        l.totals.d2h_bytes += bytes;
    }
    l.events.push_back({d, bytes, std::move(blocks)});
    m_global.record(d, bytes);
}

void TieredStore::begin_turn(ConversationId conv) {
    std::unique_lock lock(m_mutex);
    m_turn_start[conv] = m_ledgers[conv].totals;
}

TurnTransferRecord TieredStore::close_turn(ConversationId conv, std::size_t turn) {
    std::unique_lock lock(m_mutex);
    ConversationLedger& l = m_ledgers[conv];
    const TransferCounters start = m_turn_start[conv];
    TurnTransferRecord rec{turn, l.totals - start, m_device_used};
    l.turns.push_back(rec);
    m_turn_start[conv] = l.totals;
    return rec;
}

ConversationLedger TieredStore::ledger(ConversationId conv) const {
    std::shared_lock lock(m_mutex);
    auto it = m_ledgers.find(conv);
    return it == m_ledgers.end() ? ConversationLedger{} : it->second;
}

std::vector<float> pack_block(const KVCache& cache, LayerRange layers, TokenSpan tokens) {
    if (layers.end > cache.size()) throw ShapeError("layer range exceeds cache depth");
    const std::size_t d = cache.empty() ? 0 : cache[layers.begin].d_model();
    std::vector<float> out;
    out.reserve(payload_floats(layers.size(), tokens.size(), d));
    for (std::size_t l = layers.begin; l < layers.end; ++l) {
        const LayerKV sub = cache[l].slice(tokens);
        if (static_cast<std::int64_t>(sub.rows()) != tokens.size())
            throw ShapeError("cache layer " + std::to_string(l) + " holds " + std::to_string(sub.rows()) +
                             " of the " + std::to_string(tokens.size()) + " requested positions");
        for (std::size_t i = 0; i < sub.rows(); ++i) out.insert(out.end(), sub.key(i).begin(), sub.key(i).end());
        for (std::size_t i = 0; i < sub.rows(); ++i)
            out.insert(out.end(), sub.value(i).begin(), sub.value(i).end());
    }
    return out;
}

void unpack_block(const KVBlock& block, KVCache& cache) {
    if (block.tier == Tier::dropped) throw ConsistencyError(describe(block.key) + " was dropped");
    if (block.layers.end > cache.size()) throw ShapeError("block layer range exceeds cache depth");
    const auto n = static_cast<std::size_t>(block.tokens.size());
    if (n == 0) return;
    const std::size_t d = cache[block.layers.begin].d_model();
    if (block.payload.size() != payload_floats(block.layers.size(), block.tokens.size(), d))
        throw ShapeError(describe(block.key) + " payload does not match cache width");
    const float* p = block.payload.data();
    for (std::size_t l = block.layers.begin; l < block.layers.end; ++l) {
        const float* keys = p;
        const float* values = p + n * d;
        LayerKV part(d);
        for (std::size_t i = 0; i < n; ++i)
            part.append({keys + i * d, d}, {values + i * d, d}, block.tokens.begin + static_cast<std::int64_t>(i));
        cache[l].extend(part);
        p += 2 * n * d;
    }
}

}  // namespace roundattn
