// Copyright (C) 2026 The roundattn Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "roundattn/conversation.hpp"
#include "roundattn/cost_model.hpp"
#include "roundattn/engine.hpp"
#include "roundattn/round_stats.hpp"
#include "roundattn/selection.hpp"
#include "roundattn/tiered_store.hpp"

namespace roundattn {

enum class PipelineMode { round_attention, baseline };

const char* to_string(PipelineMode m) noexcept;

struct PipelineConfig {
    PipelineMode mode = PipelineMode::round_attention;
    /// First upper layer (0-based); layers [0, watershed) form the lower block.
    std::size_t watershed = 3;
    SelectionPolicy policy;
    DropPolicy drop;
    CostModel cost;

    void validate(const ModelConfig& model) const;
};

/// Transfer bookkeeping of the token-granularity comparator.
struct TokenTransferStats {
    std::size_t kept_tokens = 0;
    std::size_t candidate_tokens = 0;
    /// Maximal runs of consecutive kept tokens; each is a separate copy.
    std::size_t segments = 0;
    /// segments * upper layers
    std::size_t layer_touches = 0;
    std::uint64_t bytes = 0;
};

struct TurnMetrics {
    std::size_t round = 0;
    PipelineMode mode = PipelineMode::round_attention;
    StrategyKind policy = StrategyKind::all;
    bool has_history = false;

    std::size_t selection_invocations = 0;
    std::size_t lower_h2d_events = 0;
    std::size_t upper_h2d_events = 0;
    std::size_t d2h_events = 0;
    std::uint64_t lower_h2d_bytes = 0;
    std::uint64_t upper_h2d_bytes = 0;
    std::uint64_t d2h_bytes = 0;

    /// Prior rounds available for selection (not dropped).
    std::size_t candidate_rounds = 0;
    std::vector<std::size_t> kept_rounds;
    double kept_mass = 0.0;
    std::vector<std::size_t> dropped_rounds;

    std::int64_t history_tokens = 0;
    /// Prior-round tokens visible to the upper layers.
    std::int64_t tokens_attended = 0;
    std::int64_t question_tokens = 0;
    std::int64_t decode_tokens = 0;

    /// Modelled device bytes while the upper layers run.
    std::uint64_t device_bytes_upper_phase = 0;

    std::optional<TokenTransferStats> token;
    TurnShape shape;
    CostBreakdown cost;

    std::size_t K() const noexcept { return kept_rounds.size(); }
};

struct TurnOutput {
    /// Tokens appended as the answer span: the separator and every generated token fed back.
    std::vector<TokenId> answer_tokens;
    std::string text;
    /// Logits of every decode step.
    std::vector<std::vector<float>> logits;
    TurnMetrics metrics;
};

/// Visibility for the given layer half: lower layers are causal; upper layers additionally
/// hide prior rounds that are not kept. Keys at or after `current_begin` stay visible.
VisibilityMask restricted_attention_mask(std::span<const std::size_t> kept, std::span<const Round> rounds,
                                         std::int64_t current_begin, bool upper_layer);

/// One conversation's per-turn state. Turns run strictly in order.
class Session {
public:
    Session(const Model& model, TieredStore& store, ConversationId id, PipelineConfig config);

    const PipelineConfig& config() const noexcept { return m_config; }
    ConversationId id() const noexcept { return m_id; }
    std::size_t round_count() const noexcept { return m_rounds.size(); }
    std::span<const Round> rounds() const noexcept { return m_rounds; }
    std::span<const TokenId> tokens() const noexcept { return m_tokens; }
    const ActivityLedger& activity() const noexcept { return m_activity; }

    /// Prefills completed rounds with full attention in one pass. In round-attention mode the
    /// blocks land on the host, as for a returning user.
    void ingest_history(std::span<const Round> rounds, std::span<const TokenId> tokens);

    /// `question` is a full question span (separator included).
    TurnOutput run_turn(std::span<const TokenId> question, int max_decode_steps);

    /// Writes every device-resident block back to the host.
    void end_session();

private:
    TurnOutput run_round_turn(std::span<const TokenId> question, int max_decode_steps);
    TurnOutput run_token_turn(std::span<const TokenId> question, int max_decode_steps);
    TurnOutput run_baseline_turn(std::span<const TokenId> question, int max_decode_steps);

    void decode(TurnOutput& out, int max_decode_steps, const ForwardOptions& options);
    void append_round(std::span<const TokenId> question, std::span<const TokenId> answer);
    std::vector<std::size_t> all_rounds() const;
    std::int64_t tokens_in(std::span<const std::size_t> rounds) const;
    void finish_metrics(TurnMetrics& m) const;

    const Model& m_model;
    TieredStore& m_store;
    ConversationId m_id;
    PipelineConfig m_config;
    StoreConfig m_block_layout;

    std::vector<Round> m_rounds;
    std::vector<TokenId> m_tokens;
    /// Working device cache. In round-attention mode the lower layers hold every resident lower
    /// block and the upper layers are empty between turns.
    KVCache m_cache;
    bool m_lower_resident = true;
    ActivityLedger m_activity;
};

/// Full-history turn: every layer attends to every prior round and nothing is offloaded.
/// The session must be in baseline mode.
TurnOutput run_turn_baseline(Session& baseline_session, std::span<const TokenId> question, int max_decode_steps);

/// Full-attention prefills of every conversation with at least two rounds; the question
/// distributions of each final round feed detect_watershed.
WatershedResult calibrate_watershed(const Model& model, std::span<const Conversation> corpus,
                                    const WatershedConfig& config = {});

}  // namespace roundattn
