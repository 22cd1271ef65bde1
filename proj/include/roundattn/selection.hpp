// Copyright (C) 2026 The roundattn Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "roundattn/round_stats.hpp"

namespace roundattn {

enum class StrategyKind { fixed, top_percent, adaptive, all, token_baseline };

const char* to_string(StrategyKind k) noexcept;
/// Accepts the CLI spellings: fixed, top, adaptive, all, token (and the long enum names).
StrategyKind parse_strategy(const std::string& name);

struct SelectionPolicy {
    StrategyKind kind = StrategyKind::top_percent;
    double v = 0.1;
    double fraction = 0.1;
    double kappa = 1.0;
    std::size_t min_rounds = 1;

    /// Throws ConfigError when v is outside (0,1), fraction outside (0,1] or min_rounds is 0.
    void validate() const;
};

struct SelectionResult {
    /// Selected round indices, ascending.
    std::vector<std::size_t> kept;
    StrategyKind policy = StrategyKind::all;
    RoundDistribution snapshot;
    /// Sum of the selected masses.
    double kept_mass = 0.0;

    std::size_t K() const noexcept { return kept.size(); }
};

/// Rounds with mass strictly above v; padded to min_rounds with the largest remaining masses.
SelectionResult select_fixed(const RoundDistribution& p, double v, std::size_t min_rounds = 1);
/// The max(min_rounds, ceil(fraction * n)) largest masses; ties go to the smaller index.
SelectionResult select_top_percent(const RoundDistribution& p, double fraction = 0.1, std::size_t min_rounds = 1);
/// Rounds with mass strictly above mean + kappa * std (population std), padded like select_fixed.
SelectionResult select_adaptive(const RoundDistribution& p, double kappa = 1.0, std::size_t min_rounds = 1);
SelectionResult select_all(const RoundDistribution& p);

/// Dispatches on policy.kind. token_baseline is not a round strategy and throws ConfigError.
SelectionResult select_rounds(const RoundDistribution& p, const SelectionPolicy& policy);

/// Number of rounds select_top_percent keeps out of `available`.
std::size_t top_percent_count(std::size_t available, double fraction, std::size_t min_rounds);

struct TokenSelection {
    /// Kept key positions, ascending.
    std::vector<std::int64_t> kept;
    /// Maximal runs of consecutive kept positions.
    std::vector<TokenSpan> segments;
    std::vector<std::int64_t> candidates;
    /// Mean attention per candidate, aligned with `candidates`.
    std::vector<double> scores;
    double kept_mass = 0.0;
    double total_mass = 0.0;
};

/// Token-granularity comparator: mean attention of the rows in `query_rows` over every key
/// position inside `candidate_spans`; keeps tokens strictly above the mean, else the argmax token.
TokenSelection select_token_baseline(const LayerAttention& scores, TokenSpan query_rows,
                                     std::span<const TokenSpan> candidate_spans);

std::vector<TokenSpan> contiguous_segments(std::span<const std::int64_t> sorted_positions);

struct DropPolicy {
    /// Turns without selection before a round is dropped; nullopt disables dropping.
    std::optional<std::size_t> window = 8;
    /// The most recent rounds that are never dropped.
    std::size_t protect_recent = 2;
};

/// Per-round count of turns since the round was last selected.
class ActivityLedger {
public:
    void add_round(std::size_t round);

    /// Records one turn: kept rounds reset to 0, every other live round ages by one.
    /// Returns the rounds newly dropped this turn.
    std::vector<std::size_t> update_activity_and_drop(std::span<const std::size_t> kept, const DropPolicy& policy);

    bool is_dropped(std::size_t round) const;
    std::size_t idle_turns(std::size_t round) const;
    std::size_t round_count() const noexcept { return m_idle.size(); }
    /// Rounds not dropped, ascending.
    std::vector<std::size_t> live_rounds() const;

private:
    std::vector<std::size_t> m_idle;
    std::vector<bool> m_dropped;
};

}  // namespace roundattn
