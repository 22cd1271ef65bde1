// Copyright (C) 2026 The roundattn Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <vector>

namespace roundattn {

/// Simulated costs in microseconds. Only meaningful relative to each other.
struct CostModel {
    double h2d_us_per_kib = 0.05;
    double d2h_us_per_kib = 0.05;
    double ns_per_1024_macs = 1.0;
    double step_overhead_us = 1.0;

    void validate() const;
    double compute_us(double macs) const noexcept { return macs / 1024.0 * ns_per_1024_macs / 1000.0; }
    double h2d_us(std::uint64_t bytes) const noexcept { return static_cast<double>(bytes) / 1024.0 * h2d_us_per_kib; }
    double d2h_us(std::uint64_t bytes) const noexcept { return static_cast<double>(bytes) / 1024.0 * d2h_us_per_kib; }
};

enum class Step : std::uint8_t { calc_qkv_and_rope, update_cache, attn_forward, attn_output };
enum class Phase : std::uint8_t { append, decode };

inline constexpr std::array<Step, 4> kSteps{Step::calc_qkv_and_rope, Step::update_cache, Step::attn_forward,
                                            Step::attn_output};

const char* to_string(Step s) noexcept;
const char* to_string(Phase p) noexcept;

/// Work done by one turn, as seen by the cost model.
struct TurnShape {
    std::size_t layers = 8;
    /// First upper layer. With `split` false every layer attends to the full history.
    std::size_t watershed = 3;
    bool split = true;
    std::size_t d_model = 64;
    /// Prior-round tokens visible in lower layers.
    std::int64_t history_tokens = 0;
    /// Prior-round tokens visible in upper layers.
    std::int64_t kept_tokens = 0;
    std::int64_t question_tokens = 0;
    /// decode_step calls.
    std::int64_t decode_tokens = 0;
    bool selection = false;
    /// Additions performed by the round aggregation.
    std::uint64_t selection_macs = 0;
    std::uint64_t upper_h2d_bytes = 0;
    /// Separate host-to-device copies for the upper layers: one batched copy for rounds,
    /// one per segment and layer for the token comparator.
    std::uint64_t upper_transfer_calls = 0;
    std::uint64_t lower_h2d_bytes = 0;
    std::uint64_t d2h_bytes = 0;
};

struct CostEntry {
    std::size_t layer = 0;
    Step step = Step::calc_qkv_and_rope;
    Phase phase = Phase::append;
    double cost = 0.0;
};

struct CostBreakdown {
    /// Ordered by phase, then layer, then step.
    std::vector<CostEntry> entries;
    double lower_h2d_cost = 0.0;
    double d2h_cost = 0.0;
    double step_total = 0.0;
    double transfer_total = 0.0;
    /// step_total + transfer_total
    double total = 0.0;

    double at(std::size_t layer, Step step, Phase phase) const;
    double phase_total(Phase phase) const;
};

/// Four steps per layer for the append phase (all question tokens at once) and the decode phase
/// (summed over decode steps). Upper-block h2d and selection are charged to update_cache of the
/// first upper layer in the append phase; lower h2d and the d2h writeback are transfer costs.
CostBreakdown simulate_costs(const TurnShape& shape, const CostModel& model);

}  // namespace roundattn
