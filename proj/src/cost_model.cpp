// Copyright (C) 2026 The roundattn Authors
// SPDX-License-Identifier: Apache-2.0

#include "roundattn/cost_model.hpp"

#include <cmath>

#include "roundattn/error.hpp"

namespace roundattn {

void CostModel::validate() const {
    for (double v : {h2d_us_per_kib, d2h_us_per_kib, ns_per_1024_macs, step_overhead_us})
        if (!(v >= 0.0) || !std::isfinite(v)) throw ConfigError("cost model parameters must be finite and >= 0");
}

const char* to_string(Step s) noexcept {
    switch (s) {
    case Step::calc_qkv_and_rope: return "calc_qkv_and_rope";
    case Step::update_cache: return "update_cache";
    case Step::attn_forward: return "attn_forward";
    case Step::attn_output: return "attn_output";
    }
    return "unknown";
}

const char* to_string(Phase p) noexcept { return p == Phase::append ? "append" : "decode"; }

double CostBreakdown::at(std::size_t layer, Step step, Phase phase) const {
    for (const CostEntry& e : entries)
        if (e.layer == layer && e.step == step && e.phase == phase) return e.cost;
    return 0.0;
}

double CostBreakdown::phase_total(Phase phase) const {
    double sum = 0.0;
    for (const CostEntry& e : entries)
        if (e.phase == phase) sum += e.cost;
    return sum;
}

CostBreakdown simulate_costs(const TurnShape& shape, const CostModel& model) {
    model.validate();
    if (shape.layers == 0 || shape.d_model == 0) throw ConfigError("cost model needs positive layer count and width");
    if (shape.split && (shape.watershed == 0 || shape.watershed >= shape.layers))
        throw ConfigError("watershed layer out of range for the cost model");
    if (shape.history_tokens < 0 || shape.kept_tokens < 0 || shape.kept_tokens > shape.history_tokens ||
        shape.question_tokens < 0 || shape.decode_tokens < 0)
        throw ConfigError("turn shape token counts are inconsistent");

    const double d = static_cast<double>(shape.d_model);
    const double q = static_cast<double>(shape.question_tokens);
    const double n = static_cast<double>(shape.decode_tokens);
    const double overhead = model.step_overhead_us;

    CostBreakdown out;
    out.entries.reserve(2 * 4 * shape.layers);
    for (Phase phase : {Phase::append, Phase::decode}) {
        const double rows = phase == Phase::append ? q : n;
        const double calls = phase == Phase::append ? (q > 0 ? 1.0 : 0.0) : n;
        for (std::size_t l = 0; l < shape.layers; ++l) {
            const bool upper = shape.split && l >= shape.watershed;
            const double ctx = static_cast<double>(upper ? shape.kept_tokens : shape.history_tokens);
            // Keys visible to all rows of the phase: context plus the causal part of the current round.
            double visible = 0.0;
            if (phase == Phase::append)
                visible = q * ctx + q * (q + 1.0) / 2.0;
            else
                visible = n * (ctx + q) + n * (n + 1.0) / 2.0;

            for (Step step : kSteps) {
                double cost = calls * overhead;
                switch (step) {
                case Step::calc_qkv_and_rope: cost += model.compute_us(3.0 * rows * d * d); break;
                case Step::update_cache:
                    if (phase == Phase::append && shape.split && shape.selection && l == shape.watershed)
                        cost += model.compute_us(static_cast<double>(shape.selection_macs)) +
                                overhead * static_cast<double>(shape.upper_transfer_calls) +
                                model.h2d_us(shape.upper_h2d_bytes);
                    break;
                case Step::attn_forward: cost += model.compute_us(2.0 * d * visible); break;
                case Step::attn_output: cost += model.compute_us(rows * d * d); break;
                }
                out.entries.push_back({l, step, phase, cost});
                out.step_total += cost;
            }
        }
    }
    out.lower_h2d_cost = model.h2d_us(shape.lower_h2d_bytes);
    out.d2h_cost = model.d2h_us(shape.d2h_bytes);
    out.transfer_total = out.lower_h2d_cost + out.d2h_cost;
    out.total = out.step_total + out.transfer_total;
    return out;
}

}  // namespace roundattn
