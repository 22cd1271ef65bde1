// Copyright (C) 2026 The roundattn Authors
// SPDX-License-Identifier: Apache-2.0

#include "roundattn/selection.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "roundattn/error.hpp"

namespace roundattn {

namespace {

/// Entry indices ordered by mass descending, index ascending.
std::vector<std::size_t> by_mass(const RoundDistribution& p) {
    std::vector<std::size_t> order(p.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return p.masses[a] > p.masses[b]; });
    return order;
}

SelectionResult finish(const RoundDistribution& p, std::vector<std::size_t> entries, std::size_t min_rounds,
                       StrategyKind kind) {
    const std::size_t floor_count = std::min(min_rounds, p.size());
    if (entries.size() < floor_count) {
        std::vector<bool> taken(p.size(), false);
        for (auto e : entries)
            taken[e] = true;
        for (auto e : by_mass(p)) {
            if (entries.size() >= floor_count)
                break;
            if (!taken[e]) {
                taken[e] = true;
                entries.push_back(e);
            }
        }
    }
    SelectionResult r;
    r.policy = kind;
    r.snapshot = p;
    for (auto e : entries) {
        r.kept.push_back(p.rounds.empty() ? e : p.rounds[e]);
        r.kept_mass += p.masses[e];
    }
    std::sort(r.kept.begin(), r.kept.end());
    return r;
}

}  // namespace

const char* to_string(StrategyKind k) noexcept {
    switch (k) {
    case StrategyKind::fixed:
        return "fixed";
    case StrategyKind::top_percent:
        return "top_percent";
    case StrategyKind::adaptive:
        return "adaptive";
    case StrategyKind::all:
        return "all";
    case StrategyKind::token_baseline:
        return "token_baseline";
    }
    return "unknown";
}

StrategyKind parse_strategy(const std::string& name) {
    if (name == "fixed")
        return StrategyKind::fixed;
    if (name == "top" || name == "top_percent")
        return StrategyKind::top_percent;
    if (name == "adaptive")
        return StrategyKind::adaptive;
    if (name == "all")
        return StrategyKind::all;
    if (name == "token" || name == "token_baseline")
        return StrategyKind::token_baseline;
    throw ConfigError("unknown strategy '" + name + "'");
}

void SelectionPolicy::validate() const {
    if (!(v > 0.0 && v < 1.0))
        throw ConfigError("threshold v must lie in (0, 1)");
    if (!(fraction > 0.0 && fraction <= 1.0))
        throw ConfigError("fraction must lie in (0, 1]");
    if (min_rounds < 1)
        throw ConfigError("min_rounds must be >= 1");
    if (!std::isfinite(kappa))
        throw ConfigError("kappa must be finite");
}

SelectionResult select_fixed(const RoundDistribution& p, double v, std::size_t min_rounds) {
    std::vector<std::size_t> entries;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (p.masses[i] > v)
            entries.push_back(i);
    }
    return finish(p, std::move(entries), min_rounds, StrategyKind::fixed);
}

std::size_t top_percent_count(std::size_t available, double fraction, std::size_t min_rounds) {
    const double raw = fraction * static_cast<double>(available);
    // 0.1 * 30 evaluates to 3.0000000000000004; do not let that round up to 4.
    const auto wanted = static_cast<std::size_t>(std::ceil(raw - 1e-9 * std::max(1.0, raw)));
    return std::min(available, std::max(min_rounds, wanted));
}

SelectionResult select_top_percent(const RoundDistribution& p, double fraction, std::size_t min_rounds) {
    const std::size_t k = top_percent_count(p.size(), fraction, min_rounds);
    auto order = by_mass(p);
    order.resize(k);
    return finish(p, std::move(order), min_rounds, StrategyKind::top_percent);
}

SelectionResult select_adaptive(const RoundDistribution& p, double kappa, std::size_t min_rounds) {
    std::vector<std::size_t> entries;
    if (!p.masses.empty()) {
        const auto [lo, hi] = std::minmax_element(p.masses.begin(), p.masses.end());
        double mean = *lo;
        double stddev = 0.0;
        if (*lo != *hi) {
            const double n = static_cast<double>(p.size());
            mean = std::accumulate(p.masses.begin(), p.masses.end(), 0.0) / n;
            double var = 0.0;
            for (double m : p.masses)
                var += (m - mean) * (m - mean);
            stddev = std::sqrt(var / n);
        }
        const double cut = mean + kappa * stddev;
        for (std::size_t i = 0; i < p.size(); ++i) {
            if (p.masses[i] > cut)
                entries.push_back(i);
        }
    }
    return finish(p, std::move(entries), min_rounds, StrategyKind::adaptive);
}

SelectionResult select_all(const RoundDistribution& p) {
    std::vector<std::size_t> entries(p.size());
    std::iota(entries.begin(), entries.end(), std::size_t{0});
    return finish(p, std::move(entries), 1, StrategyKind::all);
}

SelectionResult select_rounds(const RoundDistribution& p, const SelectionPolicy& policy) {
    switch (policy.kind) {
    case StrategyKind::fixed:
        return select_fixed(p, policy.v, policy.min_rounds);
    case StrategyKind::top_percent:
        return select_top_percent(p, policy.fraction, policy.min_rounds);
    case StrategyKind::adaptive:
        return select_adaptive(p, policy.kappa, policy.min_rounds);
    case StrategyKind::all:
        return select_all(p);
    case StrategyKind::token_baseline:
        break;
    }
    throw ConfigError("token_baseline selects tokens, not rounds");
}

std::vector<TokenSpan> contiguous_segments(std::span<const std::int64_t> sorted_positions) {
    std::vector<TokenSpan> out;
    for (auto pos : sorted_positions) {
        if (!out.empty() && out.back().end == pos)
            out.back().end = pos + 1;
        else
            out.push_back(TokenSpan{pos, pos + 1});
    }
    return out;
}

TokenSelection select_token_baseline(const LayerAttention& scores, TokenSpan query_rows,
                                     std::span<const TokenSpan> candidate_spans) {
    TokenSelection sel;
    std::vector<std::size_t> cols;
    for (std::size_t c = 0; c < scores.keys(); ++c) {
        const auto pos = scores.key_positions[c];
        for (const auto& s : candidate_spans) {
            if (s.contains(pos)) {
                cols.push_back(c);
                sel.candidates.push_back(pos);
                break;
            }
        }
    }
    sel.scores.assign(cols.size(), 0.0);
    std::size_t rows = 0;
    for (std::size_t r = 0; r < scores.rows(); ++r) {
        if (!query_rows.contains(scores.row_positions[r]))
            continue;
        ++rows;
        for (std::size_t i = 0; i < cols.size(); ++i)
            sel.scores[i] += static_cast<double>(scores.at(r, cols[i]));
    }
    if (rows == 0 || cols.empty())
        return sel;
    for (auto& s : sel.scores)
        s /= static_cast<double>(rows);

    sel.total_mass = std::accumulate(sel.scores.begin(), sel.scores.end(), 0.0);
    const double mean = sel.total_mass / static_cast<double>(sel.scores.size());
    for (std::size_t i = 0; i < cols.size(); ++i) {
        if (sel.scores[i] > mean) {
            sel.kept.push_back(sel.candidates[i]);
            sel.kept_mass += sel.scores[i];
        }
    }
    if (sel.kept.empty()) {
        const auto best = static_cast<std::size_t>(
            std::distance(sel.scores.begin(), std::max_element(sel.scores.begin(), sel.scores.end())));
        sel.kept.push_back(sel.candidates[best]);
        sel.kept_mass = sel.scores[best];
    }
    sel.segments = contiguous_segments(sel.kept);
    return sel;
}

void ActivityLedger::add_round(std::size_t round) {
    if (round != m_idle.size())
        throw ConsistencyError("rounds must be registered in order (expected " + std::to_string(m_idle.size()) +
                               ", got " + std::to_string(round) + ")");
    m_idle.push_back(0);
    m_dropped.push_back(false);
}

std::vector<std::size_t> ActivityLedger::update_activity_and_drop(std::span<const std::size_t> kept,
                                                                  const DropPolicy& policy) {
    std::vector<bool> selected(m_idle.size(), false);
    for (auto k : kept) {
        if (k >= m_idle.size())
            throw ConsistencyError("selected round " + std::to_string(k) + " is not registered");
        selected[k] = true;
    }
    const std::size_t n = m_idle.size();
    const std::size_t protected_from = n > policy.protect_recent ? n - policy.protect_recent : 0;
    std::vector<std::size_t> dropped;
    for (std::size_t m = 0; m < n; ++m) {
        if (m_dropped[m])
            continue;
        m_idle[m] = selected[m] ? 0 : m_idle[m] + 1;
        if (policy.window && !selected[m] && m < protected_from && m_idle[m] >= *policy.window) {
            m_dropped[m] = true;
            dropped.push_back(m);
        }
    }
    return dropped;
}

bool ActivityLedger::is_dropped(std::size_t round) const {
    return round < m_dropped.size() && m_dropped[round];
}

std::size_t ActivityLedger::idle_turns(std::size_t round) const {
    return m_idle.at(round);
}

std::vector<std::size_t> ActivityLedger::live_rounds() const {
    std::vector<std::size_t> out;
    for (std::size_t m = 0; m < m_dropped.size(); ++m) {
        if (!m_dropped[m])
            out.push_back(m);
    }
    return out;
}

}  // namespace roundattn
