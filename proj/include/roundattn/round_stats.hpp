// Copyright (C) 2026 The roundattn Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "roundattn/conversation.hpp"
#include "roundattn/engine.hpp"

namespace roundattn {

enum class Segment { question, answer };

const char* to_string(Segment s) noexcept;

/// Per-round attention mass of one segment of the current round, for one layer.
struct RoundDistribution {
    std::size_t layer = 0;
    Segment segment = Segment::question;
    /// Round index of each entry.
    std::vector<std::size_t> rounds;
    std::vector<double> raw;
    std::vector<double> masses;
    /// Set when every raw entry was zero and the masses fell back to uniform.
    bool degenerate = false;

    std::size_t size() const noexcept { return masses.size(); }
};

/// entry k = sum over rows in `segment_rows` and keys in `prior_rounds[k]` of the captured score.
/// Throws ShapeError if any segment position has no row in `scores`.
std::vector<double> aggregate_round_attention(const LayerAttention& scores, std::span<const TokenSpan> prior_rounds,
                                              TokenSpan segment_rows);

/// Aggregates over rounds[0..current) for the chosen segment of rounds[current].
std::vector<double> aggregate_round_attention(const LayerAttention& scores, std::span<const Round> rounds,
                                              Segment segment, std::size_t current);

/// Throws InputError on a negative entry.
RoundDistribution normalize(std::span<const double> raw);

inline constexpr double kDefaultKlEpsilon = 1e-10;

/// Forward KL in nats after epsilon smoothing and renormalisation of both inputs.
double kl_divergence(std::span<const double> p, std::span<const double> q, double epsilon = kDefaultKlEpsilon);

/// values[l] = mean over l' > l of KL(P^l || P^l'), for l in [0, L-1).
struct KLCurve {
    std::vector<double> values;
    std::size_t layers = 0;
};

KLCurve kl_curve(std::span<const std::vector<double>> per_layer, double epsilon = kDefaultKlEpsilon);

enum class WatershedCriterion {
    largest_drop, /**< argmax over l of D(l-1) - D(l) */
    threshold     /**< smallest l >= 1 with D(l) <= tau */
};

const char* to_string(WatershedCriterion c) noexcept;

struct WatershedConfig {
    WatershedCriterion criterion = WatershedCriterion::largest_drop;
    double tau = 0.1;
};

struct WatershedResult {
    std::size_t watershed = 0;
    KLCurve mean_curve;
    std::string criterion;
    std::size_t corpus_size = 0;
};

/// Averages the curves pointwise and locates the watershed layer, 0 < L_w < L.
WatershedResult detect_watershed(std::span<const KLCurve> curves, const WatershedConfig& config = {});

/// Spearman rank correlation with average ranks for ties. Two constant inputs correlate 1,
/// one constant input against a varying one correlates 0.
double spearman_correlation(std::span<const double> a, std::span<const double> b);

/// Round-level statistics of the current round for every captured layer.
struct RoundAnalysis {
    std::size_t current_round = 0;
    std::vector<RoundDistribution> question;  // one per layer
    std::vector<RoundDistribution> answer;    // empty when the current round has no answer
    std::vector<double> spearman;             // per layer, only with answers
    KLCurve curve;                            // over question distributions
};

/// `captures` holds one LayerAttention per layer in layer order, covering the current round's rows.
RoundAnalysis analyze_round(std::span<const LayerAttention> captures, std::span<const Round> rounds,
                            std::size_t current);

/// Converts one layer of a trace into the capture layout.
LayerAttention trace_layer(const AttentionTrace& trace, std::size_t layer);

}  // namespace roundattn
