// Copyright (C) 2026 The roundattn Authors
// SPDX-License-Identifier: Apache-2.0

#include "roundattn/round_stats.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <unordered_map>

#include "roundattn/error.hpp"

namespace roundattn {

const char* to_string(Segment s) noexcept {
    return s == Segment::question ? "question" : "answer";
}

const char* to_string(WatershedCriterion c) noexcept {
    return c == WatershedCriterion::largest_drop ? "largest_drop" : "threshold";
}

std::vector<double> aggregate_round_attention(const LayerAttention& scores, std::span<const TokenSpan> prior_rounds,
                                              TokenSpan segment_rows) {
    // column -> prior round, or -1
    std::vector<std::ptrdiff_t> owner(scores.keys(), -1);
    for (std::size_t c = 0; c < scores.keys(); ++c) {
        const auto pos = scores.key_positions[c];
        for (std::size_t k = 0; k < prior_rounds.size(); ++k) {
            if (prior_rounds[k].contains(pos)) {
                owner[c] = static_cast<std::ptrdiff_t>(k);
                break;
            }
        }
    }

    std::vector<double> raw(prior_rounds.size(), 0.0);
    std::int64_t covered = 0;
    for (std::size_t r = 0; r < scores.rows(); ++r) {
        if (!segment_rows.contains(scores.row_positions[r]))
            continue;
        ++covered;
        const auto row = scores.row(r);
        for (std::size_t c = 0; c < row.size(); ++c) {
            if (owner[c] >= 0)
                raw[static_cast<std::size_t>(owner[c])] += static_cast<double>(row[c]);
        }
    }
    if (covered != segment_rows.size())
        throw ShapeError("scores cover " + std::to_string(covered) + " of " + std::to_string(segment_rows.size()) +
                         " segment rows");
    return raw;
}

std::vector<double> aggregate_round_attention(const LayerAttention& scores, std::span<const Round> rounds,
                                              Segment segment, std::size_t current) {
    if (current >= rounds.size())
        throw ShapeError("current round " + std::to_string(current) + " out of range");
    std::vector<TokenSpan> prior;
    prior.reserve(current);
    for (std::size_t k = 0; k < current; ++k)
        prior.push_back(rounds[k].span());
    const TokenSpan rows = segment == Segment::question ? rounds[current].question : rounds[current].answer;
    return aggregate_round_attention(scores, prior, rows);
}

RoundDistribution normalize(std::span<const double> raw) {
    RoundDistribution d;
    d.raw.assign(raw.begin(), raw.end());
    d.rounds.resize(raw.size());
    std::iota(d.rounds.begin(), d.rounds.end(), std::size_t{0});
    double total = 0.0;
    for (std::size_t i = 0; i < raw.size(); ++i) {
        if (raw[i] < 0.0 || !std::isfinite(raw[i]))
            throw InputError("round mass " + std::to_string(i) + " is negative or non-finite");
        total += raw[i];
    }
    d.masses.resize(raw.size());
    if (total > 0.0) {
        for (std::size_t i = 0; i < raw.size(); ++i)
            d.masses[i] = raw[i] / total;
    } else if (!raw.empty()) {
        d.degenerate = true;
        std::fill(d.masses.begin(), d.masses.end(), 1.0 / static_cast<double>(raw.size()));
    }
    return d;
}

double kl_divergence(std::span<const double> p, std::span<const double> q, double epsilon) {
    if (p.size() != q.size())
        throw InputError("KL inputs differ in length (" + std::to_string(p.size()) + " vs " +
                         std::to_string(q.size()) + ")");
    if (epsilon < 0.0)
        throw InputError("KL epsilon must be non-negative");
    double sp = 0.0;
    double sq = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        sp += p[i] + epsilon;
        sq += q[i] + epsilon;
    }
    if (!(sp > 0.0) || !(sq > 0.0))
        return 0.0;
    double kl = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double pi = (p[i] + epsilon) / sp;
        const double qi = (q[i] + epsilon) / sq;
        if (pi > 0.0)
            kl += pi * std::log(pi / qi);
    }
    // Rounding can push the sum a hair below zero.
    return std::max(0.0, kl);
}

KLCurve kl_curve(std::span<const std::vector<double>> per_layer, double epsilon) {
    const std::size_t L = per_layer.size();
    if (L < 2)
        throw InputError("a KL curve needs at least 2 layers");
    for (const auto& p : per_layer) {
        if (p.size() != per_layer.front().size())
            throw InputError("per-layer distributions differ in length");
    }
    KLCurve curve;
    curve.layers = L;
    curve.values.resize(L - 1);
    for (std::size_t l = 0; l + 1 < L; ++l) {
        double sum = 0.0;
        for (std::size_t m = l + 1; m < L; ++m)
            sum += kl_divergence(per_layer[l], per_layer[m], epsilon);
        curve.values[l] = sum / static_cast<double>(L - 1 - l);
    }
    return curve;
}

WatershedResult detect_watershed(std::span<const KLCurve> curves, const WatershedConfig& config) {
    if (curves.empty())
        throw InputError("watershed detection needs at least one KL curve");
    const std::size_t L = curves.front().layers;
    for (const auto& c : curves) {
        if (c.layers != L || c.values.size() + 1 != L)
            throw InputError("KL curves disagree on the layer count");
    }
    if (L < 2)
        throw InputError("watershed undefined for fewer than 2 layers");

    WatershedResult result;
    result.corpus_size = curves.size();
    result.mean_curve.layers = L;
    result.mean_curve.values.resize(L - 1);
    std::vector<double> column(curves.size());
    for (std::size_t l = 0; l + 1 < L; ++l) {
        for (std::size_t i = 0; i < curves.size(); ++i)
            column[i] = curves[i].values[l];
        // Sorted summation keeps the mean independent of corpus order.
        std::sort(column.begin(), column.end());
        double sum = 0.0;
        for (double v : column)
            sum += v;
        result.mean_curve.values[l] = sum / static_cast<double>(curves.size());
    }
    const auto& d = result.mean_curve.values;

    auto largest_drop = [&]() -> std::size_t {
        std::size_t best = 1;
        double best_drop = -std::numeric_limits<double>::infinity();
        for (std::size_t l = 1; l + 1 < L; ++l) {
            const double drop = d[l - 1] - d[l];
            if (drop > best_drop) {
                best_drop = drop;
                best = l;
            }
        }
        return best;
    };

    if (config.criterion == WatershedCriterion::threshold) {
        result.criterion = "threshold";
        for (std::size_t l = 1; l + 1 < L; ++l) {
            if (d[l] <= config.tau) {
                result.watershed = l;
                return result;
            }
        }
        result.criterion = "threshold(fallback:largest_drop)";
        result.watershed = largest_drop();
        return result;
    }
    result.criterion = "largest_drop";
    result.watershed = largest_drop();
    return result;
}

namespace {

std::vector<double> average_ranks(std::span<const double> v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> ranks(v.size());
    std::size_t i = 0;
    while (i < idx.size()) {
        std::size_t j = i;
        while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]])
            ++j;
        const double r = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k)
            ranks[idx[k]] = r;
        i = j + 1;
    }
    return ranks;
}

}  // namespace

double spearman_correlation(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size())
        throw InputError("spearman inputs differ in length");
    if (a.empty())
        return 1.0;
    const auto ra = average_ranks(a);
    const auto rb = average_ranks(b);
    const double n = static_cast<double>(a.size());
    const double mean_a = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
    const double mean_b = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
    double cov = 0.0;
    double va = 0.0;
    double vb = 0.0;
    for (std::size_t i = 0; i < ra.size(); ++i) {
        cov += (ra[i] - mean_a) * (rb[i] - mean_b);
        va += (ra[i] - mean_a) * (ra[i] - mean_a);
        vb += (rb[i] - mean_b) * (rb[i] - mean_b);
    }
    if (va == 0.0 && vb == 0.0)
        return 1.0;
    if (va == 0.0 || vb == 0.0)
        return 0.0;
    return std::clamp(cov / std::sqrt(va * vb), -1.0, 1.0);
}

RoundAnalysis analyze_round(std::span<const LayerAttention> captures, std::span<const Round> rounds,
                            std::size_t current) {
    if (current == 0 || current >= rounds.size())
        throw InputError("round analysis needs a current round with at least one prior round");
    RoundAnalysis out;
    out.current_round = current;
    const bool with_answer = !rounds[current].answer.empty();
    std::vector<std::vector<double>> pq;
    for (const auto& la : captures) {
        auto dq = normalize(aggregate_round_attention(la, rounds, Segment::question, current));
        dq.layer = la.layer;
        dq.segment = Segment::question;
        pq.push_back(dq.masses);
        if (with_answer) {
            auto da = normalize(aggregate_round_attention(la, rounds, Segment::answer, current));
            da.layer = la.layer;
            da.segment = Segment::answer;
            out.spearman.push_back(spearman_correlation(dq.masses, da.masses));
            out.answer.push_back(std::move(da));
        }
        out.question.push_back(std::move(dq));
    }
    if (pq.size() >= 2)
        out.curve = kl_curve(pq);
    return out;
}

LayerAttention trace_layer(const AttentionTrace& trace, std::size_t layer) {
    if (layer >= trace.num_layers)
        throw ShapeError("trace layer out of range");
    LayerAttention la;
    la.layer = layer;
    la.row_positions.resize(trace.seq_len);
    la.key_positions.resize(trace.seq_len);
    std::iota(la.row_positions.begin(), la.row_positions.end(), std::int64_t{0});
    std::iota(la.key_positions.begin(), la.key_positions.end(), std::int64_t{0});
    const auto s = trace.layer(layer);
    la.scores.assign(s.begin(), s.end());
    return la;
}

}  // namespace roundattn
