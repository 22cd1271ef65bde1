// Copyright (C) 2026 The roundattn Authors
// SPDX-License-Identifier: Apache-2.0

#include "roundattn/pipeline.hpp"

#include <algorithm>
#include <numeric>

#include "roundattn/error.hpp"

namespace roundattn {

const char* to_string(PipelineMode m) noexcept {
    return m == PipelineMode::round_attention ? "round_attention" : "baseline";
}

void PipelineConfig::validate(const ModelConfig& model) const {
    if (model.layers < 2) throw ConfigError("round attention needs at least two layers");
    if (watershed == 0 || watershed >= model.layers)
        throw ConfigError("watershed layer must satisfy 0 < L_w < L (got L_w=" + std::to_string(watershed) +
                          ", L=" + std::to_string(model.layers) + ")");
    policy.validate();
    cost.validate();
}

VisibilityMask restricted_attention_mask(std::span<const std::size_t> kept, std::span<const Round> rounds,
                                         std::int64_t current_begin, bool upper_layer) {
    if (!upper_layer) return VisibilityMask::causal();
    std::vector<TokenSpan> allowed;
    allowed.reserve(kept.size());
    for (std::size_t r : kept) {
        if (r >= rounds.size()) throw ConsistencyError("kept round " + std::to_string(r) + " does not exist");
        allowed.push_back(rounds[r].span());
    }
    return VisibilityMask::restricted(std::move(allowed), current_begin);
}

Session::Session(const Model& model, TieredStore& store, ConversationId id, PipelineConfig config)
    : m_model(model), m_store(store), m_id(id), m_config(std::move(config)), m_cache(make_cache(model.config())) {
    m_config.validate(model.config());
    const StoreConfig& sc = store.config();
    if (sc.layers != model.config().layers || sc.watershed != m_config.watershed)
        throw ConfigError("store layer split (" + std::to_string(sc.watershed) + "/" + std::to_string(sc.layers) +
                          ") does not match the pipeline (" + std::to_string(m_config.watershed) + "/" +
                          std::to_string(model.config().layers) + ")");
    m_block_layout = sc;
}

std::vector<std::size_t> Session::all_rounds() const {
    std::vector<std::size_t> r(m_rounds.size());
    std::iota(r.begin(), r.end(), std::size_t{0});
    return r;
}

std::int64_t Session::tokens_in(std::span<const std::size_t> rounds) const {
    std::int64_t n = 0;
    for (std::size_t r : rounds) n += m_rounds[r].span().size();
    return n;
}

void Session::ingest_history(std::span<const Round> rounds, std::span<const TokenId> tokens) {
    if (!m_rounds.empty()) throw ConsistencyError("history must be ingested before the first turn");
    if (rounds.empty()) return;
    for (std::size_t i = 0; i < rounds.size(); ++i) {
        if (rounds[i].index != i || rounds[i].answer.empty())
            throw StructureError("history round " + std::to_string(i) + " is incomplete or out of order");
        if (rounds[i].question.begin != (i == 0 ? 0 : rounds[i - 1].answer.end))
            throw StructureError("history round " + std::to_string(i) + " is not contiguous");
    }
    const std::int64_t end = rounds.back().answer.end;
    if (static_cast<std::int64_t>(tokens.size()) < end) throw StructureError("history spans exceed the token list");

    m_rounds.assign(rounds.begin(), rounds.end());
    m_tokens.assign(tokens.begin(), tokens.begin() + end);
    m_model.prefill(m_tokens, 0, m_cache);

    if (m_config.mode == PipelineMode::baseline || m_config.policy.kind == StrategyKind::token_baseline) return;

    const LayerRange lo = m_block_layout.lower();
    const LayerRange up = m_block_layout.upper();
    for (const Round& r : m_rounds) {
        m_store.put_round(m_id, r.index, r.span(), pack_block(m_cache, lo, r.span()), pack_block(m_cache, up, r.span()),
                          Placement{Tier::host, Tier::host});
        m_activity.add_round(r.index);
    }
    m_cache = make_cache(m_model.config());
    m_lower_resident = false;
}

TurnOutput Session::run_turn(std::span<const TokenId> question, int max_decode_steps) {
    if (max_decode_steps <= 0) throw ConfigError("max_decode_steps must be positive");
    if (question.empty()) throw StructureError("question span is empty");
    if (m_config.mode == PipelineMode::baseline) return run_baseline_turn(question, max_decode_steps);
    if (m_config.policy.kind == StrategyKind::token_baseline) return run_token_turn(question, max_decode_steps);
    return run_round_turn(question, max_decode_steps);
}

TurnOutput run_turn_baseline(Session& session, std::span<const TokenId> question, int max_decode_steps) {
    if (session.config().mode != PipelineMode::baseline)
        throw ConfigError("run_turn_baseline needs a session in baseline mode");
    return session.run_turn(question, max_decode_steps);
}

void Session::decode(TurnOutput& out, int max_decode_steps, const ForwardOptions& options) {
    std::int64_t pos = static_cast<std::int64_t>(m_tokens.size());
    TokenId feed = kSeparatorToken;
    std::vector<TokenId> generated;
    for (int step = 0; step < max_decode_steps; ++step) {
        DecodeResult r = m_model.decode_step(m_cache, feed, pos, options);
        out.answer_tokens.push_back(feed);
        m_tokens.push_back(feed);
        out.logits.push_back(std::move(r.logits));
        ++pos;
        if (r.next == kEndOfTextToken) break;
        generated.push_back(r.next);
        feed = r.next;
    }
    out.text = roundattn::decode(generated);
    out.metrics.decode_tokens = static_cast<std::int64_t>(out.answer_tokens.size());
}

void Session::append_round(std::span<const TokenId> question, std::span<const TokenId> answer) {
    Round r;
    r.index = m_rounds.size();
    const std::int64_t start = static_cast<std::int64_t>(m_tokens.size() - answer.size() - question.size());
    r.question = {start, start + static_cast<std::int64_t>(question.size())};
    r.answer = {r.question.end, r.question.end + static_cast<std::int64_t>(answer.size())};
    m_rounds.push_back(r);
}

void Session::finish_metrics(TurnMetrics& m) const {
    m.cost = simulate_costs(m.shape, m_config.cost);
}

TurnOutput Session::run_round_turn(std::span<const TokenId> question, int max_decode_steps) {
    TurnOutput out;
    TurnMetrics& m = out.metrics;
    const std::size_t n = m_rounds.size();
    const std::size_t lw = m_config.watershed;
    const std::size_t layers = m_model.config().layers;
    const LayerRange lo{0, lw};
    const LayerRange up{lw, layers};
    m.round = n;
    m.mode = PipelineMode::round_attention;
    m.policy = m_config.policy.kind;
    m.has_history = n > 0;
    m_store.begin_turn(m_id);

    // (1) lower blocks of every prior round on the device
    const std::vector<std::size_t> prior = all_rounds();
    const TransferResult lower = m_store.fetch_lower_all(m_id, prior);
    if (!m_lower_resident) {
        for (std::size_t r : prior) unpack_block(m_store.block({m_id, r, Half::lower}), m_cache);
        m_lower_resident = true;
    }
    m.lower_h2d_events = lower.events;
    m.lower_h2d_bytes = lower.bytes;

    // (2) lower-layer prefill of the question, capturing the last lower layer
    const auto qbegin = static_cast<std::int64_t>(m_tokens.size());
    const TokenSpan qspan{qbegin, qbegin + static_cast<std::int64_t>(question.size())};
    m_tokens.insert(m_tokens.end(), question.begin(), question.end());
    ForwardOptions lower_opts;
    if (n > 0) {
        lower_opts.capture = LayerRange{lw - 1, lw};
        lower_opts.capture_from_position = qbegin;
    }
    ForwardResult lower_out = m_model.forward_range(m_model.embed(question, qbegin), m_cache, lo, lower_opts);

    std::vector<std::size_t> kept;
    if (n > 0) {
        const std::vector<std::size_t> live = m_activity.live_rounds();
        m.candidate_rounds = live.size();
        std::vector<TokenSpan> spans;
        for (std::size_t r : live) spans.push_back(m_rounds[r].span());
        const std::vector<double> raw = aggregate_round_attention(lower_out.captures.front(), spans, qspan);
        RoundDistribution dist = normalize(raw);
        dist.layer = lw - 1;
        dist.rounds = live;
        ++m.selection_invocations;
        if (!live.empty()) {
            SelectionResult sel = select_rounds(dist, m_config.policy);
            kept = std::move(sel.kept);
            m.kept_mass = sel.kept_mass;
        }
    }
    m.kept_rounds = kept;

    // (3) one batched fetch of the kept upper blocks, spliced in round order
    const TransferResult upper = m_store.fetch_upper(m_id, kept);
    m.upper_h2d_events = upper.events;
    m.upper_h2d_bytes = upper.bytes;
    for (std::size_t r : kept) unpack_block(m_store.block({m_id, r, Half::upper}), m_cache);
    m.device_bytes_upper_phase = m_store.device_used_bytes();

    // (4) upper-layer prefill over the spliced cache, (5) decode under the same restriction
    m_model.forward_range(lower_out.output, m_cache, up);
    decode(out, max_decode_steps, {});

    append_round(question, out.answer_tokens);
    const Round& cur = m_rounds.back();
    m_store.put_round(m_id, n, cur.span(), pack_block(m_cache, lo, cur.span()), pack_block(m_cache, up, cur.span()),
                      Placement{Tier::device, Tier::device});
    std::vector<std::size_t> back = kept;
    back.push_back(n);
    const TransferResult wb = m_store.writeback_upper(m_id, back);
    m.d2h_events = wb.events;
    m.d2h_bytes = wb.bytes;
    for (std::size_t l = lw; l < layers; ++l) m_cache[l] = LayerKV(m_model.config().d_model);

    m.dropped_rounds = m_activity.update_activity_and_drop(kept, m_config.drop);
    for (std::size_t r : m.dropped_rounds) m_store.drop_upper(m_id, r);
    m_activity.add_round(n);
    m_store.close_turn(m_id, n);

    m.history_tokens = tokens_in(prior);
    m.tokens_attended = tokens_in(kept);
    m.question_tokens = qspan.size();
    m.shape = TurnShape{layers,
                        lw,
                        true,
                        m_model.config().d_model,
                        m.history_tokens,
                        m.tokens_attended,
                        m.question_tokens,
                        m.decode_tokens,
                        n > 0,
                        static_cast<std::uint64_t>(m.question_tokens * m.history_tokens),
                        m.upper_h2d_bytes,
                        m.upper_h2d_events,
                        m.lower_h2d_bytes,
                        m.d2h_bytes};
    finish_metrics(m);
    return out;
}

TurnOutput Session::run_token_turn(std::span<const TokenId> question, int max_decode_steps) {
    TurnOutput out;
    TurnMetrics& m = out.metrics;
    const std::size_t n = m_rounds.size();
    const std::size_t lw = m_config.watershed;
    const std::size_t layers = m_model.config().layers;
    m.round = n;
    m.mode = PipelineMode::round_attention;
    m.policy = StrategyKind::token_baseline;
    m.has_history = n > 0;

    const auto qbegin = static_cast<std::int64_t>(m_tokens.size());
    const TokenSpan qspan{qbegin, qbegin + static_cast<std::int64_t>(question.size())};
    m_tokens.insert(m_tokens.end(), question.begin(), question.end());
    ForwardOptions lower_opts;
    if (n > 0) {
        lower_opts.capture = LayerRange{lw - 1, lw};
        lower_opts.capture_from_position = qbegin;
    }
    ForwardResult lower_out =
        m_model.forward_range(m_model.embed(question, qbegin), m_cache, LayerRange{0, lw}, lower_opts);

    // The full cache stays resident; the upper layers see only the kept token segments.
    std::vector<TokenSpan> segments;
    TokenTransferStats stats;
    if (n > 0) {
        std::vector<TokenSpan> spans;
        for (const Round& r : m_rounds) spans.push_back(r.span());
        TokenSelection sel = select_token_baseline(lower_out.captures.front(), qspan, spans);
        ++m.selection_invocations;
        segments = sel.segments;
        stats.kept_tokens = sel.kept.size();
        stats.candidate_tokens = sel.candidates.size();
        stats.segments = segments.size();
        stats.layer_touches = segments.size() * (layers - lw);
        stats.bytes = m_store.block_bytes(static_cast<std::int64_t>(sel.kept.size()), layers - lw);
        m.kept_mass = sel.total_mass > 0.0 ? sel.kept_mass / sel.total_mass : 0.0;
    }
    m.token = stats;
    m.upper_h2d_events = stats.segments;
    m.upper_h2d_bytes = stats.bytes;

    const VisibilityMask mask = VisibilityMask::restricted(segments, qbegin);
    ForwardOptions upper_opts;
    upper_opts.restriction = &mask;
    upper_opts.restrict_from_layer = lw;
    m_model.forward_range(lower_out.output, m_cache, LayerRange{lw, layers}, upper_opts);
    decode(out, max_decode_steps, upper_opts);
    append_round(question, out.answer_tokens);

    const std::int64_t history = qbegin;
    const auto kept_tokens = static_cast<std::int64_t>(stats.kept_tokens);
    m.history_tokens = history;
    m.tokens_attended = kept_tokens;
    m.question_tokens = qspan.size();
    m.device_bytes_upper_phase = m_store.block_bytes(history, lw) + m_store.block_bytes(kept_tokens, layers - lw);
    m.shape = TurnShape{layers,
                        lw,
                        true,
                        m_model.config().d_model,
                        history,
                        kept_tokens,
                        m.question_tokens,
                        m.decode_tokens,
                        n > 0,
                        static_cast<std::uint64_t>(m.question_tokens * history),
                        stats.bytes,
                        stats.layer_touches,
                        0,
                        0};
    finish_metrics(m);
    return out;
}

TurnOutput Session::run_baseline_turn(std::span<const TokenId> question, int max_decode_steps) {
    TurnOutput out;
    TurnMetrics& m = out.metrics;
    const std::size_t n = m_rounds.size();
    const std::size_t layers = m_model.config().layers;
    m.round = n;
    m.mode = PipelineMode::baseline;
    m.policy = StrategyKind::all;
    m.has_history = n > 0;

    const auto qbegin = static_cast<std::int64_t>(m_tokens.size());
    m_tokens.insert(m_tokens.end(), question.begin(), question.end());
    m_model.forward_range(m_model.embed(question, qbegin), m_cache, LayerRange{0, layers});
    decode(out, max_decode_steps, {});
    append_round(question, out.answer_tokens);

    m.kept_rounds = std::vector<std::size_t>(n);
    std::iota(m.kept_rounds.begin(), m.kept_rounds.end(), std::size_t{0});
    m.candidate_rounds = n;
    m.kept_mass = n > 0 ? 1.0 : 0.0;
    m.history_tokens = qbegin;
    m.tokens_attended = qbegin;
    m.question_tokens = static_cast<std::int64_t>(question.size());
    m.device_bytes_upper_phase = m_store.block_bytes(qbegin, layers);
    m.shape = TurnShape{layers,
                        m_config.watershed,
                        false,
                        m_model.config().d_model,
                        qbegin,
                        qbegin,
                        m.question_tokens,
                        m.decode_tokens,
                        false,
                        0,
                        0,
                        0,
                        0,
                        0};
    finish_metrics(m);
    return out;
}

void Session::end_session() {
    if (m_config.mode == PipelineMode::baseline || m_config.policy.kind == StrategyKind::token_baseline) return;
    const std::vector<std::size_t> all = all_rounds();
    m_store.writeback_lower(m_id, all);
    m_cache = make_cache(m_model.config());
    m_lower_resident = false;
}

WatershedResult calibrate_watershed(const Model& model, std::span<const Conversation> corpus,
                                    const WatershedConfig& config) {
    const std::size_t layers = model.config().layers;
    if (layers < 2) throw ConfigError("the watershed layer is undefined for a single-layer model");
    std::vector<KLCurve> curves;
    for (const Conversation& conv : corpus) {
        if (conv.rounds.size() < 2) continue;
        const std::size_t current = conv.rounds.size() - 1;
        const Round& cur = conv.rounds[current];
        const std::vector<TokenId> ids = conv.token_ids();
        const std::int64_t end = cur.span().end;
        KVCache cache = make_cache(model.config());
        ForwardOptions opts;
        opts.capture = LayerRange{0, layers};
        opts.capture_from_position = cur.question.begin;
        ForwardResult r = model.prefill(std::span<const TokenId>(ids).first(static_cast<std::size_t>(end)), 0, cache,
                                        opts);
        const RoundAnalysis analysis = analyze_round(r.captures, conv.rounds, current);
        curves.push_back(analysis.curve);
    }
    if (curves.empty()) throw InputError("calibration corpus has no conversation with at least two rounds");
    return detect_watershed(curves, config);
}

}  // namespace roundattn
