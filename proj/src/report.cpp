// Copyright (C) 2026 The roundattn Authors
// SPDX-License-Identifier: Apache-2.0

#include "roundattn/report.hpp"

#include <cmath>
#include <cstdio>

#include "roundattn/error.hpp"

namespace roundattn {

std::string printable(std::string_view text) {
    std::string out;
    out.reserve(text.size());
    for (unsigned char c : text) {
        if (c >= 0x20 && c < 0x7f && c != '\\') {
            out.push_back(static_cast<char>(c));
        } else if (c == '\\') {
            out += "\\\\";
        } else {
            char buf[5];
            std::snprintf(buf, sizeof buf, "\\x%02x", c);
            out += buf;
        }
    }
    return out;
}

Json report_header(std::string_view kind) {
    Json j;
    j["schema_version"] = kReportSchemaVersion;
    j["kind"] = kind;
    return j;
}

Json to_json(const ModelConfig& c) {
    return {{"layers", c.layers},
            {"heads", c.heads},
            {"d_model", c.d_model},
            {"vocab_size", c.vocab_size},
            {"seed", c.seed},
            {"rope_base", c.rope_base},
            {"head_reduction", c.head_reduction == HeadReduction::sum_renormalize ? "sum" : "max"}};
}

Json to_json(const SelectionPolicy& p) {
    return {{"strategy", to_string(p.kind)},
            {"v", p.v},
            {"fraction", p.fraction},
            {"kappa", p.kappa},
            {"min_rounds", p.min_rounds}};
}

Json to_json(const DropPolicy& d) {
    Json j;
    j["window"] = d.window ? Json(*d.window) : Json(nullptr);
    j["protect_recent"] = d.protect_recent;
    return j;
}

Json to_json(const CostModel& c) {
    return {{"h2d_us_per_kib", c.h2d_us_per_kib},
            {"d2h_us_per_kib", c.d2h_us_per_kib},
            {"ns_per_1024_macs", c.ns_per_1024_macs},
            {"step_overhead_us", c.step_overhead_us}};
}

Json to_json(const TransferCounters& c) {
    return {{"h2d_events", c.h2d_events},
            {"h2d_bytes", c.h2d_bytes},
            {"d2h_events", c.d2h_events},
            {"d2h_bytes", c.d2h_bytes}};
}

Json to_json(const TurnShape& s) {
    return {{"layers", s.layers},
            {"watershed", s.watershed},
            {"split", s.split},
            {"d_model", s.d_model},
            {"history_tokens", s.history_tokens},
            {"kept_tokens", s.kept_tokens},
            {"question_tokens", s.question_tokens},
            {"decode_tokens", s.decode_tokens},
            {"selection", s.selection},
            {"selection_macs", s.selection_macs},
            {"upper_h2d_bytes", s.upper_h2d_bytes},
            {"upper_transfer_calls", s.upper_transfer_calls},
            {"lower_h2d_bytes", s.lower_h2d_bytes},
            {"d2h_bytes", s.d2h_bytes}};
}

Json to_json(const CostBreakdown& c) {
    Json curves = Json::array();
    for (const CostEntry& e : c.entries)
        curves.push_back({{"layer", e.layer}, {"step", to_string(e.step)}, {"phase", to_string(e.phase)},
                          {"cost", e.cost}});
    return {{"append_total", c.phase_total(Phase::append)},
            {"decode_total", c.phase_total(Phase::decode)},
            {"step_total", c.step_total},
            {"lower_h2d_cost", c.lower_h2d_cost},
            {"d2h_cost", c.d2h_cost},
            {"transfer_total", c.transfer_total},
            {"total", c.total},
            {"curves", std::move(curves)}};
}

Json to_json(const TurnMetrics& m) {
    Json j;
    j["round"] = m.round;
    j["mode"] = to_string(m.mode);
    j["policy"] = to_string(m.policy);
    j["has_history"] = m.has_history;
    j["selection_invocations"] = m.selection_invocations;
    j["lower_h2d_events"] = m.lower_h2d_events;
    j["upper_h2d_events"] = m.upper_h2d_events;
    j["d2h_events"] = m.d2h_events;
    j["lower_h2d_bytes"] = m.lower_h2d_bytes;
    j["upper_h2d_bytes"] = m.upper_h2d_bytes;
    j["d2h_bytes"] = m.d2h_bytes;
    j["candidate_rounds"] = m.candidate_rounds;
    j["K"] = m.K();
    j["kept_rounds"] = m.kept_rounds;
    j["kept_mass"] = m.kept_mass;
    j["dropped_rounds"] = m.dropped_rounds;
    j["history_tokens"] = m.history_tokens;
    j["tokens_attended"] = m.tokens_attended;
    j["question_tokens"] = m.question_tokens;
    j["decode_tokens"] = m.decode_tokens;
    j["device_bytes_upper_phase"] = m.device_bytes_upper_phase;
    if (m.token)
        j["token_transfers"] = {{"kept_tokens", m.token->kept_tokens},
                                {"candidate_tokens", m.token->candidate_tokens},
                                {"segments", m.token->segments},
                                {"layer_touches", m.token->layer_touches},
                                {"bytes", m.token->bytes}};
    else
        j["token_transfers"] = nullptr;
    j["shape"] = to_json(m.shape);
    j["cost"] = to_json(m.cost);
    return j;
}

Json to_json(const KLCurve& c) { return Json(c.values); }

namespace {

void check_finite(const Json& j, const std::string& path) {
    if (j.is_number_float() && !std::isfinite(j.get<double>()))
        throw InvariantError("report field " + path + " is not finite");
    if (j.is_object())
        for (const auto& [k, v] : j.items()) check_finite(v, path + "." + k);
    if (j.is_array())
        for (std::size_t i = 0; i < j.size(); ++i) check_finite(j[i], path + "[" + std::to_string(i) + "]");
}

}  // namespace

std::string dump_report(const Json& report) {
    check_finite(report, "$");
    return report.dump(2) + "\n";
}

}  // namespace roundattn
