// Copyright (C) 2026 The roundattn Authors
// SPDX-License-Identifier: Apache-2.0

#include "roundattn/conversation.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "roundattn/error.hpp"

namespace roundattn {

namespace {

using json = nlohmann::json;

enum class Role { system, human, assistant };

Role parse_role(std::size_t index, const std::string& from) {
    if (from == "human" || from == "user")
        return Role::human;
    if (from == "gpt" || from == "assistant" || from == "chatgpt" || from == "bard" || from == "bing")
        return Role::assistant;
    if (from == "system")
        return Role::system;
    throw ParseError(index, "unknown role '" + from + "'");
}

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw InputError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

float read_f32_le(const std::byte* p) {
    std::uint32_t bits = 0;
    std::memcpy(&bits, p, sizeof(bits));
    if constexpr (std::endian::native == std::endian::big)
        bits = __builtin_bswap32(bits);
    return std::bit_cast<float>(bits);
}

void write_f32_le(std::byte* p, float v) {
    auto bits = std::bit_cast<std::uint32_t>(v);
    if constexpr (std::endian::native == std::endian::big)
        bits = __builtin_bswap32(bits);
    std::memcpy(p, &bits, sizeof(bits));
}

}  // namespace

std::size_t Conversation::completed_rounds() const noexcept {
    std::size_t n = 0;
    for (const auto& r : rounds)
        n += r.answer.empty() ? 0 : 1;
    return n;
}

std::vector<TokenId> Conversation::token_ids() const {
    std::vector<TokenId> ids;
    ids.reserve(tokens.size());
    for (const auto& t : tokens)
        ids.push_back(t.id);
    return ids;
}

std::vector<TokenId> tokenize(std::string_view text) {
    std::vector<TokenId> out;
    out.reserve(text.size());
    for (char c : text)
        out.push_back(static_cast<TokenId>(static_cast<unsigned char>(c)));
    return out;
}

std::string decode(std::span<const TokenId> tokens) {
    std::string out;
    out.reserve(tokens.size());
    for (TokenId t : tokens) {
        if (t >= 0 && t < kByteVocabSize)
            out.push_back(static_cast<char>(static_cast<unsigned char>(t)));
    }
    return out;
}

std::vector<TokenId> encode_segment(std::string_view text) {
    std::vector<TokenId> out;
    out.reserve(text.size() + 1);
    out.push_back(kSeparatorToken);
    for (char c : text)
        out.push_back(static_cast<TokenId>(static_cast<unsigned char>(c)));
    return out;
}

Conversation build_conversation(std::vector<Exchange> exchanges) {
    Conversation conv;
    std::int64_t pos = 0;
    auto append = [&](std::string_view text) {
        TokenSpan span{pos, pos};
        for (TokenId id : encode_segment(text))
            conv.tokens.push_back(Token{id, pos++});
        span.end = pos;
        return span;
    };
    for (std::size_t i = 0; i < exchanges.size(); ++i) {
        const auto& ex = exchanges[i];
        if (!ex.answer && i + 1 != exchanges.size())
            throw StructureError("only the last exchange may lack an answer");
        Round r;
        r.index = i;
        r.question = append(ex.question);
        r.answer = ex.answer ? append(*ex.answer) : TokenSpan{pos, pos};
        conv.rounds.push_back(r);
    }
    conv.exchanges = std::move(exchanges);
    return conv;
}

Conversation parse_conversation(std::string_view document) {
    json doc;
    try {
        doc = json::parse(document);
    } catch (const json::parse_error& e) {
        throw ParseError(0, std::string("invalid JSON: ") + e.what());
    }
    const json* messages = &doc;
    if (doc.is_object()) {
        auto it = doc.find("conversations");
        if (it == doc.end())
            throw ParseError(0, "object document lacks a \"conversations\" list");
        messages = &*it;
    }
    if (!messages->is_array())
        throw ParseError(0, "expected a list of messages");

    std::vector<Exchange> exchanges;
    std::string system_prefix;
    std::optional<Role> previous;
    for (std::size_t i = 0; i < messages->size(); ++i) {
        const json& m = (*messages)[i];
        if (!m.is_object())
            throw ParseError(i, "message is not an object");
        auto from = m.find("from");
        auto value = m.find("value");
        if (from == m.end() || !from->is_string())
            throw ParseError(i, "missing string field \"from\"");
        if (value == m.end() || !value->is_string())
            throw ParseError(i, "missing string field \"value\"");
        const Role role = parse_role(i, from->get<std::string>());
        const auto text = value->get<std::string>();

        if (role == Role::system) {
            if (i != 0)
                throw StructureError("message " + std::to_string(i) + ": system message only allowed first");
            // Leading system text is folded into round 0's question.
            system_prefix = text;
            continue;
        }
        if (previous && *previous == role)
            throw StructureError("message " + std::to_string(i) + ": two consecutive messages with the same role");
        if (role == Role::human) {
            std::string q = system_prefix.empty() ? text : system_prefix + "\n" + text;
            system_prefix.clear();
            exchanges.push_back(Exchange{std::move(q), std::nullopt});
        } else {
            if (exchanges.empty())
                throw StructureError("message " + std::to_string(i) + ": assistant message without a question");
            exchanges.back().answer = text;
        }
        previous = role;
    }
    return build_conversation(std::move(exchanges));
}

Conversation load_conversation_file(const std::filesystem::path& path) {
    return parse_conversation(read_file(path));
}

std::span<const float> AttentionTrace::layer(std::size_t l) const {
    const std::size_t n = seq_len * seq_len;
    return std::span<const float>(scores).subspan(l * n, n);
}

float AttentionTrace::at(std::size_t l, std::size_t row, std::size_t col) const {
    return scores[(l * seq_len + row) * seq_len + col];
}

AttentionTrace load_attention_trace(std::string_view header, std::span<const std::byte> payload) {
    json h;
    try {
        h = json::parse(header);
    } catch (const json::parse_error& e) {
        throw TraceError(std::string("invalid trace header: ") + e.what());
    }
    if (!h.is_object() || !h.contains("layers") || !h.contains("seq_len") || !h.contains("round_boundaries"))
        throw TraceError("trace header needs layers, seq_len and round_boundaries");
    if (h.contains("element") && h["element"] != "f32le")
        throw TraceError("unsupported element type " + h["element"].dump());

    AttentionTrace trace;
    const auto layers = h["layers"].get<std::int64_t>();
    const auto seq = h["seq_len"].get<std::int64_t>();
    if (layers < 1 || seq < 1)
        throw TraceError("layers and seq_len must be positive");
    trace.num_layers = static_cast<std::size_t>(layers);
    trace.seq_len = static_cast<std::size_t>(seq);

    std::int64_t last_end = 0;
    for (const auto& b : h["round_boundaries"]) {
        if (!b.is_array() || b.size() != 4)
            throw TraceError("round boundary must be [q_start, q_end, a_start, a_end]");
        Round r;
        r.index = trace.rounds.size();
        r.question = {b[0].get<std::int64_t>(), b[1].get<std::int64_t>()};
        r.answer = {b[2].get<std::int64_t>(), b[3].get<std::int64_t>()};
        if (r.question.begin < last_end || r.question.empty() || r.answer.begin < r.question.end ||
            r.answer.end < r.answer.begin || r.answer.end > seq)
            throw TraceError("round " + std::to_string(r.index) + " has invalid or overlapping boundaries");
        last_end = r.answer.end;
        trace.rounds.push_back(r);
    }

    const std::size_t expected = trace.num_layers * trace.seq_len * trace.seq_len * sizeof(float);
    if (payload.size() != expected)
        throw TraceError("payload length " + std::to_string(payload.size()) + " does not match expected " +
                         std::to_string(expected) + " bytes");

    trace.scores.resize(expected / sizeof(float));
    for (std::size_t i = 0; i < trace.scores.size(); ++i)
        trace.scores[i] = read_f32_le(payload.data() + i * sizeof(float));

    for (std::size_t l = 0; l < trace.num_layers; ++l) {
        for (std::size_t row = 0; row < trace.seq_len; ++row) {
            double sum = 0.0;
            for (std::size_t col = 0; col < trace.seq_len; ++col) {
                const float v = trace.at(l, row, col);
                if (!std::isfinite(v) || v < 0.0f)
                    throw TraceError("layer " + std::to_string(l) + " row " + std::to_string(row) +
                                     ": negative or non-finite score");
                if (col > row && v != 0.0f)
                    throw TraceError("layer " + std::to_string(l) + " row " + std::to_string(row) +
                                     ": non-zero score above the diagonal");
                sum += v;
            }
            if (std::abs(sum - 1.0) > kTraceRowSumTolerance)
                throw TraceError("layer " + std::to_string(l) + " row " + std::to_string(row) + ": row sums to " +
                                 std::to_string(sum));
        }
    }
    return trace;
}

AttentionTrace load_attention_trace_file(const std::filesystem::path& header_path) {
    const std::string header = read_file(header_path);
    std::filesystem::path payload_path = header_path;
    payload_path.replace_extension(".bin");
    try {
        auto h = json::parse(header);
        if (h.is_object() && h.contains("payload") && h["payload"].is_string())
            payload_path = header_path.parent_path() / h["payload"].get<std::string>();
    } catch (const json::parse_error&) {
        // reported by load_attention_trace
    }
    const std::string bytes = read_file(payload_path);
    return load_attention_trace(header, std::as_bytes(std::span<const char>(bytes.data(), bytes.size())));
}

std::string attention_trace_header(const AttentionTrace& trace, const std::string& payload_name) {
    nlohmann::ordered_json h;
    h["layers"] = trace.num_layers;
    h["seq_len"] = trace.seq_len;
    h["element"] = "f32le";
    auto bounds = json::array();
    for (const auto& r : trace.rounds)
        bounds.push_back({r.question.begin, r.question.end, r.answer.begin, r.answer.end});
    h["round_boundaries"] = bounds;
    h["payload"] = payload_name;
    return h.dump(2) + "\n";
}

std::vector<std::byte> attention_trace_payload(const AttentionTrace& trace) {
    std::vector<std::byte> out(trace.scores.size() * sizeof(float));
    for (std::size_t i = 0; i < trace.scores.size(); ++i)
        write_f32_le(out.data() + i * sizeof(float), trace.scores[i]);
    return out;
}

void write_attention_trace(const AttentionTrace& trace, const std::filesystem::path& header_path) {
    std::filesystem::path payload_path = header_path;
    payload_path.replace_extension(".bin");
    {
        std::ofstream out(header_path, std::ios::binary);
        if (!out)
            throw InputError("cannot write " + header_path.string());
        out << attention_trace_header(trace, payload_path.filename().string());
    }
    const auto bytes = attention_trace_payload(trace);
    std::ofstream out(payload_path, std::ios::binary);
    if (!out)
        throw InputError("cannot write " + payload_path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace roundattn
