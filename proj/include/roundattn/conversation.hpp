// Copyright (C) 2026 The roundattn Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace roundattn {

using TokenId = std::int32_t;

/// Byte-level vocabulary: ids [0, 256) are raw bytes, followed by two control tokens.
inline constexpr TokenId kByteVocabSize = 256;
/// Marks the start of every question and answer span.
inline constexpr TokenId kSeparatorToken = 256;
inline constexpr TokenId kEndOfTextToken = 257;
inline constexpr TokenId kVocabSize = 258;

struct Token {
    TokenId id = 0;
    std::int64_t position = 0;
};

/// Half-open range of absolute token positions.
struct TokenSpan {
    std::int64_t begin = 0;
    std::int64_t end = 0;

    std::int64_t size() const noexcept { return end - begin; }
    bool empty() const noexcept { return end <= begin; }
    bool contains(std::int64_t pos) const noexcept { return pos >= begin && pos < end; }
    friend bool operator==(const TokenSpan&, const TokenSpan&) = default;
};

/// One question/answer pair. The answer span of the in-flight round is empty.
struct Round {
    std::size_t index = 0;
    TokenSpan question;
    TokenSpan answer;

    TokenSpan span() const noexcept { return {question.begin, answer.empty() ? question.end : answer.end}; }
    friend bool operator==(const Round&, const Round&) = default;
};

struct Exchange {
    std::string question;
    std::optional<std::string> answer;
    friend bool operator==(const Exchange&, const Exchange&) = default;
};

struct Conversation {
    std::vector<Round> rounds;
    std::vector<Token> tokens;
    std::vector<Exchange> exchanges;

    /// Number of rounds that carry an answer.
    std::size_t completed_rounds() const noexcept;
    bool has_in_flight() const noexcept { return !rounds.empty() && rounds.back().answer.empty(); }
    std::vector<TokenId> token_ids() const;
};

std::vector<TokenId> tokenize(std::string_view text);
/// Inverse of tokenize; control tokens are skipped.
std::string decode(std::span<const TokenId> tokens);
/// Separator followed by the byte tokens of `text`.
std::vector<TokenId> encode_segment(std::string_view text);

/// Builds rounds and token spans from already-split exchanges.
Conversation build_conversation(std::vector<Exchange> exchanges);

/// Parses a ShareGPT-shaped JSON document: either a list of {"from", "value"} messages
/// or an object carrying such a list under "conversations".
Conversation parse_conversation(std::string_view document);
Conversation load_conversation_file(const std::filesystem::path& path);

/// Head-reduced S x S attention scores for every layer of a captured prefill.
struct AttentionTrace {
    std::size_t num_layers = 0;
    std::size_t seq_len = 0;
    std::vector<Round> rounds;
    /// num_layers consecutive row-major seq_len x seq_len matrices.
    std::vector<float> scores;

    std::span<const float> layer(std::size_t l) const;
    float at(std::size_t l, std::size_t row, std::size_t col) const;
};

/// Row-sum tolerance applied when loading traces.
inline constexpr double kTraceRowSumTolerance = 1e-3;

AttentionTrace load_attention_trace(std::string_view header, std::span<const std::byte> payload);
/// Reads the header at `header_path`; the payload path is the header's "payload" entry
/// (relative to the header) or the header path with a `.bin` extension.
AttentionTrace load_attention_trace_file(const std::filesystem::path& header_path);

std::string attention_trace_header(const AttentionTrace& trace, const std::string& payload_name);
std::vector<std::byte> attention_trace_payload(const AttentionTrace& trace);
void write_attention_trace(const AttentionTrace& trace, const std::filesystem::path& header_path);

}  // namespace roundattn
