// Copyright (C) 2026 The roundattn Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "roundattn/conversation.hpp"

namespace roundattn {

/// How per-head attention probabilities are folded into one captured score row.
enum class HeadReduction {
    sum_renormalize, /**< sum over heads, then divide each row by its sum */
    max_renormalize  /**< element-wise max over heads, then divide each row by its sum */
};

struct ModelConfig {
    std::size_t layers = 8;
    std::size_t heads = 4;
    std::size_t d_model = 64;
    std::size_t vocab_size = kVocabSize;
    std::uint64_t seed = 42;
    double rope_base = 10000.0;
    HeadReduction head_reduction = HeadReduction::sum_renormalize;

    std::size_t head_dim() const noexcept { return heads == 0 ? 0 : d_model / heads; }
    /// Throws ConfigError unless every count is positive, heads divide d_model and the head dim is even.
    void validate() const;
};

struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<float> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0f) {}

    std::span<float> row(std::size_t i) { return {data.data() + i * cols, cols}; }
    std::span<const float> row(std::size_t i) const { return {data.data() + i * cols, cols}; }
    float& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    float operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
};

struct LayerWeights {
    Matrix wq, wk, wv, wo;
};

struct LayerRange {
    std::size_t begin = 0;
    std::size_t end = 0;

    std::size_t size() const noexcept { return end > begin ? end - begin : 0; }
    bool contains(std::size_t l) const noexcept { return l >= begin && l < end; }
};

/// Keys and values of one layer, one row per cached token, tagged with its absolute position.
/// Keys are stored after rotary encoding.
class LayerKV {
public:
    LayerKV() = default;
    explicit LayerKV(std::size_t d_model) : m_d_model(d_model) {}

    std::size_t d_model() const noexcept { return m_d_model; }
    std::size_t rows() const noexcept { return m_positions.size(); }
    bool empty() const noexcept { return m_positions.empty(); }

    /// Positions must strictly increase across appends.
    void append(std::span<const float> key, std::span<const float> value, std::int64_t position);

    std::span<const float> key(std::size_t i) const { return {m_keys.data() + i * m_d_model, m_d_model}; }
    std::span<const float> value(std::size_t i) const { return {m_values.data() + i * m_d_model, m_d_model}; }
    std::int64_t position(std::size_t i) const { return m_positions[i]; }
    std::span<const std::int64_t> positions() const noexcept { return m_positions; }

    /// Copies the rows whose positions fall in `span`, in order.
    LayerKV slice(TokenSpan span) const;
    /// Appends every row of `other`.
    void extend(const LayerKV& other);

private:
    std::size_t m_d_model = 0;
    std::vector<float> m_keys;
    std::vector<float> m_values;
    std::vector<std::int64_t> m_positions;
};

/// One LayerKV per model layer.
using KVCache = std::vector<LayerKV>;

KVCache make_cache(const ModelConfig& config);

/// Captured, head-reduced attention probabilities: rows are query tokens, columns cached keys.
struct LayerAttention {
    std::size_t layer = 0;
    std::vector<std::int64_t> row_positions;
    std::vector<std::int64_t> key_positions;
    std::vector<float> scores;

    std::size_t rows() const noexcept { return row_positions.size(); }
    std::size_t keys() const noexcept { return key_positions.size(); }
    float at(std::size_t r, std::size_t c) const { return scores[r * keys() + c]; }
    std::span<const float> row(std::size_t r) const { return {scores.data() + r * keys(), keys()}; }
};

/// Key visibility on top of causality. An unrestricted mask is plain causal attention;
/// a restricted one additionally hides every key outside `allowed` that sits before `open_from`.
class VisibilityMask {
public:
    static VisibilityMask causal() { return VisibilityMask(); }
    static VisibilityMask restricted(std::vector<TokenSpan> allowed, std::int64_t open_from);

    bool is_restricted() const noexcept { return m_restricted; }
    bool key_allowed(std::int64_t key_pos) const;
    bool visible(std::int64_t query_pos, std::int64_t key_pos) const {
        return key_pos <= query_pos && key_allowed(key_pos);
    }

private:
    bool m_restricted = false;
    std::vector<TokenSpan> m_allowed;
    std::int64_t m_open_from = 0;
};

struct Activations {
    Matrix hidden;
    std::int64_t first_position = 0;
};

struct ForwardOptions {
    /// Applied to layers >= restrict_from_layer; nullptr means causal everywhere.
    const VisibilityMask* restriction = nullptr;
    std::size_t restrict_from_layer = 0;
    /// Layers whose scores are captured.
    std::optional<LayerRange> capture;
    /// Only query rows at or after this position are captured.
    std::int64_t capture_from_position = 0;
};

struct ForwardResult {
    Activations output;
    std::vector<LayerAttention> captures;
};

struct AttentionOutput {
    Matrix output;
    std::optional<LayerAttention> scores;
};

struct DecodeResult {
    TokenId next = 0;
    std::vector<float> logits;
};

/// Multi-head scaled dot-product attention of `queries` (already projected and rotated, rows at
/// consecutive positions from `first_position`) against the cached rows of `kv`.
AttentionOutput attend(const Matrix& queries, std::int64_t first_position, const LayerKV& kv, std::size_t heads,
                       const VisibilityMask& mask, HeadReduction reduction, bool capture);

/// Causal self-attention over square inputs at positions 0..n-1.
AttentionOutput attention_layer(const Matrix& queries, const Matrix& keys, const Matrix& values, std::size_t heads,
                                HeadReduction reduction = HeadReduction::sum_renormalize);

void apply_rope(Matrix& m, std::int64_t first_position, std::size_t heads, double base);

/// Index of the largest logit; ties go to the smallest id.
TokenId argmax_token(std::span<const float> logits);

/// Attention-plus-residual decoder with tied input/output embeddings.
class Model {
public:
    explicit Model(const ModelConfig& config);

    const ModelConfig& config() const noexcept { return m_config; }
    const Matrix& embedding() const noexcept { return m_embedding; }
    const LayerWeights& layer(std::size_t l) const { return m_layers.at(l); }

    Activations embed(std::span<const TokenId> tokens, std::int64_t first_position) const;

    /// Runs layers [range.begin, range.end) and appends the new K/V rows to `cache`.
    ForwardResult forward_range(const Activations& input, KVCache& cache, LayerRange range,
                                const ForwardOptions& options = {}) const;

    /// embed + forward over every layer.
    ForwardResult prefill(std::span<const TokenId> tokens, std::int64_t first_position, KVCache& cache,
                          const ForwardOptions& options = {}) const;

    std::vector<float> logits(std::span<const float> hidden) const;

    /// Feeds one token at `position`, appends one K/V row per layer and returns the greedy next token.
    DecodeResult decode_step(KVCache& cache, TokenId token, std::int64_t position,
                             const ForwardOptions& options = {}) const;

private:
    ModelConfig m_config;
    Matrix m_embedding;
    std::vector<LayerWeights> m_layers;
};

inline Model init_model(const ModelConfig& config) { return Model(config); }

/// Parameter-free RMS normalisation of one row.
void rms_normalize(std::span<const float> in, std::span<float> out);

}  // namespace roundattn
