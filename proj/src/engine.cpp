// Copyright (C) 2026 The roundattn Authors
// SPDX-License-Identifier: Apache-2.0

#include "roundattn/engine.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <string>

#include "roundattn/error.hpp"

namespace roundattn {

namespace {

constexpr float kRmsEpsilon = 1e-6f;

/// Uniform in [-a, a) from the raw 64-bit engine output, independent of <random> distributions.
class WeightSampler {
public:
    explicit WeightSampler(std::uint64_t seed) : m_engine(seed) {}

    float uniform(float a) {
        const double u = static_cast<double>(m_engine() >> 11) * 0x1.0p-53;
        return static_cast<float>((2.0 * u - 1.0) * a);
    }

    Matrix matrix(std::size_t rows, std::size_t cols, float a) {
        Matrix m(rows, cols);
        for (auto& v : m.data)
            v = uniform(a);
        return m;
    }

private:
    std::mt19937_64 m_engine;
};

/// out = x * w, x is rows x k, w is k x n.
Matrix matmul(const Matrix& x, const Matrix& w) {
    Matrix out(x.rows, w.cols);
    for (std::size_t r = 0; r < x.rows; ++r) {
        auto dst = out.row(r);
        const auto src = x.row(r);
        for (std::size_t i = 0; i < x.cols; ++i) {
            const float xi = src[i];
            const auto wrow = w.row(i);
            for (std::size_t j = 0; j < w.cols; ++j)
                dst[j] += xi * wrow[j];
        }
    }
    return out;
}

}  // namespace

void ModelConfig::validate() const {
    if (layers < 1 || heads < 1 || d_model < 1 || vocab_size < 1)
        throw ConfigError("model dimensions must all be >= 1");
    if (d_model % heads != 0)
        throw ConfigError("d_model " + std::to_string(d_model) + " is not divisible by heads " +
                          std::to_string(heads));
    if (head_dim() % 2 != 0)
        throw ConfigError("head dimension must be even for rotary encoding");
    if (vocab_size < static_cast<std::size_t>(kVocabSize))
        throw ConfigError("vocab_size must cover the byte vocabulary and control tokens");
    if (!(rope_base > 0.0))
        throw ConfigError("rope_base must be positive");
}

void LayerKV::append(std::span<const float> key, std::span<const float> value, std::int64_t position) {
    if (key.size() != m_d_model || value.size() != m_d_model)
        throw ShapeError("K/V row width does not match the cache width");
    if (!m_positions.empty() && position <= m_positions.back())
        throw ShapeError("cache rows must be appended with increasing positions");
    m_keys.insert(m_keys.end(), key.begin(), key.end());
    m_values.insert(m_values.end(), value.begin(), value.end());
    m_positions.push_back(position);
}

LayerKV LayerKV::slice(TokenSpan span) const {
    LayerKV out(m_d_model);
    for (std::size_t i = 0; i < rows(); ++i) {
        if (span.contains(m_positions[i]))
            out.append(key(i), value(i), m_positions[i]);
    }
    return out;
}

void LayerKV::extend(const LayerKV& other) {
    if (other.m_d_model != m_d_model)
        throw ShapeError("cannot extend a cache with rows of a different width");
    for (std::size_t i = 0; i < other.rows(); ++i)
        append(other.key(i), other.value(i), other.position(i));
}

KVCache make_cache(const ModelConfig& config) {
    return KVCache(config.layers, LayerKV(config.d_model));
}

VisibilityMask VisibilityMask::restricted(std::vector<TokenSpan> allowed, std::int64_t open_from) {
    VisibilityMask mask;
    mask.m_restricted = true;
    std::sort(allowed.begin(), allowed.end(), [](const TokenSpan& a, const TokenSpan& b) { return a.begin < b.begin; });
    mask.m_allowed = std::move(allowed);
    mask.m_open_from = open_from;
    return mask;
}

bool VisibilityMask::key_allowed(std::int64_t key_pos) const {
    if (!m_restricted || key_pos >= m_open_from)
        return true;
    auto it = std::upper_bound(m_allowed.begin(), m_allowed.end(), key_pos,
                               [](std::int64_t p, const TokenSpan& s) { return p < s.begin; });
    if (it == m_allowed.begin())
        return false;
    return std::prev(it)->contains(key_pos);
}

void rms_normalize(std::span<const float> in, std::span<float> out) {
    float sq = 0.0f;
    for (float v : in)
        sq += v * v;
    const float inv = 1.0f / std::sqrt(sq / static_cast<float>(in.size()) + kRmsEpsilon);
    for (std::size_t i = 0; i < in.size(); ++i)
        out[i] = in[i] * inv;
}

void apply_rope(Matrix& m, std::int64_t first_position, std::size_t heads, double base) {
    const std::size_t dk = m.cols / heads;
    for (std::size_t r = 0; r < m.rows; ++r) {
        const double pos = static_cast<double>(first_position + static_cast<std::int64_t>(r));
        auto row = m.row(r);
        for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t i = 0; i < dk / 2; ++i) {
                const double freq = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(dk));
                const double angle = pos * freq;
                const float c = static_cast<float>(std::cos(angle));
                const float s = static_cast<float>(std::sin(angle));
                float& a = row[h * dk + 2 * i];
                float& b = row[h * dk + 2 * i + 1];
                const float a0 = a;
                const float b0 = b;
                a = a0 * c - b0 * s;
                b = a0 * s + b0 * c;
            }
        }
    }
}

AttentionOutput attend(const Matrix& queries, std::int64_t first_position, const LayerKV& kv, std::size_t heads,
                       const VisibilityMask& mask, HeadReduction reduction, bool capture) {
    if (heads == 0 || queries.cols % heads != 0)
        throw ShapeError("query width is not divisible by the head count");
    if (queries.cols != kv.d_model())
        throw ShapeError("query width does not match the cache width");
    const std::size_t dk = queries.cols / heads;
    const float scale = 1.0f / std::sqrt(static_cast<float>(dk));
    const std::size_t nkeys = kv.rows();

    std::vector<std::uint8_t> allowed(nkeys);
    for (std::size_t j = 0; j < nkeys; ++j)
        allowed[j] = mask.key_allowed(kv.position(j)) ? 1 : 0;

    AttentionOutput result;
    result.output = Matrix(queries.rows, queries.cols);
    if (capture) {
        LayerAttention la;
        la.key_positions.assign(kv.positions().begin(), kv.positions().end());
        la.scores.assign(queries.rows * nkeys, 0.0f);
        for (std::size_t r = 0; r < queries.rows; ++r)
            la.row_positions.push_back(first_position + static_cast<std::int64_t>(r));
        result.scores = std::move(la);
    }

    std::vector<std::size_t> visible;
    std::vector<float> logits;
    std::vector<float> reduced;
    visible.reserve(nkeys);
    for (std::size_t r = 0; r < queries.rows; ++r) {
        const std::int64_t qpos = first_position + static_cast<std::int64_t>(r);
        visible.clear();
        for (std::size_t j = 0; j < nkeys; ++j) {
            if (allowed[j] && kv.position(j) <= qpos)
                visible.push_back(j);
        }
        if (visible.empty())
            throw ShapeError("query at position " + std::to_string(qpos) + " sees no keys");
        logits.resize(visible.size());
        reduced.assign(visible.size(), 0.0f);
        const auto q = queries.row(r);
        auto out = result.output.row(r);
        for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t off = h * dk;
            float max_logit = -std::numeric_limits<float>::infinity();
            for (std::size_t v = 0; v < visible.size(); ++v) {
                const auto k = kv.key(visible[v]);
                float dot = 0.0f;
                for (std::size_t d = 0; d < dk; ++d)
                    dot += q[off + d] * k[off + d];
                logits[v] = dot * scale;
                max_logit = std::max(max_logit, logits[v]);
            }
            float denom = 0.0f;
            for (auto& l : logits) {
                l = std::exp(l - max_logit);
                denom += l;
            }
            for (std::size_t v = 0; v < visible.size(); ++v) {
                const float p = logits[v] / denom;
                const auto val = kv.value(visible[v]);
                for (std::size_t d = 0; d < dk; ++d)
                    out[off + d] += p * val[off + d];
                if (reduction == HeadReduction::sum_renormalize)
                    reduced[v] += p;
                else
                    reduced[v] = std::max(reduced[v], p);
            }
        }
        if (capture) {
            float total = 0.0f;
            for (float p : reduced)
                total += p;
            auto& la = *result.scores;
            for (std::size_t v = 0; v < visible.size(); ++v)
                la.scores[r * nkeys + visible[v]] = reduced[v] / total;
        }
    }
    return result;
}

AttentionOutput attention_layer(const Matrix& queries, const Matrix& keys, const Matrix& values, std::size_t heads,
                                HeadReduction reduction) {
    if (keys.rows != values.rows || keys.cols != values.cols || queries.cols != keys.cols)
        throw ShapeError("queries, keys and values must share a width; keys and values a row count");
    if (queries.rows != keys.rows)
        throw ShapeError("causal self-attention needs as many queries as keys");
    LayerKV kv(keys.cols);
    for (std::size_t i = 0; i < keys.rows; ++i)
        kv.append(keys.row(i), values.row(i), static_cast<std::int64_t>(i));
    return attend(queries, 0, kv, heads, VisibilityMask::causal(), reduction, true);
}

TokenId argmax_token(std::span<const float> logits) {
    if (logits.empty())
        throw ShapeError("argmax over empty logits");
    std::size_t best = 0;
    for (std::size_t i = 1; i < logits.size(); ++i) {
        if (logits[i] > logits[best])
            best = i;
    }
    return static_cast<TokenId>(best);
}

Model::Model(const ModelConfig& config) : m_config(config) {
    m_config.validate();
    WeightSampler sampler(m_config.seed);
    const std::size_t d = m_config.d_model;
    const float proj = std::sqrt(3.0f / static_cast<float>(d));
    m_embedding = sampler.matrix(m_config.vocab_size, d, 1.0f);
    m_layers.reserve(m_config.layers);
    for (std::size_t l = 0; l < m_config.layers; ++l) {
        LayerWeights w;
        w.wq = sampler.matrix(d, d, proj);
        w.wk = sampler.matrix(d, d, proj);
        w.wv = sampler.matrix(d, d, proj);
        w.wo = sampler.matrix(d, d, proj);
        m_layers.push_back(std::move(w));
    }
}

Activations Model::embed(std::span<const TokenId> tokens, std::int64_t first_position) const {
    Activations a;
    a.first_position = first_position;
    a.hidden = Matrix(tokens.size(), m_config.d_model);
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        const TokenId t = tokens[i];
        if (t < 0 || static_cast<std::size_t>(t) >= m_config.vocab_size)
            throw ShapeError("token id " + std::to_string(t) + " outside the vocabulary");
        const auto src = m_embedding.row(static_cast<std::size_t>(t));
        std::copy(src.begin(), src.end(), a.hidden.row(i).begin());
    }
    return a;
}

ForwardResult Model::forward_range(const Activations& input, KVCache& cache, LayerRange range,
                                   const ForwardOptions& options) const {
    if (range.begin > range.end || range.end > m_config.layers)
        throw ShapeError("layer range [" + std::to_string(range.begin) + ", " + std::to_string(range.end) +
                         ") out of bounds for " + std::to_string(m_config.layers) + " layers");
    if (cache.size() < range.end)
        throw ShapeError("cache is missing layer " + std::to_string(cache.size()));
    if (input.hidden.rows > 0 && input.hidden.cols != m_config.d_model)
        throw ShapeError("activation width does not match d_model");

    ForwardResult result;
    result.output = input;
    if (input.hidden.rows == 0)
        return result;

    const std::size_t d = m_config.d_model;
    const VisibilityMask causal = VisibilityMask::causal();
    Matrix& x = result.output.hidden;
    Matrix normed(x.rows, d);
    for (std::size_t l = range.begin; l < range.end; ++l) {
        const LayerWeights& w = m_layers[l];
        for (std::size_t r = 0; r < x.rows; ++r)
            rms_normalize(x.row(r), normed.row(r));
        Matrix q = matmul(normed, w.wq);
        Matrix k = matmul(normed, w.wk);
        Matrix v = matmul(normed, w.wv);
        apply_rope(q, input.first_position, m_config.heads, m_config.rope_base);
        apply_rope(k, input.first_position, m_config.heads, m_config.rope_base);
        LayerKV& kv = cache[l];
        if (kv.d_model() != d)
            throw ShapeError("cache layer " + std::to_string(l) + " has the wrong width");
        for (std::size_t r = 0; r < x.rows; ++r)
            kv.append(k.row(r), v.row(r), input.first_position + static_cast<std::int64_t>(r));

        const bool restricted = options.restriction != nullptr && l >= options.restrict_from_layer;
        const bool capture = options.capture && options.capture->contains(l);
        AttentionOutput att = attend(q, input.first_position, kv, m_config.heads,
                                     restricted ? *options.restriction : causal, m_config.head_reduction, capture);
        const Matrix projected = matmul(att.output, w.wo);
        for (std::size_t i = 0; i < x.data.size(); ++i)
            x.data[i] += projected.data[i];

        if (capture) {
            LayerAttention la = std::move(*att.scores);
            la.layer = l;
            if (options.capture_from_position > input.first_position) {
                const auto skip = static_cast<std::size_t>(
                    std::min<std::int64_t>(options.capture_from_position - input.first_position,
                                           static_cast<std::int64_t>(la.rows())));
                la.row_positions.erase(la.row_positions.begin(), la.row_positions.begin() + skip);
                la.scores.erase(la.scores.begin(), la.scores.begin() + skip * la.keys());
            }
            result.captures.push_back(std::move(la));
        }
    }
    return result;
}

ForwardResult Model::prefill(std::span<const TokenId> tokens, std::int64_t first_position, KVCache& cache,
                             const ForwardOptions& options) const {
    return forward_range(embed(tokens, first_position), cache, LayerRange{0, m_config.layers}, options);
}

std::vector<float> Model::logits(std::span<const float> hidden) const {
    if (hidden.size() != m_config.d_model)
        throw ShapeError("hidden row width does not match d_model");
    std::vector<float> normed(hidden.size());
    rms_normalize(hidden, normed);
    std::vector<float> out(m_config.vocab_size, 0.0f);
    for (std::size_t t = 0; t < m_config.vocab_size; ++t) {
        const auto e = m_embedding.row(t);
        float dot = 0.0f;
        for (std::size_t i = 0; i < normed.size(); ++i)
            dot += normed[i] * e[i];
        out[t] = dot;
    }
    return out;
}

DecodeResult Model::decode_step(KVCache& cache, TokenId token, std::int64_t position,
                                const ForwardOptions& options) const {
    if (cache.size() < m_config.layers)
        throw ShapeError("cache is missing layer " + std::to_string(cache.size()));
    for (std::size_t l = 0; l < m_config.layers; ++l) {
        if (cache[l].empty())
            throw ConsistencyError("decode requires a non-empty cache (layer " + std::to_string(l) + " is empty)");
    }
    const TokenId ids[1] = {token};
    ForwardResult fr = forward_range(embed(ids, position), cache, LayerRange{0, m_config.layers}, options);
    DecodeResult out;
    out.logits = logits(fr.output.hidden.row(0));
    out.next = argmax_token(out.logits);
    return out;
}

}  // namespace roundattn
