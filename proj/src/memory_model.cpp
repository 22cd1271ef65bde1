// Copyright (C) 2026 The roundattn Authors
// SPDX-License-Identifier: Apache-2.0

#include "roundattn/memory_model.hpp"

#include <array>
#include <string>

#include "roundattn/error.hpp"

namespace roundattn {

namespace {

void check_domain(std::size_t layers, std::size_t watershed, std::size_t kept, std::size_t total_rounds) {
    if (watershed == 0 || watershed >= layers)
        throw ConfigError("memory ratio needs 0 < L_w < L (got L=" + std::to_string(layers) +
                          ", L_w=" + std::to_string(watershed) + ")");
    if (total_rounds == 0) throw ConfigError("memory ratio needs T >= 1");
    if (kept > total_rounds)
        throw ConfigError("memory ratio needs K <= T (got K=" + std::to_string(kept) +
                          ", T=" + std::to_string(total_rounds) + ")");
}

constexpr std::array<ReferenceModelRow, 10> kRows{{
    {"Qwen2.5", "0.5B", 24, 11, 54},
    {"Qwen2.5", "1.5B", 28, 13, 54},
    {"Qwen2.5", "3B", 36, 12, 67},
    {"Qwen2.5", "7B", 28, 10, 64},
    {"Qwen2.5", "14B", 42, 19, 55},
    {"Qwen2.5", "72B", 80, 18, 78},
    {"Llama3", "8B", 28, 5, 82},
    {"Llama3", "70B", 28, 5, 82},
    {"Llama3.2", "1B", 16, 5, 69},
    {"Llama3.2", "3B", 28, 5, 82},
}};

}  // namespace

double memory_ratio(std::size_t layers, std::size_t watershed, std::size_t kept, std::size_t total_rounds) {
    check_domain(layers, watershed, kept, total_rounds);
    const double lw = static_cast<double>(watershed) / static_cast<double>(layers);
    const double kt = static_cast<double>(kept) / static_cast<double>(total_rounds);
    return lw + kt * (1.0 - lw);
}

FootprintReport footprint_report(const FootprintParams& p) {
    check_domain(p.layers, p.watershed, p.kept, p.total_rounds);
    if (p.batch == 0 || p.seq_len == 0 || p.hidden == 0)
        throw ConfigError("footprint parameters B, S and H must be positive");
    const double unit = 4.0 * static_cast<double>(p.batch) * static_cast<double>(p.seq_len) *
                        static_cast<double>(p.hidden);
    const double kt = static_cast<double>(p.kept) / static_cast<double>(p.total_rounds);
    FootprintReport r;
    r.original_bytes = unit * static_cast<double>(p.layers);
    r.round_bytes = unit * static_cast<double>(p.watershed) + unit * kt * static_cast<double>(p.layers - p.watershed);
    r.ratio = r.round_bytes / r.original_bytes;
    return r;
}

int save_percent(std::size_t layers, std::size_t watershed, std::size_t kept, std::size_t total_rounds) {
    check_domain(layers, watershed, kept, total_rounds);
    // saving = (1 - L_w/L)(1 - K/T) = (L - L_w)(T - K) / (L T); percent rounded half-up.
    const std::uint64_t num = 100ull * (layers - watershed) * (total_rounds - kept);
    const std::uint64_t den = static_cast<std::uint64_t>(layers) * total_rounds;
    return static_cast<int>((2 * num + den) / (2 * den));
}

std::span<const ReferenceModelRow> reference_rows() noexcept { return kRows; }

}  // namespace roundattn
