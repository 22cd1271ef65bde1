// Copyright (C) 2026 The roundattn Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>

namespace roundattn {

/// Device KV memory with round selection relative to keeping every round:
/// L_w/L + (K/T)(1 - L_w/L). Requires 0 < L_w < L, 0 <= K <= T, T >= 1.
double memory_ratio(std::size_t layers, std::size_t watershed, std::size_t kept, std::size_t total_rounds);

struct FootprintParams {
    std::uint64_t batch = 1;
    std::uint64_t seq_len = 1024;
    std::uint64_t hidden = 896;
    std::size_t layers = 24;
    std::size_t watershed = 11;
    std::size_t kept = 0;
    std::size_t total_rounds = 1;
};

struct FootprintReport {
    /// 2 (K, V) * 2 bytes * B * S * H * L
    double original_bytes = 0.0;
    double round_bytes = 0.0;
    double ratio = 0.0;
};

FootprintReport footprint_report(const FootprintParams& p);

/// 100 * (1 - ratio) rounded half-up to a whole percent, computed in exact integer arithmetic.
int save_percent(std::size_t layers, std::size_t watershed, std::size_t kept, std::size_t total_rounds);

/// Reported watershed layers and memory savings for released models.
struct ReferenceModelRow {
    std::string_view family;
    std::string_view size;
    std::size_t layers;
    std::size_t watershed;
    int reported_save_percent;
};

inline constexpr int kReferenceTableVersion = 1;

std::span<const ReferenceModelRow> reference_rows() noexcept;

}  // namespace roundattn
