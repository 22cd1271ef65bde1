// Copyright (C) 2026 The roundattn Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "roundattn/report.hpp"

namespace roundattn {

inline constexpr int kExitOk = 0;
inline constexpr int kExitInputError = 2;
inline constexpr int kExitInvariantError = 3;

struct MemoryArgs {
    std::size_t layers = 24;
    /// Without a watershed only the reference rows are reported.
    std::optional<std::size_t> watershed;
    std::size_t kept = 0;
    std::size_t rounds = 1;
    std::uint64_t batch = 1;
    std::uint64_t seq_len = 1024;
    std::uint64_t hidden = 896;
};

Json cmd_memory(const MemoryArgs& args);

struct AnalyzeArgs {
    /// Conversation files, trace headers or directories of either.
    std::vector<std::filesystem::path> inputs;
    ModelConfig model;
    WatershedConfig watershed;
};

struct AnalyzeOutput {
    Json report;
    std::vector<std::string> warnings;
};

AnalyzeOutput cmd_analyze(const AnalyzeArgs& args);

struct RunConfig {
    ModelConfig model;
    PipelineConfig pipeline;
    /// Exactly one of `watershed` and `calibrate` must be set.
    std::optional<std::size_t> watershed;
    std::optional<std::filesystem::path> calibrate;
    WatershedConfig calibration;
    std::filesystem::path conversation;
    int max_decode_steps = 16;
    /// Replay only the last N questions; earlier rounds are ingested as history.
    std::optional<std::size_t> replay_last;
    std::uint64_t device_capacity_bytes = 64ull << 20;
};

Json cmd_run(const RunConfig& config);

/// Policies: baseline, all, fixed, top, adaptive, token.
Json cmd_compare(const RunConfig& config, const std::vector<std::string>& policies);

/// Per-layer cost curves of a run report as CSV: turn,layer,step,phase,cost.
std::string cost_curves_csv(const Json& run_report);
/// One line per turn of a run report.
std::string turns_csv(const Json& run_report);

/// Parses `args` (without the program name), runs the subcommand and prints its report.
/// Returns kExitOk, kExitInputError or kExitInvariantError.
int run_command(std::span<const std::string> args, std::ostream& out, std::ostream& err);

}  // namespace roundattn
