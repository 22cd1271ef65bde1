// Copyright (C) 2026 The roundattn Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <string_view>

#include <json.hpp>

#include "roundattn/cost_model.hpp"
#include "roundattn/engine.hpp"
#include "roundattn/pipeline.hpp"
#include "roundattn/round_stats.hpp"
#include "roundattn/selection.hpp"
#include "roundattn/tiered_store.hpp"

namespace roundattn {

using Json = nlohmann::ordered_json;

inline constexpr int kReportSchemaVersion = 1;

/// Bytes outside printable ASCII are written as \xNN so reports stay valid UTF-8.
std::string printable(std::string_view text);

/// Report header shared by every command.
Json report_header(std::string_view kind);

Json to_json(const ModelConfig& c);
Json to_json(const SelectionPolicy& p);
Json to_json(const DropPolicy& d);
Json to_json(const CostModel& c);
Json to_json(const TransferCounters& c);
Json to_json(const TurnShape& s);
Json to_json(const CostBreakdown& c);
Json to_json(const TurnMetrics& m);
Json to_json(const KLCurve& c);

/// Serialised report followed by a newline.
std::string dump_report(const Json& report);

}  // namespace roundattn
