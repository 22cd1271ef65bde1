// Copyright (C) 2026 The roundattn Authors
// SPDX-License-Identifier: Apache-2.0

#include "roundattn/cli.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include <CLI11.hpp>

#include "roundattn/error.hpp"
#include "roundattn/memory_model.hpp"

namespace roundattn {

namespace fs = std::filesystem;

Json cmd_memory(const MemoryArgs& args) {
    Json r = report_header("memory");
    Json params{{"layers", args.layers},
                {"watershed", args.watershed ? Json(*args.watershed) : Json(nullptr)},
                {"kept", args.kept},
                {"rounds", args.rounds},
                {"batch", args.batch},
                {"seq_len", args.seq_len},
                {"hidden", args.hidden}};
    r["params"] = params;
    if (args.watershed) {
        const FootprintReport f = footprint_report({args.batch, args.seq_len, args.hidden, args.layers, *args.watershed,
                                                    args.kept, args.rounds});
        const double ratio = memory_ratio(args.layers, *args.watershed, args.kept, args.rounds);
        Json result;
        result["ratio"] = ratio;
        result["save_percent"] = save_percent(args.layers, *args.watershed, args.kept, args.rounds);
        result["original_bytes"] = f.original_bytes;
        result["round_bytes"] = f.round_bytes;
        result["footprint_ratio"] = f.ratio;
        result["identity_error"] = std::abs(f.ratio - ratio);
        r["result"] = result;
    } else {
        r["result"] = nullptr;
    }
    Json rows = Json::array();
    for (const ReferenceModelRow& row : reference_rows()) {
        const int computed = save_percent(row.layers, row.watershed, 0, 1);
        const double ratio = memory_ratio(row.layers, row.watershed, 0, 1);
        const FootprintReport f = footprint_report({1, 1024, 1024, row.layers, row.watershed, 0, 1});
        rows.push_back({{"family", row.family},
                        {"size", row.size},
                        {"layers", row.layers},
                        {"watershed", row.watershed},
                        {"ratio", ratio},
                        {"identity_error", std::abs(f.ratio - ratio)},
                        {"reported_save_percent", row.reported_save_percent},
                        {"computed_save_percent", computed},
                        {"match", computed == row.reported_save_percent}});
    }
    r["reference_table_version"] = kReferenceTableVersion;
    r["reference_rows"] = std::move(rows);
    return r;
}

namespace {

enum class InputKind { conversation, trace };

struct AnalyzeInput {
    fs::path path;
    InputKind kind;
};

InputKind classify(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw InputError("cannot open " + p.string());
    std::stringstream ss;
    ss << in.rdbuf();
    try {
        const auto j = nlohmann::json::parse(ss.str());
        if (j.is_object() && j.contains("round_boundaries")) return InputKind::trace;
    } catch (const nlohmann::json::parse_error&) {
        // reported by the conversation parser
    }
    return InputKind::conversation;
}

std::vector<AnalyzeInput> expand_inputs(const std::vector<fs::path>& inputs) {
    std::vector<AnalyzeInput> out;
    for (const fs::path& p : inputs) {
        if (fs::is_directory(p)) {
            std::vector<fs::path> files;
            for (const auto& e : fs::directory_iterator(p))
                if (e.is_regular_file() && e.path().extension() == ".json") files.push_back(e.path());
            std::sort(files.begin(), files.end());
            for (const fs::path& f : files) out.push_back({f, classify(f)});
        } else if (fs::is_regular_file(p)) {
            out.push_back({p, classify(p)});
        } else {
            throw InputError("input " + p.string() + " does not exist");
        }
    }
    return out;
}

Json distribution_json(const RoundDistribution& d) {
    return {{"rounds", d.rounds}, {"masses", d.masses}, {"degenerate", d.degenerate}};
}

Json analysis_json(const RoundAnalysis& a) {
    Json layers = Json::array();
    for (std::size_t l = 0; l < a.question.size(); ++l) {
        Json layer;
        layer["layer"] = l;
        layer["p_q"] = distribution_json(a.question[l]);
        layer["p_a"] = l < a.answer.size() ? distribution_json(a.answer[l]) : Json(nullptr);
        layer["spearman"] = l < a.spearman.size() ? Json(a.spearman[l]) : Json(nullptr);
        layers.push_back(std::move(layer));
    }
    return {{"current_round", a.current_round}, {"layers", std::move(layers)}, {"kl_curve", to_json(a.curve)}};
}

std::vector<LayerAttention> capture_conversation(const Model& model, const Conversation& conv, std::size_t current) {
    const Round& cur = conv.rounds[current];
    const std::vector<TokenId> ids = conv.token_ids();
    KVCache cache = make_cache(model.config());
    ForwardOptions opts;
    opts.capture = LayerRange{0, model.config().layers};
    opts.capture_from_position = cur.question.begin;
    return model
        .prefill(std::span<const TokenId>(ids).first(static_cast<std::size_t>(cur.span().end)), 0, cache, opts)
        .captures;
}

}  // namespace

AnalyzeOutput cmd_analyze(const AnalyzeArgs& args) {
    if (args.inputs.empty()) throw InputError("analyze needs at least one input");
    AnalyzeOutput out;
    const std::vector<AnalyzeInput> inputs = expand_inputs(args.inputs);
    std::optional<Model> model;
    Json entries = Json::array();
    Json skipped = Json::array();
    std::vector<KLCurve> curves;
    std::optional<std::size_t> layer_count;

    for (const AnalyzeInput& in : inputs) {
        const std::string name = in.path.generic_string();
        RoundAnalysis analysis;
        std::size_t rounds = 0;
        if (in.kind == InputKind::trace) {
            const AttentionTrace trace = load_attention_trace_file(in.path);
            rounds = trace.rounds.size();
            if (rounds < 2) {
                out.warnings.push_back(name + ": single-round input skipped");
                skipped.push_back({{"input", name}, {"reason", "fewer than two rounds"}});
                continue;
            }
            std::vector<LayerAttention> captures;
            for (std::size_t l = 0; l < trace.num_layers; ++l) captures.push_back(trace_layer(trace, l));
            analysis = analyze_round(captures, trace.rounds, rounds - 1);
        } else {
            const Conversation conv = load_conversation_file(in.path);
            rounds = conv.rounds.size();
            if (rounds < 2) {
                out.warnings.push_back(name + ": single-round input skipped");
                skipped.push_back({{"input", name}, {"reason", "fewer than two rounds"}});
                continue;
            }
            if (!model) model.emplace(args.model);
            analysis = analyze_round(capture_conversation(*model, conv, rounds - 1), conv.rounds, rounds - 1);
        }
        const std::size_t layers = analysis.question.size();
        if (layer_count && *layer_count != layers)
            throw InputError(name + " has " + std::to_string(layers) + " layers, earlier inputs have " +
                             std::to_string(*layer_count));
        layer_count = layers;
        curves.push_back(analysis.curve);
        Json e;
        e["input"] = name;
        e["source"] = in.kind == InputKind::trace ? "trace" : "conversation";
        e["rounds"] = rounds;
        e.update(analysis_json(analysis));
        entries.push_back(std::move(e));
    }
    if (curves.empty()) throw InputError("no input has at least two rounds");
    const WatershedResult ws = detect_watershed(curves, args.watershed);

    Json& r = out.report;
    r = report_header("analyze");
    r["seed"] = args.model.seed;
    r["model"] = model ? to_json(args.model) : Json(nullptr);
    r["inputs"] = std::move(entries);
    r["skipped"] = std::move(skipped);
    r["watershed"] = {{"layer", ws.watershed},
                      {"criterion", ws.criterion},
                      {"tau", args.watershed.tau},
                      {"corpus_size", ws.corpus_size},
                      {"mean_curve", to_json(ws.mean_curve)}};
    return out;
}

namespace {

struct WatershedChoice {
    std::size_t layer = 0;
    Json info;
};

std::vector<Conversation> load_corpus(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw InputError("calibration corpus " + dir.string() + " is not a directory");
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_regular_file() && e.path().extension() == ".json") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    std::vector<Conversation> corpus;
    for (const fs::path& f : files) corpus.push_back(load_conversation_file(f));
    return corpus;
}

WatershedChoice resolve_watershed(const RunConfig& cfg, const Model& model) {
    if (cfg.watershed.has_value() == cfg.calibrate.has_value())
        throw ConfigError("pipeline runs need exactly one of --lw and --calibrate");
    if (cfg.watershed) return {*cfg.watershed, {{"layer", *cfg.watershed}, {"source", "override"}}};
    const std::vector<Conversation> corpus = load_corpus(*cfg.calibrate);
    const WatershedResult ws = calibrate_watershed(model, corpus, cfg.calibration);
    return {ws.watershed,
            {{"layer", ws.watershed},
             {"source", "calibration"},
             {"corpus", cfg.calibrate->generic_string()},
             {"criterion", ws.criterion},
             {"corpus_size", ws.corpus_size},
             {"mean_curve", to_json(ws.mean_curve)}}};
}

struct TurnRecord {
    std::string question;
    TurnOutput output;
};

struct RunResult {
    std::vector<TurnRecord> turns;
    std::size_t ingested_rounds = 0;
    std::size_t exchanges = 0;
    ConversationLedger ledger;
    TransferCounters totals;
};

RunResult execute(const RunConfig& cfg, const Model& model, std::size_t watershed, const Conversation& conv,
                  PipelineMode mode, const SelectionPolicy& policy) {
    const std::size_t total = conv.exchanges.size();
    const std::size_t replay = cfg.replay_last.value_or(total);
    if (replay == 0 || replay > total)
        throw ConfigError("--replay-last must be between 1 and the number of exchanges (" + std::to_string(total) +
                          ")");
    if (cfg.max_decode_steps <= 0) throw ConfigError("--max-decode must be positive");
    const std::size_t ingest = total - replay;

    StoreConfig sc;
    sc.layers = model.config().layers;
    sc.watershed = watershed;
    sc.hidden = model.config().d_model;
    sc.device_capacity_bytes = cfg.device_capacity_bytes;
    TieredStore store(sc);

    PipelineConfig pc = cfg.pipeline;
    pc.mode = mode;
    pc.watershed = watershed;
    pc.policy = policy;
    Session session(model, store, 1, pc);

    RunResult out;
    out.exchanges = total;
    out.ingested_rounds = ingest;
    if (ingest > 0) {
        const std::vector<TokenId> ids = conv.token_ids();
        session.ingest_history(std::span<const Round>(conv.rounds).first(ingest), ids);
    }
    for (std::size_t i = ingest; i < total; ++i) {
        const std::string& q = conv.exchanges[i].question;
        out.turns.push_back({q, session.run_turn(encode_segment(q), cfg.max_decode_steps)});
    }
    session.end_session();
    out.ledger = store.ledger(1);
    out.totals = store.totals();
    return out;
}

Json run_config_json(const RunConfig& cfg) {
    Json j;
    j["max_decode_steps"] = cfg.max_decode_steps;
    j["replay_last"] = cfg.replay_last ? Json(*cfg.replay_last) : Json(nullptr);
    j["device_capacity_bytes"] = cfg.device_capacity_bytes;
    j["drop"] = to_json(cfg.pipeline.drop);
    j["cost_model"] = to_json(cfg.pipeline.cost);
    return j;
}

Json turn_json(const TurnRecord& t) {
    Json j;
    j["round"] = t.output.metrics.round;
    j["question"] = printable(t.question);
    j["answer"] = printable(t.output.text);
    j["answer_tokens"] = t.output.answer_tokens;
    j["metrics"] = to_json(t.output.metrics);
    return j;
}

struct Totals {
    std::size_t turns = 0;
    std::size_t turns_with_history = 0;
    std::size_t selection_invocations = 0;
    std::size_t upper_h2d_events = 0;
    std::size_t max_upper_h2d_events = 0;
    std::size_t lower_h2d_events = 0;
    std::size_t d2h_events = 0;
    std::uint64_t transfer_bytes = 0;
    std::int64_t tokens_attended = 0;
    std::int64_t history_tokens = 0;
    double simulated_cost = 0.0;
};

Totals totals_of(const RunResult& r) {
    Totals t;
    for (const TurnRecord& rec : r.turns) {
        const TurnMetrics& m = rec.output.metrics;
        ++t.turns;
        if (m.has_history) ++t.turns_with_history;
        t.selection_invocations += m.selection_invocations;
        t.upper_h2d_events += m.upper_h2d_events;
        t.max_upper_h2d_events = std::max(t.max_upper_h2d_events, m.upper_h2d_events);
        t.lower_h2d_events += m.lower_h2d_events;
        t.d2h_events += m.d2h_events;
        t.transfer_bytes += m.upper_h2d_bytes + m.lower_h2d_bytes + m.d2h_bytes;
        t.tokens_attended += m.tokens_attended;
        t.history_tokens += m.history_tokens;
        t.simulated_cost += m.cost.total;
    }
    return t;
}

Json totals_json(const Totals& t) {
    return {{"turns", t.turns},
            {"turns_with_history", t.turns_with_history},
            {"selection_invocations", t.selection_invocations},
            {"upper_h2d_events", t.upper_h2d_events},
            {"lower_h2d_events", t.lower_h2d_events},
            {"d2h_events", t.d2h_events},
            {"transfer_bytes", t.transfer_bytes},
            {"tokens_attended", t.tokens_attended},
            {"history_tokens", t.history_tokens},
            {"simulated_cost", t.simulated_cost}};
}

Json conversation_json(const RunConfig& cfg, const RunResult& r) {
    return {{"path", cfg.conversation.generic_string()},
            {"exchanges", r.exchanges},
            {"ingested_rounds", r.ingested_rounds},
            {"replayed_turns", r.turns.size()}};
}

std::size_t divergence(const RunResult& a, const RunResult& b) {
    std::size_t d = 0;
    for (std::size_t i = 0; i < std::min(a.turns.size(), b.turns.size()); ++i) {
        const auto& x = a.turns[i].output.answer_tokens;
        const auto& y = b.turns[i].output.answer_tokens;
        const std::size_t common = std::min(x.size(), y.size());
        for (std::size_t k = 0; k < common; ++k) d += x[k] != y[k] ? 1 : 0;
        d += std::max(x.size(), y.size()) - common;
    }
    return d;
}

}  // namespace

Json cmd_run(const RunConfig& cfg) {
    cfg.model.validate();
    const Model model(cfg.model);
    const WatershedChoice ws = resolve_watershed(cfg, model);
    const Conversation conv = load_conversation_file(cfg.conversation);
    const RunResult r = execute(cfg, model, ws.layer, conv, cfg.pipeline.mode, cfg.pipeline.policy);

    Json j = report_header("run");
    j["seed"] = cfg.model.seed;
    j["model"] = to_json(cfg.model);
    j["mode"] = to_string(cfg.pipeline.mode);
    j["policy"] = to_json(cfg.pipeline.policy);
    j["watershed"] = ws.info;
    j["config"] = run_config_json(cfg);
    j["conversation"] = conversation_json(cfg, r);
    Json turns = Json::array();
    for (const TurnRecord& t : r.turns) turns.push_back(turn_json(t));
    j["turns"] = std::move(turns);
    j["totals"] = totals_json(totals_of(r));
    Json ledger;
    ledger["totals"] = to_json(r.ledger.totals);
    ledger["events"] = r.ledger.events.size();
    Json per_turn = Json::array();
    for (const TurnTransferRecord& t : r.ledger.turns)
        per_turn.push_back({{"turn", t.turn}, {"delta", to_json(t.delta)}, {"device_used_bytes", t.device_used_bytes}});
    ledger["turns"] = std::move(per_turn);
    j["ledger"] = std::move(ledger);
    return j;
}

Json cmd_compare(const RunConfig& cfg, const std::vector<std::string>& policies) {
    if (policies.size() < 2) throw ConfigError("compare needs at least two policies");
    cfg.model.validate();
    const Model model(cfg.model);
    const WatershedChoice ws = resolve_watershed(cfg, model);
    const Conversation conv = load_conversation_file(cfg.conversation);
    const RunResult reference =
        execute(cfg, model, ws.layer, conv, PipelineMode::baseline, cfg.pipeline.policy);

    Json rows = Json::array();
    for (const std::string& name : policies) {
        const bool baseline = name == "baseline";
        SelectionPolicy policy = cfg.pipeline.policy;
        if (!baseline) policy.kind = parse_strategy(name);
        const RunResult r = baseline ? reference
                                     : execute(cfg, model, ws.layer, conv, PipelineMode::round_attention, policy);
        const Totals t = totals_of(r);
        Json row;
        row["policy"] = baseline ? "baseline" : to_string(policy.kind);
        row["mode"] = baseline ? "baseline" : "round_attention";
        row["turns"] = t.turns;
        row["tokens_attended"] = t.tokens_attended;
        row["history_tokens"] = t.history_tokens;
        row["attended_reduction"] =
            t.history_tokens > 0 ? 1.0 - static_cast<double>(t.tokens_attended) / static_cast<double>(t.history_tokens)
                                 : 0.0;
        row["simulated_cost"] = t.simulated_cost;
        row["transfer_bytes"] = t.transfer_bytes;
        row["selection_invocations"] = t.selection_invocations;
        row["upper_h2d_events"] = t.upper_h2d_events;
        row["max_upper_h2d_events_per_turn"] = t.max_upper_h2d_events;
        row["divergence_tokens"] = divergence(r, reference);
        if (!baseline && policy.kind == StrategyKind::token_baseline) {
            std::size_t segments = 0, touches = 0;
            std::uint64_t bytes = 0;
            for (const TurnRecord& rec : r.turns)
                if (rec.output.metrics.token) {
                    segments += rec.output.metrics.token->segments;
                    touches += rec.output.metrics.token->layer_touches;
                    bytes += rec.output.metrics.token->bytes;
                }
            row["token_transfers"] = {{"segments", segments}, {"layer_touches", touches}, {"bytes", bytes}};
        } else {
            row["token_transfers"] = nullptr;
        }
        rows.push_back(std::move(row));
    }

    Json j = report_header("compare");
    j["seed"] = cfg.model.seed;
    j["model"] = to_json(cfg.model);
    j["policy"] = to_json(cfg.pipeline.policy);
    j["watershed"] = ws.info;
    j["config"] = run_config_json(cfg);
    j["conversation"] = conversation_json(cfg, reference);
    j["policies"] = policies;
    j["rows"] = std::move(rows);
    return j;
}

std::string cost_curves_csv(const Json& run_report) {
    std::ostringstream os;
    os << "turn,layer,step,phase,cost\n";
    for (const Json& t : run_report.at("turns"))
        for (const Json& e : t.at("metrics").at("cost").at("curves"))
            os << t.at("round").get<std::size_t>() << ',' << e.at("layer").get<std::size_t>() << ','
               << e.at("step").get<std::string>() << ',' << e.at("phase").get<std::string>() << ','
               << e.at("cost").dump() << '\n';
    return os.str();
}

std::string turns_csv(const Json& run_report) {
    std::ostringstream os;
    os << "round,K,candidate_rounds,selection_invocations,upper_h2d_events,lower_h2d_events,d2h_events,"
          "upper_h2d_bytes,d2h_bytes,history_tokens,tokens_attended,decode_tokens,device_bytes_upper_phase,cost\n";
    for (const Json& t : run_report.at("turns")) {
        const Json& m = t.at("metrics");
        os << m.at("round").dump() << ',' << m.at("K").dump() << ',' << m.at("candidate_rounds").dump() << ','
           << m.at("selection_invocations").dump() << ',' << m.at("upper_h2d_events").dump() << ','
           << m.at("lower_h2d_events").dump() << ',' << m.at("d2h_events").dump() << ','
           << m.at("upper_h2d_bytes").dump() << ',' << m.at("d2h_bytes").dump() << ','
           << m.at("history_tokens").dump() << ',' << m.at("tokens_attended").dump() << ','
           << m.at("decode_tokens").dump() << ',' << m.at("device_bytes_upper_phase").dump() << ','
           << m.at("cost").at("total").dump() << '\n';
    }
    return os.str();
}

namespace {

void write_file(const fs::path& p, const std::string& content) {
    std::ofstream f(p, std::ios::binary);
    if (!f) throw InputError("cannot write " + p.string());
    f << content;
}

void add_model_flags(CLI::App* app, ModelConfig& m, std::string& reduction) {
    app->add_option("--model-layers", m.layers, "Transformer layers")->capture_default_str();
    app->add_option("--heads", m.heads, "Attention heads")->capture_default_str();
    app->add_option("--d-model", m.d_model, "Model width")->capture_default_str();
    app->add_option("--seed", m.seed, "Weight seed")->capture_default_str();
    app->add_option("--head-reduction", reduction, "Head reduction for captured scores")
        ->check(CLI::IsMember({"sum", "max"}))
        ->capture_default_str();
}

void apply_reduction(ModelConfig& m, const std::string& reduction) {
    m.head_reduction = reduction == "max" ? HeadReduction::max_renormalize : HeadReduction::sum_renormalize;
}

struct RunFlags {
    RunConfig cfg;
    std::string strategy = "top";
    std::string reduction = "sum";
    std::string criterion = "largest_drop";
    std::size_t drop_window = 8;
    std::optional<std::string> calibrate;
    std::string out_dir;
    bool baseline = false;
    std::vector<std::string> policies;
};

void add_run_flags(CLI::App* app, RunFlags& f) {
    add_model_flags(app, f.cfg.model, f.reduction);
    SelectionPolicy& p = f.cfg.pipeline.policy;
    CostModel& c = f.cfg.pipeline.cost;
    app->add_option("--conversation", f.cfg.conversation, "Conversation JSON file")->required();
    app->add_option("--strategy", f.strategy, "fixed, top, adaptive, all or token")->capture_default_str();
    app->add_option("--v", p.v, "Fixed threshold")->capture_default_str();
    app->add_option("--fraction", p.fraction, "Top-percent fraction")->capture_default_str();
    app->add_option("--kappa", p.kappa, "Adaptive multiplier")->capture_default_str();
    app->add_option("--min-rounds", p.min_rounds, "Minimum kept rounds")->capture_default_str();
    app->add_option("--lw", f.cfg.watershed, "Watershed layer");
    app->add_option("--calibrate", f.calibrate, "Directory of calibration conversations");
    app->add_option("--criterion", f.criterion, "Calibration criterion")
        ->check(CLI::IsMember({"largest_drop", "threshold"}))
        ->capture_default_str();
    app->add_option("--tau", f.cfg.calibration.tau, "Calibration threshold")->capture_default_str();
    app->add_option("--drop-window", f.drop_window, "Idle turns before an upper block is dropped (0 disables)")
        ->capture_default_str();
    app->add_option("--drop-protect", f.cfg.pipeline.drop.protect_recent, "Most recent rounds never dropped")
        ->capture_default_str();
    app->add_option("--max-decode", f.cfg.max_decode_steps, "Decode steps per answer")->capture_default_str();
    app->add_option("--replay-last", f.cfg.replay_last, "Replay only the last N questions");
    app->add_option("--device-capacity", f.cfg.device_capacity_bytes, "Device tier bytes")->capture_default_str();
    app->add_option("--h2d-us-per-kib", c.h2d_us_per_kib)->capture_default_str();
    app->add_option("--d2h-us-per-kib", c.d2h_us_per_kib)->capture_default_str();
    app->add_option("--ns-per-1024-macs", c.ns_per_1024_macs)->capture_default_str();
    app->add_option("--step-overhead-us", c.step_overhead_us)->capture_default_str();
    app->add_option("--out", f.out_dir, "Directory for report.json and CSV sidecars");
}

void finish_run_flags(RunFlags& f) {
    apply_reduction(f.cfg.model, f.reduction);
    f.cfg.pipeline.policy.kind = parse_strategy(f.strategy);
    f.cfg.pipeline.mode = f.baseline ? PipelineMode::baseline : PipelineMode::round_attention;
    f.cfg.pipeline.drop.window = f.drop_window == 0 ? std::nullopt : std::optional<std::size_t>(f.drop_window);
    f.cfg.calibration.criterion =
        f.criterion == "threshold" ? WatershedCriterion::threshold : WatershedCriterion::largest_drop;
    if (f.calibrate) f.cfg.calibrate = fs::path(*f.calibrate);
}

fs::path prepare_out(const std::string& dir) {
    fs::path p(dir);
    std::error_code ec;
    fs::create_directories(p, ec);
    if (ec) throw InputError("cannot create output directory " + dir + ": " + ec.message());
    return p;
}

/// Replaces `--config FILE` after the subcommand with the file's flags, placed ahead of the
/// command-line flags so later occurrences win. Keys may be top-level or under [<subcommand>].
std::vector<std::string> expand_config(std::span<const std::string> args) {
    std::vector<std::string> out(args.begin(), args.end());
    for (std::size_t i = 1; i < out.size(); ++i) {
        std::string file;
        std::size_t consumed = 1;
        if (out[i] == "--config") {
            if (i + 1 >= out.size()) return out;
            file = out[i + 1];
            consumed = 2;
        } else if (out[i].rfind("--config=", 0) == 0) {
            file = out[i].substr(9);
        } else {
            continue;
        }
        std::ifstream in(file);
        if (!in) throw InputError("cannot read config file " + file);
        std::vector<std::string> flags;
        for (const CLI::ConfigItem& item : CLI::ConfigTOML().from_config(in)) {
            if (item.name == "++" || item.name == "--") continue;
            if (!item.parents.empty() && !(item.parents.size() == 1 && item.parents.front() == out.front())) continue;
            if (item.inputs.size() == 1 && item.inputs.front() == "false") continue;
            flags.push_back("--" + item.name);
            if (item.inputs.size() == 1 && item.inputs.front() == "true") continue;
            flags.insert(flags.end(), item.inputs.begin(), item.inputs.end());
        }
        out.erase(out.begin() + static_cast<std::ptrdiff_t>(i), out.begin() + static_cast<std::ptrdiff_t>(i + consumed));
        out.insert(out.begin() + 1, flags.begin(), flags.end());
        break;
    }
    return out;
}

}  // namespace

int run_command(std::span<const std::string> args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Round-granularity KV cache selection and offload simulator", "roundattn"};
    app.require_subcommand(1);
    app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    std::string config_file;

    MemoryArgs mem;
    std::string mem_out;
    auto* memory = app.add_subcommand("memory", "Memory ratio and reference footprint rows");
    memory->add_option("--config", config_file, "TOML file of flag values; command-line flags take precedence");
    memory->add_option("--model-layers", mem.layers, "Transformer layers L")->capture_default_str();
    memory->add_option("--lw", mem.watershed, "Watershed layer L_w");
    memory->add_option("--kept", mem.kept, "Kept rounds K")->capture_default_str();
    memory->add_option("--rounds", mem.rounds, "Total rounds T")->capture_default_str();
    memory->add_option("--batch", mem.batch, "Batch size B")->capture_default_str();
    memory->add_option("--seq-len", mem.seq_len, "Sequence length S")->capture_default_str();
    memory->add_option("--hidden", mem.hidden, "Hidden size H")->capture_default_str();
    memory->add_option("--out", mem_out, "Directory for report.json");

    AnalyzeArgs an;
    std::string an_reduction = "sum", an_criterion = "largest_drop", an_out;
    std::vector<std::string> an_inputs;
    auto* analyze = app.add_subcommand("analyze", "Round attention statistics and watershed detection");
    analyze->add_option("--config", config_file, "TOML file of flag values; command-line flags take precedence");
    analyze->add_option("inputs", an_inputs, "Conversation files, trace headers or directories")->required();
    add_model_flags(analyze, an.model, an_reduction);
    analyze->add_option("--criterion", an_criterion, "Watershed criterion")
        ->check(CLI::IsMember({"largest_drop", "threshold"}))
        ->capture_default_str();
    analyze->add_option("--tau", an.watershed.tau, "Threshold criterion level")->capture_default_str();
    analyze->add_option("--out", an_out, "Directory for report.json and kl_curves.csv");

    RunFlags rf;
    auto* run = app.add_subcommand("run", "Replay a conversation through the pipeline");
    run->add_option("--config", config_file, "TOML file of flag values; command-line flags take precedence");
    add_run_flags(run, rf);
    run->add_flag("--baseline", rf.baseline, "Full-attention baseline without offload");

    RunFlags cf;
    auto* compare = app.add_subcommand("compare", "Paired runs of several policies");
    compare->add_option("--config", config_file, "TOML file of flag values; command-line flags take precedence");
    add_run_flags(compare, cf);
    compare->add_option("--policies", cf.policies, "baseline, all, fixed, top, adaptive, token")
        ->delimiter(',')
        ->required();

    try {
        const std::vector<std::string> expanded = expand_config(args);
        std::vector<std::string> argv(expanded.rbegin(), expanded.rend());
        app.parse(argv);
    } catch (const InputError& e) {
        err << "input error: " << e.what() << "\n";
        return kExitInputError;
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) {
            out << app.help();
            return kExitOk;
        }
        err << "error: " << e.what() << "\n";
        return kExitInputError;
    }

    try {
        if (*memory) {
            const Json r = cmd_memory(mem);
            const std::string text = dump_report(r);
            if (!mem_out.empty()) write_file(prepare_out(mem_out) / "report.json", text);
            out << text;
        } else if (*analyze) {
            apply_reduction(an.model, an_reduction);
            an.watershed.criterion =
                an_criterion == "threshold" ? WatershedCriterion::threshold : WatershedCriterion::largest_drop;
            for (const std::string& s : an_inputs) an.inputs.emplace_back(s);
            const AnalyzeOutput r = cmd_analyze(an);
            for (const std::string& w : r.warnings) err << "warning: " << w << "\n";
            const std::string text = dump_report(r.report);
            if (!an_out.empty()) {
                const fs::path dir = prepare_out(an_out);
                write_file(dir / "report.json", text);
                std::ostringstream csv;
                csv << "input,layer,kl\n";
                for (const Json& in : r.report.at("inputs")) {
                    const Json& curve = in.at("kl_curve");
                    for (std::size_t l = 0; l < curve.size(); ++l)
                        csv << in.at("input").get<std::string>() << ',' << l << ',' << curve[l].dump() << '\n';
                }
                write_file(dir / "kl_curves.csv", csv.str());
            }
            out << text;
        } else if (*run) {
            finish_run_flags(rf);
            const Json r = cmd_run(rf.cfg);
            const std::string text = dump_report(r);
            if (!rf.out_dir.empty()) {
                const fs::path dir = prepare_out(rf.out_dir);
                write_file(dir / "report.json", text);
                write_file(dir / "turns.csv", turns_csv(r));
                write_file(dir / "cost_curves.csv", cost_curves_csv(r));
            }
            out << text;
        } else if (*compare) {
            finish_run_flags(cf);
            const Json r = cmd_compare(cf.cfg, cf.policies);
            const std::string text = dump_report(r);
            if (!cf.out_dir.empty()) write_file(prepare_out(cf.out_dir) / "report.json", text);
            out << text;
        }
    } catch (const InputError& e) {
        err << "input error: " << e.what() << "\n";
        return kExitInputError;
    } catch (const fs::filesystem_error& e) {
        err << "input error: " << e.what() << "\n";
        return kExitInputError;
    } catch (const std::exception& e) {
        err << "internal error: " << e.what() << "\n";
        return kExitInvariantError;
    }
    return kExitOk;
}

}  // namespace roundattn
