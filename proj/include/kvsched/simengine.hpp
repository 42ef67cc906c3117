#pragma once

// Discrete-event simulation of a multi-instance decode cluster.
//
// Every instance owns an rManager block ledger; a single gManager receives
// heartbeats and (under the adaptive policy) plans block moves. Messages
// travel over a latency-delayed transport, so placement views are always a
// little stale, exactly as in a deployment. Runs are deterministic for a
// fixed config and trace: event ties break on a global sequence number and
// every container iterates in a fixed order.

#include "kvsched/config.hpp"
#include "kvsched/trace.hpp"

#include <string>
#include <vector>

namespace kvsched::sim {

struct RunOptions {
    double horizon_s = 1e5;     // hard stop; events past this are discarded
    bool record_steps = false;  // keep per-step duration records in the result
    std::string event_log_path; // JSONL event log, empty disables
};

struct RequestOutcome {
    int64_t req_id = -1;
    int instance = -1;
    double arrival_s = 0.0;
    double admitted_s = -1.0;
    double prefill_end_s = -1.0;
    double completed_s = -1.0;
    int64_t prompt_tokens = 0;
    int64_t output_tokens = 0;
    int64_t generated_tokens = 0;
    int64_t remote_peak_blocks = 0;
    bool rejected = false;

    bool completed() const { return completed_s >= 0.0; }
};

// One decode step of one instance, as committed at step start.
struct StepRecord {
    int instance = -1;
    double start_s = 0.0;
    double duration_s = 0.0;
    double base_duration_s = 0.0; // before the migration-pacing penalty
    double penalty_factor = 1.0;
    int64_t batch = 0;
    int64_t local_ctx_tokens = 0;
    int64_t hosted_ctx_tokens = 0;
    int64_t remote_ctx_tokens = 0;
    int64_t shipped_tokens = 0; // migration tokens paced into this step
    int64_t stalled = 0;        // running requests skipped for lack of a block
};

struct TpsBucket {
    double t0_s = 0.0;
    int64_t tokens = 0;
};

struct SimSummary {
    double end_s = 0.0;
    double horizon_s = 0.0;
    int64_t arrivals = 0;
    int64_t completed = 0;
    int64_t rejected = 0;
    int64_t generated_tokens = 0;
    int64_t decode_steps = 0;
    int64_t stalled_request_steps = 0;
    double generated_tps = 0.0; // generated_tokens / end_s
    double mean_latency_s = 0.0;
    double p50_latency_s = 0.0;
    double p95_latency_s = 0.0;
    int64_t planner_rounds = 0;
    int64_t planned_moves = 0;
    int64_t moves_completed = 0;
    int64_t moves_rejected = 0;
    int64_t blocks_moved = 0;
    int64_t overflow_borrows = 0; // blocks allocated remotely on local overflow
    int64_t spot_checks = 0;
    double spot_check_max_rel_err = 0.0;
};

struct SimResult {
    SimSummary summary;
    std::vector<RequestOutcome> requests; // ascending req_id
    std::vector<TpsBucket> tps_series;
    std::vector<StepRecord> steps; // empty unless RunOptions::record_steps
};

SimResult run_simulation(const ClusterConfig& cfg, const std::vector<TraceRequest>& trace,
                         const RunOptions& opt = {});

// Fixed-format renderings; byte-identical for identical results.
std::string format_summary(const SimSummary& s);
std::string format_requests_csv(const std::vector<RequestOutcome>& reqs);
std::string format_tps_csv(const std::vector<TpsBucket>& series);
std::string format_steps_csv(const std::vector<StepRecord>& steps);

} // namespace kvsched::sim
