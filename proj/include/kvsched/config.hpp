#pragma once

// Cluster/simulation configuration with JSON load/save. A saved config parses
// back to an identical struct, so format(parse(format(c))) == format(c).

#include "kvsched/perfmodel.hpp"
#include "kvsched/scheduler.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace kvsched::sim {

struct InstanceSpec {
    int id = 0;
    int64_t capacity_blocks = 0;
};

// Overflow handling when an instance runs out of KV blocks:
//   infinite  - borrow blocks on other instances, planner rebalances
//   strawman  - borrow blocks but never rebalance (no planner moves)
//   static_alloc - no borrowing; overflowing requests stall until space frees
enum class Policy { infinite, strawman, static_alloc };

Policy parse_policy(const std::string& name); // "infinite" | "strawman" | "static"
std::string policy_name(Policy p);

struct ControlPlaneConfig {
    int64_t heartbeat_every_steps = 10;      // decode steps between heartbeats
    double heartbeat_idle_interval_s = 0.05; // cadence fallback while not decoding
    double planning_period_s = 0.25;         // global planner cadence
    double link_latency_s = 0.002;           // one-way message latency
    double reservation_timeout_s = 1.0;
    double stale_after_s = 1.0;              // heartbeat age before an instance is unplannable
    double role_lock_hold_s = 0.5;

    void validate() const;
};

// KV blocks migrate one transfer at a time, paced by the source's decode
// steps. Up to overlap_cap_tokens of in-flight data per step hides under the
// step's compute; each token past the cap stretches the step by
// over_cap_penalty_per_token (fraction of the base step time).
struct MigrationConfig {
    int64_t step_tokens = 16;
    int64_t overlap_cap_tokens = 16;
    double over_cap_penalty_per_token = 0.086 / 16.0;

    void validate() const;
};

// Scripted block move for experiments: at time at_s, ask src to send
// num_blocks of req_id to dst, bypassing the planner.
struct InjectedMove {
    double at_s = 0.0;
    int64_t req_id = 0;
    int src = -1;
    int dst = -1;
    int64_t num_blocks = 0;
};

struct ClusterConfig {
    uint64_t seed = 1;
    Policy policy = Policy::infinite;
    std::vector<InstanceSpec> instances;
    perf::ModelShape shape;
    perf::PerfCurve f; // batch-rate curve
    perf::PerfCurve g; // context-rate curve
    sched::SchedulerConfig sched;
    ControlPlaneConfig ctrl;
    MigrationConfig migration;
    double prefill_cost_per_token_s = 2e-5;
    double tps_window_s = 1.0;          // width of throughput-series buckets
    int64_t spot_check_every_steps = 0; // 0 disables in-run attention spot checks
    std::vector<InjectedMove> injected_moves;

    void validate() const;
};

ClusterConfig default_cluster_config(int n_instances = 4, int64_t capacity_blocks = 256);

ClusterConfig parse_cluster_config(const std::string& text);
ClusterConfig load_cluster_config(const std::string& path);
std::string format_cluster_config(const ClusterConfig& cfg);
void save_cluster_config(const ClusterConfig& cfg, const std::string& path);

// Cluster snapshot files for standalone planning (JSON, schema_version 1).
// Batch is derived from the request list; role_lock is "none", "debtor" or
// "creditor".
std::vector<sched::InstanceSnapshot> parse_snapshots(const std::string& text);
std::vector<sched::InstanceSnapshot> load_snapshots(const std::string& path);
std::string format_snapshots(const std::vector<sched::InstanceSnapshot>& snaps);

// Deterministic text rendering of one planning round.
std::string format_round_plan(const sched::RoundPlan& plan, double before_tps);

} // namespace kvsched::sim
