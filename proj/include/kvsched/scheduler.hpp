#pragma once

// Global planning: classify instances into memory debtors and creditors,
// then greedily move KV blocks from overloaded debtors to under-utilized
// creditors while the modeled cluster decode throughput improves.
//
// An instance never lends and borrows at the same time, and within one
// planning round an instance never appears as both a move source and a move
// destination.

#include "kvsched/perfmodel.hpp"

#include <cstdint>
#include <optional>
#include <vector>

namespace kvsched::sched {

enum class RoleLock { none, debtor, creditor };

struct RequestResidency {
    int64_t req_id = 0;
    int64_t local_blocks = 0;   // blocks held on the home instance
    int64_t remote_blocks = 0;  // blocks lent out to hosts
    int64_t total_ctx_tokens = 0;
};

// Foreign blocks this instance hosts on behalf of another instance's request.
struct HostedBlocks {
    int64_t req_id = 0;
    int home_instance = -1;
    int64_t num_blocks = 0;
};

struct InstanceSnapshot {
    int instance_id = -1;
    int64_t batch = 0; // running requests, equals requests.size()
    int64_t mem_capacity_blocks = 0;
    int64_t mem_used_blocks = 0;
    int64_t queued = 0; // requests waiting for admission
    std::vector<RequestResidency> requests;
    std::vector<HostedBlocks> hosted;
    RoleLock role_lock = RoleLock::none;

    double mem_util() const;
    int64_t free_blocks() const { return mem_capacity_blocks - mem_used_blocks; }
    int64_t remote_blocks_total() const;
    int64_t hosted_blocks_total() const;
    // Throws ContractError naming the instance and the violated invariant.
    void validate() const;
};

struct SchedulerConfig {
    double batch_threshold = 8.0;      // beta_thres: at or below counts as a debtor
    double mem_util_threshold = 0.8;   // U_thres: at or below counts as a creditor
    double retain_local_fraction = 0.5; // floor of a request's blocks kept at home
    int64_t expected_new_request_tokens = 512; // running mean fed by the caller

    void validate() const;
};

struct ModelCtx {
    perf::ModelShape shape;
    perf::PerfCurve f;
    perf::PerfCurve g;
};

struct MoveDirective {
    int64_t req_id = 0;
    int src_instance = -1;
    int dst_instance = -1;
    int64_t num_blocks = 0;
    double est_gain = 0.0;
    bool reclaim = false; // remote blocks returning to the request's home
};

struct RoleSets {
    std::vector<int> debtors;   // instance ids, ascending batch, ties by id
    std::vector<int> creditors; // instance ids, ascending mem_util, ties by id
};

// Debtors: batch <= batch_threshold, not creditor-locked, hosting nothing.
// Creditors: mem_util <= mem_util_threshold, not debtor-locked, lending
// nothing. An instance qualifying for both counts as a debtor only.
RoleSets classify_roles(const std::vector<InstanceSnapshot>& snaps,
                        const SchedulerConfig& cfg);

// Longest-context running request of an instance; ties broken by lowest
// req_id. Empty batch yields nullopt.
std::optional<RequestResidency> pick_longest_request(const InstanceSnapshot& snap);

// Blocks of `req` that may leave its home without dropping below the
// retained-local floor: local - ceil(retain * (local + remote)), clamped at 0.
int64_t movable_blocks(const RequestResidency& req, const SchedulerConfig& cfg);

// Feasible batch after freeing `freed_blocks`:
// batch + min(queued, floor(freed_blocks * block_size / expected_tokens)).
int64_t derive_feasible_batch(const InstanceSnapshot& debtor, int64_t freed_blocks,
                              const SchedulerConfig& cfg, const perf::ModelShape& shape);

// Modeled pair TPS delta from moving k blocks of the debtor's longest request
// to the creditor, with the debtor's batch re-derived from the freed blocks.
// Pre: 0 <= k <= min(movable blocks of that request, creditor free blocks).
double estimate_pair_gain(int64_t k, const InstanceSnapshot& debtor,
                          const InstanceSnapshot& creditor,
                          const SchedulerConfig& cfg, const ModelCtx& ctx);

// One greedy planning pass. Every emitted directive has est_gain > 0,
// evaluated against the state left by the directives before it, so the
// modeled cluster TPS improves monotonically over the plan.
std::vector<MoveDirective> plan_moves(const std::vector<InstanceSnapshot>& snaps,
                                      const SchedulerConfig& cfg, const ModelCtx& ctx);

// Reclaim pass: blocks return to homes that have free space again, and hosts
// squeezed by their own demand push hosted blocks back. Reclaims relocate
// attention work without a modeled throughput gain, so they are planned
// separately from the greedy pass.
std::vector<MoveDirective> plan_reclaims(const std::vector<InstanceSnapshot>& snaps,
                                         const SchedulerConfig& cfg);

struct RoundPlan {
    std::vector<MoveDirective> reclaims;
    std::vector<MoveDirective> moves;
};

// Full planning round: reclaims first, then the greedy pass, sharing one
// src/dst registry so no instance is both a source and a destination within
// the round.
RoundPlan plan_round(const std::vector<InstanceSnapshot>& snaps,
                     const SchedulerConfig& cfg, const ModelCtx& ctx);

// Modeled TPS of a snapshot set as-is (debtor/creditor roles inferred from
// residency), used to report before/after figures for a plan.
double snapshot_cluster_tps(const std::vector<InstanceSnapshot>& snaps,
                            const ModelCtx& ctx);

} // namespace kvsched::sched
