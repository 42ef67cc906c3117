#pragma once

// Control plane between per-instance rManagers and the cluster gManager.
//
// rManagers own their block ledgers and report placement through delta
// heartbeats (full snapshots on demand or after a gManager epoch change).
// The gManager maintains the cluster placement map, plans block moves, and
// issues move instructions. Destinations arbitrate concurrent reservation
// attempts strictly first-come-first-served in arrival order; a rejected
// mover waits for new instructions rather than retrying.
//
// Block conservation: an in-flight block stays counted at the source until
// the destination's commit is acknowledged, so no delivery schedule can lose
// or duplicate a block; at quiescence every block is counted exactly once.

#include "kvsched/scheduler.hpp"

#include <cstdint>
#include <deque>
#include <map>
#include <optional>
#include <variant>
#include <vector>

namespace kvsched::ctrl {

// Endpoint id of the gManager in message envelopes.
inline constexpr int kGManagerId = -1;

// Wire placement record (field names are part of the protocol).
struct RequestPlacementEntry {
    int64_t req_id = 0;
    int inst_id = -1;
    int64_t num_blocks = 0;
    bool local = false;
};

struct InstanceStats {
    int64_t capacity_blocks = 0;
    int64_t used_blocks = 0; // includes reserved blocks
    int64_t batch = 0;
    int64_t queued = 0;
};

struct Heartbeat {
    int inst_id = -1;
    uint64_t epoch_seen = 0;
    bool full = false;
    InstanceStats stats;
    std::vector<RequestPlacementEntry> entries; // delta unless full
};

struct HeartbeatAck {
    uint64_t epoch = 0;
    bool full_required = false;
};

// gManager -> source rManager: move num_blocks of req_id to dst_inst.
struct MoveKvCache {
    int64_t req_id = 0;
    int64_t num_blocks = 0;
    int dst_inst = -1;
};

// Source -> destination: reserve space ahead of a transfer.
struct TryMove {
    uint64_t transfer_id = 0;
    int64_t req_id = 0;
    int64_t num_blocks = 0;
    int src_inst = -1;
    int home_inst = -1; // the request's home, for destination bookkeeping
};

struct TryMoveResp {
    uint64_t transfer_id = 0;
    bool accepted = false;
};

// One block's worth of KV payload (descriptor only).
struct DataTransfer {
    uint64_t transfer_id = 0;
    int64_t req_id = 0;
    int64_t num_blocks = 0;
    int src_inst = -1;
    int home_inst = -1;
};

// Destination -> source: the chunk was committed (or the reservation was
// gone and the chunk refused, releasing the block back to the source).
struct TransferAck {
    uint64_t transfer_id = 0;
    int64_t num_blocks = 0;
    bool accepted = false;
};

using ControlMessage = std::variant<Heartbeat, HeartbeatAck, MoveKvCache, TryMove,
                                    TryMoveResp, DataTransfer, TransferAck>;

struct Envelope {
    int src = -1;
    int dst = -1;
    ControlMessage msg;
};

const char* message_kind(const ControlMessage& msg);

enum class MoveOutcome { completed, rejected, deferred };

struct MoveResult {
    MoveOutcome outcome = MoveOutcome::deferred;
    int64_t moved_blocks = 0;
};

struct RManagerConfig {
    double reservation_timeout = 1.0; // seconds without progress before expiry
};

// Per-instance block ledger plus the rManager protocol state machine.
// All methods are synchronous and side-effect-free on other machines: they
// return envelopes for the transport to deliver.
class RManager {
public:
    RManager(int inst_id, int64_t capacity_blocks, RManagerConfig cfg = {});

    int inst_id() const { return inst_id_; }
    int64_t capacity_blocks() const { return capacity_; }
    int64_t used_blocks() const { return used_; }
    int64_t reserved_blocks() const;
    // Blocks available for new allocations or reservations.
    int64_t free_blocks() const { return capacity_ - used_ - reserved_blocks(); }

    // --- block ledger (driven by the execution engine) ---

    // Allocate n blocks for a request homed here. False if they do not fit.
    bool alloc_local(int64_t req_id, int64_t n);
    // Allocate n hosted blocks for a foreign request. False if they do not fit.
    bool alloc_hosted(int64_t req_id, int home_inst, int64_t n);
    // Release everything held for a request (home or hosted). Cancels its
    // outgoing transfers and reservations. Returns blocks freed.
    int64_t free_request(int64_t req_id);

    int64_t local_blocks(int64_t req_id) const;
    int64_t hosted_blocks(int64_t req_id, int home_inst) const;
    int64_t hosted_blocks_total() const;
    bool is_home(int64_t req_id) const;
    std::vector<std::pair<int64_t, int>> hosted_keys() const;

    // --- protocol ---

    // Delta heartbeat against what was last sent; full after an epoch change
    // or when the gManager demanded one.
    Envelope make_heartbeat(double now, int64_t batch, int64_t queued);

    // Handle one delivered message; returns follow-up envelopes.
    std::vector<Envelope> on_message(const Envelope& env, double now);

    // Start executing a move instruction: clamps to what the request still
    // holds here, then asks the destination to reserve. Returns the TryMove
    // envelope, or a deferred result if nothing can move.
    std::optional<Envelope> begin_move(const MoveKvCache& mv, double now);

    // Advance outgoing transfers by a token budget (one transfer at a time,
    // FIFO). Emits one DataTransfer per fully transferred block.
    std::vector<Envelope> advance_transfers(int64_t token_budget, int block_size_tokens);

    // Tokens that will be sent if advance_transfers is called with at least
    // this budget; 0 when no transfer is active.
    int64_t pending_transfer_tokens(int block_size_tokens) const;

    // Drop reservations that made no progress for the configured timeout.
    void expire_reservations(double now);

    // Outcome of the most recently finished move for req_id, if any.
    std::optional<MoveResult> take_move_result(int64_t req_id);

    bool has_active_transfers() const;
    uint64_t epoch_seen() const { return epoch_seen_; }

private:
    struct Reservation {
        uint64_t transfer_id = 0;
        int64_t req_id = 0;
        int src_inst = -1;
        int home_inst = -1;
        int64_t blocks_remaining = 0;
        double last_progress = 0.0;
    };

    struct OutTransfer {
        uint64_t transfer_id = 0;
        int64_t req_id = 0;
        int dst_inst = -1;
        int home_inst = -1;
        bool from_home = false; // moving our own request's blocks vs hosted ones
        bool accepted = false;
        int64_t blocks_unsent = 0;
        int64_t blocks_awaiting_ack = 0;
        int64_t blocks_moved = 0;
        int64_t blocks_requested = 0;
        int64_t token_progress = 0;
    };

    Envelope to_gm(ControlMessage msg) const;
    std::map<int64_t, int64_t>* in_flight_map(bool from_home);
    void finish_transfer(OutTransfer& t, MoveOutcome outcome);

    int inst_id_;
    int64_t capacity_;
    RManagerConfig cfg_;
    int64_t used_ = 0;

    std::map<int64_t, int64_t> home_blocks_;            // req -> local blocks
    std::map<std::pair<int64_t, int>, int64_t> hosted_; // (req, home) -> blocks
    std::map<int64_t, int64_t> home_in_flight_;
    std::map<int64_t, int64_t> hosted_in_flight_; // keyed by req only

    std::vector<Reservation> reservations_;
    std::deque<OutTransfer> transfers_;
    std::map<int64_t, MoveResult> move_results_;

    uint64_t epoch_seen_ = 0;
    bool full_next_ = true; // first heartbeat is always full
    std::map<std::pair<int64_t, bool>, int64_t> last_sent_; // (req, local) -> blocks
    InstanceStats last_stats_;
    uint64_t next_transfer_seq_ = 1;
};

struct GManagerConfig {
    double stale_after = 1.0;    // seconds without a heartbeat before exclusion
    double role_lock_hold = 0.5; // seconds a directive pins src/dst roles
};

struct PlacementMapEntry {
    RequestPlacementEntry entry;
    double updated_at = 0.0;
};

// Cluster placement map plus the planning trigger. A fresh GManager starts
// with an empty map and a bumped epoch; rManagers detect the new epoch via
// heartbeat acks and fall back to full heartbeats, which rebuilds the map.
class GManager {
public:
    explicit GManager(uint64_t epoch, GManagerConfig cfg = {});

    uint64_t epoch() const { return epoch_; }

    // Apply one heartbeat; returns the ack envelope. Heartbeats carrying a
    // stale epoch or malformed entries are not applied and force a full
    // resync.
    Envelope on_heartbeat(const Heartbeat& hb, double now);

    // Snapshots for planning, derived from the map. Stale instances and
    // instances awaiting a full resync are excluded. Context lengths are
    // estimated at block granularity.
    std::vector<sched::InstanceSnapshot> snapshots(double now,
                                                   const perf::ModelShape& shape) const;

    // Run one planning round and emit MoveKvCache instructions to sources.
    struct PlanOutput {
        sched::RoundPlan plan;
        std::vector<Envelope> envelopes;
    };
    PlanOutput plan(double now, const sched::SchedulerConfig& cfg,
                    const sched::ModelCtx& ctx);

    const std::map<std::pair<int64_t, int>, PlacementMapEntry>& map() const {
        return map_;
    }
    std::optional<InstanceStats> instance_stats(int inst_id) const;
    std::vector<int> known_instances() const;

private:
    struct InstanceInfo {
        InstanceStats stats;
        double last_heartbeat = -1.0;
        bool awaiting_full = true;
    };

    struct RoleHold {
        sched::RoleLock lock = sched::RoleLock::none;
        double until = 0.0;
    };

    uint64_t epoch_;
    GManagerConfig cfg_;
    std::map<std::pair<int64_t, int>, PlacementMapEntry> map_; // (req, inst)
    std::map<int, InstanceInfo> instances_;
    std::map<int, RoleHold> role_holds_;
};

// Synchronous full recovery: a fresh gManager pulls full heartbeats from
// every rManager directly. The async path through acks converges to the same
// map; this is the bounded-step variant.
void gmanager_epoch_recover(GManager& gm, std::vector<RManager*> rmanagers,
                            double now);

// Synchronously drive one move end to end against the destination (zero
// latency, unbounded budget): TryMove, reservation, every chunk, every ack.
MoveResult execute_move_sync(RManager& src, RManager& dst, const MoveKvCache& mv,
                             double now, int block_size_tokens);

} // namespace kvsched::ctrl
