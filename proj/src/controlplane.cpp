#include "kvsched/controlplane.hpp"
#include "kvsched/common.hpp"

#include <algorithm>
#include <set>

namespace kvsched::ctrl {

const char* message_kind(const ControlMessage& msg) {
    struct Visitor {
        const char* operator()(const Heartbeat&) const { return "heartbeat"; }
        const char* operator()(const HeartbeatAck&) const { return "heartbeat_ack"; }
        const char* operator()(const MoveKvCache&) const { return "move_kvcache"; }
        const char* operator()(const TryMove&) const { return "try_move"; }
        const char* operator()(const TryMoveResp&) const { return "try_move_resp"; }
        const char* operator()(const DataTransfer&) const { return "data_transfer"; }
        const char* operator()(const TransferAck&) const { return "transfer_ack"; }
    };
    return std::visit(Visitor{}, msg);
}

// ---------------------------------------------------------------------------
// RManager

RManager::RManager(int inst_id, int64_t capacity_blocks, RManagerConfig cfg)
    : inst_id_(inst_id), capacity_(capacity_blocks), cfg_(cfg) {
    KVSCHED_REQUIRE(inst_id >= 0, "instance id must be >= 0");
    KVSCHED_REQUIRE(capacity_blocks >= 1, "capacity must be >= 1");
    KVSCHED_REQUIRE(cfg_.reservation_timeout > 0.0, "reservation timeout must be > 0");
}

int64_t RManager::reserved_blocks() const {
    int64_t n = 0;
    for (const auto& r : reservations_) n += r.blocks_remaining;
    return n;
}

bool RManager::alloc_local(int64_t req_id, int64_t n) {
    KVSCHED_REQUIRE(n >= 1, "allocation must be >= 1 block");
    if (n > free_blocks()) return false;
    home_blocks_[req_id] += n;
    used_ += n;
    return true;
}

bool RManager::alloc_hosted(int64_t req_id, int home_inst, int64_t n) {
    KVSCHED_REQUIRE(n >= 1, "allocation must be >= 1 block");
    KVSCHED_REQUIRE(home_inst != inst_id_, "hosted blocks must be homed elsewhere");
    if (n > free_blocks()) return false;
    hosted_[{req_id, home_inst}] += n;
    used_ += n;
    return true;
}

int64_t RManager::free_request(int64_t req_id) {
    int64_t freed = 0;
    if (auto it = home_blocks_.find(req_id); it != home_blocks_.end()) {
        freed += it->second;
        used_ -= it->second;
        home_blocks_.erase(it);
    }
    for (auto it = hosted_.begin(); it != hosted_.end();) {
        if (it->first.first == req_id) {
            freed += it->second;
            used_ -= it->second;
            it = hosted_.erase(it);
        } else {
            ++it;
        }
    }
    home_in_flight_.erase(req_id);
    hosted_in_flight_.erase(req_id);
    for (auto it = transfers_.begin(); it != transfers_.end();)
        it = it->req_id == req_id ? transfers_.erase(it) : std::next(it);
    for (auto it = reservations_.begin(); it != reservations_.end();)
        it = it->req_id == req_id ? reservations_.erase(it) : std::next(it);
    KVSCHED_REQUIRE(used_ >= 0, "block ledger went negative");
    return freed;
}

int64_t RManager::local_blocks(int64_t req_id) const {
    auto it = home_blocks_.find(req_id);
    return it == home_blocks_.end() ? 0 : it->second;
}

int64_t RManager::hosted_blocks(int64_t req_id, int home_inst) const {
    auto it = hosted_.find({req_id, home_inst});
    return it == hosted_.end() ? 0 : it->second;
}

int64_t RManager::hosted_blocks_total() const {
    int64_t n = 0;
    for (const auto& [key, blocks] : hosted_) n += blocks;
    return n;
}

bool RManager::is_home(int64_t req_id) const { return home_blocks_.count(req_id) > 0; }

std::vector<std::pair<int64_t, int>> RManager::hosted_keys() const {
    std::vector<std::pair<int64_t, int>> keys;
    for (const auto& [key, blocks] : hosted_) keys.push_back(key);
    return keys;
}

Envelope RManager::to_gm(ControlMessage msg) const {
    return Envelope{inst_id_, kGManagerId, std::move(msg)};
}

Envelope RManager::make_heartbeat(double now, int64_t batch, int64_t queued) {
    (void)now;
    Heartbeat hb;
    hb.inst_id = inst_id_;
    hb.epoch_seen = epoch_seen_;
    hb.full = full_next_;
    hb.stats = InstanceStats{capacity_, used_ + reserved_blocks(), batch, queued};

    // Current wire view: one local entry per home request, one aggregated
    // non-local entry per hosted request.
    std::map<std::pair<int64_t, bool>, int64_t> current;
    for (const auto& [req, blocks] : home_blocks_)
        if (blocks > 0) current[{req, true}] = blocks;
    for (const auto& [key, blocks] : hosted_)
        if (blocks > 0) current[{key.first, false}] += blocks;

    if (full_next_) {
        for (const auto& [key, blocks] : current)
            hb.entries.push_back({key.first, inst_id_, blocks, key.second});
        full_next_ = false;
    } else {
        // Delta: changed values plus zero tombstones for vanished entries.
        for (const auto& [key, blocks] : current) {
            auto it = last_sent_.find(key);
            if (it == last_sent_.end() || it->second != blocks)
                hb.entries.push_back({key.first, inst_id_, blocks, key.second});
        }
        for (const auto& [key, blocks] : last_sent_)
            if (!current.count(key))
                hb.entries.push_back({key.first, inst_id_, 0, key.second});
    }
    last_sent_ = std::move(current);
    return to_gm(std::move(hb));
}

std::map<int64_t, int64_t>* RManager::in_flight_map(bool from_home) {
    return from_home ? &home_in_flight_ : &hosted_in_flight_;
}

void RManager::finish_transfer(OutTransfer& t, MoveOutcome outcome) {
    if (t.blocks_unsent > 0) {
        auto& fl = (*in_flight_map(t.from_home))[t.req_id];
        fl -= t.blocks_unsent;
        if (fl <= 0) in_flight_map(t.from_home)->erase(t.req_id);
        t.blocks_unsent = 0;
    }
    move_results_[t.req_id] = MoveResult{outcome, t.blocks_moved};
}

std::optional<Envelope> RManager::begin_move(const MoveKvCache& mv, double now) {
    (void)now;
    KVSCHED_REQUIRE(mv.num_blocks >= 1, "move must name >= 1 block");
    KVSCHED_REQUIRE(mv.dst_inst != inst_id_, "move destination must differ from source");

    const bool from_home = is_home(mv.req_id);
    int home_inst = inst_id_;
    int64_t available = 0;
    if (from_home) {
        available = local_blocks(mv.req_id);
        if (auto it = home_in_flight_.find(mv.req_id); it != home_in_flight_.end())
            available -= it->second;
    } else {
        // Hosted blocks: serve from the first home that has any here.
        for (const auto& [key, blocks] : hosted_) {
            if (key.first == mv.req_id && blocks > 0) {
                home_inst = key.second;
                available = blocks;
                break;
            }
        }
        if (auto it = hosted_in_flight_.find(mv.req_id); it != hosted_in_flight_.end())
            available -= it->second;
    }

    const int64_t n = std::min(available, mv.num_blocks);
    if (n <= 0) {
        // Vanished request or nothing movable: dropped, the gManager will
        // replan from fresher state.
        move_results_[mv.req_id] = MoveResult{MoveOutcome::deferred, 0};
        return std::nullopt;
    }

    OutTransfer t;
    t.transfer_id = (static_cast<uint64_t>(inst_id_ + 1) << 40) | next_transfer_seq_++;
    t.req_id = mv.req_id;
    t.dst_inst = mv.dst_inst;
    t.home_inst = home_inst;
    t.from_home = from_home;
    t.blocks_unsent = n;
    t.blocks_requested = mv.num_blocks;
    (*in_flight_map(from_home))[mv.req_id] += n;
    transfers_.push_back(t);
    return Envelope{inst_id_, mv.dst_inst,
                    TryMove{t.transfer_id, mv.req_id, n, inst_id_, home_inst}};
}

std::vector<Envelope> RManager::advance_transfers(int64_t token_budget,
                                                  int block_size_tokens) {
    KVSCHED_REQUIRE(token_budget >= 0, "token budget must be >= 0");
    KVSCHED_REQUIRE(block_size_tokens >= 1, "block size must be >= 1");
    std::vector<Envelope> out;
    for (auto& t : transfers_) {
        if (!t.accepted || t.blocks_unsent == 0) continue;
        t.token_progress += token_budget;
        while (t.token_progress >= block_size_tokens && t.blocks_unsent > 0) {
            t.token_progress -= block_size_tokens;
            t.blocks_unsent -= 1;
            t.blocks_awaiting_ack += 1;
            out.push_back(Envelope{
                inst_id_, t.dst_inst,
                DataTransfer{t.transfer_id, t.req_id, 1, inst_id_, t.home_inst}});
        }
        if (t.blocks_unsent == 0) t.token_progress = 0;
        break; // one transfer at a time, FIFO
    }
    return out;
}

int64_t RManager::pending_transfer_tokens(int block_size_tokens) const {
    for (const auto& t : transfers_) {
        if (!t.accepted || t.blocks_unsent == 0) continue;
        return t.blocks_unsent * block_size_tokens - t.token_progress;
    }
    return 0;
}

void RManager::expire_reservations(double now) {
    for (auto it = reservations_.begin(); it != reservations_.end();) {
        if (now - it->last_progress > cfg_.reservation_timeout)
            it = reservations_.erase(it);
        else
            ++it;
    }
}

std::optional<MoveResult> RManager::take_move_result(int64_t req_id) {
    auto it = move_results_.find(req_id);
    if (it == move_results_.end()) return std::nullopt;
    MoveResult r = it->second;
    move_results_.erase(it);
    return r;
}

bool RManager::has_active_transfers() const { return !transfers_.empty(); }

std::vector<Envelope> RManager::on_message(const Envelope& env, double now) {
    KVSCHED_REQUIRE(env.dst == inst_id_, "message delivered to the wrong instance");
    std::vector<Envelope> out;

    if (const auto* ack = std::get_if<HeartbeatAck>(&env.msg)) {
        if (ack->epoch > epoch_seen_) {
            epoch_seen_ = ack->epoch;
            full_next_ = true;
        }
        if (ack->full_required) full_next_ = true;
        return out;
    }

    if (const auto* mv = std::get_if<MoveKvCache>(&env.msg)) {
        if (auto try_env = begin_move(*mv, now)) out.push_back(std::move(*try_env));
        return out;
    }

    if (const auto* tm = std::get_if<TryMove>(&env.msg)) {
        // First come, first served in arrival order: accept iff the whole
        // reservation fits right now.
        const bool ok = tm->num_blocks >= 1 && tm->num_blocks <= free_blocks();
        if (ok)
            reservations_.push_back({tm->transfer_id, tm->req_id, tm->src_inst,
                                     tm->home_inst, tm->num_blocks, now});
        out.push_back(Envelope{inst_id_, tm->src_inst,
                               TryMoveResp{tm->transfer_id, ok}});
        return out;
    }

    if (const auto* resp = std::get_if<TryMoveResp>(&env.msg)) {
        for (auto it = transfers_.begin(); it != transfers_.end(); ++it) {
            if (it->transfer_id != resp->transfer_id) continue;
            if (resp->accepted) {
                it->accepted = true;
            } else {
                finish_transfer(*it, MoveOutcome::rejected);
                transfers_.erase(it);
            }
            break;
        }
        return out;
    }

    if (const auto* chunk = std::get_if<DataTransfer>(&env.msg)) {
        for (auto it = reservations_.begin(); it != reservations_.end(); ++it) {
            if (it->transfer_id != chunk->transfer_id) continue;
            const int64_t n = std::min(chunk->num_blocks, it->blocks_remaining);
            if (n <= 0) break;
            it->blocks_remaining -= n;
            it->last_progress = now;
            used_ += n;
            if (chunk->home_inst == inst_id_)
                home_blocks_[chunk->req_id] += n; // blocks coming back home
            else
                hosted_[{chunk->req_id, chunk->home_inst}] += n;
            const uint64_t id = it->transfer_id;
            if (it->blocks_remaining == 0) reservations_.erase(it);
            out.push_back(Envelope{inst_id_, chunk->src_inst,
                                   TransferAck{id, n, true}});
            return out;
        }
        // No live reservation: refuse the chunk, the block stays at the source.
        out.push_back(Envelope{inst_id_, chunk->src_inst,
                               TransferAck{chunk->transfer_id, chunk->num_blocks, false}});
        return out;
    }

    if (const auto* ack = std::get_if<TransferAck>(&env.msg)) {
        for (auto it = transfers_.begin(); it != transfers_.end(); ++it) {
            if (it->transfer_id != ack->transfer_id) continue;
            auto& t = *it;
            const int64_t n = std::min(ack->num_blocks, t.blocks_awaiting_ack);
            t.blocks_awaiting_ack -= n;
            auto& fl = (*in_flight_map(t.from_home))[t.req_id];
            fl -= n;
            if (fl <= 0) in_flight_map(t.from_home)->erase(t.req_id);
            if (ack->accepted) {
                // The destination holds the blocks now; release them here.
                t.blocks_moved += n;
                used_ -= n;
                if (t.from_home) {
                    auto hit = home_blocks_.find(t.req_id);
                    KVSCHED_REQUIRE(hit != home_blocks_.end() && hit->second >= n,
                                    "acked blocks missing from the home ledger");
                    hit->second -= n;
                    if (hit->second == 0) home_blocks_.erase(hit);
                } else {
                    auto hit = hosted_.find({t.req_id, t.home_inst});
                    KVSCHED_REQUIRE(hit != hosted_.end() && hit->second >= n,
                                    "acked blocks missing from the hosted ledger");
                    hit->second -= n;
                    if (hit->second == 0) hosted_.erase(hit);
                }
                if (t.blocks_unsent == 0 && t.blocks_awaiting_ack == 0) {
                    finish_transfer(t, MoveOutcome::completed);
                    transfers_.erase(it);
                }
            } else {
                // Reservation expired under us: keep the unmoved blocks and
                // close the transfer out as partially completed.
                finish_transfer(t, t.blocks_moved > 0 ? MoveOutcome::completed
                                                      : MoveOutcome::rejected);
                transfers_.erase(it);
            }
            break;
        }
        return out;
    }

    return out;
}

// ---------------------------------------------------------------------------
// GManager

GManager::GManager(uint64_t epoch, GManagerConfig cfg) : epoch_(epoch), cfg_(cfg) {
    KVSCHED_REQUIRE(cfg_.stale_after > 0.0, "stale_after must be > 0");
}

Envelope GManager::on_heartbeat(const Heartbeat& hb, double now) {
    KVSCHED_REQUIRE(hb.inst_id >= 0, "heartbeat from an invalid instance id");
    auto& info = instances_[hb.inst_id];

    auto reject = [&](bool keep_stats) {
        if (!keep_stats) info.awaiting_full = true;
        return Envelope{kGManagerId, hb.inst_id, HeartbeatAck{epoch_, true}};
    };

    if (hb.epoch_seen != epoch_) return reject(true);

    bool malformed = false;
    for (const auto& e : hb.entries)
        if (e.inst_id != hb.inst_id || e.num_blocks < 0 || e.req_id < 0) malformed = true;
    if (malformed) return reject(false);

    if (!hb.full && info.awaiting_full)
        return Envelope{kGManagerId, hb.inst_id, HeartbeatAck{epoch_, true}};

    if (hb.full) {
        for (auto it = map_.begin(); it != map_.end();)
            it = it->first.second == hb.inst_id ? map_.erase(it) : std::next(it);
        for (const auto& e : hb.entries)
            if (e.num_blocks > 0) map_[{e.req_id, e.inst_id}] = {e, now};
        info.awaiting_full = false;
    } else {
        for (const auto& e : hb.entries) {
            if (e.num_blocks == 0)
                map_.erase({e.req_id, e.inst_id}); // tombstone
            else
                map_[{e.req_id, e.inst_id}] = {e, now};
        }
    }
    info.stats = hb.stats;
    info.last_heartbeat = now;
    return Envelope{kGManagerId, hb.inst_id, HeartbeatAck{epoch_, false}};
}

std::vector<sched::InstanceSnapshot> GManager::snapshots(
    double now, const perf::ModelShape& shape) const {
    std::vector<sched::InstanceSnapshot> out;
    const int bs = shape.block_size_tokens;

    // Home instance per request, for attributing hosted entries.
    std::map<int64_t, int> home_of;
    for (const auto& [key, me] : map_)
        if (me.entry.local) home_of[key.first] = key.second;

    for (const auto& [inst_id, info] : instances_) {
        if (info.awaiting_full) continue;
        if (now - info.last_heartbeat > cfg_.stale_after) continue;

        sched::InstanceSnapshot s;
        s.instance_id = inst_id;
        s.mem_capacity_blocks = info.stats.capacity_blocks;
        s.mem_used_blocks = info.stats.used_blocks;
        s.queued = info.stats.queued;

        for (const auto& [key, me] : map_) {
            if (key.second != inst_id) continue;
            if (me.entry.local) {
                sched::RequestResidency r;
                r.req_id = key.first;
                r.local_blocks = me.entry.num_blocks;
                for (const auto& [k2, me2] : map_)
                    if (k2.first == key.first && k2.second != inst_id && !me2.entry.local)
                        r.remote_blocks += me2.entry.num_blocks;
                // Context is only known here at block granularity.
                r.total_ctx_tokens = (r.local_blocks + r.remote_blocks) * bs;
                s.requests.push_back(r);
            } else {
                auto home = home_of.find(key.first);
                if (home == home_of.end()) continue; // home unknown, skip
                s.hosted.push_back({key.first, home->second, me.entry.num_blocks});
            }
        }
        // The planner's batch counts resident requests; prefill-stage requests
        // hold blocks and will decode shortly.
        s.batch = static_cast<int64_t>(s.requests.size());
        if (auto it = role_holds_.find(inst_id);
            it != role_holds_.end() && now < it->second.until)
            s.role_lock = it->second.lock;

        try {
            s.validate();
        } catch (const ContractError&) {
            continue; // transiently inconsistent view, exclude this round
        }
        out.push_back(std::move(s));
    }
    return out;
}

GManager::PlanOutput GManager::plan(double now, const sched::SchedulerConfig& cfg,
                                    const sched::ModelCtx& ctx) {
    PlanOutput out;
    const auto snaps = snapshots(now, ctx.shape);
    out.plan = sched::plan_round(snaps, cfg, ctx);

    auto issue = [&](const sched::MoveDirective& d) {
        out.envelopes.push_back(Envelope{
            kGManagerId, d.src_instance,
            MoveKvCache{d.req_id, d.num_blocks, d.dst_instance}});
        const auto src_lock = d.reclaim ? sched::RoleLock::creditor : sched::RoleLock::debtor;
        const auto dst_lock = d.reclaim ? sched::RoleLock::debtor : sched::RoleLock::creditor;
        role_holds_[d.src_instance] = {src_lock, now + cfg_.role_lock_hold};
        role_holds_[d.dst_instance] = {dst_lock, now + cfg_.role_lock_hold};
    };
    for (const auto& d : out.plan.reclaims) issue(d);
    for (const auto& d : out.plan.moves) issue(d);
    return out;
}

std::optional<InstanceStats> GManager::instance_stats(int inst_id) const {
    auto it = instances_.find(inst_id);
    if (it == instances_.end()) return std::nullopt;
    return it->second.stats;
}

std::vector<int> GManager::known_instances() const {
    std::vector<int> out;
    for (const auto& [id, info] : instances_) out.push_back(id);
    return out;
}

// ---------------------------------------------------------------------------

void gmanager_epoch_recover(GManager& gm, std::vector<RManager*> rmanagers,
                            double now) {
    // One ack round makes every rManager adopt the epoch, then full
    // heartbeats rebuild the map. This mirrors what the async path converges
    // to after at most two heartbeat cycles per instance.
    for (RManager* rm : rmanagers) {
        KVSCHED_REQUIRE(rm != nullptr, "null rManager");
        Envelope hb = rm->make_heartbeat(now, 0, 0);
        Envelope ack = gm.on_heartbeat(std::get<Heartbeat>(hb.msg), now);
        rm->on_message(ack, now);
    }
    for (RManager* rm : rmanagers) {
        Envelope hb = rm->make_heartbeat(now, 0, 0);
        gm.on_heartbeat(std::get<Heartbeat>(hb.msg), now);
    }
}

MoveResult execute_move_sync(RManager& src, RManager& dst, const MoveKvCache& mv,
                             double now, int block_size_tokens) {
    auto try_env = src.begin_move(mv, now);
    if (!try_env) {
        auto r = src.take_move_result(mv.req_id);
        return r ? *r : MoveResult{MoveOutcome::deferred, 0};
    }
    auto resps = dst.on_message(*try_env, now);
    for (const auto& r : resps) src.on_message(r, now);

    while (src.has_active_transfers()) {
        auto chunks = src.advance_transfers(
            static_cast<int64_t>(block_size_tokens) * 1024, block_size_tokens);
        if (chunks.empty()) break;
        for (const auto& c : chunks) {
            auto acks = dst.on_message(c, now);
            for (const auto& a : acks) src.on_message(a, now);
        }
    }
    auto r = src.take_move_result(mv.req_id);
    return r ? *r : MoveResult{MoveOutcome::deferred, 0};
}

} // namespace kvsched::ctrl
