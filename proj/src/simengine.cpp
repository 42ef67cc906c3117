#include "kvsched/simengine.hpp"
#include "kvsched/common.hpp"
#include "kvsched/controlplane.hpp"
#include "kvsched/verify.hpp"

#include <algorithm>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <deque>
#include <fstream>
#include <map>
#include <queue>
#include <set>
#include <string>
#include <variant>
#include <vector>

namespace kvsched::sim {

namespace {

enum class EvKind { arrival, step_done, prefill_done, periodic_tick, plan_tick, delivery };

struct Ev {
    double t = 0.0;
    uint64_t seq = 0;
    EvKind kind = EvKind::arrival;
    int inst = -1;
    int64_t req = -1;
    ctrl::Envelope env;
    std::vector<int64_t> participants; // step_done payload, committed at step start
    int64_t ship = 0;                  // migration tokens paced into the step
};

struct EvAfter {
    bool operator()(const Ev& a, const Ev& b) const {
        if (a.t != b.t) return a.t > b.t;
        return a.seq > b.seq;
    }
};

struct ReqState {
    enum class St { waiting, queued, prefill, running, done, rejected };

    int64_t id = -1;
    int64_t prompt = 0;
    int64_t output = 0;
    double arrival = 0.0;
    int home = -1;
    St st = St::waiting;
    int64_t generated = 0;
    int64_t ctx = 0; // materialized context tokens
    double admitted = -1.0, prefill_end = -1.0, completed = -1.0;
    int64_t remote_peak = 0;
};

struct InstState {
    int id;
    ctrl::RManager rm;
    std::deque<int64_t> queue;      // dispatched, awaiting admission (FCFS)
    std::vector<int64_t> running;   // decoding, admission order
    std::vector<int64_t> prefilling;
    bool step_scheduled = false;
    int64_t steps_done = 0;

    InstState(int id_, int64_t cap, ctrl::RManagerConfig c) : id(id_), rm(id_, cap, c) {}
    int64_t resident_requests() const {
        return static_cast<int64_t>(running.size() + prefilling.size());
    }
};

class Engine {
public:
    Engine(const ClusterConfig& cfg, const std::vector<TraceRequest>& trace,
           const RunOptions& opt)
        : cfg_(cfg), opt_(opt), gm_(0, {cfg.ctrl.stale_after_s, cfg.ctrl.role_lock_hold_s}),
          spot_rng_(cfg.seed ^ 0x9e3779b97f4a7c15ULL) {
        cfg_.validate();
        KVSCHED_INPUT_CHECK(opt_.horizon_s > 0.0, "run: horizon must be > 0");
        for (const auto& spec : cfg.instances) {
            idx_of_[spec.id] = insts_.size();
            insts_.emplace_back(spec.id, spec.capacity_blocks,
                                ctrl::RManagerConfig{cfg.ctrl.reservation_timeout_s});
            max_capacity_ = std::max(max_capacity_, spec.capacity_blocks);
        }
        for (const auto& tr : trace) {
            KVSCHED_INPUT_CHECK(!reqs_.count(tr.req_id), "run: duplicate trace req_id");
            ReqState r;
            r.id = tr.req_id;
            r.prompt = tr.prompt_tokens;
            r.output = tr.output_tokens;
            r.arrival = tr.arrival_s;
            reqs_[tr.req_id] = r;
        }
        if (!opt_.event_log_path.empty()) {
            log_.open(opt_.event_log_path, std::ios::binary | std::ios::trunc);
            KVSCHED_INPUT_CHECK(log_.good(),
                                "run: cannot open event log: " + opt_.event_log_path);
        }
    }

    SimResult run() {
        for (const auto& [id, r] : reqs_) {
            Ev ev;
            ev.kind = EvKind::arrival;
            ev.req = id;
            push(r.arrival, std::move(ev));
        }
        for (const auto& inst : insts_) {
            Ev ev;
            ev.kind = EvKind::periodic_tick;
            ev.inst = inst.id;
            push(0.0, std::move(ev));
        }
        if (cfg_.policy == Policy::infinite) {
            Ev ev;
            ev.kind = EvKind::plan_tick;
            push(cfg_.ctrl.planning_period_s, std::move(ev));
        }
        for (const auto& mv : cfg_.injected_moves) {
            Ev ev;
            ev.kind = EvKind::delivery;
            ev.env = ctrl::Envelope{ctrl::kGManagerId, mv.src,
                                    ctrl::MoveKvCache{mv.req_id, mv.num_blocks, mv.dst}};
            push(mv.at_s, std::move(ev));
        }

        while (!pq_.empty()) {
            Ev ev = pq_.top();
            pq_.pop();
            if (ev.t > opt_.horizon_s) break;
            now_ = ev.t;
            switch (ev.kind) {
            case EvKind::arrival: on_arrival(ev.req); break;
            case EvKind::step_done: on_step_done(ev); break;
            case EvKind::prefill_done: on_prefill_done(ev.req); break;
            case EvKind::periodic_tick: on_periodic_tick(ev.inst); break;
            case EvKind::plan_tick: on_plan_tick(); break;
            case EvKind::delivery: on_delivery(ev.env); break;
            }
        }
        return finalize();
    }

private:
    // --- event plumbing ---

    void push(double t, Ev&& ev) {
        ev.t = t;
        ev.seq = seq_++;
        pq_.push(std::move(ev));
    }

    void deliver_later(ctrl::Envelope env, double delay) {
        Ev ev;
        ev.kind = EvKind::delivery;
        ev.env = std::move(env);
        push(now_ + delay, std::move(ev));
    }

    InstState& inst_by_id(int id) {
        auto it = idx_of_.find(id);
        KVSCHED_REQUIRE(it != idx_of_.end(), "unknown instance id in event");
        return insts_[it->second];
    }

    bool work_remaining() const {
        for (const auto& [id, r] : reqs_)
            if (r.st != ReqState::St::done && r.st != ReqState::St::rejected) return true;
        return false;
    }

    void log_line(const char* fmt, ...) {
        if (!log_.is_open()) return;
        char buf[512];
        va_list args;
        va_start(args, fmt);
        vsnprintf(buf, sizeof(buf), fmt, args);
        va_end(args);
        log_ << buf << '\n';
    }

    // --- residency helpers ---

    int64_t hosted_elsewhere_blocks(const ReqState& r) const {
        int64_t total = 0;
        for (const auto& inst : insts_)
            if (inst.id != r.home) total += inst.rm.hosted_blocks(r.id, r.home);
        return total;
    }

    int64_t held_blocks(const ReqState& r) {
        return inst_by_id(r.home).rm.local_blocks(r.id) + hosted_elsewhere_blocks(r);
    }

    int64_t remote_tokens(const ReqState& r) const {
        return std::min(hosted_elsewhere_blocks(r) * bs(), r.ctx);
    }

    int64_t local_tokens(const ReqState& r) const {
        // The query token itself always lives at home.
        return std::max<int64_t>(1, r.ctx - remote_tokens(r));
    }

    // Context tokens instance j attends over in one of its own decode steps:
    // local tokens of its decoding requests plus hosted tokens whose owning
    // request is currently decoding somewhere.
    int64_t attention_span(const InstState& j) const {
        int64_t span = 0;
        for (int64_t rid : j.running) span += local_tokens(reqs_.at(rid));
        span += hosted_decoding_tokens(j);
        return span;
    }

    int64_t hosted_decoding_tokens(const InstState& j) const {
        int64_t total = 0;
        for (const auto& [rid, home] : j.rm.hosted_keys()) {
            auto it = reqs_.find(rid);
            if (it == reqs_.end() || it->second.st != ReqState::St::running) continue;
            total += std::min(j.rm.hosted_blocks(rid, home) * bs(), it->second.ctx);
        }
        return total;
    }

    bool is_borrowing(const InstState& j) const {
        for (int64_t rid : j.running)
            if (hosted_elsewhere_blocks(reqs_.at(rid)) > 0) return true;
        for (int64_t rid : j.prefilling)
            if (hosted_elsewhere_blocks(reqs_.at(rid)) > 0) return true;
        return false;
    }

    int bs() const { return cfg_.shape.block_size_tokens; }

    // --- request lifecycle ---

    void on_arrival(int64_t rid) {
        ReqState& r = reqs_.at(rid);
        summary_.arrivals++;
        const int64_t prompt_blocks = perf::blocks_for_tokens(r.prompt, cfg_.shape);
        const int64_t full_blocks = perf::blocks_for_tokens(r.prompt + r.output, cfg_.shape);
        const bool never_fits = prompt_blocks > max_capacity_ ||
                                (cfg_.policy == Policy::static_alloc && full_blocks > max_capacity_);
        if (never_fits) {
            r.st = ReqState::St::rejected;
            summary_.rejected++;
            log_line("{\"t\":%.9f,\"ev\":\"reject\",\"req\":%lld}", now_,
                     static_cast<long long>(rid));
            return;
        }
        // Dispatch to the instance with the most free blocks, ties to the
        // lowest id.
        InstState* best = nullptr;
        for (auto& inst : insts_)
            if (!best || inst.rm.free_blocks() > best->rm.free_blocks()) best = &inst;
        r.home = best->id;
        r.st = ReqState::St::queued;
        best->queue.push_back(rid);
        log_line("{\"t\":%.9f,\"ev\":\"arrival\",\"req\":%lld,\"inst\":%d}", now_,
                 static_cast<long long>(rid), best->id);
        try_admit(*best);
    }

    void try_admit(InstState& inst) {
        while (!inst.queue.empty()) {
            const int64_t rid = inst.queue.front();
            ReqState& r = reqs_.at(rid);
            const int64_t needed = perf::blocks_for_tokens(r.prompt, cfg_.shape);
            if (!inst.rm.alloc_local(rid, needed)) break; // FCFS: head blocks the rest
            inst.queue.pop_front();
            r.st = ReqState::St::prefill;
            r.admitted = now_;
            r.ctx = r.prompt;
            inst.prefilling.push_back(rid);
            log_line("{\"t\":%.9f,\"ev\":\"admit\",\"req\":%lld,\"inst\":%d,\"blocks\":%lld}",
                     now_, static_cast<long long>(rid), inst.id,
                     static_cast<long long>(needed));
            Ev ev;
            ev.kind = EvKind::prefill_done;
            ev.req = rid;
            ev.inst = inst.id;
            push(now_ + static_cast<double>(r.prompt) * cfg_.prefill_cost_per_token_s,
                 std::move(ev));
        }
    }

    void on_prefill_done(int64_t rid) {
        ReqState& r = reqs_.at(rid);
        if (r.st != ReqState::St::prefill) return;
        InstState& inst = inst_by_id(r.home);
        inst.prefilling.erase(std::find(inst.prefilling.begin(), inst.prefilling.end(), rid));
        inst.running.push_back(rid);
        r.st = ReqState::St::running;
        r.prefill_end = now_;
        log_line("{\"t\":%.9f,\"ev\":\"prefill_done\",\"req\":%lld}", now_,
                 static_cast<long long>(rid));
        ensure_step(inst);
    }

    void complete(int64_t rid) {
        ReqState& r = reqs_.at(rid);
        for (auto& inst : insts_) inst.rm.free_request(rid);
        InstState& home = inst_by_id(r.home);
        home.running.erase(std::find(home.running.begin(), home.running.end(), rid));
        r.st = ReqState::St::done;
        r.completed = now_;
        summary_.completed++;
        log_line("{\"t\":%.9f,\"ev\":\"complete\",\"req\":%lld}", now_,
                 static_cast<long long>(rid));
    }

    // --- decode steps ---

    // Give `r` a block for its next token. Local first; under borrowing
    // policies overflow spills to another instance (existing hosts first,
    // then the most-free non-lending instance, then anything with space).
    bool ensure_slot(ReqState& r, InstState& home) {
        const int64_t need = perf::blocks_for_tokens(r.ctx + 1, cfg_.shape) - held_blocks(r);
        if (need <= 0) return true;
        if (home.rm.alloc_local(r.id, need)) return true;
        if (cfg_.policy == Policy::static_alloc) return false;

        InstState* host = nullptr;
        auto consider = [&](InstState& j, bool require_clean) {
            if (j.id == r.home || j.rm.free_blocks() < need) return;
            if (require_clean && is_borrowing(j)) return;
            if (!host) {
                host = &j;
                return;
            }
            const bool j_has = j.rm.hosted_blocks(r.id, r.home) > 0;
            const bool h_has = host->rm.hosted_blocks(r.id, r.home) > 0;
            if (j_has != h_has) {
                if (j_has) host = &j;
                return;
            }
            if (j.rm.free_blocks() > host->rm.free_blocks()) host = &j;
        };
        // An instance whose own requests borrow space elsewhere should not
        // also host; fall back to one only when nothing clean has room.
        for (auto& j : insts_) consider(j, true);
        if (!host)
            for (auto& j : insts_) consider(j, false);
        if (!host) return false;

        KVSCHED_REQUIRE(host->rm.alloc_hosted(r.id, r.home, need), "host had free space");
        summary_.overflow_borrows += need;
        r.remote_peak = std::max(r.remote_peak, hosted_elsewhere_blocks(r));
        log_line("{\"t\":%.9f,\"ev\":\"borrow\",\"req\":%lld,\"host\":%d,\"blocks\":%lld}",
                 now_, static_cast<long long>(r.id), host->id,
                 static_cast<long long>(need));
        return true;
    }

    void ensure_step(InstState& inst) {
        if (inst.step_scheduled || inst.running.empty()) return;

        StepRecord rec;
        rec.instance = inst.id;
        rec.start_s = now_;
        std::vector<int64_t> participants;
        for (int64_t rid : inst.running) {
            ReqState& r = reqs_.at(rid);
            if (ensure_slot(r, inst)) {
                participants.push_back(rid);
            } else {
                rec.stalled++;
                summary_.stalled_request_steps++;
            }
        }
        if (participants.empty()) return; // blocked; ticks and frees retry

        perf::InstanceLoad load;
        load.batch = static_cast<int64_t>(participants.size());
        int64_t ext_remote_tokens = 0;
        std::map<int, int64_t> remote_by_host;
        for (int64_t rid : participants) {
            const ReqState& r = reqs_.at(rid);
            const int64_t loc = local_tokens(r);
            load.ctx_lengths.push_back(loc);
            rec.local_ctx_tokens += loc;
            for (const auto& j : insts_) {
                if (j.id == r.home) continue;
                const int64_t hb = j.rm.hosted_blocks(rid, r.home);
                if (hb > 0) remote_by_host[j.id] += std::min(hb * bs(), r.ctx);
            }
        }
        load.offloaded_tokens = hosted_decoding_tokens(inst);
        rec.hosted_ctx_tokens = load.offloaded_tokens;

        const double t_layer =
            perf::creditor_layer_time(load, cfg_.shape, cfg_.f, cfg_.g);
        // A remote partial for one layer arrives after the host crunches the
        // hosted tokens plus a round trip; anything beyond the local layer
        // time extends the step. Hosts work in parallel with each other.
        double ext = 0.0;
        for (const auto& [hid, tokens] : remote_by_host) {
            ext_remote_tokens += tokens;
            const auto& host = inst_by_id(hid);
            const double span = static_cast<double>(std::max<int64_t>(1, attention_span(host)));
            const double t_host = static_cast<double>(tokens) *
                                      cfg_.shape.attn_work_per_ctx_token / cfg_.g.eval(span) +
                                  2.0 * cfg_.ctrl.link_latency_s;
            ext = std::max(ext, t_host - t_layer);
        }
        ext = std::max(ext, 0.0);
        rec.remote_ctx_tokens = ext_remote_tokens;

        const double base = cfg_.shape.n_layers * (t_layer + ext);
        const int64_t ship =
            std::min(cfg_.migration.step_tokens, inst.rm.pending_transfer_tokens(bs()));
        const int64_t over = std::max<int64_t>(0, ship - cfg_.migration.overlap_cap_tokens);
        const double factor =
            1.0 + static_cast<double>(over) * cfg_.migration.over_cap_penalty_per_token;
        const double dur = base * factor;

        rec.batch = load.batch;
        rec.base_duration_s = base;
        rec.penalty_factor = factor;
        rec.duration_s = dur;
        rec.shipped_tokens = ship;
        if (opt_.record_steps) steps_.push_back(rec);
        summary_.decode_steps++;
        log_line("{\"t\":%.9f,\"ev\":\"step\",\"inst\":%d,\"batch\":%lld,\"dur\":%.9f,"
                 "\"ship\":%lld}",
                 now_, inst.id, static_cast<long long>(rec.batch), dur,
                 static_cast<long long>(ship));

        Ev ev;
        ev.kind = EvKind::step_done;
        ev.inst = inst.id;
        ev.participants = std::move(participants);
        ev.ship = ship;
        push(now_ + dur, std::move(ev));
        inst.step_scheduled = true;
    }

    void on_step_done(const Ev& ev) {
        InstState& inst = inst_by_id(ev.inst);
        inst.step_scheduled = false;
        inst.steps_done++;
        global_steps_++;

        std::vector<int64_t> finished;
        for (int64_t rid : ev.participants) {
            ReqState& r = reqs_.at(rid);
            if (r.st != ReqState::St::running) continue;
            r.generated++;
            r.ctx++;
            summary_.generated_tokens++;
            bucket_tokens_[static_cast<int64_t>(now_ / cfg_.tps_window_s)]++;
            if (r.generated >= r.output) finished.push_back(rid);
        }
        for (int64_t rid : finished) complete(rid);

        for (auto& out : inst.rm.advance_transfers(ev.ship, bs()))
            deliver_later(std::move(out), cfg_.ctrl.link_latency_s);
        poll_move_results(inst);

        if (inst.steps_done % cfg_.ctrl.heartbeat_every_steps == 0) send_heartbeat(inst);

        if (cfg_.spot_check_every_steps > 0 &&
            global_steps_ % cfg_.spot_check_every_steps == 0) {
            const double err = attn::verify_attention_once(spot_rng_, 16, 64, 4);
            summary_.spot_checks++;
            summary_.spot_check_max_rel_err =
                std::max(summary_.spot_check_max_rel_err, err);
        }

        if (!finished.empty()) {
            // Freed blocks may unblock admissions and stalled steps anywhere.
            for (auto& j : insts_) {
                try_admit(j);
                ensure_step(j);
            }
        } else {
            try_admit(inst);
        }
        ensure_step(inst);
    }

    // --- control plane ---

    void send_heartbeat(InstState& inst) {
        inst.rm.expire_reservations(now_);
        auto env = inst.rm.make_heartbeat(now_, inst.resident_requests(),
                                          static_cast<int64_t>(inst.queue.size()));
        deliver_later(std::move(env), cfg_.ctrl.link_latency_s);
    }

    void on_periodic_tick(int inst_id) {
        InstState& inst = inst_by_id(inst_id);
        send_heartbeat(inst);
        if (!inst.step_scheduled) {
            // No decode steps to pace shipping; drain transfers on the tick.
            if (inst.rm.has_active_transfers()) {
                for (auto& out : inst.rm.advance_transfers(cfg_.migration.step_tokens, bs()))
                    deliver_later(std::move(out), cfg_.ctrl.link_latency_s);
                poll_move_results(inst);
            }
            try_admit(inst);
            ensure_step(inst);
        }
        if (work_remaining()) {
            Ev ev;
            ev.kind = EvKind::periodic_tick;
            ev.inst = inst_id;
            push(now_ + cfg_.ctrl.heartbeat_idle_interval_s, std::move(ev));
        }
    }

    void on_plan_tick() {
        sched::ModelCtx mctx{cfg_.shape, cfg_.f, cfg_.g};
        auto out = gm_.plan(now_, cfg_.sched, mctx);
        summary_.planner_rounds++;
        const int64_t n = static_cast<int64_t>(out.plan.moves.size() + out.plan.reclaims.size());
        summary_.planned_moves += n;
        if (n > 0)
            log_line("{\"t\":%.9f,\"ev\":\"plan\",\"moves\":%zu,\"reclaims\":%zu}", now_,
                     out.plan.moves.size(), out.plan.reclaims.size());
        for (auto& env : out.envelopes) {
            if (const auto* mv = std::get_if<ctrl::MoveKvCache>(&env.msg))
                pending_moves_.insert({env.dst, mv->req_id});
            deliver_later(std::move(env), cfg_.ctrl.link_latency_s);
        }
        if (work_remaining()) {
            Ev ev;
            ev.kind = EvKind::plan_tick;
            push(now_ + cfg_.ctrl.planning_period_s, std::move(ev));
        }
    }

    void on_delivery(const ctrl::Envelope& env) {
        if (env.dst == ctrl::kGManagerId) {
            const auto* hb = std::get_if<ctrl::Heartbeat>(&env.msg);
            KVSCHED_REQUIRE(hb != nullptr, "only heartbeats address the gManager");
            auto ack = gm_.on_heartbeat(*hb, now_);
            deliver_later(std::move(ack), cfg_.ctrl.link_latency_s);
            return;
        }
        InstState& inst = inst_by_id(env.dst);
        if (const auto* mv = std::get_if<ctrl::MoveKvCache>(&env.msg))
            pending_moves_.insert({env.dst, mv->req_id});
        log_line("{\"t\":%.9f,\"ev\":\"msg\",\"kind\":\"%s\",\"src\":%d,\"dst\":%d}", now_,
                 ctrl::message_kind(env.msg), env.src, env.dst);
        for (auto& out : inst.rm.on_message(env, now_))
            deliver_later(std::move(out), cfg_.ctrl.link_latency_s);
        poll_move_results(inst);
        // An acked transfer frees source blocks; retry admissions and steps.
        try_admit(inst);
        ensure_step(inst);
    }

    void poll_move_results(InstState& inst) {
        std::vector<std::pair<int, int64_t>> done;
        for (const auto& key : pending_moves_) {
            if (key.first != inst.id) continue;
            if (auto res = inst.rm.take_move_result(key.second)) {
                done.push_back(key);
                switch (res->outcome) {
                case ctrl::MoveOutcome::completed:
                    summary_.moves_completed++;
                    summary_.blocks_moved += res->moved_blocks;
                    break;
                case ctrl::MoveOutcome::rejected: summary_.moves_rejected++; break;
                case ctrl::MoveOutcome::deferred: break;
                }
                log_line("{\"t\":%.9f,\"ev\":\"move_result\",\"inst\":%d,\"req\":%lld,"
                         "\"moved\":%lld}",
                         now_, inst.id, static_cast<long long>(key.second),
                         static_cast<long long>(res->moved_blocks));
                auto it = reqs_.find(key.second);
                if (it != reqs_.end())
                    it->second.remote_peak =
                        std::max(it->second.remote_peak, hosted_elsewhere_blocks(it->second));
            }
        }
        for (const auto& key : done) pending_moves_.erase(key);
    }

    // --- results ---

    SimResult finalize() {
        SimResult res;
        summary_.end_s = now_;
        summary_.horizon_s = opt_.horizon_s;
        summary_.generated_tps =
            now_ > 0.0 ? static_cast<double>(summary_.generated_tokens) / now_ : 0.0;

        std::vector<double> lat;
        for (const auto& [id, r] : reqs_) {
            RequestOutcome o;
            o.req_id = r.id;
            o.instance = r.home;
            o.arrival_s = r.arrival;
            o.admitted_s = r.admitted;
            o.prefill_end_s = r.prefill_end;
            o.completed_s = r.completed;
            o.prompt_tokens = r.prompt;
            o.output_tokens = r.output;
            o.generated_tokens = r.generated;
            o.remote_peak_blocks = r.remote_peak;
            o.rejected = r.st == ReqState::St::rejected;
            res.requests.push_back(o);
            if (r.st == ReqState::St::done) lat.push_back(r.completed - r.arrival);
        }
        if (!lat.empty()) {
            std::sort(lat.begin(), lat.end());
            double sum = 0.0;
            for (double v : lat) sum += v;
            summary_.mean_latency_s = sum / static_cast<double>(lat.size());
            auto rank = [&](double p) {
                const size_t n = lat.size();
                const size_t idx = static_cast<size_t>(std::ceil(p * n));
                return lat[std::min(n - 1, idx == 0 ? 0 : idx - 1)];
            };
            summary_.p50_latency_s = rank(0.50);
            summary_.p95_latency_s = rank(0.95);
        }
        for (const auto& [k, tokens] : bucket_tokens_)
            res.tps_series.push_back({static_cast<double>(k) * cfg_.tps_window_s, tokens});
        res.summary = summary_;
        res.steps = std::move(steps_);
        return res;
    }

    ClusterConfig cfg_;
    RunOptions opt_;
    std::map<int, size_t> idx_of_;
    std::vector<InstState> insts_;
    ctrl::GManager gm_;
    std::map<int64_t, ReqState> reqs_;
    std::priority_queue<Ev, std::vector<Ev>, EvAfter> pq_;
    uint64_t seq_ = 0;
    double now_ = 0.0;
    int64_t max_capacity_ = 0;
    int64_t global_steps_ = 0;
    Rng spot_rng_;
    std::set<std::pair<int, int64_t>> pending_moves_;
    std::map<int64_t, int64_t> bucket_tokens_;
    std::vector<StepRecord> steps_;
    SimSummary summary_;
    std::ofstream log_;
};

} // namespace

SimResult run_simulation(const ClusterConfig& cfg, const std::vector<TraceRequest>& trace,
                         const RunOptions& opt) {
    Engine eng(cfg, trace, opt);
    return eng.run();
}

std::string format_summary(const SimSummary& s) {
    char buf[1536];
    std::snprintf(
        buf, sizeof(buf),
        "end_s: %.6f\n"
        "horizon_s: %.6f\n"
        "arrivals: %lld\n"
        "completed: %lld\n"
        "rejected: %lld\n"
        "generated_tokens: %lld\n"
        "generated_tps: %.6f\n"
        "decode_steps: %lld\n"
        "stalled_request_steps: %lld\n"
        "mean_latency_s: %.6f\n"
        "p50_latency_s: %.6f\n"
        "p95_latency_s: %.6f\n"
        "planner_rounds: %lld\n"
        "planned_moves: %lld\n"
        "moves_completed: %lld\n"
        "moves_rejected: %lld\n"
        "blocks_moved: %lld\n"
        "overflow_borrows: %lld\n"
        "spot_checks: %lld\n"
        "spot_check_max_rel_err: %.3e\n",
        s.end_s, s.horizon_s, static_cast<long long>(s.arrivals),
        static_cast<long long>(s.completed), static_cast<long long>(s.rejected),
        static_cast<long long>(s.generated_tokens), s.generated_tps,
        static_cast<long long>(s.decode_steps),
        static_cast<long long>(s.stalled_request_steps), s.mean_latency_s,
        s.p50_latency_s, s.p95_latency_s, static_cast<long long>(s.planner_rounds),
        static_cast<long long>(s.planned_moves),
        static_cast<long long>(s.moves_completed),
        static_cast<long long>(s.moves_rejected),
        static_cast<long long>(s.blocks_moved),
        static_cast<long long>(s.overflow_borrows),
        static_cast<long long>(s.spot_checks), s.spot_check_max_rel_err);
    return buf;
}

std::string format_requests_csv(const std::vector<RequestOutcome>& reqs) {
    std::string out = "req_id,instance,arrival_s,admitted_s,prefill_end_s,completed_s,"
                      "prompt_tokens,output_tokens,generated_tokens,remote_peak_blocks,"
                      "rejected\n";
    char buf[320];
    for (const auto& r : reqs) {
        std::snprintf(buf, sizeof(buf), "%lld,%d,%.6f,%.6f,%.6f,%.6f,%lld,%lld,%lld,%lld,%d\n",
                      static_cast<long long>(r.req_id), r.instance, r.arrival_s,
                      r.admitted_s, r.prefill_end_s, r.completed_s,
                      static_cast<long long>(r.prompt_tokens),
                      static_cast<long long>(r.output_tokens),
                      static_cast<long long>(r.generated_tokens),
                      static_cast<long long>(r.remote_peak_blocks), r.rejected ? 1 : 0);
        out += buf;
    }
    return out;
}

std::string format_tps_csv(const std::vector<TpsBucket>& series) {
    std::string out = "t0_s,tokens\n";
    char buf[96];
    for (const auto& b : series) {
        std::snprintf(buf, sizeof(buf), "%.6f,%lld\n", b.t0_s,
                      static_cast<long long>(b.tokens));
        out += buf;
    }
    return out;
}

std::string format_steps_csv(const std::vector<StepRecord>& steps) {
    std::string out = "instance,start_s,duration_s,base_duration_s,penalty_factor,batch,"
                      "local_ctx_tokens,hosted_ctx_tokens,remote_ctx_tokens,shipped_tokens,"
                      "stalled\n";
    char buf[320];
    for (const auto& s : steps) {
        std::snprintf(buf, sizeof(buf), "%d,%.9f,%.9f,%.9f,%.9f,%lld,%lld,%lld,%lld,%lld,%lld\n",
                      s.instance, s.start_s, s.duration_s, s.base_duration_s,
                      s.penalty_factor, static_cast<long long>(s.batch),
                      static_cast<long long>(s.local_ctx_tokens),
                      static_cast<long long>(s.hosted_ctx_tokens),
                      static_cast<long long>(s.remote_ctx_tokens),
                      static_cast<long long>(s.shipped_tokens),
                      static_cast<long long>(s.stalled));
        out += buf;
    }
    return out;
}

} // namespace kvsched::sim
