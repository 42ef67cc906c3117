#include "kvsched/scheduler.hpp"
#include "kvsched/common.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <string>

namespace kvsched::sched {

namespace {

std::string inst_tag(int id) { return "instance " + std::to_string(id); }

// Remote tokens of a request, clamped so a partially filled trailing block
// never counts more tokens than the request has.
int64_t remote_tokens(const RequestResidency& r, int block_size) {
    return std::min(r.remote_blocks * block_size, r.total_ctx_tokens);
}

// Basis for evaluating a debtor's modeled TPS as a function of the blocks it
// offloads within one planning round. Keeping the basis fixed and feeding
// cumulative block counts makes the evaluation compose exactly: offloading k1
// then k2 models identically to offloading k1 + k2 at once.
struct DebtorEval {
    int64_t batch0 = 0;
    std::vector<int64_t> ctx0;
    int64_t offloaded_tokens0 = 0;
    int64_t queued0 = 0;
    int64_t req_ctx_tokens = 0; // context of the selected request
};

struct CreditorEval {
    int64_t batch0 = 0;
    std::vector<int64_t> ctx0;
    int64_t hosted_tokens0 = 0;
};

DebtorEval make_debtor_eval(const InstanceSnapshot& s, const RequestResidency& req,
                            const perf::ModelShape& shape) {
    DebtorEval e;
    e.batch0 = s.batch;
    e.ctx0.reserve(s.requests.size());
    for (const auto& r : s.requests) e.ctx0.push_back(r.total_ctx_tokens);
    for (const auto& r : s.requests)
        e.offloaded_tokens0 += remote_tokens(r, shape.block_size_tokens);
    e.queued0 = s.queued;
    e.req_ctx_tokens = req.total_ctx_tokens;
    return e;
}

CreditorEval make_creditor_eval(const InstanceSnapshot& s, const perf::ModelShape& shape) {
    CreditorEval e;
    e.batch0 = s.batch;
    e.ctx0.reserve(s.requests.size());
    for (const auto& r : s.requests) e.ctx0.push_back(r.total_ctx_tokens);
    e.hosted_tokens0 = s.hosted_blocks_total() * shape.block_size_tokens;
    return e;
}

double debtor_tps_at(const DebtorEval& e, int64_t cum_blocks,
                     const SchedulerConfig& cfg, const ModelCtx& ctx) {
    if (e.batch0 == 0) return 0.0;
    const int bs = ctx.shape.block_size_tokens;
    const int64_t admitted =
        std::min(e.queued0, (cum_blocks * bs) / cfg.expected_new_request_tokens);

    perf::InstanceLoad load;
    load.batch = e.batch0 + admitted;
    load.ctx_lengths = e.ctx0;
    for (int64_t i = 0; i < admitted; ++i)
        load.ctx_lengths.push_back(cfg.expected_new_request_tokens);
    // Offloaded tokens can never exceed the context that exists; the clamp
    // only matters when the retained-local floor is configured at zero.
    int64_t total_ctx = 0;
    for (int64_t s : load.ctx_lengths) total_ctx += s;
    load.offloaded_tokens = std::min(e.offloaded_tokens0 + cum_blocks * bs, total_ctx);
    return perf::instance_tps(load, perf::Role::debtor, ctx.shape, ctx.f, ctx.g);
}

double creditor_tps_at(const CreditorEval& e, int64_t cum_blocks, const ModelCtx& ctx) {
    if (e.batch0 == 0) return 0.0;
    perf::InstanceLoad load;
    load.batch = e.batch0;
    load.ctx_lengths = e.ctx0;
    load.offloaded_tokens = e.hosted_tokens0 + cum_blocks * ctx.shape.block_size_tokens;
    return perf::instance_tps(load, perf::Role::creditor, ctx.shape, ctx.f, ctx.g);
}

// Registry of roles already assigned within a planning round.
struct RoleRegistry {
    std::set<int> srcs;
    std::set<int> dsts;
    bool may_be_src(int id) const { return !dsts.count(id); }
    bool may_be_dst(int id) const { return !srcs.count(id); }
};

struct WorkState {
    InstanceSnapshot s;
    int64_t d_cum = 0; // blocks offloaded as a debtor this round
    int64_t c_cum = 0; // blocks received as a creditor this round
    bool d_eval_set = false;
    bool c_eval_set = false;
    DebtorEval d_eval;
    CreditorEval c_eval;
};

RequestResidency* find_request(InstanceSnapshot& s, int64_t req_id) {
    for (auto& r : s.requests)
        if (r.req_id == req_id) return &r;
    return nullptr;
}

void add_hosted(InstanceSnapshot& s, int64_t req_id, int home, int64_t blocks) {
    for (auto& h : s.hosted) {
        if (h.req_id == req_id && h.home_instance == home) {
            h.num_blocks += blocks;
            return;
        }
    }
    s.hosted.push_back({req_id, home, blocks});
}

// Removes up to `blocks` from a hosted entry; returns the amount removed.
int64_t take_hosted(InstanceSnapshot& s, int64_t req_id, int home, int64_t blocks) {
    for (auto it = s.hosted.begin(); it != s.hosted.end(); ++it) {
        if (it->req_id == req_id && it->home_instance == home) {
            const int64_t n = std::min(blocks, it->num_blocks);
            it->num_blocks -= n;
            if (it->num_blocks == 0) s.hosted.erase(it);
            return n;
        }
    }
    return 0;
}

std::vector<MoveDirective> reclaim_pass(std::vector<WorkState>& work,
                                        RoleRegistry& reg) {
    std::vector<MoveDirective> out;
    std::map<int, size_t> by_id;
    for (size_t i = 0; i < work.size(); ++i) by_id[work[i].s.instance_id] = i;

    // Homes with free space pull their lent blocks back.
    for (auto& [home_id, hi] : by_id) {
        InstanceSnapshot& home = work[hi].s;
        if (home.remote_blocks_total() == 0) continue;
        if (!reg.may_be_dst(home_id)) continue;
        int64_t budget = home.free_blocks();
        if (budget <= 0) continue;

        std::vector<RequestResidency*> reqs;
        for (auto& r : home.requests)
            if (r.remote_blocks > 0) reqs.push_back(&r);
        std::sort(reqs.begin(), reqs.end(),
                  [](const auto* a, const auto* b) { return a->req_id < b->req_id; });

        for (auto* r : reqs) {
            if (budget <= 0) break;
            for (auto& [host_id, hj] : by_id) {
                if (budget <= 0 || r->remote_blocks <= 0) break;
                if (host_id == home_id) continue;
                if (!reg.may_be_src(host_id)) continue;
                InstanceSnapshot& host = work[hj].s;
                const int64_t want = std::min({budget, r->remote_blocks});
                const int64_t n = take_hosted(host, r->req_id, home_id, want);
                if (n <= 0) continue;
                host.mem_used_blocks -= n;
                home.mem_used_blocks += n;
                r->local_blocks += n;
                r->remote_blocks -= n;
                budget -= n;
                reg.dsts.insert(home_id);
                reg.srcs.insert(host_id);
                out.push_back({r->req_id, host_id, home_id, n, 0.0, true});
            }
        }
    }

    // Hosts squeezed by their own admission demand push hosted blocks back to
    // any home that can take them.
    for (auto& [host_id, hj] : by_id) {
        InstanceSnapshot& host = work[hj].s;
        if (host.hosted_blocks_total() == 0 || host.queued == 0) continue;
        if (host.free_blocks() > 0) continue;
        if (!reg.may_be_src(host_id)) continue;

        std::vector<HostedBlocks> entries = host.hosted;
        std::sort(entries.begin(), entries.end(), [](const auto& a, const auto& b) {
            return a.req_id != b.req_id ? a.req_id < b.req_id
                                        : a.home_instance < b.home_instance;
        });
        for (const auto& h : entries) {
            auto it = by_id.find(h.home_instance);
            if (it == by_id.end()) continue;
            if (!reg.may_be_dst(h.home_instance)) continue;
            InstanceSnapshot& home = work[it->second].s;
            RequestResidency* r = find_request(home, h.req_id);
            if (!r) continue;
            const int64_t n = std::min(h.num_blocks, home.free_blocks());
            if (n <= 0) continue;
            take_hosted(host, h.req_id, h.home_instance, n);
            host.mem_used_blocks -= n;
            home.mem_used_blocks += n;
            r->local_blocks += n;
            r->remote_blocks -= n;
            reg.srcs.insert(host_id);
            reg.dsts.insert(h.home_instance);
            out.push_back({h.req_id, host_id, h.home_instance, n, 0.0, true});
        }
    }
    return out;
}

std::vector<MoveDirective> greedy_pass(std::vector<WorkState>& work,
                                       const SchedulerConfig& cfg, const ModelCtx& ctx,
                                       RoleRegistry& reg) {
    std::vector<MoveDirective> out;
    std::map<int, size_t> by_id;
    std::vector<InstanceSnapshot> snaps;
    for (size_t i = 0; i < work.size(); ++i) {
        by_id[work[i].s.instance_id] = i;
        snaps.push_back(work[i].s);
    }
    const RoleSets roles = classify_roles(snaps, cfg);
    std::set<int> creditor_set(roles.creditors.begin(), roles.creditors.end());

    for (int d_id : roles.debtors) {
        WorkState& dw = work[by_id[d_id]];
        if (dw.s.batch == 0) continue;
        if (!reg.may_be_src(d_id)) continue;
        auto req = pick_longest_request(dw.s);
        if (!req) continue;
        int64_t block_max = movable_blocks(*req, cfg);
        if (block_max <= 0) continue;
        if (!dw.d_eval_set) {
            dw.d_eval = make_debtor_eval(dw.s, *req, ctx.shape);
            dw.d_eval_set = true;
        }

        while (block_max > 0) {
            // Creditors re-sorted by their current utilization; the sweep
            // always continues from the least-utilized eligible one.
            std::vector<int> elig;
            for (int c_id : creditor_set) {
                if (c_id == d_id) continue;
                if (!reg.may_be_dst(c_id)) continue;
                if (work[by_id[c_id]].s.free_blocks() <= 0) continue;
                elig.push_back(c_id);
            }
            std::sort(elig.begin(), elig.end(), [&](int a, int b) {
                const double ua = work[by_id[a]].s.mem_util();
                const double ub = work[by_id[b]].s.mem_util();
                return ua != ub ? ua < ub : a < b;
            });
            if (elig.empty()) break;

            const int c_id = elig.front();
            WorkState& cw = work[by_id[c_id]];
            if (!cw.c_eval_set) {
                cw.c_eval = make_creditor_eval(cw.s, ctx.shape);
                cw.c_eval_set = true;
            }

            const int64_t k_max = std::min(block_max, cw.s.free_blocks());
            const double base = debtor_tps_at(dw.d_eval, dw.d_cum, cfg, ctx) +
                                creditor_tps_at(cw.c_eval, cw.c_cum, ctx);
            int64_t best_k = 0;
            double best_gain = 0.0;
            for (int64_t k = 1; k <= k_max; ++k) {
                const double gain = debtor_tps_at(dw.d_eval, dw.d_cum + k, cfg, ctx) +
                                    creditor_tps_at(cw.c_eval, cw.c_cum + k, ctx) - base;
                if (gain > best_gain) {
                    best_gain = gain;
                    best_k = k;
                }
            }
            if (best_k <= 0 || best_gain <= 0.0) break;

            RequestResidency* r = find_request(dw.s, req->req_id);
            r->local_blocks -= best_k;
            r->remote_blocks += best_k;
            dw.s.mem_used_blocks -= best_k;
            dw.d_cum += best_k;
            cw.s.mem_used_blocks += best_k;
            add_hosted(cw.s, req->req_id, d_id, best_k);
            cw.c_cum += best_k;
            reg.srcs.insert(d_id);
            reg.dsts.insert(c_id);
            block_max -= best_k;
            out.push_back({req->req_id, d_id, c_id, best_k, best_gain, false});
        }
    }
    return out;
}

std::vector<WorkState> make_work(const std::vector<InstanceSnapshot>& snaps) {
    std::set<int> seen;
    std::vector<WorkState> work;
    work.reserve(snaps.size());
    for (const auto& s : snaps) {
        s.validate();
        KVSCHED_REQUIRE(!seen.count(s.instance_id),
                        "duplicate snapshot for " + inst_tag(s.instance_id));
        seen.insert(s.instance_id);
        work.push_back({s, 0, 0, false, false, {}, {}});
    }
    return work;
}

} // namespace

double InstanceSnapshot::mem_util() const {
    KVSCHED_REQUIRE(mem_capacity_blocks >= 1, inst_tag(instance_id) + ": capacity must be >= 1");
    return static_cast<double>(mem_used_blocks) / static_cast<double>(mem_capacity_blocks);
}

int64_t InstanceSnapshot::remote_blocks_total() const {
    int64_t n = 0;
    for (const auto& r : requests) n += r.remote_blocks;
    return n;
}

int64_t InstanceSnapshot::hosted_blocks_total() const {
    int64_t n = 0;
    for (const auto& h : hosted) n += h.num_blocks;
    return n;
}

void InstanceSnapshot::validate() const {
    const std::string tag = inst_tag(instance_id);
    KVSCHED_REQUIRE(instance_id >= 0, tag + ": instance_id must be >= 0");
    KVSCHED_REQUIRE(mem_capacity_blocks >= 1, tag + ": capacity must be >= 1");
    KVSCHED_REQUIRE(mem_used_blocks >= 0 && mem_used_blocks <= mem_capacity_blocks,
                    tag + ": used blocks outside [0, capacity]");
    KVSCHED_REQUIRE(batch == static_cast<int64_t>(requests.size()),
                    tag + ": batch must equal the running request count");
    KVSCHED_REQUIRE(queued >= 0, tag + ": queued must be >= 0");
    int64_t local_sum = 0;
    for (const auto& r : requests) {
        KVSCHED_REQUIRE(r.req_id >= 0, tag + ": req_id must be >= 0");
        KVSCHED_REQUIRE(r.local_blocks >= 0 && r.remote_blocks >= 0,
                        tag + ": request block counts must be >= 0");
        KVSCHED_REQUIRE(r.local_blocks + r.remote_blocks >= 1,
                        tag + ": running request must hold at least one block");
        KVSCHED_REQUIRE(r.total_ctx_tokens >= 1,
                        tag + ": running request context must be >= 1");
        local_sum += r.local_blocks;
    }
    int64_t hosted_sum = 0;
    for (const auto& h : hosted) {
        KVSCHED_REQUIRE(h.num_blocks >= 1, tag + ": hosted entry must hold >= 1 block");
        KVSCHED_REQUIRE(h.home_instance != instance_id,
                        tag + ": hosted entry cannot be homed here");
        hosted_sum += h.num_blocks;
    }
    KVSCHED_REQUIRE(local_sum + hosted_sum <= mem_used_blocks,
                    tag + ": resident blocks exceed used blocks");
    KVSCHED_REQUIRE(remote_blocks_total() == 0 || hosted_sum == 0,
                    tag + ": an instance never lends and borrows at once");
}

void SchedulerConfig::validate() const {
    KVSCHED_REQUIRE(std::isfinite(batch_threshold) && batch_threshold >= 0.0,
                    "batch_threshold must be >= 0");
    KVSCHED_REQUIRE(std::isfinite(mem_util_threshold) &&
                        mem_util_threshold >= 0.0 && mem_util_threshold <= 1.0,
                    "mem_util_threshold must be in [0, 1]");
    KVSCHED_REQUIRE(std::isfinite(retain_local_fraction) &&
                        retain_local_fraction >= 0.0 && retain_local_fraction <= 1.0,
                    "retain_local_fraction must be in [0, 1]");
    KVSCHED_REQUIRE(expected_new_request_tokens >= 1,
                    "expected_new_request_tokens must be >= 1");
}

RoleSets classify_roles(const std::vector<InstanceSnapshot>& snaps,
                        const SchedulerConfig& cfg) {
    cfg.validate();
    RoleSets out;
    std::set<int> debtor_ids;
    for (const auto& s : snaps) {
        s.validate();
        const bool debtor_ok = s.role_lock != RoleLock::creditor &&
                               s.hosted_blocks_total() == 0 &&
                               static_cast<double>(s.batch) <= cfg.batch_threshold;
        if (debtor_ok) {
            out.debtors.push_back(s.instance_id);
            debtor_ids.insert(s.instance_id);
        }
    }
    for (const auto& s : snaps) {
        if (debtor_ids.count(s.instance_id)) continue; // both-qualifying -> debtor
        const bool creditor_ok = s.role_lock != RoleLock::debtor &&
                                 s.remote_blocks_total() == 0 &&
                                 s.mem_util() <= cfg.mem_util_threshold;
        if (creditor_ok) out.creditors.push_back(s.instance_id);
    }

    auto key = [&](int id) -> const InstanceSnapshot& {
        for (const auto& s : snaps)
            if (s.instance_id == id) return s;
        throw ContractError("unknown instance id");
    };
    std::sort(out.debtors.begin(), out.debtors.end(), [&](int a, int b) {
        const auto &sa = key(a), &sb = key(b);
        return sa.batch != sb.batch ? sa.batch < sb.batch : a < b;
    });
    std::sort(out.creditors.begin(), out.creditors.end(), [&](int a, int b) {
        const double ua = key(a).mem_util(), ub = key(b).mem_util();
        return ua != ub ? ua < ub : a < b;
    });
    return out;
}

std::optional<RequestResidency> pick_longest_request(const InstanceSnapshot& snap) {
    std::optional<RequestResidency> best;
    for (const auto& r : snap.requests) {
        if (!best || r.total_ctx_tokens > best->total_ctx_tokens ||
            (r.total_ctx_tokens == best->total_ctx_tokens && r.req_id < best->req_id))
            best = r;
    }
    return best;
}

int64_t movable_blocks(const RequestResidency& req, const SchedulerConfig& cfg) {
    cfg.validate();
    const int64_t total = req.local_blocks + req.remote_blocks;
    const int64_t keep = static_cast<int64_t>(
        std::ceil(cfg.retain_local_fraction * static_cast<double>(total)));
    return std::max<int64_t>(0, req.local_blocks - keep);
}

int64_t derive_feasible_batch(const InstanceSnapshot& debtor, int64_t freed_blocks,
                              const SchedulerConfig& cfg, const perf::ModelShape& shape) {
    debtor.validate();
    cfg.validate();
    shape.validate();
    KVSCHED_REQUIRE(freed_blocks >= 0, "freed_blocks must be >= 0");
    const int64_t admitted =
        std::min(debtor.queued, (freed_blocks * shape.block_size_tokens) /
                                    cfg.expected_new_request_tokens);
    return debtor.batch + admitted;
}

double estimate_pair_gain(int64_t k, const InstanceSnapshot& debtor,
                          const InstanceSnapshot& creditor,
                          const SchedulerConfig& cfg, const ModelCtx& ctx) {
    debtor.validate();
    creditor.validate();
    cfg.validate();
    ctx.shape.validate();
    KVSCHED_REQUIRE(debtor.instance_id != creditor.instance_id,
                    "debtor and creditor must be distinct");
    auto req = pick_longest_request(debtor);
    KVSCHED_REQUIRE(req.has_value(), "debtor has no running request to move");
    const int64_t limit = std::min(movable_blocks(*req, cfg), creditor.free_blocks());
    KVSCHED_REQUIRE(k >= 0 && k <= limit,
                    "k outside [0, min(movable, creditor free blocks)]");

    const DebtorEval de = make_debtor_eval(debtor, *req, ctx.shape);
    const CreditorEval ce = make_creditor_eval(creditor, ctx.shape);
    return debtor_tps_at(de, k, cfg, ctx) + creditor_tps_at(ce, k, ctx) -
           (debtor_tps_at(de, 0, cfg, ctx) + creditor_tps_at(ce, 0, ctx));
}

std::vector<MoveDirective> plan_moves(const std::vector<InstanceSnapshot>& snaps,
                                      const SchedulerConfig& cfg, const ModelCtx& ctx) {
    cfg.validate();
    ctx.shape.validate();
    auto work = make_work(snaps);
    RoleRegistry reg;
    return greedy_pass(work, cfg, ctx, reg);
}

std::vector<MoveDirective> plan_reclaims(const std::vector<InstanceSnapshot>& snaps,
                                         const SchedulerConfig& cfg) {
    cfg.validate();
    auto work = make_work(snaps);
    RoleRegistry reg;
    return reclaim_pass(work, reg);
}

RoundPlan plan_round(const std::vector<InstanceSnapshot>& snaps,
                     const SchedulerConfig& cfg, const ModelCtx& ctx) {
    cfg.validate();
    ctx.shape.validate();
    auto work = make_work(snaps);
    RoleRegistry reg;
    RoundPlan plan;
    plan.reclaims = reclaim_pass(work, reg);
    plan.moves = greedy_pass(work, cfg, ctx, reg);
    return plan;
}

double snapshot_cluster_tps(const std::vector<InstanceSnapshot>& snaps,
                            const ModelCtx& ctx) {
    ctx.shape.validate();
    std::vector<std::pair<perf::InstanceLoad, perf::Role>> loads;
    for (const auto& s : snaps) {
        s.validate();
        perf::InstanceLoad load;
        load.batch = s.batch;
        for (const auto& r : s.requests) load.ctx_lengths.push_back(r.total_ctx_tokens);
        perf::Role role = perf::Role::neutral;
        int64_t rt = 0;
        for (const auto& r : s.requests) rt += remote_tokens(r, ctx.shape.block_size_tokens);
        if (rt > 0) {
            role = perf::Role::debtor;
            load.offloaded_tokens = rt;
        } else if (s.hosted_blocks_total() > 0) {
            role = perf::Role::creditor;
            load.offloaded_tokens = s.hosted_blocks_total() * ctx.shape.block_size_tokens;
        }
        loads.emplace_back(std::move(load), role);
    }
    return perf::cluster_tps(loads, ctx.shape, ctx.f, ctx.g);
}

} // namespace kvsched::sched
