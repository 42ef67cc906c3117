#include "kvsched/config.hpp"
#include "kvsched/common.hpp"

#include <json.hpp>

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

namespace kvsched::sim {

Policy parse_policy(const std::string& name) {
    if (name == "infinite") return Policy::infinite;
    if (name == "strawman") return Policy::strawman;
    if (name == "static") return Policy::static_alloc;
    throw InputError("unknown policy '" + name + "' (expected infinite, strawman, or static)");
}

std::string policy_name(Policy p) {
    switch (p) {
    case Policy::infinite: return "infinite";
    case Policy::strawman: return "strawman";
    case Policy::static_alloc: return "static";
    }
    throw ContractError("unhandled policy value");
}

void ControlPlaneConfig::validate() const {
    KVSCHED_INPUT_CHECK(heartbeat_every_steps >= 1, "ctrl: heartbeat_every_steps must be >= 1");
    KVSCHED_INPUT_CHECK(heartbeat_idle_interval_s > 0.0, "ctrl: heartbeat_idle_interval_s must be > 0");
    KVSCHED_INPUT_CHECK(planning_period_s > 0.0, "ctrl: planning_period_s must be > 0");
    KVSCHED_INPUT_CHECK(link_latency_s >= 0.0, "ctrl: link_latency_s must be >= 0");
    KVSCHED_INPUT_CHECK(reservation_timeout_s > 0.0, "ctrl: reservation_timeout_s must be > 0");
    KVSCHED_INPUT_CHECK(stale_after_s > 0.0, "ctrl: stale_after_s must be > 0");
    KVSCHED_INPUT_CHECK(role_lock_hold_s >= 0.0, "ctrl: role_lock_hold_s must be >= 0");
}

void MigrationConfig::validate() const {
    KVSCHED_INPUT_CHECK(step_tokens >= 1, "migration: step_tokens must be >= 1");
    KVSCHED_INPUT_CHECK(overlap_cap_tokens >= 0, "migration: overlap_cap_tokens must be >= 0");
    KVSCHED_INPUT_CHECK(std::isfinite(over_cap_penalty_per_token) && over_cap_penalty_per_token >= 0.0,
                        "migration: over_cap_penalty_per_token must be >= 0");
}

void ClusterConfig::validate() const {
    KVSCHED_INPUT_CHECK(!instances.empty(), "config: at least one instance required");
    std::set<int> ids;
    for (const auto& inst : instances) {
        KVSCHED_INPUT_CHECK(inst.id >= 0, "config: instance ids must be >= 0");
        KVSCHED_INPUT_CHECK(inst.capacity_blocks >= 1, "config: instance capacity must be >= 1 block");
        KVSCHED_INPUT_CHECK(ids.insert(inst.id).second, "config: duplicate instance id");
    }
    shape.validate();
    KVSCHED_INPUT_CHECK(!f.empty() && !g.empty(), "config: rate curves required");
    KVSCHED_INPUT_CHECK(f.nondecreasing(), "config: batch-rate curve must be nondecreasing");
    sched.validate();
    ctrl.validate();
    migration.validate();
    KVSCHED_INPUT_CHECK(prefill_cost_per_token_s >= 0.0, "config: prefill_cost_per_token_s must be >= 0");
    KVSCHED_INPUT_CHECK(tps_window_s > 0.0, "config: tps_window_s must be > 0");
    KVSCHED_INPUT_CHECK(spot_check_every_steps >= 0, "config: spot_check_every_steps must be >= 0");
    for (const auto& mv : injected_moves) {
        KVSCHED_INPUT_CHECK(mv.at_s >= 0.0, "config: injected move time must be >= 0");
        KVSCHED_INPUT_CHECK(mv.num_blocks >= 1, "config: injected move must carry >= 1 block");
        KVSCHED_INPUT_CHECK(ids.count(mv.src) && ids.count(mv.dst) && mv.src != mv.dst,
                            "config: injected move endpoints must be distinct known instances");
    }
}

ClusterConfig default_cluster_config(int n_instances, int64_t capacity_blocks) {
    KVSCHED_INPUT_CHECK(n_instances >= 1, "default config: need >= 1 instance");
    ClusterConfig c;
    for (int i = 0; i < n_instances; ++i)
        c.instances.push_back({i, capacity_blocks});
    c.shape.n_layers = 32;
    c.shape.workload_per_token = 1.0;
    // Attention work comparable to batch work at a few thousand context
    // tokens, so placement decisions actually matter.
    c.shape.attn_work_per_ctx_token = 1.0;
    c.shape.kv_bytes_per_token = 1 << 20;
    c.shape.block_size_tokens = 16;
    c.f = perf::default_batch_curve();
    c.g = perf::default_ctx_curve(1.0e6, 4.0e6);
    return c;
}

namespace {

using nlohmann::json;

json curve_to_json(const perf::PerfCurve& c) {
    json arr = json::array();
    for (const auto& [x, rate] : c.samples())
        arr.push_back(json::array({x, rate}));
    return arr;
}

perf::PerfCurve curve_from_json(const json& j, const char* name) {
    KVSCHED_INPUT_CHECK(j.is_array() && j.size() >= 2,
                        std::string("config: curve '") + name + "' needs >= 2 [x, rate] samples");
    std::vector<std::pair<double, double>> samples;
    for (const auto& e : j) {
        KVSCHED_INPUT_CHECK(e.is_array() && e.size() == 2,
                            std::string("config: curve '") + name + "' samples must be [x, rate]");
        samples.emplace_back(e[0].get<double>(), e[1].get<double>());
    }
    return perf::PerfCurve(std::move(samples));
}

} // namespace

ClusterConfig parse_cluster_config(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw InputError(std::string("config: invalid JSON: ") + e.what());
    }
    KVSCHED_INPUT_CHECK(j.is_object(), "config: top level must be an object");
    KVSCHED_INPUT_CHECK(j.contains("schema_version") && j["schema_version"].is_number_integer(),
                        "config: missing integer schema_version");
    KVSCHED_INPUT_CHECK(j["schema_version"].get<int>() == 1, "config: unsupported schema_version");

    ClusterConfig c;
    try {
        c.seed = j.at("seed").get<uint64_t>();
        c.policy = parse_policy(j.at("policy").get<std::string>());
        for (const auto& e : j.at("instances")) {
            InstanceSpec s;
            s.id = e.at("id").get<int>();
            s.capacity_blocks = e.at("capacity_blocks").get<int64_t>();
            c.instances.push_back(s);
        }
        const auto& sh = j.at("model");
        c.shape.n_layers = sh.at("n_layers").get<int>();
        c.shape.workload_per_token = sh.at("workload_per_token").get<double>();
        c.shape.attn_work_per_ctx_token = sh.at("attn_work_per_ctx_token").get<double>();
        c.shape.kv_bytes_per_token = sh.at("kv_bytes_per_token").get<double>();
        c.shape.block_size_tokens = sh.at("block_size_tokens").get<int>();
        c.f = curve_from_json(j.at("batch_rate_curve"), "batch_rate_curve");
        c.g = curve_from_json(j.at("ctx_rate_curve"), "ctx_rate_curve");

        const auto& sc = j.at("scheduler");
        c.sched.batch_threshold = sc.at("batch_threshold").get<double>();
        c.sched.mem_util_threshold = sc.at("mem_util_threshold").get<double>();
        c.sched.retain_local_fraction = sc.at("retain_local_fraction").get<double>();
        c.sched.expected_new_request_tokens = sc.at("expected_new_request_tokens").get<int64_t>();

        const auto& cp = j.at("control_plane");
        c.ctrl.heartbeat_every_steps = cp.at("heartbeat_every_steps").get<int64_t>();
        c.ctrl.heartbeat_idle_interval_s = cp.at("heartbeat_idle_interval_s").get<double>();
        c.ctrl.planning_period_s = cp.at("planning_period_s").get<double>();
        c.ctrl.link_latency_s = cp.at("link_latency_s").get<double>();
        c.ctrl.reservation_timeout_s = cp.at("reservation_timeout_s").get<double>();
        c.ctrl.stale_after_s = cp.at("stale_after_s").get<double>();
        c.ctrl.role_lock_hold_s = cp.at("role_lock_hold_s").get<double>();

        const auto& mg = j.at("migration");
        c.migration.step_tokens = mg.at("step_tokens").get<int64_t>();
        c.migration.overlap_cap_tokens = mg.at("overlap_cap_tokens").get<int64_t>();
        c.migration.over_cap_penalty_per_token = mg.at("over_cap_penalty_per_token").get<double>();

        c.prefill_cost_per_token_s = j.at("prefill_cost_per_token_s").get<double>();
        c.tps_window_s = j.at("tps_window_s").get<double>();
        c.spot_check_every_steps = j.at("spot_check_every_steps").get<int64_t>();
        if (j.contains("injected_moves")) {
            for (const auto& e : j["injected_moves"]) {
                InjectedMove mv;
                mv.at_s = e.at("at_s").get<double>();
                mv.req_id = e.at("req_id").get<int64_t>();
                mv.src = e.at("src").get<int>();
                mv.dst = e.at("dst").get<int>();
                mv.num_blocks = e.at("num_blocks").get<int64_t>();
                c.injected_moves.push_back(mv);
            }
        }
    } catch (const json::exception& e) {
        throw InputError(std::string("config: ") + e.what());
    }
    c.validate();
    return c;
}

ClusterConfig load_cluster_config(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    KVSCHED_INPUT_CHECK(f.good(), "cannot open config: " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return parse_cluster_config(ss.str());
}

std::string format_cluster_config(const ClusterConfig& cfg) {
    cfg.validate();
    json j;
    j["schema_version"] = 1;
    j["seed"] = cfg.seed;
    j["policy"] = policy_name(cfg.policy);
    j["instances"] = json::array();
    for (const auto& inst : cfg.instances)
        j["instances"].push_back({{"id", inst.id}, {"capacity_blocks", inst.capacity_blocks}});
    j["model"] = {{"n_layers", cfg.shape.n_layers},
                  {"workload_per_token", cfg.shape.workload_per_token},
                  {"attn_work_per_ctx_token", cfg.shape.attn_work_per_ctx_token},
                  {"kv_bytes_per_token", cfg.shape.kv_bytes_per_token},
                  {"block_size_tokens", cfg.shape.block_size_tokens}};
    j["batch_rate_curve"] = curve_to_json(cfg.f);
    j["ctx_rate_curve"] = curve_to_json(cfg.g);
    j["scheduler"] = {{"batch_threshold", cfg.sched.batch_threshold},
                      {"mem_util_threshold", cfg.sched.mem_util_threshold},
                      {"retain_local_fraction", cfg.sched.retain_local_fraction},
                      {"expected_new_request_tokens", cfg.sched.expected_new_request_tokens}};
    j["control_plane"] = {{"heartbeat_every_steps", cfg.ctrl.heartbeat_every_steps},
                          {"heartbeat_idle_interval_s", cfg.ctrl.heartbeat_idle_interval_s},
                          {"planning_period_s", cfg.ctrl.planning_period_s},
                          {"link_latency_s", cfg.ctrl.link_latency_s},
                          {"reservation_timeout_s", cfg.ctrl.reservation_timeout_s},
                          {"stale_after_s", cfg.ctrl.stale_after_s},
                          {"role_lock_hold_s", cfg.ctrl.role_lock_hold_s}};
    j["migration"] = {{"step_tokens", cfg.migration.step_tokens},
                      {"overlap_cap_tokens", cfg.migration.overlap_cap_tokens},
                      {"over_cap_penalty_per_token", cfg.migration.over_cap_penalty_per_token}};
    j["prefill_cost_per_token_s"] = cfg.prefill_cost_per_token_s;
    j["tps_window_s"] = cfg.tps_window_s;
    j["spot_check_every_steps"] = cfg.spot_check_every_steps;
    j["injected_moves"] = json::array();
    for (const auto& mv : cfg.injected_moves)
        j["injected_moves"].push_back({{"at_s", mv.at_s},
                                       {"req_id", mv.req_id},
                                       {"src", mv.src},
                                       {"dst", mv.dst},
                                       {"num_blocks", mv.num_blocks}});
    return j.dump(2) + "\n";
}

void save_cluster_config(const ClusterConfig& cfg, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    KVSCHED_INPUT_CHECK(f.good(), "cannot open config for writing: " + path);
    f << format_cluster_config(cfg);
    KVSCHED_INPUT_CHECK(f.good(), "failed writing config: " + path);
}

namespace {

sched::RoleLock role_lock_from_name(const std::string& name) {
    if (name == "none") return sched::RoleLock::none;
    if (name == "debtor") return sched::RoleLock::debtor;
    if (name == "creditor") return sched::RoleLock::creditor;
    throw InputError("snapshot: unknown role_lock '" + name + "'");
}

const char* role_lock_name(sched::RoleLock l) {
    switch (l) {
    case sched::RoleLock::none: return "none";
    case sched::RoleLock::debtor: return "debtor";
    case sched::RoleLock::creditor: return "creditor";
    }
    throw ContractError("unhandled role lock value");
}

} // namespace

std::vector<sched::InstanceSnapshot> parse_snapshots(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw InputError(std::string("snapshot: invalid JSON: ") + e.what());
    }
    KVSCHED_INPUT_CHECK(j.is_object() && j.contains("schema_version") &&
                            j["schema_version"].is_number_integer() &&
                            j["schema_version"].get<int>() == 1,
                        "snapshot: missing or unsupported schema_version");
    std::vector<sched::InstanceSnapshot> out;
    try {
        for (const auto& e : j.at("instances")) {
            sched::InstanceSnapshot s;
            s.instance_id = e.at("instance_id").get<int>();
            s.mem_capacity_blocks = e.at("mem_capacity_blocks").get<int64_t>();
            s.mem_used_blocks = e.at("mem_used_blocks").get<int64_t>();
            s.queued = e.at("queued").get<int64_t>();
            if (e.contains("requests")) {
                for (const auto& re : e["requests"]) {
                    sched::RequestResidency r;
                    r.req_id = re.at("req_id").get<int64_t>();
                    r.local_blocks = re.at("local_blocks").get<int64_t>();
                    r.remote_blocks = re.at("remote_blocks").get<int64_t>();
                    r.total_ctx_tokens = re.at("total_ctx_tokens").get<int64_t>();
                    s.requests.push_back(r);
                }
            }
            if (e.contains("hosted")) {
                for (const auto& he : e["hosted"]) {
                    sched::HostedBlocks h;
                    h.req_id = he.at("req_id").get<int64_t>();
                    h.home_instance = he.at("home_instance").get<int>();
                    h.num_blocks = he.at("num_blocks").get<int64_t>();
                    s.hosted.push_back(h);
                }
            }
            if (e.contains("role_lock"))
                s.role_lock = role_lock_from_name(e["role_lock"].get<std::string>());
            s.batch = static_cast<int64_t>(s.requests.size());
            s.validate();
            out.push_back(std::move(s));
        }
    } catch (const json::exception& e) {
        throw InputError(std::string("snapshot: ") + e.what());
    } catch (const ContractError& e) {
        throw InputError(std::string("snapshot: ") + e.what());
    }
    return out;
}

std::vector<sched::InstanceSnapshot> load_snapshots(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    KVSCHED_INPUT_CHECK(f.good(), "cannot open snapshot file: " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return parse_snapshots(ss.str());
}

std::string format_snapshots(const std::vector<sched::InstanceSnapshot>& snaps) {
    json j;
    j["schema_version"] = 1;
    j["instances"] = json::array();
    for (const auto& s : snaps) {
        json e;
        e["instance_id"] = s.instance_id;
        e["mem_capacity_blocks"] = s.mem_capacity_blocks;
        e["mem_used_blocks"] = s.mem_used_blocks;
        e["queued"] = s.queued;
        e["requests"] = json::array();
        for (const auto& r : s.requests)
            e["requests"].push_back({{"req_id", r.req_id},
                                     {"local_blocks", r.local_blocks},
                                     {"remote_blocks", r.remote_blocks},
                                     {"total_ctx_tokens", r.total_ctx_tokens}});
        e["hosted"] = json::array();
        for (const auto& h : s.hosted)
            e["hosted"].push_back({{"req_id", h.req_id},
                                   {"home_instance", h.home_instance},
                                   {"num_blocks", h.num_blocks}});
        e["role_lock"] = role_lock_name(s.role_lock);
        j["instances"].push_back(std::move(e));
    }
    return j.dump(2) + "\n";
}

std::string format_round_plan(const sched::RoundPlan& plan, double before_tps) {
    std::string out;
    char buf[192];
    std::snprintf(buf, sizeof(buf), "before_tps: %.6f\nreclaims: %zu\n", before_tps,
                  plan.reclaims.size());
    out += buf;
    for (const auto& d : plan.reclaims) {
        std::snprintf(buf, sizeof(buf), "  req %lld: %d -> %d, %lld blocks\n",
                      static_cast<long long>(d.req_id), d.src_instance, d.dst_instance,
                      static_cast<long long>(d.num_blocks));
        out += buf;
    }
    std::snprintf(buf, sizeof(buf), "moves: %zu\n", plan.moves.size());
    out += buf;
    double gain = 0.0;
    for (const auto& d : plan.moves) {
        gain += d.est_gain;
        std::snprintf(buf, sizeof(buf), "  req %lld: %d -> %d, %lld blocks, gain %.6f\n",
                      static_cast<long long>(d.req_id), d.src_instance, d.dst_instance,
                      static_cast<long long>(d.num_blocks), d.est_gain);
        out += buf;
    }
    std::snprintf(buf, sizeof(buf), "modeled_gain: %.6f\n", gain);
    out += buf;
    return out;
}

} // namespace kvsched::sim
