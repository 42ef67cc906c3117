#include "kvsched.h"

#include "kvsched/common.hpp"
#include "kvsched/config.hpp"
#include "kvsched/scheduler.hpp"
#include "kvsched/simengine.hpp"
#include "kvsched/trace.hpp"
#include "kvsched/verify.hpp"

#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

struct kvs_config {
    kvsched::sim::ClusterConfig cfg;
};

struct kvs_trace {
    std::vector<kvsched::sim::TraceRequest> reqs;
};

namespace {

thread_local std::string g_last_error = "no error";

char* dup_string(const std::string& s) {
    char* out = static_cast<char*>(std::malloc(s.size() + 1));
    if (!out) return nullptr;
    std::memcpy(out, s.c_str(), s.size() + 1);
    return out;
}

kvs_status fail(kvs_status code, const std::string& msg) {
    g_last_error = msg;
    return code;
}

// Runs fn, translating exceptions to status codes.
template <typename Fn>
kvs_status guarded(Fn&& fn) {
    try {
        return fn();
    } catch (const kvsched::InputError& e) {
        return fail(KVS_ERR_INPUT, e.what());
    } catch (const kvsched::ContractError& e) {
        return fail(KVS_ERR_CONTRACT, e.what());
    } catch (const std::exception& e) {
        return fail(KVS_ERR_INTERNAL, e.what());
    } catch (...) {
        return fail(KVS_ERR_INTERNAL, "unknown error");
    }
}

void write_file(const std::string& path, const std::string& content) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    KVSCHED_INPUT_CHECK(f.good(), "cannot open for writing: " + path);
    f << content;
    KVSCHED_INPUT_CHECK(f.good(), "failed writing: " + path);
}

} // namespace

extern "C" {

const char* kvs_last_error(void) { return g_last_error.c_str(); }

void kvs_string_free(char* s) { std::free(s); }

kvs_status kvs_config_default(kvs_config** out) {
    if (!out) return fail(KVS_ERR_INVALID_ARGUMENT, "null out pointer");
    return guarded([&] {
        *out = new kvs_config{kvsched::sim::default_cluster_config()};
        return KVS_OK;
    });
}

kvs_status kvs_config_load(const char* path, kvs_config** out) {
    if (!path || !out) return fail(KVS_ERR_INVALID_ARGUMENT, "null argument");
    return guarded([&] {
        *out = new kvs_config{kvsched::sim::load_cluster_config(path)};
        return KVS_OK;
    });
}

kvs_status kvs_config_save(const kvs_config* cfg, const char* path) {
    if (!cfg || !path) return fail(KVS_ERR_INVALID_ARGUMENT, "null argument");
    return guarded([&] {
        kvsched::sim::save_cluster_config(cfg->cfg, path);
        return KVS_OK;
    });
}

kvs_status kvs_config_set_policy(kvs_config* cfg, const char* policy) {
    if (!cfg || !policy) return fail(KVS_ERR_INVALID_ARGUMENT, "null argument");
    return guarded([&] {
        cfg->cfg.policy = kvsched::sim::parse_policy(policy);
        return KVS_OK;
    });
}

kvs_status kvs_config_set_seed(kvs_config* cfg, uint64_t seed) {
    if (!cfg) return fail(KVS_ERR_INVALID_ARGUMENT, "null config");
    cfg->cfg.seed = seed;
    return KVS_OK;
}

void kvs_config_free(kvs_config* cfg) { delete cfg; }

kvs_status kvs_trace_generate(const char* spec_json_path, int use_seed_override,
                              uint64_t seed_override, kvs_trace** out) {
    if (!spec_json_path || !out) return fail(KVS_ERR_INVALID_ARGUMENT, "null argument");
    return guarded([&] {
        auto spec = kvsched::sim::load_trace_spec(spec_json_path);
        if (use_seed_override) spec.seed = seed_override;
        *out = new kvs_trace{kvsched::sim::generate_trace(spec)};
        return KVS_OK;
    });
}

kvs_status kvs_trace_load(const char* path, kvs_trace** out) {
    if (!path || !out) return fail(KVS_ERR_INVALID_ARGUMENT, "null argument");
    return guarded([&] {
        *out = new kvs_trace{kvsched::sim::load_trace(path)};
        return KVS_OK;
    });
}

kvs_status kvs_trace_save(const kvs_trace* trace, const char* path) {
    if (!trace || !path) return fail(KVS_ERR_INVALID_ARGUMENT, "null argument");
    return guarded([&] {
        kvsched::sim::save_trace(trace->reqs, path);
        return KVS_OK;
    });
}

void kvs_trace_free(kvs_trace* trace) { delete trace; }

kvs_status kvs_verify_attention(int trials, uint64_t seed, double tolerance,
                                char** report_out, int* pass_out) {
    if (!report_out || !pass_out) return fail(KVS_ERR_INVALID_ARGUMENT, "null out pointer");
    return guarded([&] {
        kvsched::attn::VerifyConfig vc;
        vc.trials = trials;
        vc.seed = seed;
        if (tolerance > 0.0) vc.tolerance = tolerance;
        const auto report = kvsched::attn::verify_attention_equivalence(vc);
        *report_out = dup_string(kvsched::attn::format_verify_report(report));
        if (!*report_out) return fail(KVS_ERR_INTERNAL, "out of memory");
        *pass_out = report.pass ? 1 : 0;
        return KVS_OK;
    });
}

kvs_status kvs_plan_snapshot_file(const kvs_config* cfg, const char* snapshot_json_path,
                                  char** plan_out) {
    if (!cfg || !snapshot_json_path || !plan_out)
        return fail(KVS_ERR_INVALID_ARGUMENT, "null argument");
    return guarded([&] {
        const auto snaps = kvsched::sim::load_snapshots(snapshot_json_path);
        kvsched::sched::ModelCtx mctx{cfg->cfg.shape, cfg->cfg.f, cfg->cfg.g};
        const double before = kvsched::sched::snapshot_cluster_tps(snaps, mctx);
        const auto plan = kvsched::sched::plan_round(snaps, cfg->cfg.sched, mctx);
        *plan_out = dup_string(kvsched::sim::format_round_plan(plan, before));
        if (!*plan_out) return fail(KVS_ERR_INTERNAL, "out of memory");
        return KVS_OK;
    });
}

kvs_status kvs_run_simulation(const kvs_config* cfg, const kvs_trace* trace,
                              const char* out_dir, double horizon_s, int record_steps,
                              int event_log, char** summary_out) {
    if (!cfg || !trace || !out_dir) return fail(KVS_ERR_INVALID_ARGUMENT, "null argument");
    return guarded([&] {
        namespace fs = std::filesystem;
        std::error_code ec;
        fs::create_directories(out_dir, ec);
        KVSCHED_INPUT_CHECK(!ec, "cannot create output directory: " + std::string(out_dir));
        const std::string dir = std::string(out_dir) + "/";

        kvsched::sim::RunOptions opt;
        if (horizon_s > 0.0) opt.horizon_s = horizon_s;
        opt.record_steps = record_steps != 0;
        if (event_log) opt.event_log_path = dir + "events.jsonl";

        const auto res = kvsched::sim::run_simulation(cfg->cfg, trace->reqs, opt);
        const std::string summary = kvsched::sim::format_summary(res.summary);
        write_file(dir + "summary.txt", summary);
        write_file(dir + "requests.csv", kvsched::sim::format_requests_csv(res.requests));
        write_file(dir + "tps.csv", kvsched::sim::format_tps_csv(res.tps_series));
        if (opt.record_steps)
            write_file(dir + "steps.csv", kvsched::sim::format_steps_csv(res.steps));
        if (summary_out) {
            *summary_out = dup_string(summary);
            if (!*summary_out) return fail(KVS_ERR_INTERNAL, "out of memory");
        }
        return KVS_OK;
    });
}

} // extern "C"
