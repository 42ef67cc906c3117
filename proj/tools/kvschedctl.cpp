// Command-line front end over the kvsched C API.
//
// Exit codes: 0 success, 1 runtime or verification failure, 2 bad usage or
// rejected input.

#include "kvsched.h"

#include <CLI11.hpp>

#include <cstdint>
#include <cstdio>
#include <string>

namespace {

int map_status(kvs_status st) {
    switch (st) {
    case KVS_OK: return 0;
    case KVS_ERR_INVALID_ARGUMENT:
    case KVS_ERR_INPUT: return 2;
    default: return 1;
    }
}

int report_failure(kvs_status st) {
    std::fprintf(stderr, "error: %s\n", kvs_last_error());
    return map_status(st);
}

struct ConfigHandle {
    kvs_config* ptr = nullptr;
    ~ConfigHandle() { kvs_config_free(ptr); }
};

struct TraceHandle {
    kvs_trace* ptr = nullptr;
    ~TraceHandle() { kvs_trace_free(ptr); }
};

int load_config(const std::string& path, ConfigHandle& cfg) {
    const kvs_status st = path.empty() ? kvs_config_default(&cfg.ptr)
                                       : kvs_config_load(path.c_str(), &cfg.ptr);
    return st == KVS_OK ? 0 : report_failure(st);
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"KV block scheduling toolkit"};
    app.require_subcommand(1);

    // verify-attention
    auto* verify = app.add_subcommand(
        "verify-attention", "Check blockwise attention against a high-precision reference");
    int trials = 10000;
    uint64_t verify_seed = 1;
    double tolerance = 1e-6;
    verify->add_option("--trials", trials, "Random trials to run");
    verify->add_option("--seed", verify_seed, "RNG seed");
    verify->add_option("--tolerance", tolerance, "Max allowed normalized error");

    // gen-trace
    auto* gen = app.add_subcommand("gen-trace", "Generate a request trace from a spec");
    std::string gen_spec, gen_out;
    uint64_t gen_seed = 0;
    bool gen_has_seed = false;
    gen->add_option("--spec", gen_spec, "Trace spec JSON file")->required();
    gen->add_option("--out", gen_out, "Output trace file")->required();
    gen->add_option("--seed", gen_seed, "Override the spec's seed")
        ->each([&](const std::string&) { gen_has_seed = true; });

    // init-config
    auto* init = app.add_subcommand("init-config", "Write the default cluster config");
    std::string init_out;
    init->add_option("--out", init_out, "Output config JSON file")->required();

    // plan
    auto* plan = app.add_subcommand("plan", "Run one planning round over a snapshot file");
    std::string plan_cfg, plan_snap;
    plan->add_option("--config", plan_cfg, "Cluster config JSON (default config if omitted)");
    plan->add_option("--snapshot", plan_snap, "Cluster snapshot JSON file")->required();

    // run
    auto* run = app.add_subcommand("run", "Simulate a cluster over a trace");
    std::string run_cfg, run_trace, run_out, run_policy;
    double horizon = 0.0;
    uint64_t run_seed = 0;
    bool run_has_seed = false, run_steps = false, run_events = false;
    run->add_option("--config", run_cfg, "Cluster config JSON (default config if omitted)");
    run->add_option("--trace", run_trace, "Trace file")->required();
    run->add_option("--out", run_out, "Output directory")->required();
    run->add_option("--policy", run_policy, "Override policy: infinite|strawman|static");
    run->add_option("--horizon", horizon, "Simulation horizon in seconds");
    run->add_option("--seed", run_seed, "Override the config's seed")
        ->each([&](const std::string&) { run_has_seed = true; });
    run->add_flag("--steps", run_steps, "Also write per-step records (steps.csv)");
    run->add_flag("--event-log", run_events, "Also write events.jsonl");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return e.get_exit_code() == 0 ? 0 : 2;
    }

    if (verify->parsed()) {
        char* report = nullptr;
        int pass = 0;
        const kvs_status st =
            kvs_verify_attention(trials, verify_seed, tolerance, &report, &pass);
        if (st != KVS_OK) return report_failure(st);
        std::fputs(report, stdout);
        kvs_string_free(report);
        return pass ? 0 : 1;
    }

    if (gen->parsed()) {
        TraceHandle trace;
        kvs_status st = kvs_trace_generate(gen_spec.c_str(), gen_has_seed ? 1 : 0,
                                           gen_seed, &trace.ptr);
        if (st != KVS_OK) return report_failure(st);
        st = kvs_trace_save(trace.ptr, gen_out.c_str());
        if (st != KVS_OK) return report_failure(st);
        std::printf("wrote %s\n", gen_out.c_str());
        return 0;
    }

    if (init->parsed()) {
        ConfigHandle cfg;
        if (int rc = load_config("", cfg)) return rc;
        const kvs_status st = kvs_config_save(cfg.ptr, init_out.c_str());
        if (st != KVS_OK) return report_failure(st);
        std::printf("wrote %s\n", init_out.c_str());
        return 0;
    }

    if (plan->parsed()) {
        ConfigHandle cfg;
        if (int rc = load_config(plan_cfg, cfg)) return rc;
        char* text = nullptr;
        const kvs_status st = kvs_plan_snapshot_file(cfg.ptr, plan_snap.c_str(), &text);
        if (st != KVS_OK) return report_failure(st);
        std::fputs(text, stdout);
        kvs_string_free(text);
        return 0;
    }

    if (run->parsed()) {
        ConfigHandle cfg;
        if (int rc = load_config(run_cfg, cfg)) return rc;
        if (!run_policy.empty()) {
            const kvs_status st = kvs_config_set_policy(cfg.ptr, run_policy.c_str());
            if (st != KVS_OK) return report_failure(st);
        }
        if (run_has_seed) kvs_config_set_seed(cfg.ptr, run_seed);
        TraceHandle trace;
        kvs_status st = kvs_trace_load(run_trace.c_str(), &trace.ptr);
        if (st != KVS_OK) return report_failure(st);
        char* summary = nullptr;
        st = kvs_run_simulation(cfg.ptr, trace.ptr, run_out.c_str(), horizon,
                                run_steps ? 1 : 0, run_events ? 1 : 0, &summary);
        if (st != KVS_OK) return report_failure(st);
        std::fputs(summary, stdout);
        kvs_string_free(summary);
        return 0;
    }

    return 2;
}
