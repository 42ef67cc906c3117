#include <doctest.h>

#include "kvsched/perfmodel.hpp"
#include "kvsched/simengine.hpp"

#include "oracles.hpp"

#include <cmath>

using namespace kvsched;
using namespace kvsched::sim;

namespace {

TraceRequest make_req(int64_t id, double arrival, int64_t prompt, int64_t output) {
    TraceRequest r;
    r.req_id = id;
    r.arrival_s = arrival;
    r.prompt_tokens = prompt;
    r.output_tokens = output;
    return r;
}

int64_t series_tokens(const SimResult& res) {
    int64_t total = 0;
    for (const auto& b : res.tps_series) total += b.tokens;
    return total;
}

} // namespace

TEST_CASE("single request completion matches the closed-form step schedule") {
    ClusterConfig cfg = default_cluster_config(1, 256);
    cfg.policy = Policy::static_alloc;
    const auto trace = std::vector<TraceRequest>{make_req(0, 0.0, 64, 10)};

    RunOptions opt;
    opt.record_steps = true;
    const SimResult res = run_simulation(cfg, trace, opt);

    REQUIRE(res.requests.size() == 1);
    const auto& r = res.requests[0];
    CHECK(r.admitted_s == 0.0);
    const double prefill_end = 64.0 * cfg.prefill_cost_per_token_s;
    CHECK(r.prefill_end_s == doctest::Approx(prefill_end).epsilon(1e-12));

    // Step i decodes over the 64 prompt tokens plus i generated so far.
    double expected = prefill_end;
    REQUIRE(res.steps.size() == 10);
    for (int i = 0; i < 10; ++i) {
        perf::InstanceLoad load;
        load.batch = 1;
        load.ctx_lengths = {64 + i};
        const double dur =
            cfg.shape.n_layers * perf::creditor_layer_time(load, cfg.shape, cfg.f, cfg.g);
        const auto& st = res.steps[static_cast<size_t>(i)];
        CHECK(st.start_s == doctest::Approx(expected).epsilon(1e-12));
        CHECK(st.duration_s == doctest::Approx(dur).epsilon(1e-12));
        CHECK(st.base_duration_s == st.duration_s);
        CHECK(st.penalty_factor == 1.0);
        CHECK(st.batch == 1);
        CHECK(st.local_ctx_tokens == 64 + i);
        CHECK(st.hosted_ctx_tokens == 0);
        CHECK(st.remote_ctx_tokens == 0);
        CHECK(st.shipped_tokens == 0);
        CHECK(st.stalled == 0);
        expected += dur;
    }
    CHECK(r.completed_s == doctest::Approx(expected).epsilon(1e-12));
    CHECK(r.generated_tokens == 10);

    CHECK(res.summary.arrivals == 1);
    CHECK(res.summary.completed == 1);
    CHECK(res.summary.rejected == 0);
    CHECK(res.summary.decode_steps == 10);
    CHECK(res.summary.generated_tokens == 10);
    CHECK(res.summary.overflow_borrows == 0);
    CHECK(res.summary.mean_latency_s ==
          doctest::Approx(r.completed_s - r.arrival_s).epsilon(1e-12));
    CHECK(series_tokens(res) == 10);
}

TEST_CASE("identical config and trace produce byte-identical outputs") {
    ClusterConfig cfg = default_cluster_config(3, 64);
    cfg.policy = Policy::infinite;
    cfg.spot_check_every_steps = 25;

    TraceSpec spec;
    spec.num_requests = 120;
    spec.arrival_rate = 40.0;
    spec.min_tokens = 1;
    spec.max_tokens = 2048;
    spec.target_mean = 600.0;
    spec.target_sd = 500.0;
    spec.prompt_fraction = 0.5;
    spec.seed = 5;
    const auto trace = generate_trace(spec);

    const std::string dir = oracle::fresh_dir("sim_determinism");
    RunOptions a;
    a.horizon_s = 40.0;
    a.record_steps = true;
    a.event_log_path = dir + "/a.jsonl";
    RunOptions b = a;
    b.event_log_path = dir + "/b.jsonl";

    const SimResult ra = run_simulation(cfg, trace, a);
    const SimResult rb = run_simulation(cfg, trace, b);

    CHECK(format_summary(ra.summary) == format_summary(rb.summary));
    CHECK(format_requests_csv(ra.requests) == format_requests_csv(rb.requests));
    CHECK(format_tps_csv(ra.tps_series) == format_tps_csv(rb.tps_series));
    CHECK(format_steps_csv(ra.steps) == format_steps_csv(rb.steps));
    CHECK(oracle::slurp(a.event_log_path) == oracle::slurp(b.event_log_path));
    CHECK(!oracle::slurp(a.event_log_path).empty());

    CHECK(ra.summary.generated_tokens > 0);
    CHECK(series_tokens(ra) == ra.summary.generated_tokens);
    // Spot checks ride the global step counter.
    CHECK(ra.summary.spot_checks == ra.summary.decode_steps / 25);
    CHECK(ra.summary.spot_check_max_rel_err < 1e-8);
}

TEST_CASE("static allocation rejects what can never fit and never borrows") {
    // 16 blocks of 16 tokens: 256 tokens per instance.
    ClusterConfig cfg = default_cluster_config(2, 16);
    cfg.policy = Policy::static_alloc;
    const std::vector<TraceRequest> trace = {
        make_req(0, 0.0, 100, 200), // 300 tokens: can never fit statically
        make_req(1, 0.0, 100, 50),  // 150 tokens: fits
    };
    const SimResult res = run_simulation(cfg, trace);
    CHECK(res.summary.rejected == 1);
    CHECK(res.summary.completed == 1);
    CHECK(res.summary.overflow_borrows == 0);
    REQUIRE(res.requests.size() == 2);
    CHECK(res.requests[0].rejected);
    CHECK(res.requests[0].generated_tokens == 0);
    CHECK_FALSE(res.requests[1].rejected);
    CHECK(res.requests[1].generated_tokens == 50);
    CHECK(res.requests[1].remote_peak_blocks == 0);
}

TEST_CASE("borrowing policies spill overflow to a peer and still finish") {
    ClusterConfig cfg = default_cluster_config(2, 16);
    cfg.policy = Policy::strawman;
    const std::vector<TraceRequest> trace = {
        make_req(0, 0.0, 100, 200),
        make_req(1, 0.0, 100, 50),
    };
    const SimResult res = run_simulation(cfg, trace);
    CHECK(res.summary.rejected == 0);
    CHECK(res.summary.completed == 2);
    CHECK(res.summary.overflow_borrows > 0);
    REQUIRE(res.requests.size() == 2);
    CHECK(res.requests[0].generated_tokens == 200);
    CHECK(res.requests[0].remote_peak_blocks > 0);
    CHECK(series_tokens(res) == 250);
}

TEST_CASE("adaptive policy runs planning rounds") {
    ClusterConfig cfg = default_cluster_config(2, 32);
    cfg.policy = Policy::infinite;
    std::vector<TraceRequest> trace;
    double t = 0.0;
    // Sized so two requests fill an instance exactly at completion; the
    // queue drains without ever deadlocking on blocks.
    for (int i = 0; i < 12; ++i) {
        trace.push_back(make_req(i, t, 240, 16));
        t += 0.01;
    }
    const SimResult res = run_simulation(cfg, trace);
    CHECK(res.summary.planner_rounds > 0);
    CHECK(res.summary.generated_tokens == 12 * 16);
    CHECK(res.summary.rejected == 0);
    CHECK(res.summary.completed == 12);
}

TEST_CASE("injected moves ship blocks as paced transfers") {
    ClusterConfig cfg = default_cluster_config(2, 256);
    cfg.policy = Policy::strawman; // no planner interference
    const std::vector<TraceRequest> trace = {
        make_req(0, 0.0, 512, 40),
        make_req(1, 0.0001, 512, 40),
    };

    InjectedMove mv;
    mv.at_s = 0.05;
    mv.req_id = 0;
    mv.src = 0;
    mv.dst = 1;
    mv.num_blocks = 8;

    ClusterConfig moved = cfg;
    moved.injected_moves.push_back(mv);
    RunOptions opt;
    opt.record_steps = true;
    const SimResult res = run_simulation(moved, trace, opt);

    CHECK(res.summary.moves_completed == 1);
    CHECK(res.summary.blocks_moved == 8);
    CHECK(res.requests[0].remote_peak_blocks >= 8);
    int64_t shipped = 0;
    for (const auto& st : res.steps) {
        shipped += st.shipped_tokens;
        // At or under the overlap cap shipping is free.
        CHECK(st.penalty_factor == 1.0);
        CHECK(st.duration_s == st.base_duration_s);
    }
    CHECK(shipped >= 8 * 16);
    CHECK(res.summary.completed == 2);

    // A move for a request the source does not hold is deferred, not fatal.
    ClusterConfig ghost = cfg;
    InjectedMove bad = mv;
    bad.req_id = 99;
    ghost.instances.push_back({2, 256}); // keep ids valid
    bad.dst = 2;
    ghost.injected_moves.push_back(bad);
    const SimResult res2 = run_simulation(ghost, trace);
    CHECK(res2.summary.moves_completed == 0);
    CHECK(res2.summary.blocks_moved == 0);
    CHECK(res2.summary.completed == 2);
}

TEST_CASE("transfers past the overlap cap stretch the paced steps") {
    ClusterConfig cfg = default_cluster_config(2, 256);
    cfg.policy = Policy::strawman;
    cfg.migration.step_tokens = 32; // ship at twice the free-overlap cap
    InjectedMove mv;
    mv.at_s = 0.05;
    mv.req_id = 0;
    mv.src = 0;
    mv.dst = 1;
    mv.num_blocks = 8;
    cfg.injected_moves.push_back(mv);

    const std::vector<TraceRequest> trace = {
        make_req(0, 0.0, 512, 40),
        make_req(1, 0.0001, 512, 40),
    };
    RunOptions opt;
    opt.record_steps = true;
    const SimResult res = run_simulation(cfg, trace, opt);

    const double want = 1.0 + 16.0 * cfg.migration.over_cap_penalty_per_token;
    bool saw_penalty = false;
    for (const auto& st : res.steps) {
        if (st.shipped_tokens == 32) {
            saw_penalty = true;
            CHECK(st.penalty_factor == doctest::Approx(want).epsilon(1e-12));
            CHECK(st.duration_s ==
                  doctest::Approx(st.base_duration_s * want).epsilon(1e-12));
        } else if (st.shipped_tokens <= 16) {
            CHECK(st.penalty_factor == 1.0);
        }
    }
    CHECK(saw_penalty);
    CHECK(res.summary.blocks_moved == 8);
}

TEST_CASE("the horizon cuts a run short") {
    ClusterConfig cfg = default_cluster_config(1, 64);
    cfg.policy = Policy::strawman;
    const std::vector<TraceRequest> trace = {make_req(0, 0.0, 256, 100000)};
    RunOptions opt;
    opt.horizon_s = 0.5;
    const SimResult res = run_simulation(cfg, trace, opt);
    CHECK(res.summary.end_s <= 0.5);
    CHECK(res.summary.horizon_s == 0.5);
    CHECK(res.summary.completed == 0);
    CHECK(res.requests[0].generated_tokens > 0);
    CHECK(res.requests[0].generated_tokens < 100000);
    CHECK_FALSE(res.requests[0].completed());
}
