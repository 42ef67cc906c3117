#include <doctest.h>

#include "kvsched/common.hpp"
#include "kvsched/trace.hpp"

#include "oracles.hpp"

#include <cmath>
#include <set>

using namespace kvsched;
using namespace kvsched::sim;

TEST_CASE("rng streams are deterministic and respect bounds") {
    Rng a(7), b(7);
    for (int i = 0; i < 1000; ++i) CHECK(a.next_u64() == b.next_u64());

    Rng r(11);
    for (int i = 0; i < 10000; ++i) {
        const double u = r.uniform01();
        CHECK(u >= 0.0);
        CHECK(u < 1.0);
        const double v = r.uniform(2.0, 5.0);
        CHECK(v >= 2.0);
        CHECK(v < 5.0);
        CHECK(r.exponential(2.0) >= 0.0);
    }

    std::set<int64_t> seen;
    for (int i = 0; i < 1000; ++i) {
        const int64_t k = r.uniform_int(0, 3);
        CHECK(k >= 0);
        CHECK(k <= 3);
        seen.insert(k);
    }
    CHECK(seen.size() == 4); // both endpoints reachable
    for (int i = 0; i < 16; ++i) CHECK(r.uniform_int(5, 5) == 5);

    double sum = 0.0, sq = 0.0;
    const int n = 100000;
    for (int i = 0; i < n; ++i) {
        const double z = r.normal();
        sum += z;
        sq += z * z;
    }
    const double mean = sum / n;
    const double sd = std::sqrt(sq / n - mean * mean);
    CHECK(std::abs(mean) < 0.02);
    CHECK(sd == doctest::Approx(1.0).epsilon(0.02));

    double esum = 0.0;
    for (int i = 0; i < n; ++i) esum += r.exponential(2.0);
    CHECK(esum / n == doctest::Approx(0.5).epsilon(0.03));
}

TEST_CASE("clipped lognormal moments match a monte carlo estimate") {
    struct Case {
        double mu, sigma, lo, hi;
    };
    const Case cases[] = {
        {std::log(200.0), 1.2, 1.0, 2000.0},
        {std::log(50.0), 2.5, 1.0, 4096.0}, // heavy clip on both sides
        {std::log(900.0), 0.4, 1.0, 1200.0},
    };
    Rng rng(1234);
    for (const auto& c : cases) {
        const auto m = clipped_lognormal_moments(c.mu, c.sigma, c.lo, c.hi);
        const int n = 400000;
        double sum = 0.0, sq = 0.0;
        for (int i = 0; i < n; ++i) {
            double x = std::exp(c.mu + c.sigma * rng.normal());
            x = std::min(std::max(x, c.lo), c.hi);
            sum += x;
            sq += x * x;
        }
        const double mc_mean = sum / n;
        const double mc_sd = std::sqrt(sq / n - mc_mean * mc_mean);
        CHECK(m.mean == doctest::Approx(mc_mean).epsilon(0.02));
        CHECK(m.sd == doctest::Approx(mc_sd).epsilon(0.04));
    }

    // A near-zero sigma collapses to a point mass at exp(mu).
    const auto tight = clipped_lognormal_moments(5.0, 1e-8, 1.0, 1e6);
    CHECK(tight.mean == doctest::Approx(std::exp(5.0)).epsilon(1e-9));
    CHECK(tight.sd < 1e-2);
}

TEST_CASE("moment fit reproduces the target moments under clipping") {
    struct Target {
        double mean, sd, lo, hi;
    };
    const Target targets[] = {
        {1233.0, 7785.68, 1.0, 60000.0},
        {469.0, 3506.36, 1.0, 60000.0},
        {56362.0, 28787.78, 1.0, 200000.0},
        {498609.0, 261817.24, 1.0, 2000000.0},
        {800.0, 300.0, 1.0, 4096.0},
    };
    for (const auto& t : targets) {
        const auto fit = fit_clipped_lognormal(t.mean, t.sd, t.lo, t.hi);
        const auto m = clipped_lognormal_moments(fit.mu, fit.sigma, t.lo, t.hi);
        CHECK(m.mean == doctest::Approx(t.mean).epsilon(1e-6));
        CHECK(m.sd == doctest::Approx(t.sd).epsilon(1e-6));
    }
}

TEST_CASE("infeasible targets are rejected with the offending field named") {
    CHECK_THROWS_WITH_AS(fit_clipped_lognormal(0.5, 10.0, 1.0, 100.0),
                         doctest::Contains("target_mean"), InputError);
    CHECK_THROWS_WITH_AS(fit_clipped_lognormal(100.0, 10.0, 1.0, 100.0),
                         doctest::Contains("target_mean"), InputError);
    // Max reachable SD for mean 1233 over [1, 60000] is near
    // sqrt(1233 * 58767) ~ 8512; 30000 is far past it.
    CHECK_THROWS_WITH_AS(fit_clipped_lognormal(1233.0, 30000.0, 1.0, 60000.0),
                         doctest::Contains("target_sd"), InputError);
    CHECK_THROWS_WITH_AS(fit_clipped_lognormal(50.0, 1e6, 1.0, 100.0),
                         doctest::Contains("target_sd"), InputError);
}

TEST_CASE("generated traces satisfy the spec contract") {
    TraceSpec spec;
    spec.num_requests = 4000;
    spec.arrival_rate = 25.0;
    spec.min_tokens = 1;
    spec.max_tokens = 4096;
    spec.target_mean = 700.0;
    spec.target_sd = 900.0;
    spec.prompt_fraction = 0.3;
    spec.seed = 99;

    const auto trace = generate_trace(spec);
    REQUIRE(trace.size() == 4000);
    double prev = 0.0;
    double sum = 0.0, sq = 0.0;
    for (size_t i = 0; i < trace.size(); ++i) {
        const auto& r = trace[i];
        CHECK(r.req_id == static_cast<int64_t>(i));
        CHECK(r.arrival_s >= prev);
        prev = r.arrival_s;
        const int64_t len = r.total_tokens();
        CHECK(len >= spec.min_tokens);
        CHECK(len <= spec.max_tokens);
        CHECK(r.prompt_tokens >= 1);
        CHECK(r.output_tokens >= 0);
        int64_t want_prompt = std::llround(spec.prompt_fraction * static_cast<double>(len));
        want_prompt = std::max<int64_t>(1, std::min(want_prompt, len));
        CHECK(r.prompt_tokens == want_prompt);
        sum += static_cast<double>(len);
        sq += static_cast<double>(len) * static_cast<double>(len);
    }
    const double mean = sum / static_cast<double>(trace.size());
    const double sd = std::sqrt(sq / static_cast<double>(trace.size()) - mean * mean);
    CHECK(mean == doctest::Approx(700.0).epsilon(0.10));
    CHECK(sd == doctest::Approx(900.0).epsilon(0.25));

    const auto again = generate_trace(spec);
    REQUIRE(again.size() == trace.size());
    for (size_t i = 0; i < trace.size(); ++i) {
        CHECK(again[i].arrival_s == trace[i].arrival_s);
        CHECK(again[i].prompt_tokens == trace[i].prompt_tokens);
        CHECK(again[i].output_tokens == trace[i].output_tokens);
    }

    TraceSpec other = spec;
    other.seed = 100;
    const auto shifted = generate_trace(other);
    bool differs = false;
    for (size_t i = 0; i < trace.size() && !differs; ++i)
        differs = shifted[i].arrival_s != trace[i].arrival_s ||
                  shifted[i].total_tokens() != trace[i].total_tokens();
    CHECK(differs);

    TraceSpec flat = spec;
    flat.target_sd = 0.0;
    for (const auto& r : generate_trace(flat)) CHECK(r.total_tokens() == 700);

    TraceSpec fixed = spec;
    fixed.min_tokens = fixed.max_tokens = 64;
    fixed.target_mean = 64.0;
    for (const auto& r : generate_trace(fixed)) CHECK(r.total_tokens() == 64);

    TraceSpec empty = spec;
    empty.num_requests = 0;
    CHECK(generate_trace(empty).empty());
}

TEST_CASE("trace text round-trips through format and parse") {
    TraceSpec spec;
    spec.num_requests = 200;
    spec.arrival_rate = 10.0;
    spec.min_tokens = 1;
    spec.max_tokens = 2048;
    spec.target_mean = 400.0;
    spec.target_sd = 350.0;
    spec.prompt_fraction = 0.5;
    spec.seed = 7;
    const auto trace = generate_trace(spec);

    const std::string text = format_trace(trace);
    CHECK(text.rfind("# kvsched-trace v1\n", 0) == 0);

    const auto parsed = parse_trace(text);
    REQUIRE(parsed.size() == trace.size());
    for (size_t i = 0; i < trace.size(); ++i) {
        CHECK(parsed[i].req_id == trace[i].req_id);
        CHECK(parsed[i].prompt_tokens == trace[i].prompt_tokens);
        CHECK(parsed[i].output_tokens == trace[i].output_tokens);
        // Arrivals are serialized at millisecond precision.
        CHECK(std::abs(parsed[i].arrival_s - trace[i].arrival_s) < 5.1e-4);
    }
    CHECK(format_trace(parsed) == format_trace(parse_trace(format_trace(parsed))));

    const std::string dir = oracle::fresh_dir("trace_io");
    const std::string path = dir + "/t.trace";
    save_trace(trace, path);
    const auto loaded = load_trace(path);
    CHECK(format_trace(loaded) == format_trace(parsed));

    // Comments and blank lines are tolerated after the header.
    const auto sparse = parse_trace("# kvsched-trace v1\n# note\n\n0 10.000 4 2\n");
    REQUIRE(sparse.size() == 1);
    CHECK(sparse[0].arrival_s == doctest::Approx(0.010));

    CHECK_THROWS_AS(parse_trace("0 10.000 4 2\n"), InputError);
    CHECK_THROWS_AS(parse_trace("# kvsched-trace v2\n"), InputError);
    CHECK_THROWS_AS(parse_trace("# kvsched-trace v1\n0 10.000 4\n"), InputError);
    CHECK_THROWS_AS(parse_trace("# kvsched-trace v1\n0 10.000 4 2 9\n"), InputError);
    CHECK_THROWS_AS(parse_trace("# kvsched-trace v1\n0 10.000 0 2\n"), InputError);
    CHECK_THROWS_AS(parse_trace("# kvsched-trace v1\n0 -1.000 4 2\n"), InputError);
    CHECK_THROWS_AS(parse_trace("# kvsched-trace v1\n0 10.000 4 2\n1 9.000 4 2\n"),
                    InputError);
}

TEST_CASE("trace spec json round-trips and rejects malformed input") {
    TraceSpec spec;
    spec.num_requests = 123;
    spec.arrival_rate = 3.25;
    spec.min_tokens = 2;
    spec.max_tokens = 9001;
    spec.target_mean = 456.75;
    spec.target_sd = 321.5;
    spec.prompt_fraction = 0.4;
    spec.seed = 777;

    const auto back = parse_trace_spec(format_trace_spec(spec));
    CHECK(back.num_requests == spec.num_requests);
    CHECK(back.arrival_rate == spec.arrival_rate);
    CHECK(back.min_tokens == spec.min_tokens);
    CHECK(back.max_tokens == spec.max_tokens);
    CHECK(back.target_mean == spec.target_mean);
    CHECK(back.target_sd == spec.target_sd);
    CHECK(back.prompt_fraction == spec.prompt_fraction);
    CHECK(back.seed == spec.seed);

    const std::string dir = oracle::fresh_dir("trace_spec_io");
    const std::string path = dir + "/spec.json";
    oracle::spit(path, format_trace_spec(spec));
    CHECK(load_trace_spec(path).target_mean == spec.target_mean);

    CHECK_THROWS_AS(parse_trace_spec("{"), InputError);
    CHECK_THROWS_AS(parse_trace_spec("[]"), InputError);
    CHECK_THROWS_AS(parse_trace_spec("{\"num_requests\": 5}"), InputError);
    CHECK_THROWS_AS(parse_trace_spec("{\"schema_version\": 2}"), InputError);
    CHECK_THROWS_AS(
        parse_trace_spec("{\"schema_version\": 1, \"arrival_rate\": 1.0}"),
        InputError);

    TraceSpec bad = spec;
    bad.prompt_fraction = 0.0;
    CHECK_THROWS_AS(bad.validate(), InputError);
    bad = spec;
    bad.max_tokens = 1;
    CHECK_THROWS_AS(bad.validate(), InputError);
    bad = spec;
    bad.target_mean = 1e9;
    CHECK_THROWS_AS(bad.validate(), InputError);
    bad = spec;
    bad.arrival_rate = 0.0;
    CHECK_THROWS_AS(bad.validate(), InputError);
    bad = spec;
    bad.target_sd = -1.0;
    CHECK_THROWS_AS(bad.validate(), InputError);
}
