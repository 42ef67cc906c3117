#pragma once

// Synthetic request traces: Poisson arrivals, request lengths drawn from a
// lognormal moment-matched to a target mean and standard deviation under
// clipping to the spec's length range. Matching the clipped distribution
// matters: for heavy-tailed targets most of the second moment can sit beyond
// the range cap, and fitting the unclipped distribution would miss the target
// SD by a wide margin.

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace kvsched::sim {

// Deterministic random source. The mt19937_64 engine is fully specified by
// the standard; the transforms are hand-rolled because std::*_distribution
// streams vary across standard library implementations and the simulator
// promises byte-stable outputs.
class Rng {
public:
    explicit Rng(uint64_t seed);

    uint64_t next_u64();
    double uniform01(); // [0, 1)
    double uniform(double lo, double hi);
    int64_t uniform_int(int64_t lo, int64_t hi); // inclusive
    double exponential(double rate);
    double normal(); // standard normal, Box-Muller

private:
    std::mt19937_64 gen_;
};

struct TraceSpec {
    int64_t num_requests = 0;
    double arrival_rate = 1.0; // requests per second
    int64_t min_tokens = 1;
    int64_t max_tokens = 1;
    double target_mean = 1.0;
    double target_sd = 0.0;
    double prompt_fraction = 0.5; // share of a request's tokens in the prompt
    uint64_t seed = 1;

    // Throws InputError naming the violated field.
    void validate() const;
};

struct TraceRequest {
    int64_t req_id = 0;
    double arrival_s = 0.0;
    int64_t prompt_tokens = 0;
    int64_t output_tokens = 0;

    int64_t total_tokens() const { return prompt_tokens + output_tokens; }
};

// Closed-form mean and SD of a lognormal(mu, sigma) clipped to [lo, hi].
struct ClippedMoments {
    double mean = 0.0;
    double sd = 0.0;
};
ClippedMoments clipped_lognormal_moments(double mu, double sigma, double lo, double hi);

// Solve (mu, sigma) so the clipped distribution hits the target moments.
// Throws InputError naming target_mean or target_sd when infeasible.
struct LognormalFit {
    double mu = 0.0;
    double sigma = 0.0;
};
LognormalFit fit_clipped_lognormal(double mean, double sd, double lo, double hi);

// Deterministic in the spec (including its seed).
std::vector<TraceRequest> generate_trace(const TraceSpec& spec);

// Text table, one request per line. Round-trips exactly.
std::string format_trace(const std::vector<TraceRequest>& reqs);
void save_trace(const std::vector<TraceRequest>& reqs, const std::string& path);
std::vector<TraceRequest> parse_trace(const std::string& text);
std::vector<TraceRequest> load_trace(const std::string& path);

// TraceSpec file I/O (JSON with a schema_version field).
TraceSpec parse_trace_spec(const std::string& text);
TraceSpec load_trace_spec(const std::string& path);
std::string format_trace_spec(const TraceSpec& spec);

} // namespace kvsched::sim
