#include "kvsched/trace.hpp"
#include "kvsched/common.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace kvsched::sim {

Rng::Rng(uint64_t seed) : gen_(seed) {}

uint64_t Rng::next_u64() { return gen_(); }

double Rng::uniform01() {
    // 53 random bits into [0, 1).
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) {
    KVSCHED_REQUIRE(lo <= hi, "uniform bounds inverted");
    return lo + (hi - lo) * uniform01();
}

int64_t Rng::uniform_int(int64_t lo, int64_t hi) {
    KVSCHED_REQUIRE(lo <= hi, "uniform_int bounds inverted");
    const uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
    // Rejection sampling keeps the draw unbiased.
    const uint64_t limit = UINT64_MAX - UINT64_MAX % span;
    uint64_t v;
    do {
        v = next_u64();
    } while (v >= limit);
    return lo + static_cast<int64_t>(v % span);
}

double Rng::exponential(double rate) {
    KVSCHED_REQUIRE(rate > 0.0, "exponential rate must be > 0");
    return -std::log1p(-uniform01()) / rate;
}

double Rng::normal() {
    // Box-Muller, single branch; u1 bounded away from 0.
    double u1;
    do {
        u1 = uniform01();
    } while (u1 <= 0.0);
    const double u2 = uniform01();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
}

void TraceSpec::validate() const {
    KVSCHED_INPUT_CHECK(num_requests >= 0, "trace spec: num_requests must be >= 0");
    KVSCHED_INPUT_CHECK(std::isfinite(arrival_rate) && arrival_rate > 0.0,
                        "trace spec: arrival_rate must be > 0");
    KVSCHED_INPUT_CHECK(min_tokens >= 1, "trace spec: min_tokens must be >= 1");
    KVSCHED_INPUT_CHECK(max_tokens >= min_tokens,
                        "trace spec: max_tokens must be >= min_tokens");
    KVSCHED_INPUT_CHECK(std::isfinite(target_mean) &&
                            target_mean >= static_cast<double>(min_tokens) &&
                            target_mean <= static_cast<double>(max_tokens),
                        "trace spec: target_mean must lie inside the length range");
    KVSCHED_INPUT_CHECK(std::isfinite(target_sd) && target_sd >= 0.0,
                        "trace spec: target_sd must be >= 0");
    KVSCHED_INPUT_CHECK(std::isfinite(prompt_fraction) && prompt_fraction > 0.0 &&
                            prompt_fraction <= 1.0,
                        "trace spec: prompt_fraction must be in (0, 1]");
}

namespace {

double phi(double x) { return 0.5 * std::erfc(-x * 0.70710678118654752440); }

} // namespace

ClippedMoments clipped_lognormal_moments(double mu, double sigma, double lo, double hi) {
    KVSCHED_REQUIRE(sigma > 0.0 && lo > 0.0 && hi > lo, "invalid clipped-moment arguments");
    const double la = std::log(lo), lc = std::log(hi);
    const double p_below = phi((la - mu) / sigma);
    const double p_above = 1.0 - phi((lc - mu) / sigma);
    const double e1_mid = std::exp(mu + 0.5 * sigma * sigma) *
                          (phi((lc - mu - sigma * sigma) / sigma) -
                           phi((la - mu - sigma * sigma) / sigma));
    const double e2_mid = std::exp(2.0 * mu + 2.0 * sigma * sigma) *
                          (phi((lc - mu - 2.0 * sigma * sigma) / sigma) -
                           phi((la - mu - 2.0 * sigma * sigma) / sigma));
    const double e1 = lo * p_below + e1_mid + hi * p_above;
    const double e2 = lo * lo * p_below + e2_mid + hi * hi * p_above;
    ClippedMoments m;
    m.mean = e1;
    m.sd = std::sqrt(std::max(0.0, e2 - e1 * e1));
    return m;
}

LognormalFit fit_clipped_lognormal(double mean, double sd, double lo, double hi) {
    KVSCHED_INPUT_CHECK(lo > 0.0 && hi > lo, "length range invalid for fitting");
    KVSCHED_INPUT_CHECK(mean > lo && mean < hi,
                        "target_mean infeasible: must lie strictly inside the length "
                        "range for a positive target_sd");

    // For a fixed sigma the clipped mean is strictly increasing in mu; solve
    // mu by bisection, then search sigma so the clipped SD hits the target.
    auto solve_mu = [&](double sigma) {
        double a = std::log(lo) - 50.0, b = std::log(hi) + 50.0;
        for (int i = 0; i < 200; ++i) {
            const double mid = 0.5 * (a + b);
            if (clipped_lognormal_moments(mid, sigma, lo, hi).mean < mean)
                a = mid;
            else
                b = mid;
        }
        return 0.5 * (a + b);
    };
    auto sd_at = [&](double sigma) {
        return clipped_lognormal_moments(solve_mu(sigma), sigma, lo, hi).sd;
    };

    double sig_lo = 1e-9, sig_hi = 1.0;
    while (sd_at(sig_hi) < sd && sig_hi < 64.0) sig_hi *= 2.0;
    KVSCHED_INPUT_CHECK(sd_at(sig_hi) >= sd,
                        "target_sd infeasible: exceeds what the clipped distribution "
                        "can reach over this length range");
    for (int i = 0; i < 200; ++i) {
        const double mid = 0.5 * (sig_lo + sig_hi);
        if (sd_at(mid) < sd)
            sig_lo = mid;
        else
            sig_hi = mid;
    }
    LognormalFit fit;
    fit.sigma = 0.5 * (sig_lo + sig_hi);
    fit.mu = solve_mu(fit.sigma);
    return fit;
}

std::vector<TraceRequest> generate_trace(const TraceSpec& spec) {
    spec.validate();
    Rng rng(spec.seed);
    std::vector<TraceRequest> out;
    out.reserve(spec.num_requests);
    if (spec.num_requests == 0) return out;

    const bool degenerate = spec.target_sd == 0.0 || spec.min_tokens == spec.max_tokens;
    LognormalFit fit;
    if (!degenerate)
        fit = fit_clipped_lognormal(spec.target_mean, spec.target_sd,
                                    static_cast<double>(spec.min_tokens),
                                    static_cast<double>(spec.max_tokens));

    double t = 0.0;
    for (int64_t i = 0; i < spec.num_requests; ++i) {
        t += rng.exponential(spec.arrival_rate);
        double len_d;
        if (degenerate) {
            len_d = spec.target_mean;
        } else {
            len_d = std::exp(fit.mu + fit.sigma * rng.normal());
        }
        int64_t len = static_cast<int64_t>(std::llround(len_d));
        len = std::clamp(len, spec.min_tokens, spec.max_tokens);
        int64_t prompt = static_cast<int64_t>(std::llround(spec.prompt_fraction *
                                                           static_cast<double>(len)));
        prompt = std::clamp<int64_t>(prompt, 1, len);
        TraceRequest r;
        r.req_id = i;
        r.arrival_s = t;
        r.prompt_tokens = prompt;
        r.output_tokens = len - prompt;
        out.push_back(r);
    }
    return out;
}

std::string format_trace(const std::vector<TraceRequest>& reqs) {
    std::string out = "# kvsched-trace v1\n# req_id arrival_ms prompt_tokens output_tokens\n";
    char buf[128];
    for (const auto& r : reqs) {
        std::snprintf(buf, sizeof(buf), "%lld %.3f %lld %lld\n",
                      static_cast<long long>(r.req_id), r.arrival_s * 1e3,
                      static_cast<long long>(r.prompt_tokens),
                      static_cast<long long>(r.output_tokens));
        out += buf;
    }
    return out;
}

void save_trace(const std::vector<TraceRequest>& reqs, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    KVSCHED_INPUT_CHECK(f.good(), "cannot open trace file for writing: " + path);
    f << format_trace(reqs);
    KVSCHED_INPUT_CHECK(f.good(), "failed writing trace file: " + path);
}

std::vector<TraceRequest> parse_trace(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    KVSCHED_INPUT_CHECK(std::getline(in, line) && line == "# kvsched-trace v1",
                        "trace file: missing or unsupported header");
    std::vector<TraceRequest> out;
    int lineno = 1;
    double prev_arrival = -1.0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        TraceRequest r;
        double arrival_ms = 0.0;
        long long id = 0, prompt = 0, output = 0;
        char extra;
        const int n = std::sscanf(line.c_str(), "%lld %lf %lld %lld %c",
                                  &id, &arrival_ms, &prompt, &output, &extra);
        KVSCHED_INPUT_CHECK(n == 4, "trace file line " + std::to_string(lineno) +
                                        ": expected 4 fields");
        KVSCHED_INPUT_CHECK(id >= 0, "trace file line " + std::to_string(lineno) +
                                         ": req_id must be >= 0");
        KVSCHED_INPUT_CHECK(prompt >= 1, "trace file line " + std::to_string(lineno) +
                                             ": prompt_tokens must be >= 1");
        KVSCHED_INPUT_CHECK(output >= 0, "trace file line " + std::to_string(lineno) +
                                             ": output_tokens must be >= 0");
        KVSCHED_INPUT_CHECK(std::isfinite(arrival_ms) && arrival_ms >= 0.0,
                            "trace file line " + std::to_string(lineno) +
                                ": arrival_ms must be >= 0");
        KVSCHED_INPUT_CHECK(arrival_ms * 1e-3 >= prev_arrival,
                            "trace file line " + std::to_string(lineno) +
                                ": arrivals must be nondecreasing");
        r.req_id = id;
        r.arrival_s = arrival_ms * 1e-3;
        r.prompt_tokens = prompt;
        r.output_tokens = output;
        prev_arrival = r.arrival_s;
        out.push_back(r);
    }
    return out;
}

std::vector<TraceRequest> load_trace(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    KVSCHED_INPUT_CHECK(f.good(), "cannot open trace file: " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return parse_trace(ss.str());
}

TraceSpec parse_trace_spec(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw InputError(std::string("trace spec: invalid JSON: ") + e.what());
    }
    KVSCHED_INPUT_CHECK(j.is_object(), "trace spec: top level must be an object");
    KVSCHED_INPUT_CHECK(j.contains("schema_version") && j["schema_version"].is_number_integer(),
                        "trace spec: missing integer schema_version");
    KVSCHED_INPUT_CHECK(j["schema_version"].get<int>() == 1,
                        "trace spec: unsupported schema_version");
    TraceSpec s;
    try {
        s.num_requests = j.at("num_requests").get<int64_t>();
        s.arrival_rate = j.at("arrival_rate").get<double>();
        s.min_tokens = j.at("min_tokens").get<int64_t>();
        s.max_tokens = j.at("max_tokens").get<int64_t>();
        s.target_mean = j.at("target_mean").get<double>();
        s.target_sd = j.at("target_sd").get<double>();
        if (j.contains("prompt_fraction")) s.prompt_fraction = j["prompt_fraction"].get<double>();
        if (j.contains("seed")) s.seed = j["seed"].get<uint64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw InputError(std::string("trace spec: ") + e.what());
    }
    s.validate();
    return s;
}

TraceSpec load_trace_spec(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    KVSCHED_INPUT_CHECK(f.good(), "cannot open trace spec: " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return parse_trace_spec(ss.str());
}

std::string format_trace_spec(const TraceSpec& spec) {
    nlohmann::json j;
    j["schema_version"] = 1;
    j["num_requests"] = spec.num_requests;
    j["arrival_rate"] = spec.arrival_rate;
    j["min_tokens"] = spec.min_tokens;
    j["max_tokens"] = spec.max_tokens;
    j["target_mean"] = spec.target_mean;
    j["target_sd"] = spec.target_sd;
    j["prompt_fraction"] = spec.prompt_fraction;
    j["seed"] = spec.seed;
    return j.dump(2) + "\n";
}

} // namespace kvsched::sim
