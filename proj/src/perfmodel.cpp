#include "kvsched/perfmodel.hpp"
#include "kvsched/common.hpp"

#include <algorithm>
#include <cmath>

namespace kvsched::perf {

PerfCurve::PerfCurve(std::vector<std::pair<double, double>> samples)
    : samples_(std::move(samples)) {
    KVSCHED_REQUIRE(samples_.size() >= 2, "curve needs at least two samples");
    for (size_t i = 0; i < samples_.size(); ++i) {
        KVSCHED_REQUIRE(std::isfinite(samples_[i].first) && std::isfinite(samples_[i].second),
                        "curve samples must be finite");
        KVSCHED_REQUIRE(samples_[i].second > 0.0, "curve rates must be positive");
        if (i > 0)
            KVSCHED_REQUIRE(samples_[i].first > samples_[i - 1].first,
                            "curve x values must be strictly increasing");
    }
}

double PerfCurve::eval(double x) const {
    KVSCHED_REQUIRE(!samples_.empty(), "curve is empty");
    KVSCHED_REQUIRE(std::isfinite(x), "curve argument must be finite");
    if (x <= samples_.front().first) return samples_.front().second;
    if (x >= samples_.back().first) return samples_.back().second;
    // Invariant: samples_[lo].first < x < samples_[hi].first after search.
    auto hi = std::upper_bound(samples_.begin(), samples_.end(), x,
                               [](double v, const auto& s) { return v < s.first; });
    auto lo = hi - 1;
    const double t = (x - lo->first) / (hi->first - lo->first);
    return lo->second + t * (hi->second - lo->second);
}

bool PerfCurve::nondecreasing() const {
    for (size_t i = 1; i < samples_.size(); ++i)
        if (samples_[i].second < samples_[i - 1].second) return false;
    return true;
}

double PerfCurve::saturation_point(double fraction) const {
    KVSCHED_REQUIRE(!samples_.empty(), "curve is empty");
    double peak = 0.0;
    for (const auto& s : samples_) peak = std::max(peak, s.second);
    for (const auto& s : samples_)
        if (s.second >= fraction * peak) return s.first;
    return samples_.back().first;
}

PerfCurve default_batch_curve(double r_max, double beta_half, double max_batch) {
    std::vector<std::pair<double, double>> s;
    for (double b = 1.0; b < max_batch; b *= 2.0)
        s.emplace_back(b, r_max * b / (b + beta_half));
    s.emplace_back(max_batch, r_max * max_batch / (max_batch + beta_half));
    return PerfCurve(std::move(s));
}

PerfCurve default_ctx_curve(double rate, double max_ctx) {
    return PerfCurve({{1.0, rate}, {max_ctx, rate}});
}

void ModelShape::validate() const {
    KVSCHED_REQUIRE(n_layers >= 1, "n_layers must be >= 1");
    KVSCHED_REQUIRE(std::isfinite(workload_per_token) && workload_per_token > 0.0,
                    "workload_per_token must be positive and finite");
    KVSCHED_REQUIRE(std::isfinite(attn_work_per_ctx_token) && attn_work_per_ctx_token > 0.0,
                    "attn_work_per_ctx_token must be positive and finite");
    KVSCHED_REQUIRE(std::isfinite(kv_bytes_per_token) && kv_bytes_per_token > 0.0,
                    "kv_bytes_per_token must be positive and finite");
    KVSCHED_REQUIRE(block_size_tokens >= 1, "block_size_tokens must be >= 1");
}

int64_t InstanceLoad::total_ctx() const {
    int64_t total = 0;
    for (int64_t s : ctx_lengths) total += s;
    return total;
}

void InstanceLoad::validate() const {
    KVSCHED_REQUIRE(batch >= 1, "layer time is undefined for an empty batch");
    KVSCHED_REQUIRE(static_cast<int64_t>(ctx_lengths.size()) == batch,
                    "ctx_lengths must have one entry per running request");
    for (int64_t s : ctx_lengths)
        KVSCHED_REQUIRE(s >= 1, "context lengths must be >= 1");
    KVSCHED_REQUIRE(offloaded_tokens >= 0, "offloaded_tokens must be >= 0");
}

double layer_time(const InstanceLoad& load, const ModelShape& shape,
                  const PerfCurve& f, const PerfCurve& g) {
    load.validate();
    shape.validate();
    const double beta = static_cast<double>(load.batch);
    const double w = shape.workload_per_token * beta;
    const double attn_work = static_cast<double>(load.total_ctx()) * shape.attn_work_per_ctx_token;
    return w / f.eval(beta) + attn_work / g.eval(static_cast<double>(load.total_ctx()));
}

double debtor_layer_time(const InstanceLoad& load, const ModelShape& shape,
                         const PerfCurve& f, const PerfCurve& g) {
    load.validate();
    KVSCHED_REQUIRE(load.offloaded_tokens <= load.total_ctx(),
                    "debtor cannot offload more context than it has");
    const double base = layer_time(load, shape, f, g);
    const double lent = static_cast<double>(load.offloaded_tokens) *
                        shape.attn_work_per_ctx_token /
                        g.eval(static_cast<double>(load.total_ctx()));
    return base - lent;
}

double creditor_layer_time(const InstanceLoad& load, const ModelShape& shape,
                           const PerfCurve& f, const PerfCurve& g) {
    load.validate();
    const double base = layer_time(load, shape, f, g);
    const double hosted = static_cast<double>(load.offloaded_tokens) *
                          shape.attn_work_per_ctx_token /
                          g.eval(static_cast<double>(load.total_ctx()));
    return base + hosted;
}

double instance_tps(const InstanceLoad& load, Role role, const ModelShape& shape,
                    const PerfCurve& f, const PerfCurve& g) {
    if (load.batch == 0) return 0.0;
    double lt = 0.0;
    switch (role) {
    case Role::neutral: lt = layer_time(load, shape, f, g); break;
    case Role::debtor: lt = debtor_layer_time(load, shape, f, g); break;
    case Role::creditor: lt = creditor_layer_time(load, shape, f, g); break;
    }
    return static_cast<double>(load.batch) / (shape.n_layers * lt);
}

double cluster_tps(const std::vector<std::pair<InstanceLoad, Role>>& loads,
                   const ModelShape& shape, const PerfCurve& f, const PerfCurve& g) {
    double total = 0.0;
    for (const auto& [load, role] : loads) total += instance_tps(load, role, shape, f, g);
    return total;
}

SearchSpaceSize search_space_size(int n_debtors, const std::vector<int64_t>& creditor_blocks) {
    KVSCHED_REQUIRE(n_debtors >= 0, "n_debtors must be >= 0");
    double log_size = 0.0;
    int64_t total_blocks = 0;
    for (int64_t y : creditor_blocks) {
        KVSCHED_REQUIRE(y >= 0, "creditor block counts must be >= 0");
        total_blocks += y;
        log_size -= std::lgamma(static_cast<double>(y) + 1.0);
    }
    log_size += static_cast<double>(total_blocks) * std::log(static_cast<double>(n_debtors) + 1.0);
    SearchSpaceSize out;
    out.log_size = log_size;
    out.size = std::exp(log_size);
    return out;
}

SearchSpaceSize exact_search_space_size(int n_debtors, const std::vector<int64_t>& creditor_blocks) {
    KVSCHED_REQUIRE(n_debtors >= 0, "n_debtors must be >= 0");
    // Per creditor: multisets of size Y over N+1 destinations, C(N + Y, Y).
    double log_size = 0.0;
    for (int64_t y : creditor_blocks) {
        KVSCHED_REQUIRE(y >= 0, "creditor block counts must be >= 0");
        const double n = static_cast<double>(n_debtors);
        log_size += std::lgamma(n + static_cast<double>(y) + 1.0) -
                    std::lgamma(n + 1.0) -
                    std::lgamma(static_cast<double>(y) + 1.0);
    }
    SearchSpaceSize out;
    out.log_size = log_size;
    out.size = std::exp(log_size);
    return out;
}

double kv_memory_bytes(int64_t tokens, const ModelShape& shape) {
    shape.validate();
    KVSCHED_REQUIRE(tokens >= 0, "token count must be >= 0");
    return static_cast<double>(tokens) * shape.kv_bytes_per_token;
}

int64_t blocks_for_tokens(int64_t tokens, const ModelShape& shape) {
    shape.validate();
    KVSCHED_REQUIRE(tokens >= 0, "token count must be >= 0");
    return (tokens + shape.block_size_tokens - 1) / shape.block_size_tokens;
}

} // namespace kvsched::perf
