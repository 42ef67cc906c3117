#pragma once

// Analytical per-layer timing model for decode-phase instances.
//
// One decode step of one layer for an instance with batch size beta and
// per-request context lengths S^r costs
//
//     T(beta, S) = W(beta)/f(beta) + sum_r S^r * attn_work_per_ctx_token / g(S_total)
//
// where W(beta) = workload_per_token * beta is the batch-wide non-attention
// work, f is the batch-size-dependent effective rate for that work, and g is
// the effective rate for attention work. An instance that has lent part of
// its attention work away (debtor) subtracts the offloaded share; an instance
// hosting foreign KV blocks (creditor) adds it.

#include <cstdint>
#include <utility>
#include <vector>

namespace kvsched::perf {

// Piecewise-linear effective-rate curve over batch size or context length.
// Outside the sampled range the curve clamps to its endpoint values.
class PerfCurve {
public:
    PerfCurve() = default;
    // Pre: >= 2 samples, x strictly increasing, rates positive and finite.
    explicit PerfCurve(std::vector<std::pair<double, double>> samples);

    double eval(double x) const;
    // For the batch-rate role the curve must be nondecreasing in x.
    bool nondecreasing() const;
    const std::vector<std::pair<double, double>>& samples() const { return samples_; }
    bool empty() const { return samples_.empty(); }

    // Smallest sampled x whose rate reaches `fraction` of the curve maximum.
    double saturation_point(double fraction = 0.8) const;

private:
    std::vector<std::pair<double, double>> samples_;
};

// Synthetic defaults used when no measured curves are supplied.
// f: rate = r_max * beta / (beta + beta_half); g: constant.
PerfCurve default_batch_curve(double r_max = 2000.0, double beta_half = 8.0,
                              double max_batch = 512.0);
PerfCurve default_ctx_curve(double rate = 200000.0, double max_ctx = 4.0e6);

struct ModelShape {
    int n_layers = 0;
    double workload_per_token = 0.0;      // non-attention work units per token per layer
    double attn_work_per_ctx_token = 0.0; // attention work units per context token per layer
    double kv_bytes_per_token = 0.0;      // KV bytes per token across all layers
    int block_size_tokens = 0;

    void validate() const; // all fields positive and finite
};

struct InstanceLoad {
    int64_t batch = 0;                  // running requests
    std::vector<int64_t> ctx_lengths;   // full context tokens per running request
    int64_t offloaded_tokens = 0;       // role-dependent: lent out (debtor) or hosted (creditor)

    int64_t total_ctx() const;
    void validate() const;
};

enum class Role { neutral, debtor, creditor };

// Seconds per layer. Pre: batch >= 1, ctx_lengths.size() == batch, every
// length >= 1. batch == 0 is a contract violation: an idle instance
// contributes zero TPS upstream, not a zero-time layer.
double layer_time(const InstanceLoad& load, const ModelShape& shape,
                  const PerfCurve& f, const PerfCurve& g);

// Debtor: offloaded attention work happens elsewhere, overlapped with local
// compute. Pre: offloaded_tokens <= total_ctx(), so the result stays > 0.
double debtor_layer_time(const InstanceLoad& load, const ModelShape& shape,
                         const PerfCurve& f, const PerfCurve& g);

// Creditor: hosted foreign blocks add attention work on top of the local load.
double creditor_layer_time(const InstanceLoad& load, const ModelShape& shape,
                           const PerfCurve& f, const PerfCurve& g);

// Decode tokens per second: batch / (n_layers * role-appropriate layer time).
// An empty load contributes 0.
double instance_tps(const InstanceLoad& load, Role role, const ModelShape& shape,
                    const PerfCurve& f, const PerfCurve& g);

// Sum of instance TPS over the cluster.
double cluster_tps(const std::vector<std::pair<InstanceLoad, Role>>& loads,
                   const ModelShape& shape, const PerfCurve& f, const PerfCurve& g);

// Size of the block-placement search space for n_debtors destination options
// per block (plus "stay put") and creditor_blocks[i] movable blocks per
// creditor i:
//
//     (N+1)^(sum Y_i) / prod Y_i!
//
// The closed form over-divides when a creditor could send several blocks to
// the same destination; exact_search_space_size counts distinct multiset
// assignments, prod_i C(N + Y_i, Y_i). Both are reported.
struct SearchSpaceSize {
    double log_size = 0.0; // natural log of the closed-form size
    double size = 0.0;     // exp(log_size), may overflow to +inf
};
SearchSpaceSize search_space_size(int n_debtors, const std::vector<int64_t>& creditor_blocks);

// Exact distinct-assignment count in log space plus direct value.
SearchSpaceSize exact_search_space_size(int n_debtors, const std::vector<int64_t>& creditor_blocks);

// KV memory for a token count; bytes = tokens * kv_bytes_per_token.
double kv_memory_bytes(int64_t tokens, const ModelShape& shape);

// Blocks needed to hold a token count: ceil(tokens / block_size).
int64_t blocks_for_tokens(int64_t tokens, const ModelShape& shape);

} // namespace kvsched::perf
