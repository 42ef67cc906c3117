#pragma once

// Blockwise decomposition of single-query attention.
//
// A decode step attends one query vector against a KV sequence that may be
// scattered across instances. Each segment owner computes a partial
// (m, e, ma): the segment's max logit, the sum of exponentials shifted by
// that max, and the max-shifted weighted value sum. Partials combine
// associatively and aggregate to the exact softmax-weighted output, so the
// layout of the KV sequence never changes the result.

#include <cstddef>
#include <cstdint>
#include <vector>

namespace kvsched::attn {

struct AttentionConfig {
    int head_dim = 0;
    int num_q_heads = 1;
    int num_kv_heads = 1;
    double scale = 0.0; // 0 means "use 1/sqrt(head_dim)"

    // Resolved logit scale.
    double effective_scale() const;
    // Throws ContractError unless head_dim >= 1, head counts >= 1,
    // num_q_heads % num_kv_heads == 0 and scale is finite and >= 0.
    void validate() const;
};

// One contiguous slice of a single head's KV sequence, row-major
// [seq_p x head_dim]. seq_p == 0 is a valid empty segment.
struct KVSegment {
    std::vector<double> keys;
    std::vector<double> values;
    int64_t seq_p = 0;
    int head_dim = 0;

    const double* key_row(int64_t i) const { return keys.data() + i * head_dim; }
    const double* value_row(int64_t i) const { return values.data() + i * head_dim; }
    void validate() const;
};

// Partial attention state for one query against one segment.
// Identity element: m = -inf, e = 0, ma = 0, seq_p = 0.
struct AttentionPartial {
    double m = 0.0;
    double e = 0.0;
    std::vector<double> ma;
    int64_t seq_p = 0;

    static AttentionPartial identity(int head_dim);
    bool is_identity() const { return seq_p == 0; }
};

// Reference single-head attention over one contiguous KV sequence:
// softmax(scale * q K^T) V with a single global max shift. Serves as the
// ground truth for every distributed path.
// Pre: q.size() == head_dim, kv has seq >= 1 rows, all inputs finite.
std::vector<double> naive_attention(const std::vector<double>& q,
                                    const KVSegment& kv,
                                    const AttentionConfig& cfg);

// Partial for one segment. An empty segment yields the identity.
AttentionPartial compute_micro_attention(const std::vector<double>& q,
                                         const KVSegment& kv,
                                         const AttentionConfig& cfg);

// Lossless merge of two partials over disjoint segments. Commutative and
// associative; the identity is a true unit.
AttentionPartial combine_partials(const AttentionPartial& a,
                                  const AttentionPartial& b);

// Final output from the partials of a full disjoint cover of the sequence.
// Pre: at least one partial, total covered length >= 1, all same head_dim.
std::vector<double> aggregate_partials(const std::vector<AttentionPartial>& parts);

// KV head serving a given query head. Heads are grouped contiguously:
// query head h reads kv head h / (num_q_heads / num_kv_heads).
int gqa_kv_head(int query_head, const AttentionConfig& cfg);

// Per-head attention over a segmented KV cache laid out as
// queries[num_q_heads * head_dim], keys/values[num_kv_heads] each a list of
// segments. Returns outputs[num_q_heads * head_dim].
std::vector<double> multi_head_attention(
    const std::vector<double>& queries,
    const std::vector<std::vector<KVSegment>>& kv_segments_per_head,
    const AttentionConfig& cfg);

// Wire payload of a partial: exactly head_dim + 2 doubles (m, e, ma),
// independent of how many tokens the segment held.
std::vector<std::byte> serialize_partial(const AttentionPartial& p);
AttentionPartial deserialize_partial(const std::vector<std::byte>& bytes, int head_dim);

} // namespace kvsched::attn
