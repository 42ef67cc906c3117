#include "kvsched/distattention.hpp"
#include "kvsched/common.hpp"

#include <cmath>
#include <cstring>
#include <limits>

namespace kvsched::attn {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

bool all_finite(const std::vector<double>& v) {
    for (double x : v)
        if (!std::isfinite(x)) return false;
    return true;
}

double dot(const double* a, const double* b, int n) {
    double acc = 0.0;
    for (int i = 0; i < n; ++i) acc += a[i] * b[i];
    return acc;
}

void check_query(const std::vector<double>& q, const AttentionConfig& cfg) {
    cfg.validate();
    KVSCHED_REQUIRE(static_cast<int>(q.size()) == cfg.head_dim,
                    "query length must equal head_dim");
    KVSCHED_INPUT_CHECK(all_finite(q), "query contains non-finite values");
}

} // namespace

double AttentionConfig::effective_scale() const {
    return scale > 0.0 ? scale : 1.0 / std::sqrt(static_cast<double>(head_dim));
}

void AttentionConfig::validate() const {
    KVSCHED_REQUIRE(head_dim >= 1, "head_dim must be >= 1");
    KVSCHED_REQUIRE(num_q_heads >= 1 && num_kv_heads >= 1, "head counts must be >= 1");
    KVSCHED_REQUIRE(num_q_heads % num_kv_heads == 0,
                    "num_q_heads must be a multiple of num_kv_heads");
    KVSCHED_REQUIRE(std::isfinite(scale) && scale >= 0.0,
                    "scale must be finite and >= 0");
}

void KVSegment::validate() const {
    KVSCHED_REQUIRE(head_dim >= 1, "segment head_dim must be >= 1");
    KVSCHED_REQUIRE(seq_p >= 0, "segment length must be >= 0");
    KVSCHED_REQUIRE(keys.size() == static_cast<size_t>(seq_p) * head_dim,
                    "segment keys shape mismatch");
    KVSCHED_REQUIRE(values.size() == static_cast<size_t>(seq_p) * head_dim,
                    "segment values shape mismatch");
    KVSCHED_INPUT_CHECK(all_finite(keys) && all_finite(values),
                        "segment contains non-finite values");
}

AttentionPartial AttentionPartial::identity(int head_dim) {
    KVSCHED_REQUIRE(head_dim >= 1, "head_dim must be >= 1");
    AttentionPartial p;
    p.m = kNegInf;
    p.e = 0.0;
    p.ma.assign(head_dim, 0.0);
    p.seq_p = 0;
    return p;
}

std::vector<double> naive_attention(const std::vector<double>& q,
                                    const KVSegment& kv,
                                    const AttentionConfig& cfg) {
    check_query(q, cfg);
    kv.validate();
    KVSCHED_REQUIRE(kv.head_dim == cfg.head_dim, "segment head_dim mismatch");
    KVSCHED_REQUIRE(kv.seq_p >= 1, "naive attention needs at least one token");

    const double scale = cfg.effective_scale();
    const int d = cfg.head_dim;

    std::vector<double> logits(kv.seq_p);
    double m_g = kNegInf;
    for (int64_t i = 0; i < kv.seq_p; ++i) {
        logits[i] = scale * dot(q.data(), kv.key_row(i), d);
        if (logits[i] > m_g) m_g = logits[i];
    }

    std::vector<double> out(d, 0.0);
    double denom = 0.0;
    for (int64_t i = 0; i < kv.seq_p; ++i) {
        const double w = std::exp(logits[i] - m_g);
        denom += w;
        const double* v = kv.value_row(i);
        for (int j = 0; j < d; ++j) out[j] += w * v[j];
    }
    for (int j = 0; j < d; ++j) out[j] /= denom;
    return out;
}

AttentionPartial compute_micro_attention(const std::vector<double>& q,
                                         const KVSegment& kv,
                                         const AttentionConfig& cfg) {
    check_query(q, cfg);
    kv.validate();
    KVSCHED_REQUIRE(kv.head_dim == cfg.head_dim, "segment head_dim mismatch");

    const int d = cfg.head_dim;
    if (kv.seq_p == 0) return AttentionPartial::identity(d);

    const double scale = cfg.effective_scale();
    std::vector<double> logits(kv.seq_p);
    double m = kNegInf;
    for (int64_t i = 0; i < kv.seq_p; ++i) {
        logits[i] = scale * dot(q.data(), kv.key_row(i), d);
        if (logits[i] > m) m = logits[i];
    }

    AttentionPartial p;
    p.m = m;
    p.e = 0.0;
    p.ma.assign(d, 0.0);
    p.seq_p = kv.seq_p;
    for (int64_t i = 0; i < kv.seq_p; ++i) {
        const double w = std::exp(logits[i] - m);
        p.e += w;
        const double* v = kv.value_row(i);
        for (int j = 0; j < d; ++j) p.ma[j] += w * v[j];
    }
    return p;
}

AttentionPartial combine_partials(const AttentionPartial& a,
                                  const AttentionPartial& b) {
    KVSCHED_REQUIRE(!a.ma.empty() && !b.ma.empty(), "partials must be initialized");
    KVSCHED_REQUIRE(a.ma.size() == b.ma.size(), "partial head_dim mismatch");
    if (a.is_identity()) return b;
    if (b.is_identity()) return a;

    const int d = static_cast<int>(a.ma.size());
    AttentionPartial out;
    out.m = a.m > b.m ? a.m : b.m;
    const double wa = std::exp(a.m - out.m);
    const double wb = std::exp(b.m - out.m);
    out.e = a.e * wa + b.e * wb;
    out.ma.resize(d);
    for (int j = 0; j < d; ++j) out.ma[j] = a.ma[j] * wa + b.ma[j] * wb;
    out.seq_p = a.seq_p + b.seq_p;
    return out;
}

std::vector<double> aggregate_partials(const std::vector<AttentionPartial>& parts) {
    KVSCHED_REQUIRE(!parts.empty(), "aggregate needs at least one partial");
    const size_t d = parts[0].ma.size();
    KVSCHED_REQUIRE(d >= 1, "partials must be initialized");

    int64_t total = 0;
    double m_g = kNegInf;
    for (const auto& p : parts) {
        KVSCHED_REQUIRE(p.ma.size() == d, "partial head_dim mismatch");
        total += p.seq_p;
        if (!p.is_identity() && p.m > m_g) m_g = p.m;
    }
    KVSCHED_REQUIRE(total >= 1, "aggregate needs at least one covered token");

    double e_g = 0.0;
    std::vector<double> out(d, 0.0);
    for (const auto& p : parts) {
        if (p.is_identity()) continue;
        const double w = std::exp(p.m - m_g);
        e_g += p.e * w;
        for (size_t j = 0; j < d; ++j) out[j] += p.ma[j] * w;
    }
    for (size_t j = 0; j < d; ++j) out[j] /= e_g;
    return out;
}

int gqa_kv_head(int query_head, const AttentionConfig& cfg) {
    cfg.validate();
    KVSCHED_REQUIRE(query_head >= 0 && query_head < cfg.num_q_heads,
                    "query_head out of range");
    return query_head / (cfg.num_q_heads / cfg.num_kv_heads);
}

std::vector<double> multi_head_attention(
    const std::vector<double>& queries,
    const std::vector<std::vector<KVSegment>>& kv_segments_per_head,
    const AttentionConfig& cfg) {
    cfg.validate();
    KVSCHED_REQUIRE(queries.size() ==
                        static_cast<size_t>(cfg.num_q_heads) * cfg.head_dim,
                    "queries shape mismatch");
    KVSCHED_REQUIRE(kv_segments_per_head.size() ==
                        static_cast<size_t>(cfg.num_kv_heads),
                    "kv head count mismatch");

    const int d = cfg.head_dim;
    std::vector<double> out(queries.size());
    for (int h = 0; h < cfg.num_q_heads; ++h) {
        std::vector<double> q(queries.begin() + static_cast<size_t>(h) * d,
                              queries.begin() + static_cast<size_t>(h + 1) * d);
        const auto& segs = kv_segments_per_head[gqa_kv_head(h, cfg)];
        std::vector<AttentionPartial> parts;
        parts.reserve(segs.size());
        for (const auto& s : segs) parts.push_back(compute_micro_attention(q, s, cfg));
        std::vector<double> o = aggregate_partials(parts);
        std::memcpy(out.data() + static_cast<size_t>(h) * d, o.data(),
                    sizeof(double) * d);
    }
    return out;
}

std::vector<std::byte> serialize_partial(const AttentionPartial& p) {
    KVSCHED_REQUIRE(!p.ma.empty(), "partial must be initialized");
    // m, e, then ma: the remote side returns head_dim + 2 scalars no matter
    // how long its segment was.
    std::vector<std::byte> bytes(sizeof(double) * (2 + p.ma.size()));
    std::memcpy(bytes.data(), &p.m, sizeof(double));
    std::memcpy(bytes.data() + sizeof(double), &p.e, sizeof(double));
    std::memcpy(bytes.data() + 2 * sizeof(double), p.ma.data(),
                sizeof(double) * p.ma.size());
    return bytes;
}

AttentionPartial deserialize_partial(const std::vector<std::byte>& bytes, int head_dim) {
    KVSCHED_REQUIRE(head_dim >= 1, "head_dim must be >= 1");
    KVSCHED_INPUT_CHECK(bytes.size() == sizeof(double) * (2 + static_cast<size_t>(head_dim)),
                        "partial payload size mismatch");
    AttentionPartial p;
    std::memcpy(&p.m, bytes.data(), sizeof(double));
    std::memcpy(&p.e, bytes.data() + sizeof(double), sizeof(double));
    p.ma.resize(head_dim);
    std::memcpy(p.ma.data(), bytes.data() + 2 * sizeof(double),
                sizeof(double) * head_dim);
    // Wire partials carry no token count; seq_p is local bookkeeping only, so
    // restore just the identity/non-identity distinction.
    p.seq_p = (p.e == 0.0 && p.m == kNegInf) ? 0 : 1;
    return p;
}

} // namespace kvsched::attn
