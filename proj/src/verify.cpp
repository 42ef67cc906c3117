#include "kvsched/verify.hpp"
#include "kvsched/common.hpp"
#include "kvsched/distattention.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

namespace kvsched::attn {

void VerifyConfig::validate() const {
    KVSCHED_INPUT_CHECK(trials >= 1, "verify: trials must be >= 1");
    KVSCHED_INPUT_CHECK(max_head_dim >= 1, "verify: max_head_dim must be >= 1");
    KVSCHED_INPUT_CHECK(max_seq >= 1, "verify: max_seq must be >= 1");
    KVSCHED_INPUT_CHECK(max_segments >= 1, "verify: max_segments must be >= 1");
    KVSCHED_INPUT_CHECK(tolerance > 0.0, "verify: tolerance must be > 0");
}

namespace {

// Independent reference: contiguous softmax attention in long double with a
// single global max shift. Deliberately not a call into the production path.
std::vector<double> reference_attention(const std::vector<double>& q,
                                        const std::vector<double>& keys,
                                        const std::vector<double>& values,
                                        int64_t seq, int head_dim, double scale) {
    std::vector<long double> logits(seq);
    long double m = -1e4932L;
    for (int64_t i = 0; i < seq; ++i) {
        long double dot = 0.0L;
        for (int d = 0; d < head_dim; ++d)
            dot += static_cast<long double>(q[d]) *
                   static_cast<long double>(keys[i * head_dim + d]);
        logits[i] = dot * static_cast<long double>(scale);
        m = std::max(m, logits[i]);
    }
    long double denom = 0.0L;
    std::vector<long double> out(head_dim, 0.0L);
    for (int64_t i = 0; i < seq; ++i) {
        const long double w = expl(logits[i] - m);
        denom += w;
        for (int d = 0; d < head_dim; ++d)
            out[d] += w * static_cast<long double>(values[i * head_dim + d]);
    }
    std::vector<double> res(head_dim);
    for (int d = 0; d < head_dim; ++d)
        res[d] = static_cast<double>(out[d] / denom);
    return res;
}

double normalized_max_err(const std::vector<double>& got, const std::vector<double>& ref) {
    double num = 0.0, den = 0.0;
    for (size_t i = 0; i < ref.size(); ++i) {
        num = std::max(num, std::abs(got[i] - ref[i]));
        den = std::max(den, std::abs(ref[i]));
    }
    return num / std::max(den, 1e-300);
}

// Random cut of [0, seq) into k disjoint contiguous pieces (some may be empty).
std::vector<int64_t> random_cuts(sim::Rng& rng, int64_t seq, int k) {
    std::vector<int64_t> cuts;
    cuts.push_back(0);
    for (int i = 1; i < k; ++i) cuts.push_back(rng.uniform_int(0, seq));
    cuts.push_back(seq);
    std::sort(cuts.begin(), cuts.end());
    return cuts;
}

KVSegment slice(const std::vector<double>& keys, const std::vector<double>& values,
                int64_t lo, int64_t hi, int head_dim) {
    KVSegment s;
    s.head_dim = head_dim;
    s.seq_p = hi - lo;
    s.keys.assign(keys.begin() + lo * head_dim, keys.begin() + hi * head_dim);
    s.values.assign(values.begin() + lo * head_dim, values.begin() + hi * head_dim);
    return s;
}

void fill_random(sim::Rng& rng, std::vector<double>& v, double amp) {
    for (auto& x : v) x = amp * rng.normal();
}

double single_head_trial(sim::Rng& rng, int max_head_dim, int max_seq, int max_segments) {
    const int head_dim = static_cast<int>(rng.uniform_int(1, max_head_dim));
    const int64_t seq = rng.uniform_int(1, max_seq);
    const int k = static_cast<int>(rng.uniform_int(1, max_segments));

    // Occasional large amplitudes force extreme logit shifts across segments.
    const double key_amp = rng.uniform01() < 0.25 ? 30.0 : 1.0;

    std::vector<double> q(head_dim), keys(seq * head_dim), values(seq * head_dim);
    fill_random(rng, q, 1.0);
    fill_random(rng, keys, key_amp);
    fill_random(rng, values, 1.0);

    AttentionConfig cfg;
    cfg.head_dim = head_dim;
    cfg.scale = rng.uniform01() < 0.5 ? 0.0 : rng.uniform(0.05, 2.0);

    const auto cuts = random_cuts(rng, seq, k);
    std::vector<AttentionPartial> parts;
    for (size_t i = 0; i + 1 < cuts.size(); ++i) {
        auto p = compute_micro_attention(q, slice(keys, values, cuts[i], cuts[i + 1], head_dim), cfg);
        // Round half the partials through the wire encoding.
        if (rng.uniform01() < 0.5) {
            auto restored = deserialize_partial(serialize_partial(p), head_dim);
            restored.seq_p = p.seq_p;
            p = restored;
        }
        parts.push_back(std::move(p));
    }
    const auto got = aggregate_partials(parts);
    const auto ref = reference_attention(q, keys, values, seq, head_dim, cfg.effective_scale());
    return normalized_max_err(got, ref);
}

double grouped_trial(sim::Rng& rng, int max_head_dim, int max_seq, int max_segments) {
    const int head_dim = static_cast<int>(rng.uniform_int(1, std::min(max_head_dim, 16)));
    const int num_kv = static_cast<int>(rng.uniform_int(1, 4));
    const int group = static_cast<int>(rng.uniform_int(1, 3));
    const int num_q = num_kv * group;
    const int64_t seq = rng.uniform_int(1, std::min<int64_t>(max_seq, 64));

    AttentionConfig cfg;
    cfg.head_dim = head_dim;
    cfg.num_q_heads = num_q;
    cfg.num_kv_heads = num_kv;

    std::vector<double> queries(num_q * head_dim);
    fill_random(rng, queries, 1.0);

    std::vector<std::vector<double>> keys(num_kv), values(num_kv);
    std::vector<std::vector<KVSegment>> segs(num_kv);
    for (int h = 0; h < num_kv; ++h) {
        keys[h].resize(seq * head_dim);
        values[h].resize(seq * head_dim);
        fill_random(rng, keys[h], 1.0);
        fill_random(rng, values[h], 1.0);
        const int k = static_cast<int>(rng.uniform_int(1, max_segments));
        const auto cuts = random_cuts(rng, seq, k);
        for (size_t i = 0; i + 1 < cuts.size(); ++i)
            segs[h].push_back(slice(keys[h], values[h], cuts[i], cuts[i + 1], head_dim));
    }

    const auto got = multi_head_attention(queries, segs, cfg);
    double worst = 0.0;
    for (int h = 0; h < num_q; ++h) {
        const int kvh = gqa_kv_head(h, cfg);
        std::vector<double> q(queries.begin() + h * head_dim,
                              queries.begin() + (h + 1) * head_dim);
        const auto ref = reference_attention(q, keys[kvh], values[kvh], seq, head_dim,
                                             cfg.effective_scale());
        std::vector<double> out(got.begin() + h * head_dim,
                                got.begin() + (h + 1) * head_dim);
        worst = std::max(worst, normalized_max_err(out, ref));
    }
    return worst;
}

} // namespace

double verify_attention_once(sim::Rng& rng, int max_head_dim, int max_seq,
                             int max_segments) {
    if (rng.uniform01() < 0.3)
        return grouped_trial(rng, max_head_dim, max_seq, max_segments);
    return single_head_trial(rng, max_head_dim, max_seq, max_segments);
}

VerifyReport verify_attention_equivalence(const VerifyConfig& cfg) {
    cfg.validate();
    sim::Rng rng(cfg.seed);
    VerifyReport r;
    r.trials = cfg.trials;
    r.tolerance = cfg.tolerance;
    double sum = 0.0;
    for (int i = 0; i < cfg.trials; ++i) {
        const double err =
            verify_attention_once(rng, cfg.max_head_dim, cfg.max_seq, cfg.max_segments);
        r.max_rel_err = std::max(r.max_rel_err, err);
        sum += err;
    }
    r.mean_rel_err = sum / cfg.trials;
    r.pass = r.max_rel_err < cfg.tolerance;
    return r;
}

std::string format_verify_report(const VerifyReport& r) {
    char buf[256];
    std::snprintf(buf, sizeof(buf),
                  "trials: %d\nmax_rel_err: %.3e\nmean_rel_err: %.3e\ntolerance: %.3e\nresult: %s\n",
                  r.trials, r.max_rel_err, r.mean_rel_err, r.tolerance,
                  r.pass ? "pass" : "fail");
    return buf;
}

} // namespace kvsched::attn
