#pragma once

// Randomized equivalence checking: the blockwise attention path (partials
// over arbitrary segment cuts, merged and aggregated) against an independent
// extended-precision contiguous softmax. Exercises single-head, grouped-head,
// adversarial logit magnitudes, and the wire round-trip of partials.

#include "kvsched/trace.hpp"

#include <cstdint>
#include <string>

namespace kvsched::attn {

struct VerifyConfig {
    int trials = 10000;
    uint64_t seed = 1;
    int max_head_dim = 64;
    int max_seq = 256;
    int max_segments = 8;
    double tolerance = 1e-6; // max normalized error allowed

    void validate() const;
};

struct VerifyReport {
    int trials = 0;
    double max_rel_err = 0.0;
    double mean_rel_err = 0.0;
    double tolerance = 0.0;
    bool pass = false;
};

// One random trial. Returns max_i |out_i - ref_i| / max_i |ref_i| over all
// output dimensions (and all query heads when a grouped shape is drawn).
double verify_attention_once(sim::Rng& rng, int max_head_dim, int max_seq,
                             int max_segments);

VerifyReport verify_attention_equivalence(const VerifyConfig& cfg);

std::string format_verify_report(const VerifyReport& r);

} // namespace kvsched::attn
