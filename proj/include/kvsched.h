/* C interface to the kvsched shared library: cluster config and trace
 * handling, attention equivalence verification, standalone planning over a
 * snapshot file, and full cluster simulation runs.
 *
 * All functions return KVS_OK on success. On failure they return a status
 * code and leave a message in kvs_last_error() (thread-local). Out-pointers
 * are written only on success. Strings returned through char** are owned by
 * the caller and released with kvs_string_free().
 */

#ifndef KVSCHED_H
#define KVSCHED_H

#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef enum kvs_status {
    KVS_OK = 0,
    KVS_ERR_INVALID_ARGUMENT = 1, /* null handles, malformed parameters */
    KVS_ERR_INPUT = 2,            /* rejected input data or files */
    KVS_ERR_CONTRACT = 3,         /* internal precondition violated */
    KVS_ERR_INTERNAL = 4
} kvs_status;

typedef struct kvs_config kvs_config; /* cluster/simulation configuration */
typedef struct kvs_trace kvs_trace;   /* request trace */

/* Message for the most recent failure in the calling thread. Never null. */
const char* kvs_last_error(void);

void kvs_string_free(char* s);

/* --- configuration --- */

kvs_status kvs_config_default(kvs_config** out);
kvs_status kvs_config_load(const char* path, kvs_config** out);
kvs_status kvs_config_save(const kvs_config* cfg, const char* path);
/* policy: "infinite", "strawman", or "static" */
kvs_status kvs_config_set_policy(kvs_config* cfg, const char* policy);
kvs_status kvs_config_set_seed(kvs_config* cfg, uint64_t seed);
void kvs_config_free(kvs_config* cfg);

/* --- traces --- */

/* Generate from a trace-spec JSON file. When use_seed_override is nonzero,
 * seed_override replaces the seed in the spec. */
kvs_status kvs_trace_generate(const char* spec_json_path, int use_seed_override,
                              uint64_t seed_override, kvs_trace** out);
kvs_status kvs_trace_load(const char* path, kvs_trace** out);
kvs_status kvs_trace_save(const kvs_trace* trace, const char* path);
void kvs_trace_free(kvs_trace* trace);

/* --- attention verification --- */

/* Random equivalence trials of the blockwise attention path against an
 * extended-precision reference. Writes a text report to *report_out and the
 * pass/fail verdict to *pass_out. */
kvs_status kvs_verify_attention(int trials, uint64_t seed, double tolerance,
                                char** report_out, int* pass_out);

/* --- planning --- */

/* One greedy planning round over a cluster snapshot JSON file, using the
 * config's model shape, rate curves and scheduler thresholds. Writes a text
 * rendering of the planned directives to *plan_out. */
kvs_status kvs_plan_snapshot_file(const kvs_config* cfg, const char* snapshot_json_path,
                                  char** plan_out);

/* --- simulation --- */

/* Run the full simulation of cfg over trace. Writes summary.txt,
 * requests.csv and tps.csv into out_dir (created if missing), plus steps.csv
 * when record_steps is nonzero and events.jsonl when event_log is nonzero.
 * horizon_s <= 0 selects the default horizon. The summary text is also
 * returned through *summary_out when it is non-null. */
kvs_status kvs_run_simulation(const kvs_config* cfg, const kvs_trace* trace,
                              const char* out_dir, double horizon_s, int record_steps,
                              int event_log, char** summary_out);

#ifdef __cplusplus
}
#endif

#endif /* KVSCHED_H */
