/* C interface to the svam pipeline. The CLI and external embedders link the
 * shared library through this header only; handles are opaque and every call
 * reports a status code that doubles as the CLI exit code. */
#ifndef SVAM_SVAM_H_
#define SVAM_SVAM_H_

#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef struct svam_pipeline svam_pipeline;

typedef enum svam_status {
  SVAM_OK = 0,
  SVAM_ERROR = 1,           /* generic failure (I/O, contract violation) */
  SVAM_ERR_CONFIG = 2,      /* malformed or inconsistent configuration */
  SVAM_ERR_CHECKPOINT = 3,  /* missing checkpoint or config-hash mismatch */
  SVAM_ERR_NUMERIC = 4      /* non-finite value in a numeric path */
} svam_status;

/* Opens a pipeline from a JSON config file (or inline JSON text). On failure
 * *out is NULL and svam_global_error() describes the problem. */
svam_status svam_open(const char* config_path, svam_pipeline** out);
svam_status svam_open_text(const char* config_json, svam_pipeline** out);
void svam_close(svam_pipeline* p);

/* Last error message of a failed call on this handle (empty string if none).
 * The pointer stays valid until the next call on the same handle. */
const char* svam_last_error(const svam_pipeline* p);
/* Last error of a failed svam_open/svam_open_text. */
const char* svam_global_error(void);

svam_status svam_set_seed(svam_pipeline* p, uint64_t seed);
svam_status svam_set_out_dir(svam_pipeline* p, const char* dir);
svam_status svam_set_data_path(svam_pipeline* p, const char* path);

svam_status svam_gen_data(svam_pipeline* p);
svam_status svam_train(svam_pipeline* p, int stage, int resume);
svam_status svam_eval(svam_pipeline* p, int episodes, int seeds, int write_traces);
svam_status svam_ablate(svam_pipeline* p, const char* variant, int episodes, int seeds);
svam_status svam_bench_latency(svam_pipeline* p, int trials);
svam_status svam_gradcheck(svam_pipeline* p, int inject_fault);

const char* svam_version(void);

#ifdef __cplusplus
}
#endif

#endif /* SVAM_SVAM_H_ */
