/* C interface to the mcLARO pipeline library.
 *
 * All functions are thread-compatible: distinct handles may be used from
 * distinct threads; one handle must not be shared concurrently. Strings
 * returned by the library stay valid until the next call on the same
 * handle (or program end for mclaro_version/mclaro_status_name).
 */
#ifndef MCLARO_H
#define MCLARO_H

#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef enum mclaro_status {
  MCLARO_OK = 0,
  MCLARO_ERR_INVALID_ARG = 1,
  MCLARO_ERR_CONFIG = 2,
  MCLARO_ERR_IO = 3,
  MCLARO_ERR_MISSING_ARTIFACT = 4,
  MCLARO_ERR_NUMERIC = 5,
  MCLARO_ERR_INTERNAL = 6
} mclaro_status;

typedef struct mclaro_experiment mclaro_experiment; /* opaque */

const char* mclaro_version(void);
const char* mclaro_status_name(mclaro_status status);

/* Parse + validate a JSON experiment config. On success writes a handle to
 * *out and returns MCLARO_OK. On failure *out is NULL; call
 * mclaro_last_error() for the message. */
mclaro_status mclaro_experiment_open(const char* config_path,
                                     const char* out_dir,
                                     mclaro_experiment** out);

void mclaro_experiment_close(mclaro_experiment* exp);

/* Overrides applied before the first run. */
mclaro_status mclaro_experiment_set_seed(mclaro_experiment* exp, uint64_t seed);
mclaro_status mclaro_experiment_set_threads(mclaro_experiment* exp, int threads);
/* flags: "00", "01", "10" or "11"; restricts training to one variant */
mclaro_status mclaro_experiment_set_ablation(mclaro_experiment* exp,
                                             const char* flags);

/* stage: phantom | simulate | train | reconstruct | map | evaluate | all */
mclaro_status mclaro_experiment_run(mclaro_experiment* exp, const char* stage);

/* Message for the last failing call on this handle ("" if none). With a
 * NULL handle, the message for the last failing mclaro_experiment_open on
 * this thread. */
const char* mclaro_last_error(const mclaro_experiment* exp);

#ifdef __cplusplus
}
#endif

#endif /* MCLARO_H */
