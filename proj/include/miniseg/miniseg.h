/* SPDX-License-Identifier: Apache-2.0 */
/* C interface to the MiniSeg library. Every call returns an ms_status; on
 * failure ms_last_error() describes the problem (per thread). Strings handed
 * out by the library are released with ms_string_free. */
#ifndef MINISEG_H
#define MINISEG_H

#include <stdint.h>

#if defined(MINISEG_BUILDING)
#define MS_API __attribute__((visibility("default")))
#else
#define MS_API
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum ms_status {
  MS_OK = 0,
  MS_ERR_USAGE = 1,   /* bad arguments, configuration or option keys */
  MS_ERR_DATA = 2,    /* unreadable dataset, image, or checkpoint; extent mismatch */
  MS_ERR_NUMERIC = 3  /* non-finite loss, failed gradient check */
} ms_status;

typedef struct ms_model ms_model;

MS_API const char* ms_version(void);
MS_API const char* ms_last_error(void);

/* Optional sink for progress lines emitted by the workflow calls. */
typedef void (*ms_log_fn)(const char* line, void* user);
MS_API void ms_set_log_callback(ms_log_fn fn, void* user);

/* ablations: comma separated names (e.g. "single_branch,no_attention"), or
 * NULL / "" for the default network. */
MS_API ms_status ms_model_create(const char* ablations, uint64_t seed, ms_model** out);
MS_API ms_status ms_model_load(const char* path, ms_model** out);
MS_API ms_status ms_model_save(const ms_model* model, const char* path);
MS_API void ms_model_destroy(ms_model* model);

MS_API ms_status ms_model_param_count(const ms_model* model, uint64_t* out);
MS_API ms_status ms_model_flops(const ms_model* model, int height, int width, uint64_t* flops,
                                uint64_t* conv_macs);

/* gray: height*width intensities in [0,1], row-major. Writes the foreground
 * probability per pixel to probs (height*width). Any extent is accepted. */
MS_API ms_status ms_model_predict(const ms_model* model, const float* gray, int height, int width,
                                  float* probs);

/* Workflows. options_json is a JSON object (keys: data, out, ckpt, seed, size,
 * fold, folds, ablate, overlays, workers, latency_runs, epochs, batch_size,
 * lr, weight_decay, crop, flip, poly_power, inverse_frequency, head_weights).
 * On MS_OK, and for a failed gradient check, *report_json receives a JSON
 * report. */
MS_API ms_status ms_train(const char* options_json, char** report_json);
MS_API ms_status ms_eval(const char* options_json, char** report_json);
MS_API ms_status ms_infer(const char* options_json, char** report_json);
MS_API ms_status ms_summary(const char* options_json, char** report_json);
MS_API ms_status ms_gradcheck(const char* options_json, char** report_json);

MS_API void ms_string_free(char* s);

#ifdef __cplusplus
}
#endif

#endif /* MINISEG_H */
