/* SPDX-License-Identifier: Apache-2.0 */

/*
 * C interface to the cdnet library: cascaded feature decomposition for
 * cross-domain few-shot classification on synthetic data.
 *
 * Every object is an opaque handle released with its *_free function.
 * Functions returning cdnet_status leave a description of any failure in
 * cdnet_last_error() (thread-local, valid until the next call on the same
 * thread). Strings returned through char** are owned by the caller and must
 * be released with cdnet_string_free.
 */

#ifndef CDNET_CDNET_H
#define CDNET_CDNET_H

#include <stddef.h>
#include <stdint.h>

#if defined(CDNET_BUILDING_LIBRARY)
#define CDNET_API __attribute__((visibility("default")))
#else
#define CDNET_API
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum cdnet_status {
  CDNET_OK = 0,
  CDNET_ERR_CONTRACT = 1, /* violated precondition or internal invariant */
  CDNET_ERR_CONFIG = 2,   /* invalid or incompatible configuration */
  CDNET_ERR_IO = 3,       /* file missing, unreadable or malformed */
  CDNET_ERR_SAMPLING = 4, /* requested episode cannot be drawn */
  CDNET_ERR_DIVERGED = 5, /* non-finite loss or gradient during training */
  CDNET_ERR_INTERNAL = 6
} cdnet_status;

typedef struct cdnet_config cdnet_config;
typedef struct cdnet_dataset cdnet_dataset;
typedef struct cdnet_model cdnet_model;
typedef struct cdnet_report cdnet_report;

/* Receives one JSON object per training record (no trailing newline). */
typedef void (*cdnet_history_fn)(const char* json_line, void* user);

CDNET_API const char* cdnet_version(void);
/* Revision of the sources the library was built from. */
CDNET_API const char* cdnet_source_fingerprint(void);
CDNET_API const char* cdnet_last_error(void);
CDNET_API const char* cdnet_status_name(cdnet_status s);
CDNET_API void cdnet_string_free(char* s);
/* Seed used for one purpose (1 data, 2 init, 3 pretrain, 4 finetune,
 * 5 eval) and index under a master seed. */
CDNET_API uint64_t cdnet_derive_seed(uint64_t master, uint64_t purpose, uint64_t index);
/* Structured JSON log lines on stderr; on by default. */
CDNET_API void cdnet_set_logging(int enabled);

/* --- configuration ------------------------------------------------------ */

CDNET_API cdnet_status cdnet_config_new(cdnet_config** out);
CDNET_API cdnet_status cdnet_config_clone(const cdnet_config* cfg, cdnet_config** out);
CDNET_API void cdnet_config_free(cdnet_config* cfg);

/* Settable dotted keys in documentation order. Pointers stay valid for the
 * lifetime of the library. */
CDNET_API size_t cdnet_config_field_count(void);
CDNET_API cdnet_status cdnet_config_field_info(size_t index, const char** key,
                                               const char** default_value, const char** doc);

CDNET_API cdnet_status cdnet_config_set(cdnet_config* cfg, const char* key, const char* value);
CDNET_API cdnet_status cdnet_config_get(const cdnet_config* cfg, const char* key, char** out);
/* Nested JSON object; absent keys keep their current values. */
CDNET_API cdnet_status cdnet_config_apply_json(cdnet_config* cfg, const char* json_text);
CDNET_API cdnet_status cdnet_config_load(cdnet_config* cfg, const char* path);
CDNET_API cdnet_status cdnet_config_to_json(const cdnet_config* cfg, char** out);
/* Copies the master seed into every section and checks every value. */
CDNET_API cdnet_status cdnet_config_finalize(cdnet_config* cfg);

/* --- data --------------------------------------------------------------- */

CDNET_API cdnet_status cdnet_dataset_generate(const cdnet_config* cfg, cdnet_dataset** out);
CDNET_API cdnet_status cdnet_dataset_save(const cdnet_dataset* ds, const char* path);
CDNET_API cdnet_status cdnet_dataset_load(const char* path, cdnet_dataset** out);
CDNET_API int64_t cdnet_dataset_rows(const cdnet_dataset* ds);
CDNET_API void cdnet_dataset_free(cdnet_dataset* ds);

/* --- models ------------------------------------------------------------- */

/* Freshly initialized model for the configured variant. */
CDNET_API cdnet_status cdnet_model_init(const cdnet_config* cfg, const cdnet_dataset* ds,
                                        cdnet_model** out);
CDNET_API cdnet_status cdnet_pretrain(const cdnet_config* cfg, const cdnet_dataset* ds,
                                      cdnet_history_fn history, void* user, cdnet_model** out);
/* Episodic fine-tuning. With `init` NULL and train.use_pretrained true the
 * model is pre-trained first; with train.use_pretrained false it starts from
 * a fresh initialization and `init` must be NULL. */
CDNET_API cdnet_status cdnet_finetune(const cdnet_config* cfg, const cdnet_dataset* ds,
                                      const cdnet_model* init, cdnet_history_fn history,
                                      void* user, cdnet_model** out);
CDNET_API cdnet_status cdnet_model_save(const cdnet_model* m, const char* dir);
CDNET_API cdnet_status cdnet_model_load(const char* dir, cdnet_model** out);
/* 16 hex digits over config and parameter bytes. */
CDNET_API cdnet_status cdnet_model_hash(const cdnet_model* m, char** out);
/* JSON summary: variant, stage, architecture, J, parameter names and shapes. */
CDNET_API cdnet_status cdnet_model_describe(const cdnet_model* m, char** out);
CDNET_API void cdnet_model_free(cdnet_model* m);

/* --- evaluation --------------------------------------------------------- */

CDNET_API cdnet_status cdnet_evaluate(const cdnet_config* cfg, const cdnet_dataset* ds,
                                      const cdnet_model* m, cdnet_report** out);
CDNET_API double cdnet_report_mean(const cdnet_report* r);
CDNET_API double cdnet_report_ci95(const cdnet_report* r);
CDNET_API int cdnet_report_tasks(const cdnet_report* r);
CDNET_API double cdnet_report_task_accuracy(const cdnet_report* r, int task);
CDNET_API cdnet_status cdnet_report_text(const cdnet_report* r, char** out);
CDNET_API cdnet_status cdnet_report_json(const cdnet_report* r, char** out);
CDNET_API void cdnet_report_free(cdnet_report* r);

/* Variant x shot table over ablate.variants, ablate.shots and ablate.inits.
 * Failed cells are reported as missing rather than failing the table. */
CDNET_API cdnet_status cdnet_ablate(const cdnet_config* cfg, const cdnet_dataset* ds,
                                    char** text_out, char** json_out);
/* Accuracy versus J over sweep.js; J = 0 is the baseline. */
CDNET_API cdnet_status cdnet_sweep_j(const cdnet_config* cfg, const cdnet_dataset* ds,
                                     char** text_out, char** json_out);

/* Central-difference check of the fine-tuning loss gradient on a small
 * problem described by gradcheck.*. `passed` is 1 when every parameter is
 * within gradcheck.tol. */
CDNET_API cdnet_status cdnet_gradcheck(const cdnet_config* cfg, double* max_rel_error,
                                       int* passed, char** json_out);

#ifdef __cplusplus
}
#endif

#endif /* CDNET_CDNET_H */
