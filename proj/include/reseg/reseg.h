/* SPDX-License-Identifier: Apache-2.0 */
/*
 * reseg.h - C interface to the reseg segmentation library.
 *
 * Every function returns a reseg_status. On failure a message describing the
 * error is available from reseg_last_error() until the next call on the same
 * thread. Handles are opaque; free them with the matching *_free function.
 *
 * Option structs must be initialised with their *_init function before
 * fields are set, so that new fields keep their defaults.
 */
#ifndef RESEG_RESEG_H
#define RESEG_RESEG_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#  if defined(RESEG_BUILDING_LIBRARY)
#    define RESEG_API __declspec(dllexport)
#  else
#    define RESEG_API __declspec(dllimport)
#  endif
#else
#  define RESEG_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum reseg_status {
  RESEG_OK = 0,
  RESEG_ERR_USAGE = 1,
  RESEG_ERR_CONFIG = 2,
  RESEG_ERR_DIMENSION = 3,
  RESEG_ERR_NUMERIC = 4,
  RESEG_ERR_FORMAT = 5,
  RESEG_ERR_VERSION = 6,
  RESEG_ERR_TRUNCATED = 7,
  RESEG_ERR_SHAPE = 8,
  RESEG_ERR_IO = 9,
  RESEG_ERR_UNDEFINED_METRIC = 10,
  RESEG_ERR_DETERMINISM = 11,
  RESEG_ERR_REFUSED = 12,
  /* The gradient check ran to completion and found a mismatch. */
  RESEG_ERR_CHECK_FAILED = 13,
  RESEG_ERR_INTERNAL = 99
} reseg_status;

typedef struct reseg_model reseg_model;

/* Receives one line of human-readable output, without trailing newline. */
typedef void (*reseg_log_fn)(const char* line, void* user);

RESEG_API const char* reseg_version(void);
RESEG_API const char* reseg_status_name(reseg_status status);
RESEG_API const char* reseg_last_error(void);

/* ---- models ---------------------------------------------------------- */

/* Builds a freshly initialised model from a JSON model configuration. */
RESEG_API reseg_status reseg_model_build(const char* config_json, reseg_model** out);
RESEG_API reseg_status reseg_model_load(const char* path, reseg_model** out);
RESEG_API reseg_status reseg_model_save(const reseg_model* model, const char* path);
RESEG_API void reseg_model_free(reseg_model* model);

RESEG_API reseg_status reseg_model_input_shape(const reseg_model* model, size_t* height, size_t* width,
                                               size_t* channels);
RESEG_API reseg_status reseg_model_classes(const reseg_model* model, size_t* classes);
RESEG_API reseg_status reseg_model_parameter_count(const reseg_model* model, size_t* count);

/* Copies the model configuration as JSON into buf (NUL-terminated). *needed
 * receives the required size including the terminator; pass buf = NULL to
 * query it. */
RESEG_API reseg_status reseg_model_config_json(const reseg_model* model, char* buf, size_t buf_len, size_t* needed);

/* image: height x width x channels floats in [0, 1], row-major, channels
 * innermost. probs receives height x width x classes probabilities. */
RESEG_API reseg_status reseg_model_forward(const reseg_model* model, const float* image, size_t height, size_t width,
                                           size_t channels, float* probs, size_t probs_len);

/* ---- commands -------------------------------------------------------- */

typedef struct reseg_synth_options {
  const char* out_dir;
  size_t count;
  size_t height;
  size_t width;
  size_t classes;
  uint64_t seed;
  double min_shape_fraction;
  double max_shape_fraction;
  int force; /* overwrite a non-empty out_dir */
  reseg_log_fn log;
  void* log_user;
} reseg_synth_options;

RESEG_API void reseg_synth_options_init(reseg_synth_options* options);
RESEG_API reseg_status reseg_synth(const reseg_synth_options* options);

typedef struct reseg_train_options {
  const char* config_path; /* JSON run configuration, required */
  /* Overrides; NULL or negative means "take the value from the config". */
  const char* out_dir;
  const char* manifest;
  const char* balance; /* "none" or "median-frequency" */
  long long epochs;
  long long batch_size;
  long long seed;
  long long threads;
  int resume; /* continue from out_dir/last.model */
  reseg_log_fn log;
  void* log_user;
} reseg_train_options;

typedef struct reseg_train_summary {
  uint64_t epochs_completed;
  double final_loss;
  double best_score;
  int aborted;
} reseg_train_summary;

RESEG_API void reseg_train_options_init(reseg_train_options* options);
/* summary may be NULL. A numeric failure mid-run returns RESEG_ERR_NUMERIC
 * and still fills the summary. */
RESEG_API reseg_status reseg_train(const reseg_train_options* options, reseg_train_summary* summary);

typedef struct reseg_eval_options {
  const char* model_path;
  const char* manifest;
  const char* split; /* "train", "valid" or "test"; NULL means test */
  const char* csv_out; /* optional CSV destination */
  reseg_log_fn log;
  void* log_user;
} reseg_eval_options;

typedef struct reseg_eval_summary {
  double global_accuracy;
  double avg_class_accuracy;
  double avg_iou;
  uint64_t pixels;
} reseg_eval_summary;

RESEG_API void reseg_eval_options_init(reseg_eval_options* options);
RESEG_API reseg_status reseg_eval(const reseg_eval_options* options, reseg_eval_summary* summary);

typedef struct reseg_predict_options {
  const char* model_path;
  const char* image_path;
  const char* out_path; /* predicted mask, written as PGM */
  int probs;            /* also write <out stem>_prob<k>.pgm per class */
  reseg_log_fn log;
  void* log_user;
} reseg_predict_options;

RESEG_API void reseg_predict_options_init(reseg_predict_options* options);
RESEG_API reseg_status reseg_predict(const reseg_predict_options* options);

typedef struct reseg_gradcheck_options {
  const char* config_path; /* run or model configuration; NULL = tiny profile */
  double tolerance;
  double epsilon;
  uint64_t seed;
  size_t max_coordinates;
  int frozen_frontend;
  reseg_log_fn log;
  void* log_user;
} reseg_gradcheck_options;

typedef struct reseg_gradcheck_summary {
  int passed;
  double worst_error;
  size_t parameters;
} reseg_gradcheck_summary;

RESEG_API void reseg_gradcheck_options_init(reseg_gradcheck_options* options);
/* Returns RESEG_ERR_CHECK_FAILED when any tensor exceeds the tolerance. */
RESEG_API reseg_status reseg_gradcheck(const reseg_gradcheck_options* options, reseg_gradcheck_summary* summary);

#ifdef __cplusplus
}
#endif

#endif /* RESEG_RESEG_H */
