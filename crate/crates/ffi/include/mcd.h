#ifndef MCD_H
#define MCD_H

/* Generated by cbindgen from crates/ffi/src. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define MCD_SPLIT_TRAIN 0

#define MCD_SPLIT_VAL 1

#define MCD_SPLIT_TEST 2

typedef enum McdStatus {
  MCD_STATUS_OK = 0,
  MCD_STATUS_NULL_ARGUMENT = 1,
  MCD_STATUS_INVALID_UTF8 = 2,
  MCD_STATUS_INVALID_ARGUMENT = 3,
  MCD_STATUS_IO = 4,
  MCD_STATUS_FORMAT = 5,
  MCD_STATUS_CONFIG = 6,
  MCD_STATUS_SHAPE = 7,
  MCD_STATUS_EMPTY_SPLIT = 8,
  MCD_STATUS_OUT_OF_RANGE = 9,
  MCD_STATUS_NUMERICAL_FAILURE = 10,
  MCD_STATUS_BUFFER_TOO_SMALL = 11,
  MCD_STATUS_PANIC = 12,
} McdStatus;

/**
 * A loaded, validated dataset directory.
 */
typedef struct McdDataset McdDataset;

/**
 * A model together with the run configuration that produced it.
 */
typedef struct McdModel McdModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or NULL. Owned by the
 * library; valid until the next failing call on the same thread.
 */
const char *mcd_last_error(void);

/**
 * Static name of a status code, e.g. `"io"`; `"unknown"` for codes this
 * library never returns. Takes a plain integer so any value is safe.
 */
const char *mcd_status_name(uint32_t code);

/**
 * Releases a string returned by this library. NULL is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void mcd_string_free(char *s);

/**
 * Writes a planted-clue dataset to `out_dir`. `spec_json` holds any subset
 * of the generator fields (`n_samples`, `dim`, `seed`, ...) or is NULL for
 * the defaults.
 *
 * # Safety
 * String arguments must be NUL-terminated or NULL where allowed.
 */
enum McdStatus mcd_generate_synthetic(const char *out_dir, const char *spec_json);

/**
 * Loads and validates a dataset directory.
 *
 * # Safety
 * `dir` must be NUL-terminated; `out` must be writable.
 */
enum McdStatus mcd_dataset_open(const char *dir, struct McdDataset **out);

/**
 * Number of samples in one split (`MCD_SPLIT_*`).
 *
 * # Safety
 * `ds` must be a live handle; `out` must be writable.
 */
enum McdStatus mcd_dataset_split_len(const struct McdDataset *ds, uint32_t split_code, size_t *out);

/**
 * # Safety
 * `ds` must be NULL or a handle from [`mcd_dataset_open`] not yet freed.
 */
void mcd_dataset_free(struct McdDataset *ds);

/**
 * Trains on the dataset's train split. `config_toml` is a run
 * configuration or NULL for defaults; with a non-NULL `out_dir` the
 * checkpoints and loss trace are written there. Returns the last-epoch model.
 *
 * # Safety
 * `ds` must be a live handle, strings NUL-terminated or NULL, `out` writable.
 */
enum McdStatus mcd_train(const struct McdDataset *ds,
                         const char *config_toml,
                         const char *out_dir,
                         struct McdModel **out);

/**
 * Loads a checkpoint archive.
 *
 * # Safety
 * `path` must be NUL-terminated; `out` must be writable.
 */
enum McdStatus mcd_model_load(const char *path, struct McdModel **out);

/**
 * Number of answer classes, i.e. the probability buffer length needed by
 * [`mcd_model_predict`].
 *
 * # Safety
 * `model` must be a live handle; `out` must be writable.
 */
enum McdStatus mcd_model_num_answers(const struct McdModel *model, size_t *out);

/**
 * Predicts the `position`-th sample of a split. Writes the answer id and,
 * when `probs` is non-NULL, the answer distribution into `probs[0..probs_len]`
 * (`probs_len` must be at least [`mcd_model_num_answers`]).
 *
 * # Safety
 * Handles must be live; `answer` writable; `probs` NULL or valid for
 * `probs_len` doubles.
 */
enum McdStatus mcd_model_predict(const struct McdModel *model,
                                 const struct McdDataset *ds,
                                 uint32_t split_code,
                                 size_t position,
                                 size_t *answer,
                                 double *probs,
                                 size_t probs_len);

/**
 * Evaluation report for one split as a JSON string; free with
 * [`mcd_string_free`].
 *
 * # Safety
 * Handles must be live; `json_out` writable.
 */
enum McdStatus mcd_model_evaluate_json(const struct McdModel *model,
                                       const struct McdDataset *ds,
                                       uint32_t split_code,
                                       char **json_out);

/**
 * # Safety
 * `model` must be NULL or a handle from this library not yet freed.
 */
void mcd_model_free(struct McdModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MCD_H */
