#ifndef IDEA_H
#define IDEA_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum IdeaStatus {
  IDEA_STATUS_OK = 0,
  IDEA_STATUS_NULL_POINTER = 1,
  IDEA_STATUS_INVALID_ARGUMENT = 2,
  IDEA_STATUS_MISSING_FILE = 3,
  IDEA_STATUS_FORMAT = 4,
  IDEA_STATUS_CHECKPOINT = 5,
  IDEA_STATUS_UNKNOWN_SCENARIO = 6,
  IDEA_STATUS_BUFFER_SIZE = 7,
  IDEA_STATUS_INTERNAL = 8,
} IdeaStatus;

typedef enum IdeaSplit {
  IDEA_SPLIT_TRAIN = 0,
  IDEA_SPLIT_VAL = 1,
  IDEA_SPLIT_TEST = 2,
} IdeaSplit;

/**
 * A loaded dataset with its split.
 */
typedef struct IdeaDataset IdeaDataset;

/**
 * A trained model restored from a checkpoint directory.
 */
typedef struct IdeaModel IdeaModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. The pointer is
 * valid until the next failing call on the same thread.
 */
const char *idea_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *idea_version(void);

/**
 * Loads a dataset directory. A missing split file is drawn from `seed`.
 *
 * # Safety
 * `dir` must be a NUL-terminated string and `out` a writable pointer.
 */
enum IdeaStatus idea_dataset_load(const char *dir, uint64_t seed, struct IdeaDataset **out);

/**
 * # Safety
 * `data` must come from [`idea_dataset_load`] and not be freed twice. NULL is ignored.
 */
void idea_dataset_free(struct IdeaDataset *data);

/**
 * Number of nodes, or 0 for NULL.
 *
 * # Safety
 * `data` must be NULL or a live dataset handle.
 */
size_t idea_dataset_num_nodes(const struct IdeaDataset *data);

/**
 * Number of classes, or 0 for NULL.
 *
 * # Safety
 * `data` must be NULL or a live dataset handle.
 */
size_t idea_dataset_num_classes(const struct IdeaDataset *data);

/**
 * Restores a model from a checkpoint directory.
 *
 * # Safety
 * `dir` must be a NUL-terminated string and `out` a writable pointer.
 */
enum IdeaStatus idea_model_load(const char *dir, struct IdeaModel **out);

/**
 * # Safety
 * `model` must come from [`idea_model_load`] and not be freed twice. NULL is ignored.
 */
void idea_model_free(struct IdeaModel *model);

/**
 * Latent width of the model, or 0 for NULL.
 *
 * # Safety
 * `model` must be NULL or a live model handle.
 */
size_t idea_model_latent_dim(const struct IdeaModel *model);

/**
 * Class probabilities for every node, row-major into `out` (`len` must be
 * nodes × classes).
 *
 * # Safety
 * Handles must be live; `out` must point to `len` writable doubles.
 */
enum IdeaStatus idea_model_predict(const struct IdeaModel *model,
                                   const struct IdeaDataset *data,
                                   double *out,
                                   size_t len);

/**
 * Latent means for every node, row-major into `out` (`len` must be
 * nodes × latent dim).
 *
 * # Safety
 * Handles must be live; `out` must point to `len` writable doubles.
 */
enum IdeaStatus idea_model_embed(const struct IdeaModel *model,
                                 const struct IdeaDataset *data,
                                 double *out,
                                 size_t len);

/**
 * Accuracy on the labeled nodes of one split.
 *
 * # Safety
 * Handles must be live; `out` must be writable.
 */
enum IdeaStatus idea_model_accuracy(const struct IdeaModel *model,
                                    const struct IdeaDataset *data,
                                    enum IdeaSplit split,
                                    double *out);

/**
 * Accuracy under one named scenario (e.g. `clean`, `feature_pgd`,
 * `random_poison:0.2`). Evasion scenarios attack the targets drawn from
 * `seed` with a fraction of 0.2; poisoning scenarios retrain from the
 * checkpoint's configuration.
 *
 * # Safety
 * Handles must be live; `scenario` NUL-terminated; `out` writable.
 */
enum IdeaStatus idea_evaluate(const struct IdeaModel *model,
                              const struct IdeaDataset *data,
                              const char *scenario,
                              uint64_t seed,
                              double *out);

/**
 * Pearson correlation of two length-`n` vectors.
 *
 * # Safety
 * `x` and `y` must point to `n` readable doubles; `out` must be writable.
 */
enum IdeaStatus idea_pearson(const double *x, const double *y, size_t n, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* IDEA_H */
