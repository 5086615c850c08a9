#ifndef HSE_H
#define HSE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes; 1 to 3 match the exit codes of the `hse` tool.
 */
typedef enum HseStatus {
  HSE_STATUS_OK = 0,
  HSE_STATUS_USAGE = 1,
  HSE_STATUS_DATA = 2,
  HSE_STATUS_NUMERIC = 3,
  HSE_STATUS_NULL_POINTER = 4,
  HSE_STATUS_PANIC = 5,
} HseStatus;

/**
 * Opaque trained model with its evaluation preprocessing.
 */
typedef struct HseClassifier HseClassifier;

/**
 * Opaque category tree.
 */
typedef struct HseTaxonomy HseTaxonomy;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty if none. The
 * pointer stays valid until the next failing call on the same thread.
 */
const char *hse_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *hse_version(void);

/**
 * Loads a taxonomy TSV file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum HseStatus hse_taxonomy_load(const char *path, struct HseTaxonomy **out);

/**
 * Number of levels; 0 for a null handle.
 *
 * # Safety
 * `t` must be null or a live handle from [`hse_taxonomy_load`].
 */
size_t hse_taxonomy_level_count(const struct HseTaxonomy *t);

/**
 * Category count of a 0-based level; 0 if out of range or null.
 *
 * # Safety
 * `t` must be null or a live handle from [`hse_taxonomy_load`].
 */
size_t hse_taxonomy_level_size(const struct HseTaxonomy *t, size_t level);

/**
 * # Safety
 * `t` must be null or a handle from [`hse_taxonomy_load`] not yet freed.
 */
void hse_taxonomy_free(struct HseTaxonomy *t);

/**
 * Loads a checkpoint. `config_path` may be null, in which case
 * `<checkpoint>.cfg` is used when present and defaults otherwise.
 *
 * # Safety
 * Strings must be NUL-terminated, `taxonomy` a live handle and `out`
 * writable.
 */
enum HseStatus hse_classifier_load(const char *config_path,
                                   const struct HseTaxonomy *taxonomy,
                                   const char *checkpoint,
                                   struct HseClassifier **out);

/**
 * Number of levels the model predicts; 0 for a null handle.
 *
 * # Safety
 * `m` must be null or a live handle from [`hse_classifier_load`].
 */
size_t hse_classifier_level_count(const struct HseClassifier *m);

/**
 * Fused scores of every level for one interleaved 8-bit RGB image of
 * `width × height` pixels. Scores are written level after level into
 * `scores`, which must hold the sum of all level sizes; `predictions`
 * (one entry per level) receives the argmax of each level.
 *
 * # Safety
 * `rgb` must point to `3·width·height` bytes, `scores` to `scores_len`
 * doubles and `predictions` to `predictions_len` entries.
 */
enum HseStatus hse_classifier_classify(const struct HseClassifier *m,
                                       const uint8_t *rgb,
                                       size_t width,
                                       size_t height,
                                       double *scores,
                                       size_t scores_len,
                                       size_t *predictions,
                                       size_t predictions_len);

/**
 * # Safety
 * `m` must be null or a handle from [`hse_classifier_load`] not yet freed.
 */
void hse_classifier_free(struct HseClassifier *m);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HSE_H */
