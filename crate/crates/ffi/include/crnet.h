#ifndef CRNET_H
#define CRNET_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes of every fallible call.
 */
typedef enum CrnetStatus {
  CRNET_STATUS_OK = 0,
  CRNET_STATUS_NULL_POINTER = 1,
  CRNET_STATUS_INVALID_ARGUMENT = 2,
  CRNET_STATUS_IO = 3,
  CRNET_STATUS_PARSE = 4,
  CRNET_STATUS_NON_FINITE = 5,
  CRNET_STATUS_ORACLE_SCALE = 6,
  CRNET_STATUS_BUFFER_TOO_SMALL = 7,
  CRNET_STATUS_INTERNAL = 8,
} CrnetStatus;

/**
 * Opaque trained detector.
 */
typedef struct CrnetModel CrnetModel;

/**
 * Opaque weighted scattering point set.
 */
typedef struct CrnetScatterSet CrnetScatterSet;

/**
 * One detection in image pixel coordinates.
 */
typedef struct CrnetDetection {
  double x;
  double y;
  double w;
  double h;
  double score;
} CrnetDetection;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or null. Owned by the library.
 */
const char *crnet_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *crnet_version(void);

/**
 * Builds a set from `n` points (`xy` holds `2n` coordinates) and intensities.
 *
 * # Safety
 * `xy` must point to `2n` doubles, `intensities` to `n` doubles, `out` to a
 * writable handle slot.
 */
enum CrnetStatus crnet_scatter_set_new(const double *xy,
                                       const double *intensities,
                                       uintptr_t n,
                                       struct CrnetScatterSet **out);

/**
 * Extracts the scattering points of a row-major `width × height` intensity patch.
 *
 * # Safety
 * `pixels` must point to `width * height` doubles and `out` to a writable slot.
 */
enum CrnetStatus crnet_scatter_set_from_patch(const double *pixels,
                                              uintptr_t width,
                                              uintptr_t height,
                                              struct CrnetScatterSet **out);

/**
 * Number of points in the set (0 for null).
 *
 * # Safety
 * `set` must be null or a live handle.
 */
uintptr_t crnet_scatter_set_len(const struct CrnetScatterSet *set);

/**
 * # Safety
 * `set` must be null or a handle not yet freed.
 */
void crnet_scatter_set_free(struct CrnetScatterSet *set);

/**
 * Scattering-structure distance: exact EMD at oracle scale, Sinkhorn beyond.
 *
 * # Safety
 * `a` and `b` must be live handles and `out` writable.
 */
enum CrnetStatus crnet_scatter_distance(const struct CrnetScatterSet *a,
                                        const struct CrnetScatterSet *b,
                                        double *out);

/**
 * Exact EMD; fails with `OracleScale` above the exact solver limit.
 *
 * # Safety
 * `a` and `b` must be live handles and `out` writable.
 */
enum CrnetStatus crnet_emd_exact(const struct CrnetScatterSet *a,
                                 const struct CrnetScatterSet *b,
                                 double *out);

/**
 * Dirichlet opinion of `classes` evidence values: beliefs into `belief`
 * (`classes` doubles) and the uncertainty mass into `uncertainty`.
 *
 * # Safety
 * `evidence` and `belief` must hold `classes` doubles; `uncertainty` writable.
 */
enum CrnetStatus crnet_dirichlet_opinion(const double *evidence,
                                         uintptr_t classes,
                                         double *belief,
                                         double *uncertainty);

/**
 * Loads a `checkpoint.json` written by `crnet train`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable slot.
 */
enum CrnetStatus crnet_model_load(const char *path, struct CrnetModel **out);

/**
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void crnet_model_free(struct CrnetModel *model);

/**
 * Detects targets in a row-major intensity image. Writes up to `capacity`
 * detections (highest score first) and always sets `count` to the total;
 * returns `BufferTooSmall` when `capacity < count`.
 *
 * # Safety
 * `pixels` must hold `width * height` doubles, `dets` `capacity` entries
 * (may be null when `capacity` is 0), `count` writable.
 */
enum CrnetStatus crnet_model_detect(const struct CrnetModel *model,
                                    const double *pixels,
                                    uintptr_t width,
                                    uintptr_t height,
                                    struct CrnetDetection *dets,
                                    uintptr_t capacity,
                                    uintptr_t *count);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CRNET_H */
