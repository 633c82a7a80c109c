#ifndef FISHERLORA_H
#define FISHERLORA_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum FlStatus {
  FL_STATUS_OK = 0,
  FL_STATUS_NULL_POINTER = 1,
  FL_STATUS_INVALID_ARGUMENT = 2,
  FL_STATUS_SHAPE_MISMATCH = 3,
  FL_STATUS_NON_FINITE = 4,
  FL_STATUS_RANK_TOO_LARGE = 5,
  FL_STATUS_NUMERICAL = 6,
  FL_STATUS_IO = 7,
  FL_STATUS_CHECKPOINT = 8,
  FL_STATUS_BUFFER_TOO_SMALL = 9,
  FL_STATUS_PANIC = 10,
} FlStatus;

typedef enum FlCriterion {
  FL_CRITERION_MIN = 0,
  FL_CRITERION_MAX = 1,
  FL_CRITERION_RANDOM = 2,
} FlCriterion;

/**
 * Which factor [`fl_lora_factor`] returns.
 */
typedef enum FlFactor {
  FL_FACTOR_A = 0,
  FL_FACTOR_B = 1,
  FL_FACTOR_W_RES = 2,
} FlFactor;

/**
 * Opaque Fisher factor accumulator for one layer.
 */
typedef struct FlFisherFactors FlFisherFactors;

/**
 * Opaque LoRA initialization for one layer.
 */
typedef struct FlLoraInit FlLoraInit;

/**
 * Opaque dense matrix.
 */
typedef struct FlMatrix FlMatrix;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message into `buf` as a
 * NUL-terminated string, truncating if needed. Returns the full message
 * length in bytes, excluding the terminator.
 *
 * # Safety
 * `buf` must be null or point to at least `len` writable bytes.
 */
uintptr_t fl_last_error_message(char *buf, uintptr_t len);

/**
 * Library version as a static NUL-terminated string.
 */
const char *fl_version(void);

/**
 * Creates a `rows × cols` matrix from a row-major buffer of `rows·cols`
 * values.
 *
 * # Safety
 * `data` must point to `rows·cols` readable doubles; `out` must be writable.
 */
enum FlStatus fl_matrix_new(uintptr_t rows,
                            uintptr_t cols,
                            const double *data,
                            struct FlMatrix **out);

/**
 * # Safety
 * `m` must be null or a handle from this library not yet freed.
 */
void fl_matrix_free(struct FlMatrix *m);

/**
 * Writes the row and column counts.
 *
 * # Safety
 * `m` must be a live handle; `rows` and `cols` must be writable.
 */
enum FlStatus fl_matrix_shape(const struct FlMatrix *m, uintptr_t *rows, uintptr_t *cols);

/**
 * Copies the row-major contents into `out`, which must hold `len ≥
 * rows·cols` doubles.
 *
 * # Safety
 * `m` must be a live handle; `out` must point to `len` writable doubles.
 */
enum FlStatus fl_matrix_copy(const struct FlMatrix *m, double *out, uintptr_t len);

/**
 * Empty accumulator for a layer with `n` inputs and `m` outputs.
 *
 * # Safety
 * `out` must be writable.
 */
enum FlStatus fl_factors_new(uintptr_t layer_id,
                             uintptr_t n,
                             uintptr_t m,
                             struct FlFisherFactors **out);

/**
 * # Safety
 * `f` must be null or a live handle.
 */
void fl_factors_free(struct FlFisherFactors *f);

/**
 * Adds one tap: inputs `x` (`n × l`) and output gradients `g` (`m × l`).
 *
 * # Safety
 * All handles must be live.
 */
enum FlStatus fl_factors_accumulate(struct FlFisherFactors *f,
                                    const struct FlMatrix *x,
                                    const struct FlMatrix *g);

/**
 * Finalized `S_X` (`n × n`) and `S_Y` (`m × m`) as new matrix handles.
 *
 * # Safety
 * `f` must be live; `s_x` and `s_y` must be writable.
 */
enum FlStatus fl_factors_finalize(const struct FlFisherFactors *f,
                                  struct FlMatrix **s_x,
                                  struct FlMatrix **s_y);

/**
 * Factored Fisher Energy `(vᵀS_Xv)(uᵀS_Yu)` for unit `u` (length `m`) and
 * `v` (length `n`).
 *
 * # Safety
 * Handles must be live; `u`, `v` must hold `m`, `n` doubles; `out` writable.
 */
enum FlStatus fl_fisher_energy(const struct FlMatrix *s_x,
                               const struct FlMatrix *s_y,
                               const double *u,
                               uintptr_t m,
                               const double *v,
                               uintptr_t n,
                               double *out);

/**
 * Surrogate-basis initialization of one layer with Fisher-Energy scaling.
 *
 * # Safety
 * Handles must be live; `out` must be writable.
 */
enum FlStatus fl_lora_init(const struct FlMatrix *w0,
                           const struct FlMatrix *s_x,
                           const struct FlMatrix *s_y,
                           uintptr_t layer_id,
                           uintptr_t rank,
                           double alpha,
                           enum FlCriterion criterion,
                           uint64_t rng_seed,
                           struct FlLoraInit **out);

/**
 * # Safety
 * `init` must be null or a live handle.
 */
void fl_lora_free(struct FlLoraInit *init);

/**
 * Adapter rank, or 0 for a null handle.
 *
 * # Safety
 * `init` must be null or a live handle.
 */
uintptr_t fl_lora_rank(const struct FlLoraInit *init);

/**
 * Scale applied to `B·A`, or NaN for a null handle.
 *
 * # Safety
 * `init` must be null or a live handle.
 */
double fl_lora_scale(const struct FlLoraInit *init);

/**
 * Copies `A` (`r × n`), `B` (`m × r`) or `W_res` (`m × n`) into a new handle.
 *
 * # Safety
 * `init` must be live; `out` writable.
 */
enum FlStatus fl_lora_factor(const struct FlLoraInit *init,
                             enum FlFactor which,
                             struct FlMatrix **out);

/**
 * Copies the `rank` selected candidate indices into `out`.
 *
 * # Safety
 * `init` must be live; `out` must point to `len` writable values.
 */
enum FlStatus fl_lora_indices(const struct FlLoraInit *init, uintptr_t *out, uintptr_t len);

/**
 * Writes the initialization as a FILT checkpoint.
 *
 * # Safety
 * `init` must be live; `path` a NUL-terminated UTF-8 string.
 */
enum FlStatus fl_lora_save(const struct FlLoraInit *init, const char *path);

/**
 * Reads a FILT checkpoint written by [`fl_lora_save`] or the CLI.
 *
 * # Safety
 * `path` must be a NUL-terminated UTF-8 string; `out` writable.
 */
enum FlStatus fl_lora_load(const char *path, struct FlLoraInit **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FISHERLORA_H */
