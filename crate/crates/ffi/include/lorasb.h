#ifndef LORASB_H
#define LORASB_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum LorasbFactor {
  LORASB_FACTOR_B = 0,
  LORASB_FACTOR_R = 1,
  LORASB_FACTOR_A = 2,
} LorasbFactor;

typedef enum LorasbMethod {
  LORASB_METHOD_FULL_FT = 0,
  LORASB_METHOD_LORA = 1,
  LORASB_METHOD_LORA_XS = 2,
  LORASB_METHOD_LORA_SB = 3,
} LorasbMethod;

/**
 * Result of every call.
 */
typedef enum LorasbStatus {
  LORASB_STATUS_OK = 0,
  LORASB_STATUS_NULL_POINTER = 1,
  /**
   * Shapes, ranks, scales or enum values out of range.
   */
  LORASB_STATUS_INVALID_ARGUMENT = 2,
  LORASB_STATUS_SINGULAR = 3,
  LORASB_STATUS_NO_CONVERGENCE = 4,
  LORASB_STATUS_NON_FINITE = 5,
  /**
   * The operation does not apply to this adapter (e.g. a LoRA handle asked for R).
   */
  LORASB_STATUS_WRONG_METHOD = 6,
  /**
   * A Rust panic was caught at the boundary; the library state is still usable.
   */
  LORASB_STATUS_INTERNAL = 7,
} LorasbStatus;

/**
 * Opaque adapter state `W0 + s·B·R·A` (or the LoRA / full fine-tuning equivalents).
 */
typedef struct LorasbAdapter LorasbAdapter;

/**
 * Opaque dense matrix.
 */
typedef struct LorasbMatrix LorasbMatrix;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *lorasb_version(void);

/**
 * Message for the most recent failure on this thread, or NULL if none.
 * Valid until the next failing call on the same thread.
 */
const char *lorasb_last_error(void);

/**
 * New `rows × cols` matrix copied from `data` (row-major, `rows·cols` values),
 * or all zeros when `data` is NULL.
 *
 * # Safety
 * `data` must be NULL or point to `rows·cols` readable doubles; `out` must be writable.
 */
enum LorasbStatus lorasb_matrix_new(size_t rows,
                                    size_t cols,
                                    const double *data,
                                    struct LorasbMatrix **out);

/**
 * # Safety
 * `m` must be NULL or a handle from this library not yet freed.
 */
void lorasb_matrix_free(struct LorasbMatrix *m);

/**
 * # Safety
 * `m` must be a live handle; `rows` and `cols` must be writable.
 */
enum LorasbStatus lorasb_matrix_shape(const struct LorasbMatrix *m, size_t *rows, size_t *cols);

/**
 * Copies the row-major entries into `buf`, which holds `len` doubles.
 *
 * # Safety
 * `m` must be a live handle; `buf` must point to `len` writable doubles.
 */
enum LorasbStatus lorasb_matrix_read(const struct LorasbMatrix *m, double *buf, size_t len);

/**
 * Rank-`r` truncated SVD `m ≈ U·diag(s)·Vt`. `s` receives `r` values in
 * descending order; `u` is `rows × r`, `vt` is `r × cols`.
 *
 * # Safety
 * `m` must be a live handle; `s` must hold `r` doubles; `u` and `vt` must be writable.
 */
enum LorasbStatus lorasb_truncated_svd(const struct LorasbMatrix *m,
                                       size_t r,
                                       struct LorasbMatrix **u,
                                       double *s,
                                       struct LorasbMatrix **vt);

/**
 * Adapter of kind `kind` (a [`LorasbMethod`]) on `w0` whose initial update `s·B·R·A` is the best rank-`rank`
 * approximation of `delta` (`B`, `A` orthonormal, `R` diagonal). LoRA absorbs
 * `R` into `B`; full fine-tuning starts from a zero update.
 *
 * # Safety
 * `w0` and `delta` must be live handles; `out` must be writable.
 */
enum LorasbStatus lorasb_adapter_init(uint32_t kind,
                                      const struct LorasbMatrix *w0,
                                      const struct LorasbMatrix *delta,
                                      size_t rank,
                                      double scale,
                                      struct LorasbAdapter **out);

/**
 * Frozen-basis adapter `w0 + s·B·R·A` from explicit factors.
 *
 * # Safety
 * All matrix arguments must be live handles; `out` must be writable.
 */
enum LorasbStatus lorasb_adapter_from_factors(uint32_t kind,
                                              const struct LorasbMatrix *w0,
                                              const struct LorasbMatrix *b,
                                              const struct LorasbMatrix *r,
                                              const struct LorasbMatrix *a,
                                              double scale,
                                              struct LorasbAdapter **out);

/**
 * # Safety
 * `ad` must be NULL or a handle from this library not yet freed.
 */
void lorasb_adapter_free(struct LorasbAdapter *ad);

/**
 * Copy of the factor selected by `which` (a [`LorasbFactor`]). LoRA handles have no `R`; full fine-tuning has none of them.
 *
 * # Safety
 * `ad` must be a live handle; `out` must be writable.
 */
enum LorasbStatus lorasb_adapter_factor(const struct LorasbAdapter *ad,
                                        uint32_t which,
                                        struct LorasbMatrix **out);

/**
 * Replaces the trainable `R` of a frozen-basis adapter.
 *
 * # Safety
 * `ad` and `r` must be live handles.
 */
enum LorasbStatus lorasb_adapter_set_r(struct LorasbAdapter *ad, const struct LorasbMatrix *r);

/**
 * `W0 + ΔW`.
 *
 * # Safety
 * `ad` must be a live handle; `out` must be writable.
 */
enum LorasbStatus lorasb_adapter_effective_weight(const struct LorasbAdapter *ad,
                                                  struct LorasbMatrix **out);

/**
 * Raw R gradient `s·Bᵀ·g·Aᵀ` from the full-weight gradient `g`.
 *
 * # Safety
 * `ad` and `g` must be live handles; `out` must be writable.
 */
enum LorasbStatus lorasb_xs_gradient(const struct LorasbAdapter *ad,
                                     const struct LorasbMatrix *g,
                                     struct LorasbMatrix **out);

/**
 * Corrected R gradient `(1/s²)·(BᵀB)⁻¹·g_R·(AAᵀ)⁻¹`, whose equivalent
 * full-weight gradient is the closest one to `g` the basis can express.
 *
 * # Safety
 * `ad` and `g_r` must be live handles; `out` must be writable.
 */
enum LorasbStatus lorasb_optimal_correction(const struct LorasbAdapter *ad,
                                            const struct LorasbMatrix *g_r,
                                            struct LorasbMatrix **out);

/**
 * Full-weight gradient `s·B·g_R·A` equivalent to an R gradient.
 *
 * # Safety
 * `ad` and `g_r` must be live handles; `out` must be writable.
 */
enum LorasbStatus lorasb_equivalent_gradient(const struct LorasbAdapter *ad,
                                             const struct LorasbMatrix *g_r,
                                             struct LorasbMatrix **out);

/**
 * Trainable parameters of `kind` (a [`LorasbMethod`]) at `rank` summed over `count` weight shapes,
 * given as `(rows, cols)` pairs in `shapes[2·count]`.
 *
 * # Safety
 * `shapes` must point to `2·count` readable values; `out` must be writable.
 */
enum LorasbStatus lorasb_param_count(uint32_t kind,
                                     const size_t *shapes,
                                     size_t count,
                                     size_t rank,
                                     uint64_t *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LORASB_H */
